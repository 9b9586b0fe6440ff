"""Power-domain interference graph estimation and IGE-aware scheduling for full-duplex mmWave backhaul."""

__version__ = "0.1.0"
