"""CP-OFDM sample synthesis, receiver superposition and block power measurement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import OFDM_SYMBOLS_PER_SLOT


class BadSymbolCount(ValueError):
    pass


class StreamTooShort(ValueError):
    pass


class EmptyBlock(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FrameConfig:
    subcarriers: int = 1024
    cp_len: int = 72
    symbols_per_slot: int = OFDM_SYMBOLS_PER_SLOT
    slots_per_block: int = 1
    num_blocks: int = 1
    to_guard: int = 0  # samples dropped at the start of every block window

    def __post_init__(self):
        if self.to_guard >= self.block_samples:
            raise ValueError("guard swallows the whole block")

    @property
    def symbol_samples(self) -> int:
        return self.subcarriers + self.cp_len

    @property
    def symbols_per_block(self) -> int:
        return self.symbols_per_slot * self.slots_per_block

    @property
    def block_samples(self) -> int:
        return self.symbols_per_block * self.symbol_samples

    def block_windows(self):
        """(start, stop) sample ranges the receiver averages over, one per block."""
        L = self.block_samples
        return [(i * L + self.to_guard, (i + 1) * L) for i in range(self.num_blocks)]


@dataclass(frozen=True)
class Constellation:
    order: int
    points: np.ndarray = field(repr=False)

    @property
    def sigma2(self) -> float:
        """Variance of the in-phase (= quadrature) component."""
        return float(np.mean(self.points.real ** 2))

    @property
    def mean_power(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))

    @property
    def i_max(self) -> float:
        return float(np.max(self.points.real))

    @property
    def fourth_moment(self) -> float:
        return float(np.mean(np.abs(self.points) ** 4))

    @property
    def constant_modulus(self) -> bool:
        mag = np.abs(self.points)
        return bool(np.ptp(mag) <= 1e-12 * mag.max())

    def draw(self, rng, shape):
        return self.points[rng.integers(0, self.order, size=shape)]


def qam(order: int, unit_power: bool = True) -> Constellation:
    """Square M-QAM on odd-integer levels, optionally scaled to unit mean power."""
    side = int(round(np.sqrt(order)))
    if side * side != order or side < 2:
        raise ValueError(f"{order} is not a square QAM order")
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    if unit_power:
        pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    return Constellation(order=order, points=pts)


def modulate(symbols, subcarriers: int, cp_len: int, power_scale: float = 1.0, ref_power: float = 1.0):
    """IDFT each row of ``symbols`` (one OFDM symbol per row) and prepend the CP.

    ``power_scale`` is the commanded power; amplitudes are multiplied by
    sqrt(power_scale / ref_power) so the expected per-sample power equals it
    when the symbols have mean power ``ref_power``.
    """
    X = np.atleast_2d(np.asarray(symbols))
    if X.shape[-1] != subcarriers:
        raise BadSymbolCount(f"expected {subcarriers} symbols per OFDM symbol, got {X.shape[-1]}")
    x = np.fft.ifft(X, axis=-1) * np.sqrt(subcarriers)
    if cp_len:
        x = np.concatenate([x[:, subcarriers - cp_len:], x], axis=-1)
    return (x * np.sqrt(power_scale / ref_power)).ravel()


def link_streams(P, frame: FrameConfig, qam_orders, seed):
    """Sample stream per link over the whole period.

    ``P`` is blocks x links (mW, 0 when idle). Symbols for (link, block) come
    from their own RNG stream so any subset can be regenerated independently.
    """
    P = np.asarray(P, dtype=float)
    nb, nl = P.shape
    L = frame.block_samples
    out = np.zeros((nl, nb * L), dtype=complex)
    consts = {q: qam(int(q)) for q in set(int(q) for q in qam_orders)}
    for j in range(nl):
        c = consts[int(qam_orders[j])]
        for i in range(nb):
            if P[i, j] <= 0:
                continue
            rng = np.random.default_rng([seed, 1, j, i])
            X = c.draw(rng, (frame.symbols_per_block, frame.subcarriers))
            out[j, i * L:(i + 1) * L] = modulate(X, frame.subcarriers, frame.cp_len, P[i, j], c.mean_power)
    return out


def synthesize_rx(streams, h_eq, delays, cfo, noise_mw, subcarriers: int, seed=None, receiver: int = 0,
                  block_len: int | None = None):
    """y[n] = sum_j h_j * exp(j 2 pi cfo_j n / Nc) * x_j[n - delay_j] + noise[n].

    ``streams`` is links x samples; delays are non-negative integers (linear
    shift, zeros shifted in). Noise is keyed on (seed, receiver, block) when
    ``block_len`` is given so blocks can be regenerated independently.
    """
    streams = np.atleast_2d(streams)
    n_links, n = streams.shape
    h_eq = np.asarray(h_eq)
    delays = np.asarray(delays, dtype=int)
    cfo = np.broadcast_to(np.asarray(cfo, dtype=float), (n_links,))
    if len(h_eq) != n_links or len(delays) != n_links:
        raise DimensionMismatch("one gain and one delay per stream required")
    if np.any(delays < 0):
        raise ValueError("delays must be non-negative")
    if delays.size and delays.max() >= n:
        raise StreamTooShort(f"delay {delays.max()} exceeds stream length {n}")
    y = np.zeros(n, dtype=complex)
    idx = np.arange(n)
    for j in range(n_links):
        if h_eq[j] == 0 or not np.any(streams[j]):
            continue
        d = int(delays[j])
        shifted = np.zeros(n, dtype=complex)
        shifted[d:] = streams[j, : n - d]
        if cfo[j] != 0.0:
            shifted *= np.exp(2j * np.pi * cfo[j] * idx / subcarriers)
        y += h_eq[j] * shifted
    if noise_mw > 0:
        y += _noise(n, noise_mw, seed, receiver, block_len)
    return y


def _noise(n, noise_mw, seed, receiver, block_len):
    scale = np.sqrt(noise_mw / 2)
    if block_len is None:
        rng = np.random.default_rng(None if seed is None else [seed, 2, receiver])
        return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    out = np.empty(n, dtype=complex)
    for b, start in enumerate(range(0, n, block_len)):
        m = min(block_len, n - start)
        rng = np.random.default_rng(None if seed is None else [seed, 2, receiver, b])
        out[start:start + m] = scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
    return out


def measure_block_power(samples, windows):
    """Mean of |y|^2 over each (start, stop) window."""
    y = np.asarray(samples)
    out = []
    for start, stop in windows:
        if stop <= start:
            raise EmptyBlock(f"window ({start}, {stop}) holds no samples")
        out.append(float(np.mean(np.abs(y[start:stop]) ** 2)))
    return np.array(out)


def expected_rx_power(gains, tx_powers, noise_mw: float = 0.0):
    """Linear received-power model: sum_j g_j p_j + W (works row-wise on a power matrix)."""
    g = np.asarray(gains, dtype=float)
    p = np.asarray(tx_powers, dtype=float)
    if p.shape[-1] != g.shape[-1]:
        raise DimensionMismatch(f"{g.shape[-1]} gains vs {p.shape[-1]} powers")
    return p @ g + noise_mw


def measure_received_powers(P, gains, frame: FrameConfig, qam_orders, noise_mw, seed,
                            delays=None, cfo=None, receivers=None):
    """Block powers b̄ for every receiver (link); returns blocks x receivers.

    ``gains`` is a channel.GainTable; ``cfo`` is indexed [source node, rx node].
    """
    P = np.asarray(P, dtype=float)
    links = gains.links
    nl = len(links)
    delays = np.zeros(nl, dtype=int) if delays is None else np.asarray(delays, dtype=int)
    if delays.max(initial=0) > frame.to_guard:
        raise StreamTooShort("timing offsets exceed the block guard; blocks would overlap")
    streams = link_streams(P, frame, qam_orders, seed)
    windows = frame.block_windows()
    receivers = range(nl) if receivers is None else receivers
    out = np.zeros((P.shape[0], nl))
    for i in receivers:
        z = links[i][1]
        phi = np.zeros(nl) if cfo is None else np.array([cfo[s, z] for s, _ in links])
        y = synthesize_rx(streams, gains.h_eq[:, i], delays, phi, noise_mw, frame.subcarriers,
                          seed=seed, receiver=i, block_len=frame.block_samples)
        out[:, i] = measure_block_power(y, windows)
    return out
