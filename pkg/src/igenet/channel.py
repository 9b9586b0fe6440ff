"""Rician MIMO channels, LOS beam steering and equivalent link-to-link gains.

All arrays are uniform linear arrays at half-wavelength spacing laid along
the x axis, so the spatial frequency seen toward a bearing ``phi`` is
``cos(phi)`` (equivalently ``sin`` of the angle from broadside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Topology

SPEED_OF_LIGHT = 299_792_458.0


class MissingBeam(KeyError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    k_factor: float = 2.0
    pl_exponent: float = 2.0  # distance term
    pl_intercept: float = 20.0  # multiplies log10(4*pi/lambda); 20 is free space
    carrier_hz: float = 28e9
    antennas: int = 100
    sic: float = 1e-10  # residual self-interference power ratio (-100 dB)
    noise_mw: float = 10 ** ((-174 + 10 * np.log10(250e6)) / 10)
    sweep_deg: float = 0.5

    def __post_init__(self):
        if self.k_factor < 0:
            raise ValueError("K-factor must be >= 0")
        if not 0 <= self.sic <= 1:
            raise ValueError("SIC ratio must lie in [0, 1]")
        if self.antennas < 1:
            raise ValueError("need at least one antenna")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz


def path_gain(distance, params: ChannelParams):
    """Large-scale power gain (linear) at the given distance in metres."""
    loss_db = 10 * params.pl_exponent * np.log10(distance) + params.pl_intercept * np.log10(
        4 * np.pi / params.wavelength
    )
    return 10.0 ** (-loss_db / 10.0)


def steering(u, m: int):
    """ULA response(s) for spatial frequency ``u`` in [-1, 1]; shape (..., m)."""
    u = np.asarray(u, dtype=float)
    return np.exp(1j * np.pi * np.multiply.outer(u, np.arange(m)))


def beam(u, m: int):
    """Unit-norm beam matched to direction ``u`` (used for both tx and rx)."""
    return np.conj(steering(u, m)) / np.sqrt(m)


def bearing(topology: Topology, a: int, b: int) -> float:
    """Spatial frequency of node b as seen from node a."""
    dx, dy = topology.positions[b] - topology.positions[a]
    return float(dx / np.hypot(dx, dy))


@dataclass(frozen=True)
class ChannelSet:
    params: ChannelParams
    H: dict  # (s, z) -> M x M, reciprocal: H[(z, s)] == H[(s, z)].T
    H_si: dict  # z -> M x M
    path_gain: dict  # (s, z) -> linear


def build_channels(topology: Topology, params: ChannelParams, seed) -> ChannelSet:
    """Rician channel for every unordered node pair plus one SI channel per node."""
    rng = np.random.default_rng([seed, 0xC4])
    m = params.antennas
    zeta = params.k_factor
    H, pg = {}, {}
    n = topology.num_nodes
    for s in range(n):
        for z in range(s + 1, n):
            d = topology.distance(s, z)
            if d <= 0:
                raise ValueError(f"nodes {s} and {z} coincide")
            w = float(path_gain(d, params))
            phase = np.exp(-2j * np.pi * d / params.wavelength)
            a_z = steering(bearing(topology, z, s), m)  # arrival at z
            a_s = steering(bearing(topology, s, z), m)  # departure from s
            los = phase * np.outer(a_z, a_s)
            scat = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
            if np.isinf(zeta):
                h = np.sqrt(w) * los
            else:
                h = np.sqrt(w * zeta / (zeta + 1)) * los + np.sqrt(w / (zeta + 1)) * scat
            H[(s, z)] = h
            H[(z, s)] = h.T
            pg[(s, z)] = pg[(z, s)] = w
    H_si = {}
    for z in range(n):
        H_si[z] = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
    return ChannelSet(params=params, H=H, H_si=H_si, path_gain=pg)


def sweep_grid(params: ChannelParams):
    deg = np.arange(-90.0, 90.0 + 1e-9, params.sweep_deg)
    return deg, np.sin(np.deg2rad(deg))


def best_beam_pair(h, params: ChannelParams):
    """Joint tx/rx sweep; returns (u_rx, u_tx, power grid) maximising |w_r^T H w_t|^2."""
    _, u = sweep_grid(params)
    b = beam(u, params.antennas)  # (G, M)
    resp = np.abs(b @ h @ b.T) ** 2  # rows: rx angle, cols: tx angle
    r, t = np.unravel_index(int(np.argmax(resp)), resp.shape)
    return u[r], u[t], resp


def steer_beams(channels: ChannelSet, topology: Topology, links=None) -> dict:
    """Beam per (node, peer): the direction node uses to talk to peer.

    Reciprocal channels make the tx beam of s toward d equal to the rx beam
    s would use when receiving from d, so one sweep per link serves both ends.
    """
    params = channels.params
    links = topology.links if links is None else links
    beams = {}
    for s, d in links:
        if (s, d) in beams and (d, s) in beams:
            continue
        u_rx, u_tx, _ = best_beam_pair(channels.H[(s, d)], params)
        beams[(d, s)] = beam(u_rx, params.antennas)  # d listening to s
        beams[(s, d)] = beam(u_tx, params.antennas)  # s pointing at d
    return beams


@dataclass(frozen=True)
class GainTable:
    """h_eq[j, i] / g[j, i]: from link j (transmitter side) into link i's receiver."""

    links: tuple
    h_eq: np.ndarray
    g: np.ndarray

    def column(self, i: int) -> np.ndarray:
        return self.g[:, i]

    def to_csv_rows(self):
        for i, dst in enumerate(self.links):
            for j, src in enumerate(self.links):
                gain = self.g[j, i]
                db = 10 * np.log10(gain) if gain > 0 else float("-inf")
                yield (f"{src[0]}-{src[1]}", f"{dst[0]}-{dst[1]}", db)


def equivalent_gains(channels: ChannelSet, beams: dict, links, sic: float | None = None) -> GainTable:
    """g[(s,d),(k,z)] = |w_{z<-k}^T H_(s,z) t_{s->d}|^2, with the SI channel when s == z."""
    eta = channels.params.sic if sic is None else sic
    n = len(links)
    h = np.zeros((n, n), dtype=complex)
    for i, (k, z) in enumerate(links):
        try:
            w_rx = beams[(z, k)]
        except KeyError as exc:
            raise MissingBeam(f"no receive beam at {z} toward {k}") from exc
        for j, (s, d) in enumerate(links):
            try:
                t_tx = beams[(s, d)]
            except KeyError as exc:
                raise MissingBeam(f"no transmit beam at {s} toward {d}") from exc
            if s == z:
                h[j, i] = np.sqrt(eta) * (w_rx @ channels.H_si[z] @ t_tx)
            else:
                h[j, i] = w_rx @ channels.H[(s, z)] @ t_tx
    return GainTable(links=tuple(links), h_eq=h, g=np.abs(h) ** 2)


def draw_offsets(links, num_nodes, seed, cfo_range=(0.0, 0.0), to_range=(0, 0)):
    """Per (source, receiver-node) CFO in subcarrier spacings and per-link integer TO."""
    rng = np.random.default_rng([seed, 0x0F])
    lo, hi = cfo_range
    cfo = rng.uniform(lo, hi, size=(num_nodes, num_nodes)) if hi > lo else np.full((num_nodes, num_nodes), lo)
    np.fill_diagonal(cfo, 0.0)
    tlo, thi = to_range
    to = rng.integers(tlo, thi + 1, size=len(links)) if thi > tlo else np.full(len(links), tlo, dtype=int)
    return cfo, to
