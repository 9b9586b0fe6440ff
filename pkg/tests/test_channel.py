import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igenet.channel import (ChannelParams, MissingBeam, beam, bearing, best_beam_pair, build_channels, draw_offsets,
                            equivalent_gains, path_gain, steer_beams, steering)
from igenet.network import generate_topology


@pytest.fixture(scope="module")
def small():
    topo = generate_topology(11, 3)
    params = ChannelParams(antennas=16, sweep_deg=1.0)
    ch = build_channels(topo, params, seed=5)
    return topo, params, ch, steer_beams(ch, topo)


def test_pure_los_is_rank_one():
    topo = generate_topology(2, 2)
    ch = build_channels(topo, ChannelParams(k_factor=np.inf, antennas=16), 0)
    s = np.linalg.svd(ch.H[(0, 1)], compute_uv=False)
    assert s[1] <= 1e-10 * s[0]


def test_pure_scattering_entry_power():
    topo = generate_topology(2, 2)
    p = ChannelParams(k_factor=0.0, antennas=100)
    ch = build_channels(topo, p, 1)
    w = ch.path_gain[(0, 1)]
    # 10^4 CN(0, w) entries: relative standard error 1%
    assert np.mean(np.abs(ch.H[(0, 1)]) ** 2) == pytest.approx(w, rel=0.05)


def test_doubling_distance_costs_six_db():
    p = ChannelParams(pl_exponent=2.0)
    ratio_db = 10 * np.log10(path_gain(20.0, p) / path_gain(40.0, p))
    assert ratio_db == pytest.approx(10 * np.log10(4.0), abs=1e-12)  # 6.0206 dB


def test_free_space_intercept():
    # FSPL at 28 GHz, 1 m: 20 log10(4 pi / lambda) = 61.4 dB
    p = ChannelParams()
    assert -10 * np.log10(path_gain(1.0, p)) == pytest.approx(61.4, abs=0.05)


def test_los_sweep_finds_geometric_bearing():
    topo = generate_topology(4, 2)
    p = ChannelParams(k_factor=np.inf, antennas=64, sweep_deg=0.5)
    ch = build_channels(topo, p, 0)
    u_rx, u_tx, resp = best_beam_pair(ch.H[(0, 1)], p)
    # arrival at node 1 from node 0, departure from node 0 toward node 1
    assert np.degrees(abs(np.arcsin(u_rx) - np.arcsin(bearing(topo, 1, 0)))) <= 0.5
    assert np.degrees(abs(np.arcsin(u_tx) - np.arcsin(bearing(topo, 0, 1)))) <= 0.5
    b = beam(np.array([u_rx, u_tx]), p.antennas)
    chosen = abs(b[0] @ ch.H[(0, 1)] @ b[1]) ** 2
    assert chosen >= resp.max() * (1 - 1e-12)


def test_matched_los_array_gain():
    # |w^T H t|^2 = varpi * M^2 for beams matched to the true bearings
    topo = generate_topology(4, 2)
    p = ChannelParams(k_factor=np.inf, antennas=100)
    ch = build_channels(topo, p, 0)
    w = beam(bearing(topo, 1, 0), 100)
    t = beam(bearing(topo, 0, 1), 100)
    g = abs(w @ ch.H[(0, 1)] @ t) ** 2
    assert g == pytest.approx(ch.path_gain[(0, 1)] * 100 ** 2, rel=0.01)


def test_beams_unit_norm_and_deterministic(small):
    topo, params, ch, beams = small
    for v in beams.values():
        assert np.linalg.norm(v) == pytest.approx(1.0)
    again = steer_beams(build_channels(topo, params, seed=5), topo)
    assert all(np.array_equal(beams[k], again[k]) for k in beams)


def test_gains_match_direct_inner_products(small):
    topo, params, ch, beams = small
    gt = equivalent_gains(ch, beams, topo.links)
    M = params.antennas
    for i, (k, z) in enumerate(topo.links):
        w = beams[(z, k)]
        for j, (s, d) in enumerate(topo.links):
            t = beams[(s, d)]
            H = np.sqrt(params.sic) * ch.H_si[z] if s == z else ch.H[(s, z)]
            acc = 0j
            for a in range(M):
                for b in range(M):
                    acc += w[a] * H[a, b] * t[b]
            assert gt.g[j, i] == pytest.approx(abs(acc) ** 2, rel=1e-10)
    # a link paired with itself is its communication gain
    (k, z) = topo.links[0]
    assert gt.g[0, 0] == pytest.approx(abs(beams[(z, k)] @ ch.H[(k, z)] @ beams[(k, z)]) ** 2)


def test_zero_sic_kills_self_interference(small):
    topo, _, ch, beams = small
    g = equivalent_gains(ch, beams, topo.links, sic=0.0).g
    for i, (k, z) in enumerate(topo.links):
        for j, (s, d) in enumerate(topo.links):
            if s == z:
                assert g[j, i] == 0.0


@settings(max_examples=20, deadline=None)
@given(eta=st.floats(1e-14, 1e-2), scale=st.floats(1.5, 1e3))
def test_si_gain_linear_in_eta(eta, scale):
    topo = generate_topology(11, 3)
    ch = build_channels(topo, ChannelParams(antennas=8, sweep_deg=2.0), seed=5)
    beams = steer_beams(ch, topo)
    g1 = equivalent_gains(ch, beams, topo.links, sic=eta).g
    g2 = equivalent_gains(ch, beams, topo.links, sic=min(eta * scale, 1.0)).g
    si = np.array([[s == z for (k, z) in topo.links] for (s, d) in topo.links])
    r = min(eta * scale, 1.0) / eta
    assert np.allclose(g2[si], g1[si] * r, rtol=1e-9)
    assert np.array_equal(g2[~si], g1[~si])
    assert np.all(g1 >= 0)


def test_comm_gain_beats_typical_interference():
    ratios = []
    for seed in range(30):
        topo = generate_topology(seed, 5)
        ch = build_channels(topo, ChannelParams(antennas=32, sweep_deg=1.0), seed)
        g = equivalent_gains(ch, steer_beams(ch, topo), topo.links).g
        for i, (k, z) in enumerate(topo.links):
            others = [g[j, i] for j, (s, d) in enumerate(topo.links) if j != i and s != z]
            ratios.append(g[i, i] / np.median(others))
    assert np.median(ratios) >= 1.0


def test_missing_beam(small):
    topo, _, ch, beams = small
    partial = {k: v for k, v in beams.items() if k != (topo.links[0][1], topo.links[0][0])}
    with pytest.raises(MissingBeam):
        equivalent_gains(ch, partial, topo.links)


def test_csv_rows_in_db(small):
    topo, _, ch, beams = small
    gt = equivalent_gains(ch, beams, topo.links)
    rows = list(gt.to_csv_rows())
    assert len(rows) == len(topo.links) ** 2
    src, dst, db = rows[1]
    assert db == pytest.approx(10 * np.log10(gt.g[1, 0]))
    assert src == "{}-{}".format(*topo.links[1]) and dst == "{}-{}".format(*topo.links[0])


def test_offsets_in_range():
    links = generate_topology(3, 6).links
    cfo, to = draw_offsets(links, 6, 9, cfo_range=(-0.5, 0.5), to_range=(0, 216))
    assert np.all(np.abs(cfo) <= 0.5) and np.all(np.diag(cfo) == 0)
    assert to.dtype.kind == "i" and to.min() >= 0 and to.max() <= 216
    cfo2, to2 = draw_offsets(links, 6, 9, cfo_range=(-0.5, 0.5), to_range=(0, 216))
    assert np.array_equal(cfo, cfo2) and np.array_equal(to, to2)


def test_steering_shape():
    assert steering(np.zeros(3), 5).shape == (3, 5)
