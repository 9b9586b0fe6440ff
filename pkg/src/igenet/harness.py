"""Scenario configs, experiment runner and acceptance report.

A scenario is one JSON document (see DEFAULT_CONFIG). Every experiment runs
``run.trials`` independent trials; trial k draws everything from a seed keyed
on (run.master_seed, k), so trials can run in a process pool and still give
byte-identical CSVs.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .channel import ChannelParams, build_channels, draw_offsets, equivalent_gains, steer_beams
from .estimator import (DeviationBoundInputs, ErrorBoundParams, build_power_matrix, deviation_threshold,
                        empirical_deviation_probability, run_ige, tx_power_deviation_bound)
from .network import MCS_TABLE_DB, assign_demands, generate_topology
from .optimizer import (RoundingInfeasible, ScheduleProblem, _polish, brute_force_oracle, ensure_identifiable,
                        evaluate_schedule, joint_schedule, solve_p2_sca, solve_p3)
from .waveform import FrameConfig, qam


class ConfigInvalid(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


class MissingData(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "network": {"num_nodes": 9, "area_side_m": 100.0, "min_dist_m": 15.0, "max_dist_m": 100.0,
                "min_density_per_km2": 0.0, "cost_exponent": 2.0},
    "channel": {"antennas": 100, "carrier_hz": 28e9, "bandwidth_hz": 250e6, "noise_dbm_per_hz": -174.0,
                "k_factor": 2.0, "pl_exponent": 2.0, "pl_intercept": 20.0, "sic_db": -100.0, "sweep_deg": 0.5},
    "frame": {"subcarriers": 1024, "cp_len": 72, "symbols_per_slot": 14, "slots_per_block": 1, "surplus_blocks": 2},
    "power": {"p_min_mw": 800.0, "p_max_mw": 1200.0},
    "traffic": {"qam_orders": [4, 16, 64, 256], "max_slots": 1},
    "impairments": {"to_max_samples": 0, "cfo_max": 0.0},
    "estimation": {"power_strategy": "joint", "beta": 0.05},
    "schedule": {"alpha": 0.2, "use_delta": True, "backend": "clarabel"},
    "run": {"master_seed": 0, "trials": 30, "workers": 1},
    "experiments": {
        "estimation-error": {},
        "to-sweep": {"to_cp_multiples": [0, 1, 2, 3]},
        "cfo-sweep": {"cfo_max": 0.5, "alpha": 0.05},
        "surplus-blocks": {"num_nodes": [5, 7, 9], "surplus": [0, 1, 2, 3, 4], "strategy": "append-singular"},
        "block-length": {"subcarriers": [256, 1024], "symbols": [1, 14, 28]},
        "power-overhead": {"num_nodes": 6, "use_delta": False, "max_slots": 2},
        "unsatisfied-ratio": {"threshold": 0.02, "prior": "random"},
        "sic-sweep": {"sic_db": [-120.0, -110.0, -100.0, -90.0, -80.0]},
        "bound-curves": {"orders": [4, 16, 64, 256], "deltas": [0.01, 0.02], "n_max": 100,
                         "empirical_n": [5, 25], "empirical_trials": 10000, "target": 0.01},
        "convergence": {"max_iter": 50, "use_delta": False, "max_slots": 2},
        "weight-sweep": {"alphas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "use_delta": False, "max_slots": 2},
        "optimality-gap": {"num_nodes": 3, "use_delta": False, "max_slots": 2},
    },
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_int0 = {"type": "integer", "minimum": 0}


def _obj(props, required=True):
    return {"type": "object", "properties": props, "additionalProperties": False,
            **({"required": list(props)} if required else {})}


SCHEMA = _obj({
    "network": _obj({"num_nodes": {"type": "integer", "minimum": 2, "maximum": 9}, "area_side_m": _pos,
                     "min_dist_m": {"type": "number", "minimum": 0}, "max_dist_m": _pos,
                     "min_density_per_km2": {"type": "number", "minimum": 0}, "cost_exponent": _pos}),
    "channel": _obj({"antennas": _int1, "carrier_hz": _pos, "bandwidth_hz": _pos, "noise_dbm_per_hz": _num,
                     "k_factor": {"type": "number", "minimum": 0}, "pl_exponent": _pos, "pl_intercept": _num,
                     "sic_db": {"type": "number", "maximum": 0}, "sweep_deg": _pos}),
    "frame": _obj({"subcarriers": {"type": "integer", "minimum": 2}, "cp_len": _int0, "symbols_per_slot": _int1,
                   "slots_per_block": _int1, "surplus_blocks": _int0}),
    "power": _obj({"p_min_mw": {"type": "number", "minimum": 0}, "p_max_mw": _pos}),
    "traffic": _obj({"qam_orders": {"type": "array", "minItems": 1, "uniqueItems": True,
                                    "items": {"enum": sorted(MCS_TABLE_DB)}},
                     "max_slots": {"type": ["integer", "null"], "minimum": 1}}),
    "impairments": _obj({"to_max_samples": _int0, "cfo_max": {"type": "number", "minimum": 0, "maximum": 0.5}}),
    "estimation": _obj({"power_strategy": {"enum": ["joint", "random", "append-singular"]},
                        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
    "schedule": _obj({"alpha": {"type": "number", "minimum": 0, "maximum": 1}, "use_delta": {"type": "boolean"},
                      "backend": {"enum": ["clarabel", "scs"]}}),
    "run": _obj({"master_seed": _int0, "trials": {"type": "integer", "minimum": 1, "maximum": 100},
                 "workers": _int1}),
    "experiments": {"type": "object"},
})

EXPERIMENT_NAMES = tuple(DEFAULT_CONFIG["experiments"])

# experiments about the power optimizer run where links share blocks; the
# delta-inflated gains of the default scenario only admit one link per block,
# where P3 has nothing to do (kappa = 1, no overhead)
SCENARIO_KEYS = {"use_delta": ("schedule", "use_delta"), "max_slots": ("traffic", "max_slots")}


def scenario_for(cfg, name):
    """Config with an experiment's scenario overrides (use_delta, max_slots) applied."""
    sect = cfg["experiments"][name]
    out = copy.deepcopy(cfg)
    for k, (a, b) in SCENARIO_KEYS.items():
        if k in sect and sect[k] is not None:
            out[a][b] = sect[k]
    return out


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, path: str, value):
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigInvalid(f"no config section {path!r}")
        node = node[k]
    if keys[-1] not in node and node is not cfg.get("experiments") and keys[0] != "experiments":
        raise ConfigInvalid(f"unknown config field {path!r}")
    node[keys[-1]] = value
    return cfg


def validate(cfg: dict) -> dict:
    import jsonschema

    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigInvalid(f"{where}: {exc.message}") from None
    if cfg["power"]["p_min_mw"] > cfg["power"]["p_max_mw"]:
        raise ConfigInvalid("power.p_min_mw exceeds power.p_max_mw")
    if cfg["network"]["min_dist_m"] > cfg["network"]["max_dist_m"]:
        raise ConfigInvalid("network.min_dist_m exceeds network.max_dist_m")
    unknown = set(cfg["experiments"]) - set(EXPERIMENT_NAMES)
    if unknown:
        raise ConfigInvalid(f"unknown experiments {sorted(unknown)}")
    for name, sect in cfg["experiments"].items():
        extra = set(sect) - set(DEFAULT_CONFIG["experiments"][name])
        if extra:
            raise ConfigInvalid(f"experiments.{name}: unknown fields {sorted(extra)}")
    return cfg


def load_config(source=None, overrides=None) -> dict:
    """Defaults, then a JSON file or dict, then dotted-path overrides; validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if source is not None:
        if isinstance(source, (str, os.PathLike)):
            try:
                doc = json.loads(Path(source).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{source}: {exc}") from None
        else:
            doc = source
        if not isinstance(doc, dict):
            raise ConfigInvalid("config must be a JSON object")
        cfg = _merge(cfg, doc)
    for path, value in (overrides or {}).items():
        set_dotted(cfg, path, value)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trial_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


# ---------------------------------------------------------------- instances


def channel_params(cfg, sic_db=None) -> ChannelParams:
    c = cfg["channel"]
    noise = 10 ** ((c["noise_dbm_per_hz"] + 10 * np.log10(c["bandwidth_hz"])) / 10)
    return ChannelParams(k_factor=c["k_factor"], pl_exponent=c["pl_exponent"], pl_intercept=c["pl_intercept"],
                         carrier_hz=c["carrier_hz"], antennas=c["antennas"],
                         sic=10 ** ((c["sic_db"] if sic_db is None else sic_db) / 10), noise_mw=noise,
                         sweep_deg=c["sweep_deg"])


def frame_config(cfg, num_blocks, to_guard=0, subcarriers=None, symbols=None) -> FrameConfig:
    f = cfg["frame"]
    return FrameConfig(subcarriers=f["subcarriers"] if subcarriers is None else subcarriers, cp_len=f["cp_len"],
                       symbols_per_slot=f["symbols_per_slot"] if symbols is None else symbols,
                       slots_per_block=f["slots_per_block"], num_blocks=num_blocks, to_guard=to_guard)


@dataclass
class Instance:
    seed: int
    topology: object
    params: ChannelParams
    channels: object
    beams: dict
    gains: object
    demands: object
    n_blocks: int

    @property
    def links(self):
        return self.topology.links

    @property
    def num_links(self):
        return self.topology.num_links

    @property
    def noise(self):
        return self.params.noise_mw


def build_instance(cfg, seed, num_nodes=None) -> Instance:
    n = cfg["network"]
    topo = generate_topology(seed, n["num_nodes"] if num_nodes is None else num_nodes, area_side=n["area_side_m"],
                             min_dist=n["min_dist_m"], max_dist=n["max_dist_m"],
                             min_density=n["min_density_per_km2"], cost_exponent=n["cost_exponent"])
    params = channel_params(cfg)
    ch = build_channels(topo, params, seed)
    beams = steer_beams(ch, topo)
    gains = equivalent_gains(ch, beams, topo.links)
    nb = topo.num_links + cfg["frame"]["surplus_blocks"]
    dem = assign_demands(topo, seed, nb, qam_orders=cfg["traffic"]["qam_orders"], max_slots=cfg["traffic"]["max_slots"],
                         subcarriers=cfg["frame"]["subcarriers"], block_slots=cfg["frame"]["slots_per_block"])
    return Instance(seed, topo, params, ch, beams, gains, dem, nb)


def _ige(cfg, inst, P, seed, gains=None, frame=None, cfo=None, delays=None, prior=None):
    frame = frame or frame_config(cfg, P.shape[0])
    bp = ErrorBoundParams(m=(frame.block_samples - frame.to_guard,) * 3, beta=cfg["estimation"]["beta"])
    return run_ige(gains or inst.gains, P, frame, inst.demands.qam_order, inst.noise, seed, cfo=cfo, delays=delays,
                   bound_params=bp, prior=prior)


def bootstrap_prior(cfg, inst):
    """First-round estimate: one link at a time at maximum power."""
    L = inst.num_links
    return _ige(cfg, inst, cfg["power"]["p_max_mw"] * np.eye(L), [inst.seed, 9])


def random_prior(cfg, inst):
    """An unoptimized round: every link active in every block at random power."""
    p = cfg["power"]
    P = build_power_matrix(None, inst.n_blocks, "random", [inst.seed, 5], p["p_min_mw"], p["p_max_mw"],
                           num_links=inst.num_links).P
    return _ige(cfg, inst, P, [inst.seed, 8])


def make_problem(cfg, inst, prior, use_delta=None) -> ScheduleProblem:
    use = cfg["schedule"]["use_delta"] if use_delta is None else use_delta
    p = cfg["power"]
    return ScheduleProblem.from_estimate(inst.links, inst.topology.num_nodes, inst.n_blocks, inst.demands, prior.g_hat,
                                         inst.noise, prior.delta if use else None, p_min=p["p_min_mw"],
                                         p_max=p["p_max_mw"])


def ige_powers(cfg, inst, prior=None):
    """Power matrix for the estimation round under the configured strategy."""
    strat = cfg["estimation"]["power_strategy"]
    p = cfg["power"]
    if strat == "joint":
        prior = prior or bootstrap_prior(cfg, inst)
        jr = joint_schedule(make_problem(cfg, inst, prior), alpha=cfg["schedule"]["alpha"], seed=inst.seed,
                            backend=cfg["schedule"]["backend"])
        return jr.p3.P, prior
    P = build_power_matrix(None, inst.n_blocks, strat, [inst.seed, 6], p["p_min_mw"], p["p_max_mw"],
                           num_links=inst.num_links).P
    return P, prior


def link_kind(links, j, i):
    if j == i:
        return "comm"
    return "si" if links[j][0] == links[i][1] else "interference"


def error_rows(est, links, **extra):
    err = est.errors_db()
    rows = []
    for i in range(len(links)):
        for j in range(len(links)):
            rows.append({**extra, "src": f"{links[j][0]}-{links[j][1]}", "dst": f"{links[i][0]}-{links[i][1]}",
                         "kind": link_kind(links, j, i), "true_db": 10 * np.log10(est.g_true[j, i]),
                         "est_db": 10 * np.log10(est.g_hat[j, i]), "err_db": float(err[j, i])})
    return rows


# ---------------------------------------------------------------- trials


def _t_estimation_error(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    P, prior = ige_powers(cfg, inst)
    est = _ige(cfg, inst, P, [seed, 10], prior=None if prior is None else prior.g_hat)
    return error_rows(est, inst.links, trial=k, seed=seed, kappa=est.kappa)


def _t_to_sweep(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    P, prior = ige_powers(cfg, inst)
    cp = cfg["frame"]["cp_len"]
    rows = []
    for m in sect["to_cp_multiples"]:
        hi = int(m * cp)
        cfo, to = draw_offsets(inst.links, inst.topology.num_nodes, seed, to_range=(0, hi))
        frame = frame_config(cfg, P.shape[0], to_guard=hi)
        est = _ige(cfg, inst, P, [seed, 10], frame=frame, delays=to)
        rows += error_rows(est, inst.links, trial=k, seed=seed, to_cp_multiple=m, to_max_samples=hi)
    return rows


def _t_cfo_sweep(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    P, prior = ige_powers(cfg, inst)
    rows = []
    for label, hi in (("zero", 0.0), ("random", sect["cfo_max"])):
        cfo, _ = draw_offsets(inst.links, inst.topology.num_nodes, seed, cfo_range=(-hi, hi))
        est = _ige(cfg, inst, P, [seed, 10], cfo=cfo)
        rows += error_rows(est, inst.links, trial=k, seed=seed, cfo=label, cfo_max=hi)
    return rows


def _t_surplus_blocks(cfg, sect, k, seed):
    p = cfg["power"]
    rows = []
    for nodes in sect["num_nodes"]:
        L = 2 * (nodes - 1)
        for s in sect["surplus"]:
            pm = build_power_matrix(None, L + s, sect["strategy"], [seed, nodes, s], p["p_min_mw"], p["p_max_mw"],
                                    num_links=L)
            rows.append({"trial": k, "seed": seed, "links": L, "surplus": s, "kappa": pm.kappa})
    return rows


def _t_block_length(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    P, prior = ige_powers(cfg, inst)
    rows = []
    for nc in sect["subcarriers"]:
        for ns in sect["symbols"]:
            frame = frame_config(cfg, P.shape[0], subcarriers=nc, symbols=ns)
            est = _ige(cfg, inst, P, [seed, 10], frame=frame)
            rows += error_rows(est, inst.links, trial=k, seed=seed, subcarriers=nc, symbols=ns)
    return rows


def _t_power_overhead(cfg, sect, k, seed):
    inst = build_instance(cfg, seed, num_nodes=sect["num_nodes"])
    prior = bootstrap_prior(cfg, inst)
    jr = joint_schedule(make_problem(cfg, inst, prior), alpha=cfg["schedule"]["alpha"], seed=seed,
                        backend=cfg["schedule"]["backend"])
    return [{"trial": k, "seed": seed, "links": inst.num_links, "energy_ra": jr.f2, "energy_joint": jr.f3,
             "overhead": jr.power_overhead, "kappa": jr.p3.kappa, "p3_iterations": jr.p3.iterations,
             "support_changes": len(jr.added)}]


def _t_unsatisfied_ratio(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    prior = random_prior(cfg, inst) if sect["prior"] == "random" else bootstrap_prior(cfg, inst)
    rows = []
    for use in (True, False):
        jr = joint_schedule(make_problem(cfg, inst, prior, use_delta=use), alpha=cfg["schedule"]["alpha"], seed=seed,
                            backend=cfg["schedule"]["backend"])
        ev = evaluate_schedule(jr.p3.P, inst.gains.g, inst.noise, inst.demands.sinr_threshold)
        rows.append({"trial": k, "seed": seed, "use_delta": use, "unsatisfied_ratio": ev["unsatisfied_ratio"],
                     "min_margin_db": ev["min_margin_db"], "energy": jr.f3})
    return rows


def _t_sic_sweep(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    P, prior = ige_powers(cfg, inst)
    rows = []
    for db in sect["sic_db"]:
        gains = equivalent_gains(inst.channels, inst.beams, inst.links, sic=10 ** (db / 10))
        est = _ige(cfg, inst, P, [seed, 10], gains=gains)
        rows += error_rows(est, inst.links, trial=k, seed=seed, sic_db=db)
    return rows


def _t_bound_curves(cfg, sect, k, seed):
    f = cfg["frame"]
    rows = []
    for q in sect["orders"]:
        c = qam(q)
        for d in sect["deltas"]:
            thr = deviation_threshold(c, target=sect["target"], delta=d, n_c=f["subcarriers"], n_g=f["cp_len"])
            for n in range(1, sect["n_max"] + 1):
                ub = tx_power_deviation_bound(DeviationBoundInputs.from_constellation(
                    c, n_c=f["subcarriers"], n_g=f["cp_len"], n_k=n, delta=d))
                emp = float("nan")
                if n in sect["empirical_n"]:
                    emp = empirical_deviation_probability(c, n, d, f["subcarriers"], f["cp_len"],
                                                          sect["empirical_trials"], seed=[seed, q, n])
                rows.append({"trial": k, "seed": seed, "modulation": f"{q}-QAM", "order": q, "delta": d, "n_k": n,
                             "upper_bound": ub, "empirical": emp, "threshold_n_k": -1 if thr is None else thr})
    return rows


def _t_convergence(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    prior = bootstrap_prior(cfg, inst)
    jr = joint_schedule(make_problem(cfg, inst, prior), alpha=cfg["schedule"]["alpha"], seed=seed,
                        backend=cfg["schedule"]["backend"], p3_kw={"max_iter": sect["max_iter"]})
    r = jr.p3
    return [{"trial": k, "seed": seed, "t": t, "e": e, "objective": o, "tol_e": r.tol_e, "iterations": r.iterations,
             "converged": r.converged} for t, (e, o) in enumerate(zip(r.e_history, r.objective_history))]


def _t_weight_sweep(cfg, sect, k, seed):
    inst = build_instance(cfg, seed)
    prior = bootstrap_prior(cfg, inst)
    prob = make_problem(cfg, inst, prior)
    backend = cfg["schedule"]["backend"]
    sched = solve_p2_sca(prob, seed=seed, backend=backend)
    delta, added = ensure_identifiable(prob, sched.delta, backend)
    base = sched.powers if not added else _polish(prob, delta, backend)
    if base is None:
        raise RoundingInfeasible("identifiability repair broke SINR feasibility")
    f2 = float(np.sum(sched.powers))
    rows = []
    for a in sect["alphas"]:
        r = solve_p3(delta, prob, alpha=a, p_star=f2, base_powers=base, seed=seed, backend=backend)
        est = _ige(cfg, inst, r.P, [seed, 10], prior=prior.g_hat)
        rows.append({"trial": k, "seed": seed, "alpha": a, "overhead": (float(np.sum(r.P)) - f2) / f2,
                     "kappa": r.kappa, "median_abs_err_db": float(np.median(np.abs(est.errors_db())))})
    return rows


def _t_optimality_gap(cfg, sect, k, seed):
    inst = build_instance(cfg, seed, num_nodes=sect["num_nodes"])
    prior = bootstrap_prior(cfg, inst)
    prob = make_problem(cfg, inst, prior)
    jr = joint_schedule(prob, alpha=cfg["schedule"]["alpha"], seed=seed, backend=cfg["schedule"]["backend"])
    _, _, oracle = brute_force_oracle(prob)
    return [{"trial": k, "seed": seed, "links": inst.num_links, "f2": jr.f2, "f3": jr.f3, "oracle": oracle,
             "ratio": jr.f2 / oracle}]


# ---------------------------------------------------------------- summaries


def _abs(rows, **match):
    return np.array([abs(r["err_db"]) for r in rows if all(r.get(k) == v for k, v in match.items())])


def _s_estimation_error(rows, sect):
    e = _abs(rows)
    return {"median_abs_err_db": float(np.median(e)), "mean_abs_err_db": float(np.mean(e)),
            "p95_abs_err_db": float(np.percentile(e, 95)), "frac_within_2p5db": float(np.mean(e <= 2.5)),
            "by_kind": {k: float(np.median(_abs(rows, kind=k))) for k in ("comm", "si", "interference")
                        if len(_abs(rows, kind=k))}}


def _s_to_sweep(rows, sect):
    med = {str(m): float(np.median(_abs(rows, to_cp_multiple=m))) for m in sect["to_cp_multiples"]}
    return {"median_abs_err_db": med, "median_spread_db": float(max(med.values()) - min(med.values()))}


def _s_cfo_sweep(rows, sect):
    pv = {}
    for t in sorted({r["trial"] for r in rows}):
        a = [r["err_db"] for r in rows if r["trial"] == t and r["cfo"] == "zero"]
        b = [r["err_db"] for r in rows if r["trial"] == t and r["cfo"] == "random"]
        pv[str(t)] = float(stats.ks_2samp(a, b).pvalue)
    return {"ks_pvalues": pv, "not_rejected": int(sum(p >= sect["alpha"] for p in pv.values())), "seeds": len(pv),
            "median_abs_err_db": {lab: float(np.median(_abs(rows, cfo=lab))) for lab in ("zero", "random")}}


def _s_surplus_blocks(rows, sect):
    out = {}
    for L in sorted({r["links"] for r in rows}):
        out[str(L)] = {str(s): float(np.median([r["kappa"] for r in rows if r["links"] == L and r["surplus"] == s]))
                       for s in sect["surplus"]}
    return {"median_kappa": out}


def _s_block_length(rows, sect):
    out = {}
    for nc in sect["subcarriers"]:
        for ns in sect["symbols"]:
            e = _abs(rows, subcarriers=nc, symbols=ns)
            out[f"{nc}x{ns}"] = {"median": float(np.median(e)), "mean": float(np.mean(e))}
    return {"abs_err_db": out}


def _s_power_overhead(rows, sect):
    o = np.array([r["overhead"] for r in rows])
    return {"mean_overhead": float(o.mean()), "median_overhead": float(np.median(o)),
            "p99_overhead": float(np.percentile(o, 99)), "max_overhead": float(o.max()),
            "median_kappa": float(np.median([r["kappa"] for r in rows]))}


def _s_unsatisfied_ratio(rows, sect):
    out = {}
    for use in (True, False):
        u = np.array([r["unsatisfied_ratio"] for r in rows if r["use_delta"] == use])
        m = np.array([r["min_margin_db"] for r in rows if r["use_delta"] == use])
        key = "with_delta" if use else "without_delta"
        out[key] = {"topologies": int(len(u)), "frac_above_threshold": float(np.mean(u > sect["threshold"])),
                    "mean_ratio": float(u.mean()), "median_min_margin_db": float(np.median(m))}
    return out


def _s_sic_sweep(rows, sect):
    return {"median_abs_err_db": {str(db): {k: float(np.median(_abs(rows, sic_db=db, kind=k)))
                                            for k in ("comm", "si", "interference") if len(_abs(rows, sic_db=db, kind=k))}
                                  for db in sect["sic_db"]}}


def _s_bound_curves(rows, sect):
    thr, emp, ub_qpsk = {}, {}, []
    for r in rows:
        key = f"{r['modulation']}@{r['delta']}"
        thr[key] = r["threshold_n_k"]
        if np.isfinite(r["empirical"]):
            emp[f"{key}/{r['n_k']}"] = r["empirical"]
        if r["order"] == 4:
            ub_qpsk.append(r["upper_bound"])
    return {"threshold_n_k": thr, "empirical": emp, "qpsk_max_upper_bound": max(ub_qpsk) if ub_qpsk else None}


def _s_convergence(rows, sect):
    per = {}
    for r in rows:
        per.setdefault(r["trial"], []).append(r)
    its, mono, conv = [], [], []
    for t, rs in sorted(per.items()):
        rs.sort(key=lambda r: r["t"])
        e = np.array([r["e"] for r in rs])
        mono.append(bool(np.all(np.diff(e) <= 1e-12 * max(abs(e[0]), 1.0))))
        its.append(rs[0]["iterations"])
        conv.append(bool(rs[0]["converged"]))
    its = np.array(its)
    return {"runs": len(its), "all_monotone": bool(all(mono)), "median_iterations": float(np.median(its)),
            "max_iterations": int(its.max()), "frac_converged_within_15": float(np.mean(np.array(conv) & (its <= 15)))}


def _s_weight_sweep(rows, sect):
    out = {}
    for a in sect["alphas"]:
        rs = [r for r in rows if r["alpha"] == a]
        out[str(a)] = {"mean_overhead": float(np.mean([r["overhead"] for r in rs])),
                       "median_kappa": float(np.median([r["kappa"] for r in rs])),
                       "median_abs_err_db": float(np.median([r["median_abs_err_db"] for r in rs]))}
    return {"by_alpha": out}


def _s_optimality_gap(rows, sect):
    q = np.array([r["ratio"] for r in rows])
    return {"max_ratio": float(q.max()), "min_ratio": float(q.min()), "mean_ratio": float(q.mean()),
            "mean_f3_over_oracle": float(np.mean([r["f3"] / r["oracle"] for r in rows]))}


EXPERIMENTS = {
    "estimation-error": (_t_estimation_error, _s_estimation_error),
    "to-sweep": (_t_to_sweep, _s_to_sweep),
    "cfo-sweep": (_t_cfo_sweep, _s_cfo_sweep),
    "surplus-blocks": (_t_surplus_blocks, _s_surplus_blocks),
    "block-length": (_t_block_length, _s_block_length),
    "power-overhead": (_t_power_overhead, _s_power_overhead),
    "unsatisfied-ratio": (_t_unsatisfied_ratio, _s_unsatisfied_ratio),
    "sic-sweep": (_t_sic_sweep, _s_sic_sweep),
    "bound-curves": (_t_bound_curves, _s_bound_curves),
    "convergence": (_t_convergence, _s_convergence),
    "weight-sweep": (_t_weight_sweep, _s_weight_sweep),
    "optimality-gap": (_t_optimality_gap, _s_optimality_gap),
}

SINGLE_TRIAL = {"bound-curves"}  # no topology randomness; one trial carries the Monte-Carlo seed


# ---------------------------------------------------------------- runner


@dataclass
class ExperimentReport:
    name: str
    rows: list
    summary: dict
    failures: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)


def _run_trial(args):
    cfg, name, k = args
    seed = trial_seed(cfg["run"]["master_seed"], k)
    trial, _ = EXPERIMENTS[name]
    sect = cfg["experiments"][name]
    try:
        return k, seed, trial(scenario_for(cfg, name), sect, k, seed), None
    except Exception as exc:  # recorded per trial; the run goes on
        return k, seed, [], {"trial": k, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                             "where": traceback.format_exc(limit=3).strip().splitlines()[-1]}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, rows):
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in cols})


def run_experiment(cfg, name, out_dir=None, trials=None, workers=None) -> ExperimentReport:
    """Run every trial of one experiment; write <name>.csv and <name>.summary.json to ``out_dir``."""
    if name not in EXPERIMENTS:
        raise ConfigInvalid(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENT_NAMES)}")
    cfg = validate(_merge(DEFAULT_CONFIG, cfg))
    n = 1 if name in SINGLE_TRIAL else (cfg["run"]["trials"] if trials is None else trials)
    workers = cfg["run"]["workers"] if workers is None else workers
    jobs = [(cfg, name, k) for k in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    rows = [row for _, _, rs, _ in results for row in rs]
    failures = [f for _, _, _, f in results if f is not None]
    sect = cfg["experiments"][name]
    ok = [k for k, _, rs, f in results if f is None]
    summary = {
        "experiment": name,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "master_seed": cfg["run"]["master_seed"],
        "trials": n,
        "seeds": [s for _, s, _, _ in results],
        "succeeded": len(ok),
        "failed": len(failures),
        "failures": failures,
        "metrics": EXPERIMENTS[name][1](rows, sect) if rows else None,
    }
    rep = ExperimentReport(name, rows, summary, failures)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{name}.csv"
        write_csv(csv_path, [{"config_hash": summary["config_hash"], **r} for r in rows])
        js = out / f"{name}.summary.json"
        js.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        rep.paths = {"csv": str(csv_path), "summary": str(js)}
    return rep


# ---------------------------------------------------------------- acceptance


def _ac1(m):
    ok = m["median_abs_err_db"] <= 1.0 and m["frac_within_2p5db"] >= 0.95
    return ok, f"median |err| {m['median_abs_err_db']:.3f} dB (<= 1.0), {100 * m['frac_within_2p5db']:.1f}% <= 2.5 dB (>= 95%)"


def _ac2(m):
    return m["median_spread_db"] <= 0.2, f"median spread across TO {m['median_spread_db']:.3f} dB (<= 0.2)"


def _ac3(m):
    return m["not_rejected"] >= 8, f"KS not rejected on {m['not_rejected']} of {m['seeds']} seeds (>= 8)"


def _ac4(m):
    thr = m["threshold_n_k"].get("16-QAM@0.01")
    emp = m["empirical"].get("16-QAM@0.01/25")
    q = m["qpsk_max_upper_bound"]
    ok = thr is not None and 70 <= thr <= 95 and emp is not None and emp <= 0.01 and q == 0.0
    return ok, f"16-QAM threshold N_k {thr} (in [70, 95]), empirical P[E] at 25 symbols {emp} (<= 0.01), QPSK bound {q} (== 0)"


def _ac5(m):
    k = m["median_kappa"].get("16")
    if k is None:
        return False, "no 16-link rows"
    seq = [k[str(s)] for s in (0, 1, 2)]
    return seq[0] > seq[1] > seq[2], "median kappa 0/1/2 surplus: " + " > ".join(f"{v:.2f}" for v in seq)


def _ac6(m):
    ok = m["all_monotone"] and m["frac_converged_within_15"] >= 0.9
    return ok, f"monotone {m['all_monotone']}, {100 * m['frac_converged_within_15']:.0f}% reach tol_e within 15 (>= 90%)"


def _ac7(m):
    ok = m["max_ratio"] <= 1.05 and m["min_ratio"] >= 1.0 - 1e-6
    return ok, f"SCA/oracle in [{m['min_ratio']:.4f}, {m['max_ratio']:.4f}] (within [1, 1.05])"


def _ac8(m):
    ok = m["mean_overhead"] <= 0.04 and m["p99_overhead"] <= 0.08
    return ok, f"mean overhead {100 * m['mean_overhead']:.2f}% (<= 4%), p99 {100 * m['p99_overhead']:.2f}% (<= 8%)"


def _ac9(m):
    a = m["with_delta"]["frac_above_threshold"]
    b = m["without_delta"]["frac_above_threshold"]
    return a <= 0.10 and b > a, f"topologies above 2%: with delta {100 * a:.1f}% (<= 10%), without {100 * b:.1f}% (must be larger)"


CRITERIA = {
    "AC-1": ("estimation-error", _ac1),
    "AC-2": ("to-sweep", _ac2),
    "AC-3": ("cfo-sweep", _ac3),
    "AC-4": ("bound-curves", _ac4),
    "AC-5": ("surplus-blocks", _ac5),
    "AC-6": ("convergence", _ac6),
    "AC-7": ("optimality-gap", _ac7),
    "AC-8": ("power-overhead", _ac8),
    "AC-9": ("unsatisfied-ratio", _ac9),
}


def load_summaries(paths):
    files = []
    for p in ([paths] if isinstance(paths, (str, os.PathLike)) else paths):
        p = Path(p)
        files += sorted(p.glob("*.summary.json")) if p.is_dir() else [p]
    if not files:
        raise MissingData("no experiment summaries found")
    out = {}
    for f in files:
        if not f.exists():
            raise MissingData(f"{f} does not exist")
        doc = json.loads(f.read_text())
        out[doc["experiment"]] = doc
    hashes = {d["config_hash"] for d in out.values()}
    if len(hashes) > 1:
        raise ConfigMismatch(f"summaries come from different configs: {sorted(hashes)}")
    return out


def evaluate_criteria(summaries) -> list:
    """(criterion, experiment, verdict, detail); verdict is PASS, FAIL or n/a."""
    out = []
    for cid, (exp, fn) in CRITERIA.items():
        doc = summaries.get(exp)
        if doc is None:
            out.append((cid, exp, "n/a", "experiment not run"))
            continue
        if not doc.get("metrics"):
            raise MissingData(f"{exp}: no successful trials")
        ok, detail = fn(doc["metrics"])
        if doc["failed"]:
            detail += f"; {doc['failed']} of {doc['trials']} trials failed and were excluded"
        out.append((cid, exp, "PASS" if ok else "FAIL", detail))
    out.append(("AC-10", "property suite", "n/a", "run by the test suite (pytest)"))
    return out


def report(paths, out=None) -> str:
    """Human-readable summary plus the acceptance table; also written to ``out`` if given."""
    summaries = load_summaries(paths)
    lines = [f"config {next(iter(summaries.values()))['config_hash']}", ""]
    lines.append(f"{'experiment':<20}{'trials':>7}{'failed':>7}")
    for name, doc in sorted(summaries.items()):
        lines.append(f"{name:<20}{doc['trials']:>7}{doc['failed']:>7}")
        for f in doc["failures"]:
            lines.append(f"    trial {f['trial']} (seed {f['seed']}): {f['error']}")
        m = doc.get("metrics") or {}
        for k, v in m.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                lines.append(f"    {k} = {v:.4g}")
            elif isinstance(v, (bool, str)):
                lines.append(f"    {k} = {v}")
    lines += ["", "acceptance"]
    for cid, exp, verdict, detail in evaluate_criteria(summaries):
        lines.append(f"{cid:<6}{verdict:<5} {exp:<18} {detail}")
    text = "\n".join(lines) + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text
