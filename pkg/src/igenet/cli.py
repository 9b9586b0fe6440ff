"""ige-net command line: gen, estimate, schedule, experiment, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, harness
from .optimizer import joint_schedule


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise harness.ConfigInvalid(f"--set expects key.path=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = harness.parse_value(v)
    return out


def _config(args):
    return harness.load_config(args.config, _overrides(args.set))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    cfg = _config(args)
    inst = harness.build_instance(cfg, args.seed)
    out = _out(args)
    (out / "topology.json").write_text(json.dumps(inst.topology.to_dict(), indent=2) + "\n")
    (out / "demands.json").write_text(json.dumps(inst.demands.to_dict(), indent=2) + "\n")
    _write_rows(out / "gains.csv", ["src", "dst", "gain_db"], inst.gains.to_csv_rows())
    print(f"{inst.topology.num_nodes} nodes, {inst.num_links} links, {inst.n_blocks} blocks -> {out}")


def cmd_estimate(args):
    cfg = _config(args)
    inst = harness.build_instance(cfg, args.seed)
    P, prior = harness.ige_powers(cfg, inst)
    est = harness._ige(cfg, inst, P, [args.seed, 10], prior=None if prior is None else prior.g_hat)
    out = _out(args)
    _write_rows(out / "estimate.csv", ["src", "dst", "true_db", "est_db", "err_db", "delta"], est.to_csv_rows())
    _write_rows(out / "power_matrix.csv", [f"link{j}" for j in range(P.shape[1])], P)
    err = np.abs(est.errors_db())
    print(f"kappa {est.kappa:.3f}  median |err| {np.median(err):.3f} dB  max {err.max():.3f} dB -> {out}")


def cmd_schedule(args):
    cfg = _config(args)
    inst = harness.build_instance(cfg, args.seed)
    prior = harness.bootstrap_prior(cfg, inst)
    prob = harness.make_problem(cfg, inst, prior)
    jr = joint_schedule(prob, alpha=cfg["schedule"]["alpha"], seed=args.seed, backend=cfg["schedule"]["backend"])
    out = _out(args)
    _write_rows(out / "schedule_stage1.csv", ["block", "link", "active", "power_mw"], jr.schedule.to_csv_rows())
    nb, L = jr.p3.P.shape
    _write_rows(out / "schedule_joint.csv", ["block", "link", "active", "power_mw"],
                ((i, e, int(jr.delta[i, e]), float(jr.p3.P[i, e])) for i in range(nb) for e in range(L)))
    (out / "gap.json").write_text(jr.gap_json() + "\n")
    print(f"energy {jr.f2:.1f} -> {jr.f3:.1f} mW ({100 * jr.power_overhead:.2f}% overhead), "
          f"kappa {jr.p3.kappa:.3f}, {jr.p3.iterations} P3 iterations -> {out}")


def cmd_experiment(args):
    cfg = _config(args)
    names = harness.EXPERIMENT_NAMES if args.name == "all" else [args.name]
    for name in names:
        rep = harness.run_experiment(cfg, name, out_dir=args.out, trials=args.trials, workers=args.workers)
        s = rep.summary
        print(f"{name}: {s['succeeded']}/{s['trials']} trials ok -> {rep.paths['csv']}")
        for f in rep.failures:
            print(f"  trial {f['trial']} (seed {f['seed']}) failed: {f['error']}", file=sys.stderr)


def cmd_report(args):
    text = harness.report(args.paths, out=args.out)
    print(text, end="")
    if args.strict and any(v == "FAIL" for _, _, v, _ in harness.evaluate_criteria(harness.load_summaries(args.paths))):
        return 1


def build_parser():
    ap = argparse.ArgumentParser(prog="ige-net", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="scenario JSON (defaults apply to missing fields)")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE", help="override a config field")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("gen", help="topology, demands and channel gains"))
    common(sub.add_parser("estimate", help="one IGE round with the configured power strategy"))
    common(sub.add_parser("schedule", help="stage-one schedule plus IGE-aware powers"))
    p = sub.add_parser("experiment", help="run a named experiment over all trials")
    common(p, seed=False)
    p.add_argument("--name", required=True, choices=list(harness.EXPERIMENT_NAMES) + ["all"])
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p = sub.add_parser("report", help="pass/fail table from experiment summaries")
    p.add_argument("paths", nargs="+", help="output directories or *.summary.json files")
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--strict", action="store_true", help="exit 1 if any criterion fails")
    return ap


COMMANDS = {"gen": cmd_gen, "estimate": cmd_estimate, "schedule": cmd_schedule, "experiment": cmd_experiment,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args) or 0
    except harness.ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (harness.MissingData, harness.ConfigMismatch) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
