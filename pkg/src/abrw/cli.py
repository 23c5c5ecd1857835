"""Command-line front end.

    abrw law check <file>
    abrw analytics {pz,parseval,variance,tailbound,exponent} --law <file> [--t --radius --r --T --tol]
    abrw simulate --config <file> [--seed N] [--out DIR]
    abrw couple --config <file> [--seed N]
    abrw experiment <name> --config <file> [--seed N] [--threads K] [--out DIR]

Exit codes: 0 success / all PASS, 2 invalid law, 3 runtime error, 4 statistical FAIL.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import random
import sys
from pathlib import Path

import numpy as np

from . import analytics as A
from . import harness as H
from .engine import EngineError, SimClock, TriState, run_conservative, run_until
from .label_engine import LabelledProcess, LabelRandomness, LabelError, _drive, couple
from .offspring import LawError, check_irreducible, load_law, moment, spectral_gap_scan
from .rng import derive_key, replicate_seed, resolve_seed

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_FAIL = 0, 2, 3, 4

log = logging.getLogger("abrw")

EXPERIMENTS = ("mean-growth", "variance-scaling", "fixation", "nonfixation", "deviation", "clt",
               "coupling", "conservative", "density", "sandwich", "moments")


# ----------------------------------------------------------------------------
# helpers


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _emit(text: str, out: str | None, default_name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if path.is_dir() or out.endswith(os.sep):
        path = path / default_name
    _atomic_write(path, text)
    print(f"wrote {path}")


def _load_config(path: str, seed_flag):
    raw = json.loads(Path(path).read_text())
    cfg_seed = raw.get("seed")
    seed, source = resolve_seed(seed_flag, cfg_seed)
    raw["seed"] = seed
    cfg = H.ExperimentConfig.from_dict(raw, Path(path).parent)
    print(f"seed {seed} ({source}); config hash {cfg.config_hash()}")
    return cfg


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# ----------------------------------------------------------------------------
# law


def cmd_law_check(args) -> int:
    try:
        law = load_law(args.file)
    except (LawError, OSError) as exc:
        print(f"invalid law: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        gap, quad = spectral_gap_scan(law, 64)
    except LawError as exc:
        print(f"invalid law: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = {
        "dimension": law.dimension,
        "mode": law.mode,
        "lambda": law.lam,
        "moments": {k: moment(law, k) for k in ("size1", "size2", "size3", "m1_squared", "m2")},
        "irreducible": check_irreducible(law),
        "spectral_gap": {"min_gap": gap, "min_gap_over_u2": quad, "grid": 64},
        "E_W2": A.w_second_moment(law),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


# ----------------------------------------------------------------------------
# analytics


def cmd_analytics(args) -> int:
    task = args.subtask
    if task == "exponent" and args.series:
        rows = list(csv.reader(io.StringIO(Path(args.series).read_text())))
        series = [(float(a), float(b)) for a, b in (r[:2] for r in rows if r and not r[0].startswith("t"))]
        slope, half = A.scaling_exponent(series)
        _emit(json.dumps({"slope": slope, "half_width": half}) + "\n", args.out, "exponent.json")
        return EXIT_OK
    if args.law is None:
        raise ValueError("--law is required")
    law = load_law(args.law)
    t = 1.0 if args.t is None else args.t
    if task == "pz":
        table = A.pz_table(law, t, 10 if args.radius is None else args.radius, args.tol or 1e-12)
        buf = io.StringIO()
        buf.write(",".join(f"z_{k + 1}" for k in range(law.dimension)) + ",p\n")
        for s, v in table.values.items():
            buf.write(",".join(str(x) for x in s) + f",{v!r}\n")
        _emit(buf.getvalue(), args.out, "pz.csv")
    elif task == "parseval":
        val = A.parseval_sum(law, t, args.tol or 1e-8)
        _emit(json.dumps({"t": t, "parseval": val}) + "\n", args.out, "parseval.json")
    elif task == "variance":
        r = 8 if args.r is None else args.r
        T = t if args.T is None else args.T
        pred = A.predictions(law, args.p, t, r, T)
        doc = pred.to_dict() | {"t": t, "p": args.p, "r": r, "T": T,
                                "variance_leading": A.variance_prediction(law, args.p, t),
                                "variance_exact": A.variance_exact(law, args.p, t)}
        _emit(json.dumps(doc, indent=2) + "\n", args.out, "variance.json")
    elif task == "tailbound":
        if args.r is None or args.T is None:
            raise ValueError("tailbound needs --r and --T")
        val = A.tail_bound(law, args.r, args.T, window=args.window)
        _emit(json.dumps({"r": args.r, "T": args.T, "tail_bound": val}) + "\n", args.out, "tailbound.json")
    elif task == "exponent":
        grid = [t * 2**k for k in range(5)] if args.t_grid is None else _floats(args.t_grid)
        series = [(s, A.pz_table(law, s, 0).sup) for s in grid]
        slope, half = A.scaling_exponent(series)
        _emit(json.dumps({"quantity": "sup_pz", "t": grid, "slope": slope, "half_width": half}) + "\n",
              args.out, "exponent.json")
    return EXIT_OK


# ----------------------------------------------------------------------------
# simulate and couple


def _trajectory_rows(cfg: H.ExperimentConfig) -> list[tuple]:
    law = cfg.law
    times = sorted(cfg.probe_times or (cfg.horizon,))
    sites = [tuple(s) for s in cfg.trusted_sites]
    r, _ = H.trust(cfg, cfg.horizon, margin=max(max(abs(x) for x in s) for s in sites))
    rows = []
    for k in range(cfg.replicates):
        seed_k = replicate_seed(cfg.seed, k)
        if cfg.variant == "labelled":
            state, _ = H._start(cfg, seed_k, r, "two_type")
            proc = LabelledProcess(state.counts, law, LabelRandomness(seed_k), budget=cfg.budget, record=False)
            for t in times:
                _drive([proc], t)
                rows += [(k, seed_k, t, s, proc.count(s), "Z") for s in sites]
            continue
        variant = "monochromatic" if cfg.variant == "monochromatic" else "two_type"
        state, clock = H._start(cfg, seed_k, r, variant)
        if cfg.variant == "conservative":
            frag = run_conservative(state, law, clock, cfg.horizon, times, sites, budget=cfg.budget)
            for i, t in enumerate(times):
                for j, s in enumerate(sites):
                    for name, arr in (("R", frag.red), ("B", frag.blue), ("P", frag.purple), ("Z", frag.z)):
                        rows.append((k, seed_k, t, s, int(arr[i, j]), name))
        else:
            frag = run_until(state, law, clock, cfg.horizon, times, sites, budget=cfg.budget)
            name = "Y" if cfg.variant == "monochromatic" else "Z"
            for i, t in enumerate(times):
                for j, s in enumerate(sites):
                    rows.append((k, seed_k, t, s, int(frag.values[i, j]), name))
    # replicate, then time, then lexicographic site
    rows.sort(key=lambda row: (row[0], row[2], row[3], row[5]))
    return rows


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, args.seed)
    rows = _trajectory_rows(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "seed", "time", "site", "value", "observable"])
    for k, s, t, site, v, name in rows:
        w.writerow([k, s, repr(float(t)), " ".join(str(x) for x in site), v, name])
    out = Path(args.out or ".")
    _atomic_write(out / "trajectory.csv", buf.getvalue())
    print(f"wrote {out / 'trajectory.csv'}")
    return EXIT_OK


def _parse_config_map(items) -> dict:
    return {tuple(int(x) for x in np.atleast_1d(site)): int(v) for site, v in items}


def cmd_couple(args) -> int:
    cfg = _load_config(args.config, args.seed)
    params = dict(cfg.params)
    if "zeta" in params:
        a = _parse_config_map(params["zeta"])
        b = _parse_config_map(params["zeta_prime"])
    else:
        a, b = H.random_ordered_pair(random.Random(cfg.seed), int(params.get("radius", 3)), cfg.law.dimension)
    res = couple(a, b, cfg.law, cfg.horizon, cfg.seed, cfg.budget)
    report = {
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "violations": [{"t": v["t"], "site": list(v["site"]), "kind": v["kind"]} for v in res.violations],
        "lower": {"events": res.lower.events, "log_sha256": res.lower.log_hash(),
                  "state": [[list(s), v] for s, v in sorted(res.lower.signed().items())]},
        "upper": {"events": res.upper.events, "log_sha256": res.upper.log_hash(),
                  "state": [[list(s), v] for s, v in sorted(res.upper.signed().items())]},
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK if not res.violations else EXIT_FAIL


# ----------------------------------------------------------------------------
# experiments


def _run_experiment(name: str, cfg: H.ExperimentConfig) -> list[H.EstimateRecord]:
    P = dict(cfg.params)
    law = cfg.law
    if name == "mean-growth":
        return H.estimate_mean_growth(cfg, P.get("t_grid") or cfg.probe_times or None)
    if name == "variance-scaling":
        return H.estimate_variance_scaling(cfg, P.get("t_grid") or cfg.probe_times,
                                           P.get("slope_tol", 0.15), tuple(P.get("ratio_band", (0.7, 1.3))))
    if name == "fixation":
        return H.fixation_probe(cfg, P.get("T_grid") or cfg.probe_times, P.get("w", 0.5), P.get("threshold", 0.9))
    if name == "nonfixation":
        return H.nonfixation_probe(cfg, P.get("T_grid") or cfg.probe_times)
    if name == "deviation":
        return H.deviation_probe(cfg, P.get("t_grid") or cfg.probe_times, P.get("c_hat"),
                                 P.get("quantile", 0.7), P.get("floor", 0.05))
    if name == "clt":
        recs = H.normality_test(law, cfg.horizon, int(P.get("samples", 10_000)), cfg.seed)
        zeta = _parse_config_map(P.get("zeta", [[[0] * law.dimension, 1]]))
        recs.append(H.conditional_mean_check(law, zeta, float(P.get("t_mean", 1.0)), cfg.replicates,
                                             cfg.seed, cfg.threads, cfg.budget))
        return recs
    if name == "coupling":
        return [H.coupling_experiment(law, cfg.replicates, cfg.horizon, cfg.seed, int(P.get("radius", 3)),
                                      min(cfg.budget, 10**7))]
    if name == "conservative":
        return H.monochrome_marginal_check(cfg, cfg.horizon)
    if name == "density":
        return H.density_estimate(cfg, P.get("t_grid") or cfg.probe_times or (cfg.horizon,), int(P.get("n", 8)))
    if name == "sandwich":
        return H.sandwich_experiment(law, int(P.get("R", 12)), cfg.horizon, P.get("radii", (2, 4, 8)),
                                     cfg.replicates, cfg.seed, cfg.p, min(cfg.budget, 10**7))
    if name == "moments":
        return H.single_ball_moments(law, cfg.horizon, P.get("u", [math.pi / 2, math.pi]), P.get("z", [0, 1, 2]),
                                     cfg.replicates, cfg.seed, cfg.threads)
    raise ValueError(f"unknown experiment {name!r}")


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.threads is not None:
        cfg = cfg.with_(threads=args.threads)
    records = _run_experiment(args.name, cfg)
    out = Path(args.out or ".")
    jl, summary = H.write_records(records, out, args.name)
    for r in records:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.observable}  estimate={r.estimate:.6g}  se={r.se:.3g}  "
              f"epsilon={r.epsilon:.3g}")
    print(f"wrote {jl} and {summary}")
    return EXIT_OK if H.all_passed(records) else EXIT_FAIL


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abrw", description="Annihilating branching random walks.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")
    sub = parser.add_subparsers(dest="command", required=True)

    law = sub.add_parser("law", help="offspring law utilities")
    law_sub = law.add_subparsers(dest="law_command", required=True)
    check = law_sub.add_parser("check", help="validate a law document")
    check.add_argument("file")
    check.set_defaults(func=cmd_law_check)

    an = sub.add_parser("analytics", help="deterministic predictions")
    an.add_argument("subtask", choices=("pz", "parseval", "variance", "tailbound", "exponent"))
    an.add_argument("--law", help="law document (JSON)")
    an.add_argument("--t", type=float, help="time")
    an.add_argument("--radius", type=int, help="table radius for pz")
    an.add_argument("--r", type=int, help="trust radius for tail bounds")
    an.add_argument("--T", type=float, help="horizon for tail bounds")
    an.add_argument("--tol", type=float, help="numerical tolerance")
    an.add_argument("--p", type=float, default=0.5, help="Bernoulli parameter for variance")
    an.add_argument("--window", action="store_true", help="tail bound for events anywhere in [0, T]")
    an.add_argument("--t-grid", help="comma-separated times for exponent")
    an.add_argument("--series", help="CSV of t,value pairs for exponent")
    an.add_argument("--out", help="output file or directory (default stdout)")
    an.set_defaults(func=cmd_analytics)

    sim = sub.add_parser("simulate", help="write probe trajectories")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    cp = sub.add_parser("couple", help="coupled labelled runs of two ordered configurations")
    cp.add_argument("--config", required=True)
    cp.add_argument("--seed", type=int)
    cp.set_defaults(func=cmd_couple)

    ex = sub.add_parser("experiment", help="run a statistical acceptance experiment")
    ex.add_argument("name", choices=EXPERIMENTS)
    ex.add_argument("--config", required=True)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--threads", type=int)
    ex.add_argument("--out", help="output directory")
    ex.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LawError, A.AnalyticsError, EngineError, LabelError, H.HarnessError,
            ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
