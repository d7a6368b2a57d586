"""Command line entry point: validate, tails, moments, stopped, diagnose.

Exit codes: 0 when every verdict is within tolerance or inconclusive, 1 when
some verdict is outside tolerance, 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import asymptotics as asy
from . import diagnostics as diag
from .dependence import UnsupportedLink, sample_joint
from .distributions import DistributionError
from .model import Scenario, ScenarioError, load_scenario, probe_assumption_b
from .simulate import DivergenceError, parse_phi

EXIT_OK, EXIT_TOL, EXIT_CONFIG = 0, 1, 2
DEFAULT_LEVELS = (1e-2, 1e-3, 1e-4)
MANIFEST = "manifests.jsonl"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def dat_text(points) -> str:
    return "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in points)


class Writer:
    """Collects result files under one directory and records them in the manifest."""

    def __init__(self, out: Path, fmt: str):
        self.out = out
        self.fmt = fmt
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def put(self, name: str, text: str):
        (self.out / name).write_text(text)
        self.files.append(name)

    def report(self, prefix: str, rep: asy.ConvergenceReport):
        stem = f"{prefix}_{_slug(rep.quantity)}"
        if self.fmt in ("csv", "both"):
            self.put(stem + ".csv", csv_text(rep.csv_rows()))
        for curve, pts in rep.curves().items():
            self.put(f"{stem}_{curve}.dat", dat_text(pts))

    def manifest(self, entry: dict):
        entry = dict(entry, files=list(self.files))
        with open(self.out / MANIFEST, "a") as fh:
            fh.write(json.dumps(_clean(entry), sort_keys=True) + "\n")


def _slug(q: str) -> str:
    return q.replace("[", "").replace("]", "")


# ---------------------------------------------------------------------------
# commands


def _scenario(args) -> Scenario:
    if not args.scenario:
        raise ConfigError("--scenario is required")
    return load_scenario(args.scenario)


def _levels(args, s: Scenario) -> list[float]:
    if args.levels:
        try:
            levels = [float(v) for v in args.levels.split(",")]
        except ValueError:
            raise ConfigError(f"--levels must be comma-separated numbers, got {args.levels!r}") from None
    else:
        levels = list(s.levels or DEFAULT_LEVELS)
    if any(not 0 < v < 1 for v in levels):
        raise ConfigError("levels must lie in (0, 1)")
    return sorted(set(levels), reverse=True)


def _run_reports(args, s: Scenario, command: str, quantities, phi=None) -> int:
    levels = _levels(args, s)
    st = asy.MCSettings(args.m, args.seed, args.method, args.workers, phi)
    t0 = time.perf_counter()
    reports = asy.convergence_reports(s, quantities, levels, st, args.tol)
    w = Writer(Path(args.out), args.format)
    for rep in reports:
        w.report(command, rep)
    summary = {"command": command, "scenario": s.hash, "regime": s.regime, "levels": levels,
               "m": args.m, "seed": args.seed, "tol": reports[0].tol if reports else args.tol,
               "masked": list(asy.masked_quantities(s)), "phi": phi.to_record() if phi else None,
               "reports": [r.to_record() for r in reports]}
    if args.format in ("json", "both"):
        w.put(f"{command}.json", json_text(summary))
    w.manifest({"scenario": s.hash, "command": command, "seed": args.seed, "m": args.m, "workers": args.workers,
                "grid": {"levels": levels}, "version": __version__,
                "wall_clock": round(time.perf_counter() - t0, 3)})
    status = EXIT_OK
    for rep in reports:
        for row in rep.rows:
            print(f"{rep.quantity:>20s}  level={row.level:.1e}  x={row.x:.6g}  ratio={row.ratio:.4f}  {row.verdict}")
        bad = rep.first_failure()
        if bad is not None and status == EXIT_OK:
            lo, hi = bad.lower * (1 - rep.tol) / bad.asym, bad.upper * (1 + rep.tol) / bad.asym
            print(f"FAIL {rep.quantity} at x={bad.x:.6g} (level {bad.level:g}): ratio {bad.ratio:.4f} "
                  f"outside [{lo:.4f}, {hi:.4f}]", file=sys.stderr)
            status = EXIT_TOL
    return status


def cmd_validate(args) -> int:
    try:
        s = _scenario(args)
    except ScenarioError as exc:
        print(json_text({"status": "fail", "violation": exc.violation, "message": str(exc)}), end="")
        return EXIT_CONFIG
    xs = list(s.xs) or list(np.geomspace(10.0, 1e4, 13))
    probes = []
    for i, j in itertools.combinations(range(s.n), 2):
        try:
            probes.append(probe_assumption_b(s, (i, j), xs).to_record())
        except (ScenarioError, UnsupportedLink) as exc:
            probes.append({"pair": [i + 1, j + 1], "verdict": "unavailable", "reason": str(exc)})
    rec = {"status": "pass", "scenario": s.hash, "n": s.n, "regime": s.regime, "probes": probes}
    print(json_text(rec), end="")
    if args.out:
        w = Writer(Path(args.out), "json")
        w.put("validate.json", json_text(rec))
        w.manifest({"scenario": s.hash, "command": "validate", "version": __version__})
    return EXIT_OK


def cmd_tails(args) -> int:
    s = _scenario(args)
    return _run_reports(args, s, "tails", list(asy.QUANTITIES) + ["ruin"])


def cmd_moments(args) -> int:
    s = _scenario(args)
    phi = parse_phi(args.phi)
    quantities = ["genmoment", "es"] + [f"mes[{j + 1}]" for j in range(s.n)]
    return _run_reports(args, s, "moments", quantities, phi)


def cmd_stopped(args) -> int:
    s = _scenario(args)
    if s.stopping is None:
        raise ConfigError("scenario has no stopping law")
    q = ["stopped_sum", "stopped_partial_max", "stopped_max_summand", "ruin_random"]
    return _run_reports(args, s, "stopped", q)


def _read_sample(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).ravel()
    return np.loadtxt(path, ndmin=1).ravel()


def cmd_diagnose(args) -> int:
    w = Writer(Path(args.out), args.format)
    t0 = time.perf_counter()
    if args.sample:
        data = _read_sample(args.sample)
        k = args.k or max(30, data.size // 100)
        rec = {"source": "sample", "m": int(data.size), "hill": diag.hill(data, k).to_record()}
        pos = np.sort(data[data > 0])
        xs = np.quantile(pos, np.linspace(0.9, 0.999, 200))
        rec["l_index"] = _scan_summary(diag.l_index_scan(data, xs=xs))
        rec["matuszewska"] = diag.matuszewska_scan(data, xs=np.quantile(pos, np.linspace(0.5, 0.9, 50))).to_record()
        key = "sample"
    else:
        s = _scenario(args)
        rec = {"source": "scenario", "scenario": s.hash, "losses": [], "pairs": [], "links": []}
        smp = sample_joint(s.joint, args.seed, args.m, args.workers)
        for i, F in enumerate(s.losses):
            scan = diag.l_index_scan(F)
            ms = diag.matuszewska_scan(F)
            k = args.k or max(30, args.m // 100)
            entry = {"index": i + 1, "family": F.family, "declared": asdict(F.meta()),
                     "l_index": _scan_summary(scan), "matuszewska": ms.to_record(),
                     "hill": diag.hill(smp.x[:, i], k).to_record() if args.m >= 10 * k else None}
            rec["losses"].append(entry)
            if args.format in ("csv", "both"):
                w.put(f"diagnose_ratio_loss{i + 1}.csv", csv_text(_scan_rows(scan)))
            rec["links"].append({"index": i + 1, "residual": diag.uniformity_residual(s, i, 1e-4)})
        xs = _tai_grid(s)
        for i, j in itertools.combinations(range(s.n), 2):
            curve = diag.tai_curve(s, (i, j), xs)
            entry = curve.to_record()
            try:
                entry["pair_residual"] = diag.uniformity_residual(s, (i, j), 1e-4)
            except UnsupportedLink as exc:
                entry["pair_residual"] = None
                entry["pair_residual_reason"] = str(exc)
            rec["pairs"].append(entry)
            w.put(f"diagnose_tai_{i + 1}_{j + 1}.dat", dat_text(zip(curve.xs, curve.ratio)))
        key = s.hash
    if args.format in ("json", "both"):
        w.put("diagnose.json", json_text(rec))
    w.manifest({"scenario": key, "command": "diagnose", "seed": args.seed, "m": args.m, "workers": args.workers,
                "version": __version__, "wall_clock": round(time.perf_counter() - t0, 3)})
    print(json_text(_brief(rec)), end="")
    return EXIT_OK


def _tai_grid(s: Scenario) -> np.ndarray:
    x0 = max(float(F.isf(1e-2)) for F in s.losses)
    return x0 * 2.0 ** np.arange(10)


def _scan_summary(scan: diag.RatioScan) -> dict:
    return {"l_hat": scan.l_hat, "alpha_hat": scan.alpha_hat, "mode": scan.mode, "flags": list(scan.flags),
            "fit": scan.notes.get("fit"), "fit_vs": scan.notes.get("fit_vs")}


def _scan_rows(scan: diag.RatioScan):
    rows = [["x"] + [f"v={v!r}" for v in scan.vs]]
    for k, x in enumerate(scan.xs):
        rows.append([repr(x)] + [repr(float(scan.ratios[r, k])) for r in range(len(scan.vs))])
    return rows


def _brief(rec: dict) -> dict:
    out = {k: v for k, v in rec.items() if k not in ("pairs",)}
    if "pairs" in rec:
        out["pairs"] = [{"pair": p["pair"], "verdict": p["verdict"]} for p in rec["pairs"]]
    return out


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwtail", description="Tail asymptotics of randomly weighted sums.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mc=True):
        sp.add_argument("--scenario", help="scenario YAML file")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--format", choices=("csv", "json", "both"), default="both")
        if mc:
            sp.add_argument("--m", type=int, default=100_000, help="Monte Carlo sample size")
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("validate", help="check a scenario and probe the weight-tail assumption")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_validate)

    for name, func, help_ in (("tails", cmd_tails, "sum, maximum and ruin tails vs first-order asymptotics"),
                              ("moments", cmd_moments, "generalized moments, ES and MES vs their bounds"),
                              ("stopped", cmd_stopped, "randomly stopped sums and random-horizon ruin")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--levels", help="comma-separated exceedance levels, e.g. 1e-3,1e-4")
        sp.add_argument("--tol", type=float, default=None, help="relative tolerance (default: scenario's)")
        sp.add_argument("--method", choices=("crude", "conditional"), default="conditional")
        if name == "moments":
            sp.add_argument("--phi", default="identity", help="one | identity | power:P | clamped_exp:CAP")
        sp.set_defaults(func=func)

    sp = sub.add_parser("diagnose", help="index scans, tail-independence curves and link residuals")
    common(sp)
    sp.add_argument("--sample", help="file of positive reals (text or .npy) instead of a scenario")
    sp.add_argument("--k", type=int, default=None, help="Hill order-statistic count")
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "m", 1) < 1 or getattr(args, "workers", 1) < 1:
        print("error: --m and --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "tol", None) is not None and not 0 < args.tol < 1:
        print("error: --tol must lie in (0, 1)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, DivergenceError, asy.TheoremScopeError, UnsupportedLink,
            DistributionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
