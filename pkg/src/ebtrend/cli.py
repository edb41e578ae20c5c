"""Command-line front end.

Subcommands: ``analyze`` (real matrices), ``simulate`` (benchmark settings),
``check-design`` (orthogonality report) and ``diagnose`` (plot data). All
commands are deterministic given their inputs, the seed and the config;
exit codes: 0 success, 2 parse/config error, 3 design-check failure,
4 method not applicable, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import priorfit, pvalues, simharness, trend as trend_mod
from .linmodel import Contrast, Design, DesignError, check_orthogonality, \
    intensity_contrast
from .multiplicity import q_values
from .priorfit import BinningError, InputError
from .pvalues import MethodId, QuadratureError

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DESIGN = 3
EXIT_METHOD = 4
EXIT_NUMERIC = 5

TRENDED_METHODS = {MethodId.RegInvChisq, MethodId.RegNpmle,
                   MethodId.JointNpmle, MethodId.Map}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_PARSE):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _delimiter(path: str) -> str:
    return "," if path.endswith(".csv") else "\t"


def _read_table(path: str):
    """Read a delimited file: (header, row_ids, string cell rows)."""
    if not os.path.exists(path):
        raise CliError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=_delimiter(path)))
    if len(rows) < 2:
        raise CliError(f"{path}: need a header and at least one data row")
    return rows[0], rows[1:]


def _parse_matrix(path: str):
    """Expression matrix: header = sample/extra column names, first column = unit IDs."""
    header, data = _read_table(path)
    col_names = header[1:]
    unit_ids = [row[0] for row in data]
    cells = np.empty((len(data), len(col_names)))
    for i, row in enumerate(data):
        if len(row) != len(header):
            raise CliError(f"{path}: line {i + 2} has {len(row)} fields, "
                           f"expected {len(header)}")
        try:
            cells[i] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise CliError(f"{path}: line {i + 2}: {exc}") from exc
    return unit_ids, col_names, cells


def _parse_design(path: str):
    """Design matrix CSV: header = covariate names, one row per sample."""
    header, data = _read_table(path)
    names = header
    try:
        x = np.array([[float(v) for v in row] for row in data])
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc
    try:
        return names, Design(x)
    except DesignError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DESIGN) from exc


def _parse_contrast(spec: str, design: Design) -> tuple:
    if "=" not in spec:
        raise CliError(f"contrast must look like NAME=w1,w2,...: {spec!r}")
    name, _, weights = spec.partition("=")
    try:
        c = np.array([float(v) for v in weights.split(",")])
    except ValueError as exc:
        raise CliError(f"bad contrast weights in {spec!r}: {exc}") from exc
    try:
        return name, Contrast.from_design(c, design)
    except DesignError as exc:
        raise CliError(str(exc), EXIT_DESIGN) from exc


def _parse_methods(spec: str | None, default):
    if spec is None:
        return list(default)
    by_name = {m.value: m for m in MethodId}
    out = []
    for token in spec.split(","):
        token = token.strip()
        if token not in by_name:
            raise CliError(f"unknown method {token!r}; choose from "
                           f"{', '.join(by_name)}")
        out.append(by_name[token])
    if not out:
        raise CliError("method list is empty")
    return out


def _discrete_rule(values: np.ndarray):
    """Bin edges for discrete side information: one stratum per observed value."""
    u = np.unique(values)
    if u.size < 2:
        return ("edges", np.array([u[0] - 0.5, u[0] + 0.5]))
    mids = 0.5 * (u[:-1] + u[1:])
    edges = np.concatenate([[u[0] - 0.5], mids, [u[-1] + 0.5]])
    return ("edges", edges)


def _resolve_side(side: str, col_names, cells):
    """Split matrix columns into responses and optional external side values."""
    if side == "intensity":
        return "average_intensity", None, cells, col_names
    if side == "manorm":
        return "manorm_tilde", None, cells, col_names
    if side.startswith("column:"):
        name = side.split(":", 1)[1]
        if name not in col_names:
            raise CliError(f"side column {name!r} not found in the matrix header")
        j = col_names.index(name)
        keep = [k for k in range(len(col_names)) if k != j]
        return "external", cells[:, j], cells[:, keep], [col_names[k] for k in keep]
    raise CliError(f"unknown --side {side!r}; use intensity, manorm or column:NAME")


def _prepare_analysis(args):
    unit_ids, col_names, cells = _parse_matrix(args.matrix)
    design_names, design = _parse_design(args.design)
    side_mode, side_values, y, sample_names = _resolve_side(
        args.side, col_names, cells)
    if y.shape[1] != design.n_samples:
        raise CliError(f"matrix has {y.shape[1]} sample columns but the design "
                       f"has {design.n_samples} rows")
    _, contrast = _parse_contrast(args.contrast, design)
    return unit_ids, design, contrast, side_mode, side_values, y


def _gate_orthogonality(args, design, contrast, side_mode, methods):
    if side_mode != "average_intensity" or not (TRENDED_METHODS & set(methods)):
        return
    report = check_orthogonality(design, contrast, intensity_contrast(design))
    if not report.ok:
        msg = (f"orthogonality check failed: c_theta' (X'X)^-1 c_A = "
               f"{report.value:.6g}, ones in column space: "
               f"{report.ones_in_colspace}")
        if args.allow_nonorthogonal:
            print(f"warning: {msg}; proceeding (--allow-nonorthogonal)",
                  file=sys.stderr)
        else:
            raise CliError(msg + "; trended methods blocked "
                           "(override with --allow-nonorthogonal)", EXIT_DESIGN)


def _run_pipeline(args, methods):
    unit_ids, design, contrast, side_mode, side_values, y = _prepare_analysis(args)
    for mid in methods:
        if mid == MethodId.Oracle:
            raise CliError("oracle requires simulation truth", EXIT_METHOD)
        if mid == MethodId.JointNpmle and side_mode != "average_intensity":
            raise CliError("method requires average intensity", EXIT_METHOD)
        if mid == MethodId.DiscreteJoint and side_mode != "external":
            raise CliError("method requires discrete external side information",
                           EXIT_METHOD)
    _gate_orthogonality(args, design, contrast, side_mode, methods)
    rule = None
    if side_values is not None and MethodId.DiscreteJoint in methods:
        rule = _discrete_rule(side_values)
    res = simharness.method_pvalues(
        y, design, contrast, methods, side_mode=side_mode,
        side_values=side_values, discrete_bin_rule=rule)
    if res.failures:
        details = "; ".join(f"{m.value}: {msg}" for m, msg in res.failures.items())
        raise CliError(f"numerical failure in {details}", EXIT_NUMERIC)
    return unit_ids, res, methods


def cmd_analyze(args) -> int:
    default = [m for m in MethodId if m != MethodId.Oracle
               and m != MethodId.DiscreteJoint]
    methods = _parse_methods(args.methods, default)
    unit_ids, res, methods = _run_pipeline(args, methods)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    ordered = [m for m in MethodId if m in res.pvalues]
    qvals = {m: q_values(res.pvalues[m]) for m in ordered}
    with open(outdir / "analyze.tsv", "w", newline="") as fh:
        header = (["unit_id"] + [f"p_{m.value}" for m in ordered]
                  + [f"q_{m.value}" for m in ordered])
        fh.write("\t".join(header) + "\n")
        for i, uid in enumerate(unit_ids):
            row = ([uid] + [_fmt(res.pvalues[m][i]) for m in ordered]
                   + [_fmt(qvals[m][i]) for m in ordered])
            fh.write("\t".join(row) + "\n")
    for mid, reason in sorted(res.skipped.items(), key=lambda kv: kv[0].value):
        print(f"skipped {mid.value}: {reason}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.preset not in simharness.PRESETS:
        raise CliError(f"unknown preset {args.preset!r}; choose from "
                       f"{', '.join(simharness.PRESETS)}")
    cfg = simharness.preset(args.preset, n=args.n, reps=args.reps,
                            seed=args.seed, alpha=args.alpha)
    methods = _parse_methods(args.methods, simharness.DEFAULT_SIM_METHODS)
    result = simharness.monte_carlo(cfg, methods)
    if result.failures:
        details = "; ".join(f"rep {rep} {m.value}: {msg}"
                            for (rep, m), msg in result.failures.items())
        raise CliError(f"numerical failure in {details}", EXIT_NUMERIC)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "simulate.tsv", "w", newline="") as fh:
        fh.write("method\tfdr\tfdr_se\tpower\tpower_se\n")
        for mid in methods:
            if mid in result.summary:
                s = result.summary[mid]
                fh.write("\t".join([mid.value, _fmt(s.fdr), _fmt(s.fdr_se),
                                    _fmt(s.power), _fmt(s.power_se)]) + "\n")
            else:
                fh.write("\t".join([mid.value, "--", "--", "--", "--"]) + "\n")
    if args.per_rep:
        with open(outdir / "replicates.tsv", "w", newline="") as fh:
            fh.write("method\trep\tv\tr\tfdp\tpower\n")
            for mid in methods:
                for rep, met in enumerate(result.per_rep.get(mid, [])):
                    fh.write("\t".join([mid.value, str(rep), str(met.v),
                                        str(met.r), _fmt(met.fdp),
                                        _fmt(met.power)]) + "\n")
    return EXIT_OK


def cmd_check_design(args) -> int:
    _, design = _parse_design(args.design)
    _, contrast = _parse_contrast(args.contrast, design)
    if args.side_contrast:
        _, side = _parse_contrast(args.side_contrast, design)
    else:
        side = intensity_contrast(design)
    report = check_orthogonality(design, contrast, side)
    payload = {"ones_in_colspace": report.ones_in_colspace,
               "c_theta_gram_c_A": report.value, "ok": report.ok}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "check_design.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report.ok else EXIT_DESIGN


def cmd_diagnose(args) -> int:
    methods = _parse_methods(
        args.methods, [MethodId.UntrendedInvChisq, MethodId.RegInvChisq,
                       MethodId.RegNpmle, MethodId.Map])
    unit_ids, res, methods = _run_pipeline(args, methods)
    units = res.extras["units"]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    curve = res.extras.get("trend")
    if curve is None:
        pos = units.s2 > 0
        curve = trend_mod.fit_trend(units.m[pos], np.log(units.s2[pos]))
    grid = np.linspace(float(units.m.min()), float(units.m.max()), 200)
    m_hat, xi2_hat = trend_mod.eval_trend(curve, grid)
    with open(outdir / "trend.tsv", "w", newline="") as fh:
        fh.write("m\tm_hat\txi2_hat\n")
        for g, mh, xh in zip(grid, m_hat, xi2_hat):
            fh.write(f"{_fmt(g)}\t{_fmt(mh)}\t{_fmt(xh)}\n")

    prior = res.extras.get("prior_reg")
    if prior is None:
        prior = priorfit.fit_reg_npmle(units.s2, units.m, units.df, curve)
    with open(outdir / "prior_reg_npmle.tsv", "w", newline="") as fh:
        fh.write("tau2\tweight\n")
        for t2, w in zip(prior.support, prior.weights):
            fh.write(f"{_fmt(t2)}\t{_fmt(w)}\n")

    # Marginal density of V^2 = S^2/xi2 plus histogram counts on a 400-pt grid.
    v2 = units.s2 / curve.xi2(units.m)
    pos = v2[v2 > 0]
    grid400 = np.linspace(0.0, float(pos.max()), 400)
    dens = priorfit.mixture_density_1d(prior, units.df, grid400)
    counts, _ = np.histogram(v2, bins=400, range=(0.0, float(pos.max())))
    with open(outdir / "marginal_density.tsv", "w", newline="") as fh:
        fh.write("v2\tfitted_density\thistogram_count\n")
        for g, d, c in zip(grid400, dens, np.append(counts, 0)[:400]):
            fh.write(f"{_fmt(g)}\t{_fmt(d)}\t{int(c)}\n")

    inv = res.extras.get("invchisq_trended")
    if inv is None:
        inv = priorfit.fit_invchisq_trended(units.s2, units.m, units.df, curve)
    (outdir / "invchisq.json").write_text(json.dumps(
        {"kappa0": inv.kappa0 if np.isfinite(inv.kappa0) else "inf",
         "s0_sq": inv.s0_sq}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _add_analysis_args(p):
    p.add_argument("--matrix", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--contrast", required=True, metavar="NAME=w1,w2,...")
    p.add_argument("--side", default="intensity")
    p.add_argument("--methods", default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-nonorthogonal", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebtrend")
    parser.add_argument("--threads", type=int, default=None,
                        help="accepted for compatibility; outputs are "
                             "computed with single-threaded BLAS so results "
                             "do not depend on this setting")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_analysis_args(sub.add_parser("analyze"))

    sim = sub.add_parser("simulate")
    sim.add_argument("--preset", required=True)
    sim.add_argument("--reps", type=int, default=20)
    sim.add_argument("--n", type=int, default=10_000)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--methods", default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--per-rep", action="store_true")

    chk = sub.add_parser("check-design")
    chk.add_argument("--design", required=True)
    chk.add_argument("--contrast", required=True, metavar="NAME=w1,w2,...")
    chk.add_argument("--side-contrast", default=None, metavar="NAME=w1,w2,...")
    chk.add_argument("--out", default=None)

    _add_analysis_args(sub.add_parser("diagnose"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code not in (0, None) else 0

    if args.threads is not None and args.threads < 1:
        print("error: --threads must be a positive integer", file=sys.stderr)
        return EXIT_PARSE

    dispatch = {"analyze": cmd_analyze, "simulate": cmd_simulate,
                "check-design": cmd_check_design, "diagnose": cmd_diagnose}
    try:
        # Multithreaded BLAS changes floating-point reduction order, which
        # breaks byte-for-byte reproducibility of the outputs. Pin the
        # numerical core to one thread so results never depend on --threads
        # or the host's BLAS configuration.
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            return dispatch[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (BinningError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METHOD
    except DesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DESIGN
    except (InputError, QuadratureError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
