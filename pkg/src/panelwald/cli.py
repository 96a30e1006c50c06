"""Command-line entry point: ``panelwald {validate,fit,diagnose,simulate,replicate-table}``.

Exit codes: 0 success, 1 user error, 2 numerical warning-level failure.
Every CSV output starts with ``# key=value`` manifest lines; the
``generated_at`` line is the only one that varies between identical runs and
is left out of ``manifest_hash``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .dsl import Op, parse_model
from .errors import ModelSyntaxError, PanelWaldError, DataError, SimulationAborted, UnknownScenario
from .estimator import (FitOptions, SampleMoments, fit as ml_fit, fit_independence, fit_indices,
                        start_values)
from .matrices import build_ram, identification_check
from .reference import CALIBRATION_COLUMNS, DETECTION_COLUMNS, PRESETS
from .simulator import SimulationConfig, get_scenario, run_calibration, run_detection
from .twoslw import (DELTA_COLUMNS, LM_COLUMNS, STAGE_COLUMNS, TwoSlwConfig, _jsonable,
                     candidate_universe, format_csv, run_2slw)

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("panelwald")


class UserError(Exception):
    pass


# --------------------------------------------------------------------------
# manifest and output helpers


class Run:
    """Manifest of one invocation plus the files it writes."""

    def __init__(self, args, command):
        self.out = Path(args.out)
        self.manifest = {
            "tool_version": __version__,
            "command": command,
            "model": getattr(args, "model", None),
            "data": getattr(args, "data", None),
            "scenario": getattr(args, "scenario", None) or getattr(args, "table_id", None),
            "seed": getattr(args, "seed", None),
        }
        for k in ("n", "reps", "alpha", "top_k", "epc_min", "sqrt"):
            v = getattr(args, k, None)
            if v is not None:
                self.manifest[k] = v
        self.generated_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    @property
    def digest(self) -> str:
        text = json.dumps(self.manifest, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def header(self) -> list:
        lines = [f"{k}={'' if v is None else v}" for k, v in self.manifest.items()]
        return lines + [f"manifest_hash={self.digest}", f"generated_at={self.generated_at}"]

    def _path(self, name) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def write_csv(self, name, rows, columns, decimals=3):
        path = self._path(name)
        path.write_text(format_csv(rows, columns, self.header(), decimals), encoding="utf-8")
        return path

    def write_json(self, name, payload):
        doc = {"manifest": dict(self.manifest, manifest_hash=self.digest,
                                generated_at=self.generated_at)}
        doc.update(payload)
        path = self._path(name)
        path.write_text(json.dumps(_jsonable(doc), indent=2) + "\n", encoding="utf-8")
        return path

    def write_text(self, name, text):
        path = self._path(name)
        body = "".join(f"# {line}\n" for line in self.header()) + text
        path.write_text(body, encoding="utf-8")
        return path


def _read_model(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read model file {path}: {exc.strerror}") from None
    from .dsl import ModelSource
    return parse_model(ModelSource(text, Path(path).stem))


def _read_moments(path, spec) -> SampleMoments:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UserError(f"cannot read data file {path}: {exc}") from None
    observed = list(spec.catalog.observed)
    missing = [v for v in observed if v not in df.columns]
    if missing:
        from .errors import MissingColumn
        raise MissingColumn(f"data lacks columns: {', '.join(missing)}")
    df = df[observed]
    try:
        df = df.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError):
        raise DataError("data columns must be numeric") from None
    complete = df.dropna()
    dropped = len(df) - len(complete)
    if dropped:
        log.warning("listwise deletion dropped %d of %d rows", dropped, len(df))
    return SampleMoments.from_data(complete.to_numpy(float), observed)


def _matrix_rows(M, rows, cols):
    return [dict({"": r}, **{c: float(M[i, j]) for j, c in enumerate(cols)})
            for i, r in enumerate(rows)]


def _dump_matrices(run, ram, theta, prefix=""):
    A, S = ram.matrices(theta)
    v = list(ram.variables)
    run.write_csv(f"{prefix}A.csv", _matrix_rows(A, v, v), [""] + v, decimals=6)
    run.write_csv(f"{prefix}S.csv", _matrix_rows(S, v, v), [""] + v, decimals=6)
    run.write_csv(f"{prefix}F.csv", _matrix_rows(ram.F, list(ram.observed), v), [""] + v, decimals=0)


def _fit_options(args):
    return FitOptions()


def _twoslw_config(args):
    kw = {}
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.top_k is not None:
        kw["top_k"] = args.top_k
    if args.epc_min is not None:
        kw["epc_min"] = args.epc_min
    try:
        return TwoSlwConfig(**kw)
    except ValueError as exc:
        raise UserError(str(exc)) from None


# --------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    spec = _read_model(args.model)
    ram = build_ram(spec)
    p = ram.n_observed
    df = p * (p + 1) // 2 - ram.n_params
    unit = SampleMoments(np.eye(p), p + 1, ram.observed)
    theta = start_values(ram, unit)
    ident = identification_check(ram, theta)
    cat = spec.catalog
    status = EXIT_OK
    print(f"model: {spec.name}")
    print(f"observed = {p}, free parameters = {ram.n_params}")
    print(f"df = {df}")
    print(f"candidate universe = {len(candidate_universe(spec))}")
    for q in spec.params:
        if q.op is Op.REGRESSION:
            wl, wr = cat.wave(q.lhs), cat.wave(q.rhs)
            if wl is not None and wr is not None and wr > wl:
                print(f"warning: TemporalOrderViolation: {q.lhs} ~ {q.rhs} "
                      "(later wave predicts an earlier one)")
    if df < 0:
        print(f"error: negative degrees of freedom ({df})")
        status = EXIT_NUMERIC
    if ident.full_rank:
        print(f"identification: full rank {ident.rank}, condition {ident.condition:.3g}")
    else:
        names = ", ".join(ram.param_names[k] for k in ident.deficient)
        print(f"identification: rank {ident.rank} < {ident.n_params}; suspect: {names}")
        status = EXIT_NUMERIC
    if args.dump_matrices:
        run = Run(args, "validate")
        _dump_matrices(run, ram, theta)
    return status


def _fit_files(run, res, idx):
    run.write_csv("parameters.csv", res.param_table(),
                  ["name", "lhs", "op", "rhs", "estimate", "se", "z", "p_value"])
    fit_row = dict(chi2=res.T_ml, df=res.df, p_value=res.p_value, cfi=idx.cfi, nfi=idx.nfi,
                   tli=idx.tli, rmsea=idx.rmsea, n=res.n, converged=res.converged,
                   warnings=";".join(sorted(w.value for w in res.warnings)))
    run.write_csv("fit.csv", [fit_row], list(fit_row))
    run.write_json("fit.json", dict(fit=res.to_dict(), indices=idx.to_dict()))


def _fit_status(res) -> int:
    if not res.converged:
        print("warning: estimation did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    if res.warnings:
        print("warning: " + ", ".join(sorted(w.value for w in res.warnings)), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = _read_model(args.model)
    moments = _read_moments(args.data, spec)
    res = ml_fit(spec, moments, _fit_options(args))
    idx = fit_indices(res, fit_independence(moments))
    run = Run(args, "fit")
    _fit_files(run, res, idx)
    if args.dump_matrices:
        _dump_matrices(run, res.ram, res.theta_hat)
    print(f"chi2 = {res.T_ml:.3f}, df = {res.df}, p = {res.p_value:.3f}, "
          f"CFI = {idx.cfi:.3f}, RMSEA = {idx.rmsea:.3f}")
    return _fit_status(res)


def cmd_diagnose(args) -> int:
    spec = _read_model(args.model)
    moments = _read_moments(args.data, spec)
    cfg = _twoslw_config(args)
    base = ml_fit(spec, moments, _fit_options(args))
    run = Run(args, "diagnose")
    if not base.converged:
        _fit_files(run, base, fit_indices(base, fit_independence(moments)))
        return _fit_status(base)
    report = run_2slw(spec, moments, cfg, baseline_fit=base)
    run.write_csv("lm_table.csv", report.lm_rows(), LM_COLUMNS)
    run.write_csv("stage_log.csv", report.stage_rows(), STAGE_COLUMNS)
    run.write_csv("deltas.csv", report.delta_rows(), DELTA_COLUMNS)
    run.write_json("report.json", report.to_dict())
    if report.improved_spec is not None:
        run.write_text("improved_model.txt", report.improved_spec.to_text() + "\n")
    if args.dump_matrices:
        _dump_matrices(run, report.improved_fit.ram, report.improved_fit.theta_hat)
    if report.retained:
        for p in report.retained:
            print(f"{p.lhs} {p.op.value} {p.rhs}")
    else:
        print("no parameters retained")
    return EXIT_OK


def _sim_config(args, n=None, reps=None) -> SimulationConfig:
    try:
        return SimulationConfig(n=n if n is not None else args.n,
                                reps=reps if reps is not None else args.reps,
                                seed=args.seed, alpha=args.alpha if args.alpha is not None else 0.05,
                                sqrt_method=args.sqrt)
    except ValueError as exc:
        raise UserError(str(exc)) from None


def _replication_rows(summary):
    rows = []
    for r in summary.replications:
        row = {k: r.get(k) for k in ("rep", "ok", "chi2", "df", "p", "nfi", "cfi", "tli", "rmsea")}
        row["warnings"] = ";".join(r.get("warnings", ()))
        row["retained"] = ";".join(r.get("retained", ()))
        row["error"] = r.get("error")
        rows.append(row)
    return rows


_REP_COLUMNS = ["rep", "ok", "chi2", "df", "p", "nfi", "cfi", "tli", "rmsea", "warnings",
                "retained", "error"]


def _run_scenario(sc, cfg, args, detection):
    if detection:
        tcfg = _twoslw_config(args)
        return run_detection(sc, cfg, tcfg)
    return run_calibration(sc, cfg)


def cmd_simulate(args) -> int:
    sc = get_scenario(args.scenario)
    if args.n is None:
        args.n = 1000
    if args.reps is None:
        args.reps = 500
    cfg = _sim_config(args)
    detection = args.mode == "detection" or (args.mode == "auto" and bool(sc.truth))
    summ = _run_scenario(sc, cfg, args, detection)
    run = Run(args, "simulate")
    row = summ.row()
    run.write_csv("summary.csv", [row], list(row))
    run.write_json("summary.json", dict(summary=row, scenario=sc.to_manifest()))
    run.write_text("scenario.yaml", yaml.safe_dump(sc.to_manifest(), sort_keys=False))
    if args.raw:
        run.write_csv("replications.csv", _replication_rows(summ), _REP_COLUMNS)
    print(f"{sc.name}: n = {cfg.n}, reps = {cfg.reps}, ok = {summ.n_ok}, "
          f"mean chi2 = {summ.mean_chi2:.3f} (df = {summ.df}), "
          f"rejection rate = {summ.rejection_rate:.3f}")
    if summ.detection_rate is not None:
        for k, v in summ.detection_rate.items():
            print(f"  detection {k}: {v:.3f}")
        print(f"  false positives per replication: {summ.false_positive_rate:.3f}")
    return EXIT_OK


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_replicate_table(args) -> int:
    table = args.table_id.upper()
    if table not in PRESETS:
        raise UserError(f"unknown table id {args.table_id!r}; choose from {', '.join(PRESETS)}")
    kind, scenario, default_n, default_reps, ref = PRESETS[table]
    sc = get_scenario(scenario)
    reps = args.reps if args.reps is not None else default_reps
    args.scenario = scenario
    run = Run(args, "replicate-table")
    rows = []
    if kind == "calibration":
        sizes = [args.n] if args.n is not None else [r["n"] for r in ref]
        by_n = {r["n"]: r for r in ref}
        for n in sizes:
            summ = run_calibration(sc, _sim_config(args, n=n, reps=reps))
            row = {"n": n}
            ref_row = by_n.get(n, {})
            for col, ours in zip(CALIBRATION_COLUMNS[1:],
                                 (summ.mean_chi2, summ.sd_chi2, summ.mean_p, summ.rejection_rate,
                                  summ.mean_nfi, summ.mean_cfi, summ.mean_rmsea)):
                row[f"reference_{col}"] = ref_row.get(col)
                row[f"ours_{col}"] = ours
            rows.append(row)
            print(f"{table} n = {n}: chi2 = {summ.mean_chi2:.3f}, SD = {summ.sd_chi2:.3f}, "
                  f"rejection rate = {summ.rejection_rate:.3f}")
        columns = ["n"] + [f"{w}_{c}" for c in CALIBRATION_COLUMNS[1:]
                           for w in ("reference", "ours")]
    else:
        n = args.n if args.n is not None else default_n
        summ = run_detection(sc, _sim_config(args, n=n, reps=reps), _twoslw_config(args))
        ok = [r for r in summ.replications if r["ok"]]
        for ref_row in ref:
            key = ref_row["parameter"]
            stats = [r["candidates"].get(key) for r in ok]
            seen = [s for s in stats if s]
            row = {"parameter": key, "truth": ref_row["truth"]}
            for col, field_name in (("lm_chi2", "lm"), ("epc", "epc"), ("wald", "wald"),
                                    ("p_value", "p")):
                row[f"reference_{col}"] = ref_row[col]
                row[f"ours_mean_{col}"] = _mean(s[field_name] for s in seen)
            row["ours_in_top_k"] = len(seen) / len(ok) if ok else None
            row["ours_retained"] = (sum(key in r["retained"] for r in ok) / len(ok)) if ok else None
            rows.append(row)
            print(f"{table} {key}: retained in {row['ours_retained']:.3f} of replications")
        columns = ["parameter", "truth"] + [f"{w}_{c}" for c in DETECTION_COLUMNS[1:5]
                                            for w in ("reference", "ours_mean")]
        columns += ["ours_in_top_k", "ours_retained"]
    run.write_csv(f"{table}.csv", rows, columns)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panelwald", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"panelwald {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="panelwald_out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    def search(p):
        p.add_argument("--alpha", type=float, default=None, help="Wald retention level (0.05)")
        p.add_argument("--top-k", type=int, default=None, help="candidates kept from the LM table (25)")
        p.add_argument("--epc-min", type=float, default=None, help="smallest |EPC| kept (0.1)")

    def sim(p):
        p.add_argument("--n", type=int, default=None, help="sample size per replication")
        p.add_argument("--reps", type=int, default=None, help="number of replications")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--sqrt", choices=("chol", "sym"), default="chol",
                       help="covariance square root used to generate data")

    p = sub.add_parser("validate", help="parse a model and check identification")
    p.add_argument("model", nargs="?")
    p.add_argument("--model", dest="model_opt")
    p.add_argument("--dump-matrices", action="store_true")
    common(p)

    for name, helptext in (("fit", "estimate a model"), ("diagnose", "run the two-stage search")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("model", nargs="?")
        p.add_argument("--model", dest="model_opt")
        p.add_argument("--data", required=True, help="CSV with a header row")
        p.add_argument("--dump-matrices", action="store_true")
        if name == "diagnose":
            search(p)
        common(p)

    p = sub.add_parser("simulate", help="Monte Carlo run for a scenario")
    p.add_argument("scenario", nargs="?")
    p.add_argument("--scenario", dest="scenario_opt")
    p.add_argument("--mode", choices=("auto", "calibration", "detection"), default="auto")
    p.add_argument("--raw", action="store_true", help="also write per-replication records")
    sim(p)
    search(p)
    common(p)

    p = sub.add_parser("replicate-table", help="rerun a published table preset")
    p.add_argument("table_id", help=", ".join(PRESETS))
    sim(p)
    search(p)
    common(p)
    return ap


def _positional(args, name):
    opt = getattr(args, f"{name}_opt", None)
    val = getattr(args, name, None)
    if val is None:
        val = opt
    if val is None:
        raise UserError(f"--{name} is required")
    setattr(args, name, val)


_COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "replicate-table": cmd_replicate_table,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        if args.command in ("validate", "fit", "diagnose"):
            _positional(args, "model")
        elif args.command == "simulate":
            _positional(args, "scenario")
        return _COMMANDS[args.command](args)
    except ModelSyntaxError as exc:
        print(f"{getattr(args, 'model', '')}:{exc.line}:{exc.col}: error: {exc.message}",
              file=sys.stderr)
        return EXIT_USER
    except (UserError, UnknownScenario, DataError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USER
    except SimulationAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PanelWaldError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
