"""Batch command-line front end.

Commands: fit, predict, compare, acf, suggest-rho, permtest, simulate.
Models are declared in a line-oriented spec file::

    # comment lines start with '#'
    response: logRT
    parametric: size*orientation coding=sum
    smooth: s(soa) k=10
    smooth: fs(trial, subject) k=5
    smooth: te(freq, trial) k=5,5
    random: intercept(word)
    rho: 0.2
    series: subject order: trial

Smooth functions: s (thin plate), tp (alias of s), cr, poly, te, ti, fs;
random effects: intercept(factor), slope(factor, covariate). Options per
smooth line: k=<int[,int]>, m=<int>, by=<factor>.

Only the standard library is imported at module load so that the
GAMMKIT_THREADS environment variable can cap BLAS thread pools before numpy
first loads; numeric modules are imported inside the command functions.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
from datetime import datetime, timezone

from .errors import GammkitError

_THREAD_ENV_TARGETS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                       "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("GAMMKIT_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise SystemExit(f"gammkit: GAMMKIT_THREADS must be a positive "
                         f"integer, got {cap!r}")
    for var in _THREAD_ENV_TARGETS:
        os.environ.setdefault(var, cap)


# ---------------------------------------------------------------------------
# model-spec file parsing (pure string work, no numpy)

_SMOOTH_RX = re.compile(r"^(s|tp|cr|poly|te|ti|fs)\(([^)]*)\)\s*(.*)$")
_RANDOM_RX = re.compile(r"^(intercept|slope)\(([^)]*)\)\s*$")
_SERIES_RX = re.compile(r"^(\S+)\s+order:\s*(\S+)$")


class SpecFileError(ValueError):
    """Raised for malformed model-spec files, with the line number."""


def _parse_options(text: str, lineno: int) -> dict:
    opts = {}
    for piece in text.split():
        if "=" not in piece:
            raise SpecFileError(f"line {lineno}: expected key=value, "
                                f"got {piece!r}")
        key, val = piece.split("=", 1)
        opts[key] = val
    return opts


def _parse_k(val: str, lineno: int):
    try:
        parts = [int(v) for v in val.split(",")]
    except ValueError:
        raise SpecFileError(f"line {lineno}: bad k value {val!r}") from None
    return parts[0] if len(parts) == 1 else tuple(parts)


def parse_spec_file(path: str) -> dict:
    """Parse the line-oriented model file into a plain dict.

    Returns keys: response, parametric (list of (names tuple, coding)),
    smooths (list of dicts), rho, series_key, order_key.
    """
    out = {"response": None, "parametric": [], "smooths": [], "rho": 0.0,
           "series_key": None, "order_key": None}
    with open(path) as fh:
        lines = fh.readlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise SpecFileError(f"line {lineno}: expected 'key: value', "
                                f"got {line!r}")
        key, value = line.split(":", 1)
        key = key.strip().lower()
        value = value.strip()
        if key == "response":
            out["response"] = value
        elif key == "parametric":
            words = value.split()
            coding = "sum"
            expr_words = []
            for w in words:
                if w.startswith("coding="):
                    coding = w.split("=", 1)[1]
                else:
                    expr_words.append(w)
            expr = "".join(expr_words)
            if not expr:
                raise SpecFileError(f"line {lineno}: empty parametric term")
            for term in expr.split("+"):
                if "*" in term:
                    a, b = term.split("*", 1)
                    out["parametric"] += [((a,), coding), ((b,), coding),
                                          ((a, b), coding)]
                elif ":" in term:
                    out["parametric"].append((tuple(term.split(":")), coding))
                else:
                    out["parametric"].append(((term,), coding))
        elif key == "smooth":
            m = _SMOOTH_RX.match(value)
            if not m:
                raise SpecFileError(f"line {lineno}: cannot parse smooth "
                                    f"term {value!r}")
            fn, args, rest = m.groups()
            covs = tuple(a.strip() for a in args.split(",") if a.strip())
            if not covs:
                raise SpecFileError(f"line {lineno}: smooth needs arguments")
            opts = _parse_options(rest, lineno)
            term = {"fn": fn, "covariates": covs,
                    "k": _parse_k(opts["k"], lineno) if "k" in opts else None,
                    "m": int(opts["m"]) if "m" in opts else 2,
                    "by": opts.get("by")}
            unknown = set(opts) - {"k", "m", "by"}
            if unknown:
                raise SpecFileError(f"line {lineno}: unknown options "
                                    f"{sorted(unknown)}")
            if fn == "fs" and len(covs) != 2:
                raise SpecFileError(f"line {lineno}: fs takes "
                                    f"(covariate, factor)")
            out["smooths"].append(term)
        elif key == "random":
            m = _RANDOM_RX.match(value)
            if not m:
                raise SpecFileError(f"line {lineno}: cannot parse random "
                                    f"term {value!r}")
            fn, args = m.groups()
            covs = tuple(a.strip() for a in args.split(",") if a.strip())
            want = 1 if fn == "intercept" else 2
            if len(covs) != want:
                raise SpecFileError(f"line {lineno}: {fn} takes {want} "
                                    f"argument(s)")
            out["smooths"].append({"fn": "re", "covariates": covs,
                                   "k": None, "m": 2, "by": None})
        elif key == "rho":
            try:
                out["rho"] = float(value)
            except ValueError:
                raise SpecFileError(f"line {lineno}: bad rho {value!r}") \
                    from None
        elif key == "series":
            m = _SERIES_RX.match(value)
            if not m:
                raise SpecFileError(f"line {lineno}: expected "
                                    f"'series: NAME order: NAME'")
            out["series_key"], out["order_key"] = m.groups()
        else:
            raise SpecFileError(f"line {lineno}: unknown key {key!r}")
    if out["response"] is None:
        raise SpecFileError("spec file never sets 'response:'")
    return out


def build_model_spec(parsed: dict, rho_override: float | None = None):
    """Turn a parsed spec-file dict into a ModelSpec (imports numpy)."""
    from .basis import SmoothTermSpec
    from .fitting import ModelSpec, ParametricTerm

    parametric = tuple(ParametricTerm(names=names, coding=coding)
                       for names, coding in parsed["parametric"])
    smooths = []
    for t in parsed["smooths"]:
        fn = t["fn"]
        if fn == "re":
            smooths.append(SmoothTermSpec(covariates=t["covariates"],
                                          is_random_effect=True))
        elif fn == "fs":
            smooths.append(SmoothTermSpec(covariates=(t["covariates"][0],),
                                          basis_kind="cr", k=t["k"],
                                          m=t["m"],
                                          fs_group=t["covariates"][1]))
        else:
            kind = {"s": "tp", "te": "tensor"}.get(fn, fn)
            smooths.append(SmoothTermSpec(covariates=t["covariates"],
                                          basis_kind=kind, k=t["k"],
                                          m=t["m"], by=t["by"]))
    rho = parsed["rho"] if rho_override is None else rho_override
    return ModelSpec(response=parsed["response"], parametric_terms=parametric,
                     smooth_terms=tuple(smooths), rho=rho)


def _infer_schema(parsed: dict, data_path: str) -> dict:
    """Column role map for load_csv, sniffing parametric column types."""
    schema: dict[str, str] = {parsed["response"]: "numeric"}

    def put(name, role):
        if schema.get(name, role) != role:
            raise SpecFileError(f"column {name!r} used as both numeric "
                                f"and factor")
        schema[name] = role

    if parsed["series_key"]:
        put(parsed["series_key"], "factor")
        put(parsed["order_key"], "numeric")
    for t in parsed["smooths"]:
        covs = t["covariates"]
        if t["fn"] == "re":
            put(covs[0], "factor")
            if len(covs) > 1:
                put(covs[1], "numeric")
        elif t["fn"] == "fs":
            put(covs[0], "numeric")
            put(covs[1], "factor")
        else:
            for c in covs:
                put(c, "numeric")
        if t.get("by"):
            put(t["by"], "factor")
    undecided = []
    for names, _ in parsed["parametric"]:
        undecided += [n for n in names if n not in schema]
    for name in dict.fromkeys(undecided):
        put(name, _sniff_role(data_path, name))
    return schema


def _sniff_role(data_path: str, column: str) -> str:
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or column not in header:
            raise SpecFileError(f"{data_path}: column {column!r} not found")
        pos = header.index(column)
        for row in reader:
            if pos >= len(row):
                continue
            cell = row[pos].strip()
            if cell in ("", "NA"):
                continue
            try:
                float(cell)
            except ValueError:
                return "factor"
    return "numeric"


# ---------------------------------------------------------------------------
# output helpers


class OutputTracker:
    """Records files written by a command so failures can clean them up."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.paths: list[str] = []
        self.stage = "startup"

    def path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        p = os.path.join(self.out_dir, name)
        self.paths.append(p)
        return p

    def discard_all(self):
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.4f}"


def _fmt_p(p) -> str:
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return "nan"
    return "< 0.0001" if p < 1e-4 else f"{p:.4f}"


def _write_table(fh, headers, rows, delimited: bool):
    if delimited:
        fh.write("\t".join(headers) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
        return
    name_w = max([len(headers[0])] + [len(r[0]) for r in rows]) + 2
    col_w = [max(len(h), 10) for h in headers[1:]]
    fh.write(headers[0].ljust(name_w)
             + "".join(h.rjust(w + 2) for h, w in zip(headers[1:], col_w))
             + "\n")
    for row in rows:
        fh.write(row[0].ljust(name_w)
                 + "".join(c.rjust(w + 2) for c, w in zip(row[1:], col_w))
                 + "\n")


def _write_csv(path: str, headers, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def _load_table(parsed: dict, data_path: str):
    from .data import load_csv
    schema = _infer_schema(parsed, data_path)
    return load_csv(data_path, schema, series_key=parsed["series_key"],
                    order_key=parsed["order_key"])


def _summary_sections(model):
    """(parametric rows, smooth rows) for the two-section summary table."""
    from scipy.stats import t as t_dist

    from .inference import wald_columns, wald_term_test

    design = model.design_raw
    df_resid = model.n - model.total_edf
    par_rows = []
    stop = design.n_parametric_cols
    for j in range(stop):
        est = model.beta[j]
        se = math.sqrt(max(model.vb[j, j], 0.0))
        if se > 0 and df_resid > 0:
            tval = est / se
            p = 2.0 * float(t_dist.sf(abs(tval), df_resid))
        else:
            tval, p = math.nan, math.nan
        par_rows.append([design.coef_names[j], _fmt(est), _fmt(se),
                         _fmt(tval), _fmt_p(p)])
    smooth_rows = []
    for label, block in design.blocks.items():
        a, b = design.col_ranges[label]
        if block.sub_terms:
            for sub_label, s0, s1 in block.sub_terms:
                row = wald_columns(model, a + s0, a + s1, sub_label,
                                   kind="smooth", ref_df=float(s1 - s0))
                smooth_rows.append([row.term, _fmt(row.edf), _fmt(row.ref_df),
                                    _fmt(row.statistic), _fmt_p(row.p)])
        else:
            row = wald_term_test(model, label)
            smooth_rows.append([row.term, _fmt(row.edf), _fmt(row.ref_df),
                                _fmt(row.statistic), _fmt_p(row.p)])
    return par_rows, smooth_rows


def _write_summary(path: str, model, delimited: bool):
    from .inference import aic
    par_rows, smooth_rows = _summary_sections(model)
    with open(path, "w") as fh:
        fh.write(f"response: {model.spec.response}    n = {model.n}    "
                 f"rho = {model.spec.rho:.4f}\n")
        fh.write(f"REML = {_fmt(model.reml)}    AIC = {_fmt(aic(model))}    "
                 f"sigma2 = {_fmt(model.sigma2)}    "
                 f"total edf = {_fmt(model.total_edf)}\n")
        if not model.converged:
            fh.write("warning: smoothing-parameter search did not converge\n")
        if model.ridged:
            fh.write("warning: ridge fallback used for a singular system\n")
        fh.write("\nA. parametric coefficients\n")
        _write_table(fh, ["term", "Estimate", "SE", "t-value", "p-value"],
                     par_rows, delimited)
        fh.write("\nB. smooth terms (approximate significance)\n")
        if smooth_rows:
            _write_table(fh, ["term", "edf", "Ref.df", "F-value", "p-value"],
                         smooth_rows, delimited)
        else:
            fh.write("(none)\n")


def _write_coefficients(path: str, model):
    rows = []
    for j, name in enumerate(model.coef_names):
        se = math.sqrt(max(model.vb[j, j], 0.0))
        rows.append([name, repr(float(model.beta[j])), repr(se)])
    _write_csv(path, ["name", "estimate", "se"], rows)


def _write_residuals(path: str, model):
    design = model.design_raw
    rows = []
    if design.series_codes is not None:
        levels = design.table.factor(design.table.series_key).levels
        for i in range(model.n):
            rows.append([levels[design.series_codes[i]],
                         repr(float(design.order_values[i])),
                         repr(float(model.residuals_raw[i])),
                         repr(float(model.residuals_whitened[i]))])
        headers = ["series", "order", "raw", "whitened"]
    else:
        for i in range(model.n):
            rows.append([str(i), repr(float(model.residuals_raw[i])),
                         repr(float(model.residuals_whitened[i]))])
        headers = ["row", "raw", "whitened"]
    _write_csv(path, headers, rows)


def _safe_name(label: str) -> str:
    return re.sub(r"_+", "_", re.sub(r"[^A-Za-z0-9]+", "_", label)).strip("_")


def _write_partials(tracker: OutputTracker, model):
    import numpy as np

    from .data import DataTable
    from .fitting import partial_effect

    design = model.design_raw
    for label, block in design.blocks.items():
        fname = f"partial_{_safe_name(label)}.csv"
        covs = design.term_covariates[label]
        a, b = design.col_ranges[label]
        if block.kind == "random":
            fac = design.table.factor(covs[0])
            rows = [[lev, repr(float(model.beta[a + j])),
                     repr(math.sqrt(max(model.vb[a + j, a + j], 0.0)))]
                    for j, lev in enumerate(fac.levels)]
            _write_csv(tracker.path(fname), ["level", "effect", "se"], rows)
            continue
        spec_term = next(t for t in model.spec.smooth_terms
                         if t.label == label)
        if spec_term.by is not None or spec_term.fs_group is not None:
            group_name = covs[-1]
            x = design.table.numeric(covs[0])
            grid_x = np.linspace(float(x.min()), float(x.max()), 100)
            fac = design.table.factor(group_name)
            rows = []
            for lev in fac.levels:
                gtab = _grid_table({covs[0]: grid_x}, {group_name: lev}, fac)
                eff, se, _ = partial_effect(model, label, gtab)
                rows += [[lev, repr(float(gx)), repr(float(e)), repr(float(s))]
                         for gx, e, s in zip(grid_x, eff, se)]
            _write_csv(tracker.path(fname), ["level", covs[0], "effect", "se"],
                       rows)
        elif block.n_cov == 2:
            xs = [design.table.numeric(c) for c in covs]
            g1 = np.linspace(float(xs[0].min()), float(xs[0].max()), 40)
            g2 = np.linspace(float(xs[1].min()), float(xs[1].max()), 40)
            xx, zz = np.meshgrid(g1, g2, indexing="ij")
            gtab = DataTable(columns={covs[0]: xx.ravel(), covs[1]: zz.ravel()},
                             n_rows=xx.size)
            eff, se, _ = partial_effect(model, label, gtab)
            rows = [[repr(float(x1)), repr(float(x2)), repr(float(e)),
                     repr(float(s))]
                    for x1, x2, e, s in zip(xx.ravel(), zz.ravel(), eff, se)]
            _write_csv(tracker.path(fname), [covs[0], covs[1], "effect", "se"],
                       rows)
        else:
            x = design.table.numeric(covs[0])
            grid_x = np.linspace(float(x.min()), float(x.max()), 100)
            gtab = DataTable(columns={covs[0]: grid_x}, n_rows=100)
            eff, se, _ = partial_effect(model, label, gtab)
            rows = [[repr(float(gx)), repr(float(e)), repr(float(s))]
                    for gx, e, s in zip(grid_x, eff, se)]
            _write_csv(tracker.path(fname), [covs[0], "effect", "se"], rows)


def _grid_table(numeric_cols: dict, factor_consts: dict, fac):
    import numpy as np

    from .data import DataTable, FactorColumn
    n = len(next(iter(numeric_cols.values())))
    columns: dict[str, object] = {k: np.asarray(v) for k, v in
                                  numeric_cols.items()}
    for name, lev in factor_consts.items():
        code = fac.levels.index(lev)
        columns[name] = FactorColumn(codes=np.full(n, code, dtype=np.int64),
                                     levels=fac.levels)
    return DataTable(columns=columns, n_rows=n)


def _write_fit_json(path: str, model, args, extra=None):
    from .inference import aic
    record = {
        "command": "fit",
        "data": args.data,
        "spec": args.spec,
        "response": model.spec.response,
        "n": model.n,
        "p": model.p,
        "rho": model.spec.rho,
        "lambdas": [float(v) for v in model.lambdas],
        "penalty_labels": [e.label for e in model.design.penalties],
        "reml": None if math.isnan(model.reml) else float(model.reml),
        "aic": float(aic(model)),
        "sigma2": None if math.isnan(model.sigma2) else float(model.sigma2),
        "total_edf": float(model.total_edf),
        "converged": bool(model.converged),
        "ridged": bool(model.ridged),
        "seed": args.seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        record.update(extra)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fit(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-spec"
        parsed = parse_spec_file(args.spec)
        spec = build_model_spec(parsed, rho_override=args.rho)
        tracker.stage = "load-data"
        table = _load_table(parsed, args.data)
        tracker.stage = "fit"
        from .fitting import fit
        model = fit(spec, table)
        tracker.stage = "write-output"
        _write_summary(tracker.path("summary.txt"), model,
                       args.format == "delimited")
        _write_coefficients(tracker.path("coefficients.csv"), model)
        _write_residuals(tracker.path("residuals.csv"), model)
        _write_partials(tracker, model)
        _write_fit_json(tracker.path("fit.json"), model, args)
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def cmd_predict(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-spec"
        parsed = parse_spec_file(args.spec)
        spec = build_model_spec(parsed, rho_override=args.rho)
        tracker.stage = "load-data"
        table = _load_table(parsed, args.data)
        tracker.stage = "fit"
        from .fitting import fit, predict
        model = fit(spec, table)
        tracker.stage = "predict"
        mean, se = predict(model, model.table)
        tracker.stage = "write-output"
        design = model.design_raw
        rows = []
        y = design.y
        if design.series_codes is not None:
            levels = design.table.factor(design.table.series_key).levels
            headers = ["series", "order", "observed", "fit", "se"]
            for i in range(model.n):
                rows.append([levels[design.series_codes[i]],
                             repr(float(design.order_values[i])),
                             repr(float(y[i])), repr(float(mean[i])),
                             repr(float(se[i]))])
        else:
            headers = ["row", "observed", "fit", "se"]
            for i in range(model.n):
                rows.append([str(i), repr(float(y[i])), repr(float(mean[i])),
                             repr(float(se[i]))])
        _write_csv(tracker.path("predictions.csv"), headers, rows)
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def cmd_compare(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        if len(args.spec) != 2:
            raise SpecFileError("compare needs exactly two --spec files")
        tracker.stage = "parse-spec"
        parsed = [parse_spec_file(p) for p in args.spec]
        if parsed[0]["response"] != parsed[1]["response"]:
            raise SpecFileError("the two specs model different responses: "
                                f"{parsed[0]['response']!r} vs "
                                f"{parsed[1]['response']!r}")
        if (parsed[0]["series_key"], parsed[0]["order_key"]) != \
                (parsed[1]["series_key"], parsed[1]["order_key"]):
            raise SpecFileError("the two specs declare different "
                                "series/order keys")
        specs = [build_model_spec(p, rho_override=args.rho) for p in parsed]
        if specs[0].signature() == specs[1].signature():
            raise SpecFileError("the two spec files declare identical models")
        tracker.stage = "load-data"
        merged = {"response": parsed[0]["response"],
                  "parametric": parsed[0]["parametric"] + parsed[1]["parametric"],
                  "smooths": parsed[0]["smooths"] + parsed[1]["smooths"],
                  "series_key": parsed[0]["series_key"],
                  "order_key": parsed[0]["order_key"]}
        table = _load_table(merged, args.data)
        tracker.stage = "fit"
        from .fitting import fit
        from .inference import aic, compare_reml
        models = [fit(s, table) for s in specs]
        tracker.stage = "compare"
        result = compare_reml(models[0], models[1])
        tracker.stage = "write-output"
        with open(tracker.path("comparison.txt"), "w") as fh:
            for pth, m in zip(args.spec, models):
                fh.write(f"model: {pth}  AIC = {_fmt(aic(m))}  "
                         f"REML = {_fmt(m.reml)}  "
                         f"params = {m.param_count}\n")
            if result.verdict == "simpler_and_better":
                fh.write("comparison: the model with fewer parameters also "
                         "has the lower REML score (simpler and better); "
                         "no test performed\n")
            else:
                fh.write(f"comparison: Chisq = {_fmt(result.stat)}  "
                         f"df = {result.df}  p = {_fmt_p(result.p)}\n")
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def cmd_acf(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-spec"
        parsed = parse_spec_file(args.spec)
        spec = build_model_spec(parsed, rho_override=args.rho)
        tracker.stage = "load-data"
        table = _load_table(parsed, args.data)
        tracker.stage = "fit"
        from .diagnostics import residual_acf_by_group
        from .fitting import fit
        model = fit(spec, table)
        tracker.stage = "acf"
        for which in ("raw", "whitened"):
            results = residual_acf_by_group(model, which,
                                            max_lag=args.max_lag)
            rows = []
            for r in results:
                for lag, val in zip(r.lags, r.acf):
                    rows.append([r.group, str(int(lag)), repr(float(val)),
                                 repr(float(r.band)), str(r.n)])
            _write_csv(tracker.path(f"acf_{which}.csv"),
                       ["group", "lag", "acf", "band", "n"], rows)
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def cmd_suggest_rho(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-spec"
        parsed = parse_spec_file(args.spec)
        spec = build_model_spec(parsed, rho_override=None)
        tracker.stage = "load-data"
        table = _load_table(parsed, args.data)
        tracker.stage = "suggest-rho"
        from .diagnostics import suggest_rho
        suggestion = suggest_rho(table, spec)
        tracker.stage = "write-output"
        with open(tracker.path("rho.txt"), "w") as fh:
            fh.write(f"{suggestion.rho_hat:.6f}\n")
        rows = [[g, repr(float(v))]
                for g, v in zip(suggestion.groups, suggestion.per_group)]
        _write_csv(tracker.path("rho_by_group.csv"), ["group", "lag1"], rows)
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def cmd_permtest(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-spec"
        parsed = parse_spec_file(args.spec)
        tracker.stage = "load-data"
        table = _load_table(parsed, args.data)
        tracker.stage = "permtest"
        from .diagnostics import permutation_fs_test
        result = permutation_fs_test(table, parsed["response"],
                                     n_perm=args.n_perm,
                                     seed=0 if args.seed is None else args.seed)
        tracker.stage = "write-output"
        rows = [[str(i), "" if math.isnan(p) else repr(float(p))]
                for i, p in enumerate(result.p_values)]
        _write_csv(tracker.path("permtest_pvalues.csv"), ["perm", "p"], rows)
        with open(tracker.path("permtest_counts.txt"), "w") as fh:
            n = args.n_perm
            fh.write(f"alpha=0.05 rejections={result.rejections_at(0.05)} "
                     f"of {n}\n")
            fh.write(f"alpha=0.01 rejections={result.rejections_at(0.01)} "
                     f"of {n}\n")
        if result.n_failed:
            print(f"gammkit: {result.n_failed} permutation fits failed",
                  file=sys.stderr)
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


def parse_scenario_file(path: str):
    """Parse the simulate command's scenario file (imports numpy lazily)."""
    from .simulate import FixedEffect, ScenarioSpec
    fields = {"n_subjects": 10, "n_trials": 100, "trend": "flat",
              "trend_amplitude": 0.0, "rho": 0.0, "sigma": 1.0,
              "subject_intercept_sd": 0.0, "mean": 0.0, "seed": 0}
    fixed = []
    fx_rx = re.compile(r"^(factor2|numeric)\((\w+)\)\s+effect=([-\d.eE+]+)$")
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise SpecFileError(f"line {lineno}: expected 'key: value'")
            key, value = (s.strip() for s in line.split(":", 1))
            if key == "fixed":
                m = fx_rx.match(value)
                if not m:
                    raise SpecFileError(f"line {lineno}: cannot parse fixed "
                                        f"effect {value!r}")
                kind, name, eff = m.groups()
                fixed.append(FixedEffect(name=name, kind=kind,
                                         effect=float(eff)))
            elif key == "trend":
                words = value.split()
                fields["trend"] = words[0]
                for w in words[1:]:
                    if w.startswith("amplitude="):
                        fields["trend_amplitude"] = float(w.split("=", 1)[1])
                    else:
                        raise SpecFileError(f"line {lineno}: unknown trend "
                                            f"option {w!r}")
            elif key in ("n_subjects", "n_trials", "seed"):
                fields[key] = int(value)
            elif key in ("rho", "sigma", "subject_intercept_sd", "mean",
                         "trend_amplitude"):
                fields[key] = float(value)
            else:
                raise SpecFileError(f"line {lineno}: unknown key {key!r}")
    return ScenarioSpec(fixed_effects=tuple(fixed), **fields)


def cmd_simulate(args) -> int:
    tracker = OutputTracker(args.out)
    try:
        tracker.stage = "parse-scenario"
        scenario = parse_scenario_file(args.spec)
        if args.seed is not None:
            from dataclasses import replace
            scenario = replace(scenario, seed=args.seed)
        tracker.stage = "simulate"
        from .data import FactorColumn
        from .simulate import gen_experiment
        table, truth = gen_experiment(scenario)
        tracker.stage = "write-output"
        names = table.column_names()
        rows = []
        for i in range(table.n_rows):
            row = []
            for name in names:
                col = table.columns[name]
                if isinstance(col, FactorColumn):
                    row.append(col.levels[col.codes[i]])
                elif name == "trial":
                    row.append(f"{col[i]:g}")
                else:
                    row.append(repr(float(col[i])))
            rows.append(row)
        _write_csv(tracker.path("simulated.csv"), names, rows)
        record = {
            "scenario": {"n_subjects": scenario.n_subjects,
                         "n_trials": scenario.n_trials,
                         "trend": scenario.trend,
                         "trend_amplitude": scenario.trend_amplitude,
                         "rho": scenario.rho, "sigma": scenario.sigma,
                         "subject_intercept_sd": scenario.subject_intercept_sd,
                         "mean": scenario.mean, "seed": scenario.seed},
            "effects": truth.effects,
            "subject_intercepts": [float(v) for v in
                                   truth.subject_intercepts],
            "trends": [[float(v) for v in row] for row in truth.trends],
            "errors": [[float(v) for v in row] for row in truth.errors],
        }
        with open(tracker.path("truth.json"), "w") as fh:
            json.dump(record, fh, sort_keys=True)
            fh.write("\n")
        return 0
    except _CAUGHT as exc:
        return _fail(tracker, exc)


_CAUGHT = (GammkitError, SpecFileError, OSError, ValueError)


def _fail(tracker: OutputTracker, exc: Exception) -> int:
    tracker.discard_all()
    msg = " ".join((str(exc) or exc.__class__.__name__).split())
    print(f"gammkit: error at stage {tracker.stage!r}: {msg}",
          file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gammkit",
        description="Penalized-spline additive mixed models with AR(1) "
                    "errors: batch fitting, comparison, and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True, spec=True):
        if data:
            p.add_argument("--data", required=True,
                           help="CSV file of observations")
        if spec:
            p.add_argument("--spec", required=True,
                           help="model spec file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--rho", type=float, default=None,
                       help="override the spec file's AR(1) rho")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--format", choices=("text", "delimited"),
                       default="text", help="summary table format")

    p_fit = sub.add_parser("fit", help="fit one model, write summary tables")
    add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict",
                            help="fit, then write fitted values with SEs")
    add_common(p_pred)
    p_pred.set_defaults(func=cmd_predict)

    p_cmp = sub.add_parser("compare", help="fit two specs, compare scores")
    p_cmp.add_argument("--data", required=True)
    p_cmp.add_argument("--spec", action="append", required=True,
                       help="model spec file (give twice)")
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--rho", type=float, default=None)
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--format", choices=("text", "delimited"),
                       default="text")
    p_cmp.set_defaults(func=cmd_compare)

    p_acf = sub.add_parser("acf", help="per-series residual ACFs")
    add_common(p_acf)
    p_acf.add_argument("--max-lag", type=int, default=30)
    p_acf.set_defaults(func=cmd_acf)

    p_rho = sub.add_parser("suggest-rho",
                           help="estimate AR(1) rho from a pilot fit")
    add_common(p_rho)
    p_rho.set_defaults(func=cmd_suggest_rho)

    p_perm = sub.add_parser("permtest",
                            help="permutation type-I check for the factor "
                                 "smooth")
    add_common(p_perm)
    p_perm.add_argument("--n-perm", type=int, default=100)
    p_perm.set_defaults(func=cmd_permtest)

    p_sim = sub.add_parser("simulate",
                           help="generate a synthetic experiment")
    p_sim.add_argument("--spec", required=True, help="scenario file")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
