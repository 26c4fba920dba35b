"""Edf accounting, AIC, and model-comparison tests.

All p-values here are approximate: they condition on the selected smoothing
parameters and use Wald/F reference distributions. Results carry an
``approximate`` flag so downstream formatting can say so.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2 as chi2_dist
from scipy.stats import f as f_dist

from .errors import GammkitError, NestingError, SchemaError


@dataclass(frozen=True)
class TermSummary:
    """One table row: edf, reference df, F statistic, p-value."""

    term: str
    edf: float
    ref_df: float
    statistic: float
    p: float
    kind: str                  # parametric | smooth | random
    approximate: bool = True


@dataclass(frozen=True)
class ModelScore:
    """Bare inputs for a score comparison, detached from any fit."""

    reml: float
    param_count: int
    label: str = ""


def term_edf(model, term: str) -> float:
    """Sum of per-coefficient edf over the term's columns.

    The intercept's edf (1 for any unpenalized fit) lives under the
    "(Intercept)" label; smooth terms never include it, so per-term edf
    values sum exactly to the model's total edf.
    """
    a, b = model.column_range(term)
    return float(np.sum(model.edf_per_coef[a:b]))


def aic(model) -> float:
    """AIC = -2 loglik + 2 (total edf + 1), the +1 counting the scale.

    loglik is the Gaussian log-likelihood of the whitened residuals at the
    maximum-likelihood variance RSS/n, so an intercept-only fit reduces to
    n log(2 pi RSS/n) + n + 4.
    """
    return -2.0 * model.loglik + 2.0 * (model.total_edf + 1.0)


def nested_f_test(model_small, model_big) -> tuple[float, float, float, float]:
    """Incremental F test between two fits of the same response.

    F = (delta RSS / delta edf) / sigma2_big with df1 = delta edf and
    df2 = n - total edf of the larger model. Identical fits return
    (0, 0, df2, 1); a negative edf increment (arguments swapped, or models
    not nested) raises rather than returning a negative F.
    """
    n = model_big.n
    if model_small.n != n:
        raise SchemaError("models were fit to different numbers of rows")
    d_edf = model_big.total_edf - model_small.total_edf
    d_rss = model_small.rss_whitened - model_big.rss_whitened
    scale = max(abs(model_small.rss_whitened), abs(model_big.rss_whitened), 1.0)
    df2 = n - model_big.total_edf
    if abs(d_edf) < 1e-8 and abs(d_rss) < 1e-10 * scale:
        return 0.0, 0.0, float(df2), 1.0
    if d_edf <= 1e-8:
        raise NestingError(f"larger model must add effective df; "
                           f"got increment {d_edf:.3g}")
    if df2 <= 0:
        raise NestingError("larger model has no residual df")
    fstat = (d_rss / d_edf) / model_big.sigma2
    fstat = max(fstat, 0.0)
    p = float(f_dist.sf(fstat, d_edf, df2))
    return float(fstat), float(d_edf), float(df2), p


@dataclass(frozen=True)
class ComparisonResult:
    """Score-difference test; iterable as (stat, df, p)."""

    stat: float
    df: int
    p: float | None
    verdict: str               # "test" | "simpler_and_better"

    def __iter__(self):
        return iter((self.stat, self.df, self.p))


def compare_reml(model0, model1) -> ComparisonResult:
    """Chi-squared comparison of two REML scores.

    stat is the raw score difference (not doubled) and df the difference in
    parameter counts (parametric coefficients plus smoothing parameters);
    p = P(chi2_df > stat). When the model with fewer parameters also has the
    lower score, no test is run: verdict is "simpler_and_better" and p is
    None. Accepts fitted models or bare ModelScore records.
    """
    sig0 = getattr(getattr(model0, "spec", None), "signature", lambda: None)()
    sig1 = getattr(getattr(model1, "spec", None), "signature", lambda: None)()
    if sig0 is not None and sig0 == sig1:
        raise GammkitError("models have identical specifications; "
                           "nothing to compare")
    r0, r1 = float(model0.reml), float(model1.reml)
    if math.isnan(r0) or math.isnan(r1):
        raise GammkitError("REML score unavailable (fixed lambda = 0 fit?)")
    k0, k1 = int(model0.param_count), int(model1.param_count)
    stat = abs(r0 - r1)
    df = abs(k0 - k1)
    if stat < 1e-12 and df == 0:
        raise GammkitError("models have identical scores and parameter "
                           "counts; nothing to compare")
    if (k0 < k1 and r0 < r1) or (k1 < k0 and r1 < r0):
        return ComparisonResult(stat=stat, df=df, p=None,
                                verdict="simpler_and_better")
    if df == 0:
        raise GammkitError("equal parameter counts; chi-squared comparison "
                           "undefined at df = 0")
    p = float(chi2_dist.sf(stat, df))
    return ComparisonResult(stat=float(stat), df=df, p=p, verdict="test")


def wald_columns(model, a: int, b: int, label: str, kind: str = "smooth",
                 ref_df: float | None = None) -> TermSummary:
    """Wald F test over an explicit column range [a, b) of the fit.

    F = beta' pinv(V) beta / edf with the pseudo-inverse truncated at rank
    round(edf), so heavily shrunk directions do not inflate the statistic;
    df1 = edf, df2 = n - total edf.
    """
    edf = float(np.sum(model.edf_per_coef[a:b]))
    if ref_df is None:
        ref_df = float(b - a)
    rank = int(round(edf))
    df2 = model.n - model.total_edf
    if rank <= 0 or df2 <= 0 or not math.isfinite(model.sigma2) \
            or model.sigma2 <= 0:
        return TermSummary(term=label, edf=edf, ref_df=ref_df, statistic=0.0,
                           p=1.0, kind=kind)
    beta_t = model.beta[a:b]
    vt = model.vb[a:b, a:b]
    w, V = np.linalg.eigh(0.5 * (vt + vt.T))
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    keep = w[:rank]
    pos = keep > 0
    keep, V = keep[pos], V[:, :rank][:, pos]
    if keep.size == 0:
        return TermSummary(term=label, edf=edf, ref_df=ref_df, statistic=0.0,
                           p=1.0, kind=kind)
    z = V.T @ beta_t
    stat = float(np.sum(z * z / keep)) / max(edf, 1e-8)
    p = float(f_dist.sf(stat, max(edf, 1e-8), df2))
    return TermSummary(term=label, edf=edf, ref_df=ref_df, statistic=stat,
                       p=p, kind=kind)


def wald_term_test(model, term: str) -> TermSummary:
    """Approximate Wald F test that a term's coefficients are all zero.

    Delegates to wald_columns over the term's column range. For a
    1-column parametric term the statistic reduces to (beta/se)^2.
    Conditional on the selected lambdas, like every test here.
    """
    a, b = model.column_range(term)
    block = model.design_raw.blocks.get(term)
    if block is None:
        kind = "parametric"
        ref_df = float(b - a)
    else:
        kind = "random" if block.kind == "random" else "smooth"
        ref_df = float(block.p_term)
    return wald_columns(model, a, b, term, kind=kind, ref_df=ref_df)


def summarize_terms(model) -> list[TermSummary]:
    """TermSummary rows for every model term, parametric first."""
    rows = []
    for label in model.design_raw.col_ranges:
        if label in model.design_raw.blocks:
            continue
        rows.append(wald_term_test(model, label))
    for label in model.design_raw.blocks:
        rows.append(wald_term_test(model, label))
    return rows
