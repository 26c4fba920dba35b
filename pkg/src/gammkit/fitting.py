"""Design assembly, AR(1) whitening, penalized least squares, REML.

The fitting pipeline is assemble -> whiten -> select lambdas -> solve. The
REML criterion is the negative log of the Gaussian restricted marginal
likelihood with the scale profiled out:

    score = (n - M)/2 * (log(2*pi*phi) + 1)
            - log|S_lambda|_+ / 2 + log|X'X + S_lambda| / 2,
    phi   = (RSS + beta' S_lambda beta) / (n - M),

where S_lambda = sum_j lambda_j S_j, |.|_+ is the pseudo-determinant over
the penalty range space, and M = p - rank(sum_j S_j) counts all unpenalized
directions (parametric coefficients and penalty null spaces), which are
integrated out with flat priors. Lower is better; only differences between
scores are meaningful.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular
from scipy.optimize import minimize

from . import basis as basis_mod
from .basis import BasisBlock, SmoothTermSpec, rank_psd
from .data import DataTable, FactorColumn
from .errors import (DomainError, GammkitError, NumericError, RankError,
                     SchemaError, ShapeError)

LOG_LAMBDA_MIN = math.log(1e-10)
LOG_LAMBDA_MAX = math.log(1e12)
RIDGE_OF_LAST_RESORT = 1e-10

DEFAULT_K = {"poly": 9, "cr": 10, "tp": 10, "tensor": 5, "ti": 5, "fs": 5}


@dataclass(frozen=True)
class ParametricTerm:
    """A coded parametric term: one name, or several joined as a product."""

    names: tuple[str, ...]
    coding: str = "sum"

    def __post_init__(self):
        if isinstance(self.names, str):
            object.__setattr__(self, "names", (self.names,))
        else:
            object.__setattr__(self, "names", tuple(self.names))
        if self.coding not in ("sum", "treatment"):
            raise DomainError(f"unknown coding {self.coding!r}")

    @property
    def label(self) -> str:
        return ":".join(self.names)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model: response, parametric terms, smooths, AR(1) rho."""

    response: str
    parametric_terms: tuple = ()
    smooth_terms: tuple = ()
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "parametric_terms", tuple(self.parametric_terms))
        object.__setattr__(self, "smooth_terms", tuple(self.smooth_terms))
        if not (0.0 <= self.rho < 1.0):
            raise DomainError(f"rho must lie in [0, 1), got {self.rho}")
        labels = [t.label for t in self.parametric_terms] + \
                 [t.label for t in self.smooth_terms]
        if len(labels) != len(set(labels)):
            raise SchemaError("duplicate term labels in model spec")

    def signature(self) -> str:
        par = ";".join(f"{t.label}|{t.coding}" for t in self.parametric_terms)
        smo = ";".join(f"{t.label}|{t.basis_kind}|{t.k}|{t.m}" for t in self.smooth_terms)
        return f"{self.response}~{par}~{smo}~rho={self.rho}"


@dataclass
class PenaltyEntry:
    """One penalty embedded in the full design at a column offset."""

    label: str
    term_label: str
    S: np.ndarray              # block-local, p_block x p_block
    offset: int
    rank: int
    logpdet_unit: float        # log pseudo-determinant of S at lambda = 1
    sqrt: np.ndarray           # rank x p_block factor with sqrt' sqrt = S

    @property
    def p_block(self) -> int:
        return self.S.shape[0]

    def support(self) -> np.ndarray:
        local = np.where(np.abs(self.S).sum(axis=0) > 0)[0]
        return local + self.offset


class PenaltyGroup(NamedTuple):
    indices: tuple[int, ...]
    support: np.ndarray
    rank: int


@dataclass
class AssembledDesign:
    """Stacked design for one model on one (sorted) table."""

    y: np.ndarray
    X: np.ndarray
    col_ranges: dict
    penalties: list
    groups: list
    m_null_total: int
    blocks: dict
    term_covariates: dict
    parametric: list
    coef_names: list
    spec: ModelSpec
    table: DataTable
    series_codes: np.ndarray | None
    order_values: np.ndarray | None
    whitened: bool = False
    rho: float = 0.0
    _xtx: np.ndarray | None = field(default=None, repr=False)
    _xty: np.ndarray | None = field(default=None, repr=False)
    _yty: float | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def ensure_products(self):
        if self._xtx is None:
            self._xtx = self.X.T @ self.X
            self._xty = self.X.T @ self.y
            self._yty = float(self.y @ self.y)
        return self._xtx, self._xty, self._yty

    def embed_penalty(self, j: int) -> np.ndarray:
        entry = self.penalties[j]
        S = np.zeros((self.p, self.p))
        sl = slice(entry.offset, entry.offset + entry.p_block)
        S[sl, sl] = entry.S
        return S

    def column_range(self, term: str) -> tuple[int, int]:
        try:
            return self.col_ranges[term]
        except KeyError:
            raise SchemaError(f"no term named {term!r}; have "
                              f"{sorted(self.col_ranges)}") from None

    @property
    def n_parametric_cols(self) -> int:
        stop = 1
        for t in self.spec.parametric_terms:
            stop = max(stop, self.col_ranges[t.label][1])
        return stop


# ---------------------------------------------------------------------------
# assembly


def _sum_coding(codes: np.ndarray, levels: tuple[str, ...]):
    """Deviation coding scaled by 0.5: the 2-level case is -0.5/+0.5."""
    L = len(levels)
    cols, names = [], []
    for j in range(L - 1):
        col = 0.5 * ((codes == j).astype(float) - (codes == L - 1).astype(float))
        cols.append(col)
        names.append(levels[j] if L > 2 else "")
    return cols, names


def _treatment_coding(codes: np.ndarray, levels: tuple[str, ...]):
    cols = [(codes == j).astype(float) for j in range(1, len(levels))]
    names = [levels[j] for j in range(1, len(levels))]
    return cols, names


@dataclass(frozen=True)
class _ParametricBuilt:
    label: str
    names: tuple[str, ...]
    coding: str
    roles: tuple            # per name: ("factor", levels) | ("numeric",)

    def build(self, table: DataTable):
        """Column set and coefficient names; products for interactions."""
        parts = []
        for name, role in zip(self.names, self.roles):
            if role[0] == "factor":
                levels = role[1]
                fac = table.factor(name)
                codes = basis_mod.recode_factor(fac, levels)
                if self.coding == "sum":
                    cols, tags = _sum_coding(codes, levels)
                else:
                    cols, tags = _treatment_coding(codes, levels)
                named = [(f"{name}[{t}]" if t else name, c) for t, c in zip(tags, cols)]
            else:
                named = [(name, np.asarray(table.numeric(name), dtype=np.float64))]
            parts.append(named)
        out = parts[0]
        for nxt in parts[1:]:
            out = [(f"{na}:{nb}", ca * cb) for na, ca in out for nb, cb in nxt]
        names = [n for n, _ in out]
        return np.column_stack([c for _, c in out]), names


def _build_parametric(term: ParametricTerm, table: DataTable) -> _ParametricBuilt:
    roles = []
    for name in term.names:
        col = table.columns.get(name)
        if col is None:
            raise SchemaError(f"parametric term references missing column {name!r}")
        if isinstance(col, FactorColumn):
            if col.n_levels < 2:
                raise DomainError(f"factor {name!r} needs >= 2 levels")
            roles.append(("factor", col.levels))
        else:
            roles.append(("numeric",))
    return _ParametricBuilt(term.label, term.names, term.coding, tuple(roles))


def _term_k(term: SmoothTermSpec, margins: int = 1):
    if term.k is None:
        if term.fs_group is not None:
            base = DEFAULT_K["fs"]
        else:
            base = DEFAULT_K.get(term.basis_kind, 10)
        return (base,) * margins
    if isinstance(term.k, int):
        return (term.k,) * margins
    ks = tuple(term.k)
    if len(ks) == 1:
        return ks * margins
    if len(ks) != margins:
        raise DomainError(f"term {term.label!r}: got {len(ks)} k values "
                          f"for {margins} margins")
    return ks


def _univariate_base(kind: str, x: np.ndarray, k: int, m: int) -> BasisBlock:
    if kind == "poly":
        return basis_mod.poly_basis(x, degree=k)
    if kind == "cr":
        return basis_mod.cr_basis(x, basis_mod.knots_quantile(x, k))
    if kind == "tp":
        return basis_mod.tp_basis(x, k=k, m=m)
    raise DomainError(f"unknown univariate basis kind {kind!r}")


def _build_smooth(term: SmoothTermSpec, table: DataTable) -> tuple[BasisBlock, tuple]:
    """Returns the finished block and the evaluator's input column names."""
    if term.is_random_effect:
        fac = table.factor(term.covariates[0])
        cov = table.numeric(term.covariates[1]) if len(term.covariates) > 1 else None
        block = basis_mod.random_effect(fac, cov)
        return block, term.covariates

    if term.fs_group is not None:
        x = table.numeric(term.covariates[0])
        (k,) = _term_k(term)
        kind = term.basis_kind if term.basis_kind in ("cr", "tp") else "cr"
        base = _univariate_base(kind, x, k, term.m)
        fac = table.factor(term.fs_group)
        block = basis_mod.factor_smooth(base, fac)
        return block, term.covariates + (term.fs_group,)

    if term.basis_kind in ("tensor", "ti"):
        if len(term.covariates) != 2:
            raise DomainError("tensor-product smooths take exactly 2 covariates")
        ks = _term_k(term, margins=2)
        margins = [basis_mod.cr_basis(table.numeric(c), basis_mod.knots_quantile(
            table.numeric(c), k)) for c, k in zip(term.covariates, ks)]
        block = basis_mod.tensor_product(margins[0], margins[1],
                                         interaction_only=(term.basis_kind == "ti"))
        if term.basis_kind == "tensor":
            block = basis_mod.absorb_constraints(block)
        cov_names = term.covariates
    else:
        if term.basis_kind == "tp" and len(term.covariates) == 2:
            xcov = np.column_stack([table.numeric(c) for c in term.covariates])
            (k,) = _term_k(term)
            block = basis_mod.tp_basis(xcov, k=k, m=term.m)
        elif len(term.covariates) == 1:
            (k,) = _term_k(term)
            block = _univariate_base(term.basis_kind, table.numeric(term.covariates[0]),
                                     k, term.m)
        else:
            raise DomainError(f"term {term.label!r}: unsupported covariate count")
        if term.basis_kind != "poly":
            block = basis_mod.absorb_constraints(block)
        cov_names = term.covariates

    if term.by is not None:
        fac = table.factor(term.by)
        block = basis_mod.apply_by_factor(block, fac)
        cov_names = cov_names + (term.by,)
    return block, cov_names


def _natural_reparam(block: BasisBlock) -> BasisBlock:
    """Rotate a single-penalty smooth into its natural parameterization.

    Chooses T with (X T)'(X T) = I and T'S T diagonal (the Demmler-Reinsch
    basis), so each coefficient's edf is literally a shrinkage factor
    d_i/(d_i + lambda) in [0, 1]: in raw basis coordinates the diagonal of
    the edf matrix is not so bounded. Eigenvalues below 1e-12 of the largest
    clamp to exact zero, keeping the penalty null space unpenalized even at
    extreme lambdas. Skipped (unchanged block) if X'X is not numerically
    positive definite.
    """
    S, label = block.penalties[0]
    if rank_psd(S) == 0:
        return block
    A = block.X.T @ block.X
    try:
        R = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return block
    r_inv = solve_triangular(R, np.eye(A.shape[0]), lower=True)
    w, U = np.linalg.eigh(r_inv @ S @ r_inv.T)
    w = np.where(w < 1e-12 * max(w[-1], 0.0), 0.0, w)
    T = r_inv.T @ U
    # Nesting (rather than folding T into the constraint map) keeps the
    # stored design bit-identical to what the evaluator returns at the
    # training covariates: both compute (evaluated X) @ T.
    ev = basis_mod._ConstrainedEval(block.evaluator, T)
    Xn = block.X @ T
    p = Xn.shape[1]
    return BasisBlock(term_label=block.term_label, X=Xn,
                      penalties=[(np.diag(w), label)],
                      null_dim=(p - int(np.sum(w > 0)),), evaluator=ev,
                      kind=block.kind, n_cov=block.n_cov,
                      constraint=block.constraint,
                      marginal_maps=block.marginal_maps,
                      sub_terms=block.sub_terms)


def _group_penalties(entries: list, p: int) -> list:
    """Connected components of penalties by overlapping column support."""
    supports = [e.support() for e in entries]
    parent = list(range(len(entries)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner = -np.ones(p, dtype=np.int64)
    for i, supp in enumerate(supports):
        for c in supp:
            if owner[c] == -1:
                owner[c] = i
            else:
                ri, rj = find(i), find(int(owner[c]))
                if ri != rj:
                    parent[ri] = rj
    comps: dict[int, list[int]] = {}
    for i in range(len(entries)):
        comps.setdefault(find(i), []).append(i)
    groups = []
    for members in comps.values():
        members = sorted(members)
        support = np.unique(np.concatenate([supports[i] for i in members]))
        if len(members) == 1:
            rank = entries[members[0]].rank
        else:
            local = np.zeros((support.size, support.size))
            pos = {c: t for t, c in enumerate(support)}
            for i in members:
                e = entries[i]
                idx = np.array([pos[c] for c in supports[i]])
                sub = e.S[np.ix_(supports[i] - e.offset, supports[i] - e.offset)]
                local[np.ix_(idx, idx)] += sub
            rank = rank_psd(local)
        groups.append(PenaltyGroup(tuple(members), support, rank))
    return groups


def assemble(spec: ModelSpec, table: DataTable) -> AssembledDesign:
    """Build the stacked design: intercept + coded parametric + smooth blocks.

    Rows are sorted by (series, order) when the table declares a series key,
    so AR(1) whitening and residual diagnostics see contiguous series runs.
    """
    if spec.response not in table.columns:
        raise SchemaError(f"response column {spec.response!r} not in table")
    if table.series_key is not None:
        series = table.factor(table.series_key)
        order = table.numeric(table.order_key)
        idx = np.lexsort((order, series.codes))
        table = table.take(idx)
    y = np.asarray(table.numeric(spec.response), dtype=np.float64).copy()

    col_parts = [np.ones((table.n_rows, 1))]
    coef_names = ["(Intercept)"]
    col_ranges = {"(Intercept)": (0, 1)}
    cursor = 1
    parametric = []
    for term in spec.parametric_terms:
        built = _build_parametric(term, table)
        cols, names = built.build(table)
        col_parts.append(cols)
        coef_names.extend(names)
        col_ranges[term.label] = (cursor, cursor + cols.shape[1])
        cursor += cols.shape[1]
        parametric.append(built)

    blocks: dict[str, BasisBlock] = {}
    term_covariates: dict[str, tuple] = {}
    entries: list[PenaltyEntry] = []
    scale_maps = table.meta.get("scale_maps", {})
    for term in spec.smooth_terms:
        block, cov_names = _build_smooth(term, table)
        if block.kind == "smooth" and len(block.penalties) == 1:
            block = _natural_reparam(block)
        label = term.label
        if label in col_ranges:
            raise SchemaError(f"term label collision: {label!r}")
        block.term_label = label
        maps = {c: scale_maps[c] for c in cov_names if c in scale_maps}
        block.marginal_maps = maps or None
        if block.sub_terms is not None:
            block.sub_terms = [(f"{label.split(':')[0]}:{lev}", a, b)
                               for lev, a, b in block.sub_terms]
        blocks[label] = block
        term_covariates[label] = cov_names
        col_parts.append(block.X)
        coef_names.extend(f"{label}[{j}]" for j in range(block.p_term))
        col_ranges[label] = (cursor, cursor + block.p_term)
        for S, pen_label in block.penalties:
            rank = rank_psd(S)
            if rank == 0:
                continue
            w, V = np.linalg.eigh(0.5 * (S + S.T))
            keep = w > 1e-9 * max(w[-1], 1.0)
            sqrt = (np.sqrt(w[keep])[:, None] * V[:, keep].T)
            entries.append(PenaltyEntry(label=f"{label}/{pen_label}", term_label=label,
                                        S=S, offset=cursor, rank=rank,
                                        logpdet_unit=float(np.sum(np.log(w[keep]))),
                                        sqrt=sqrt))
        cursor += block.p_term

    X = np.hstack(col_parts)
    if not np.all(np.isfinite(X)):
        raise NumericError("assembled design contains non-finite entries")
    groups = _group_penalties(entries, X.shape[1])
    m_null = X.shape[1] - sum(g.rank for g in groups)
    series_codes = order_values = None
    if table.series_key is not None:
        series_codes = table.factor(table.series_key).codes
        order_values = table.numeric(table.order_key)
    return AssembledDesign(y=y, X=X, col_ranges=col_ranges, penalties=entries,
                           groups=groups, m_null_total=m_null, blocks=blocks,
                           term_covariates=term_covariates, parametric=parametric,
                           coef_names=coef_names, spec=spec, table=table,
                           series_codes=series_codes, order_values=order_values)


# ---------------------------------------------------------------------------
# whitening


def ar1_whiten(design: AssembledDesign, rho: float,
               series: np.ndarray | None = None) -> AssembledDesign:
    """Whiten y and X for AR(1) errors with the given rho.

    Within each series, row t becomes row_t - rho*row_{t-1} and the first row
    is scaled by sqrt(1 - rho^2): left-multiplication by the inverse Cholesky
    factor of the AR(1) correlation matrix. Penalties are unchanged.
    """
    if not (0.0 <= rho < 1.0):
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    if series is None:
        series = design.series_codes
    if series is None:
        series = np.zeros(design.n, dtype=np.int64)
    series = np.asarray(series)
    if series.shape[0] != design.n:
        raise ShapeError("series column not aligned with design rows")
    starts = np.ones(design.n, dtype=bool)
    starts[1:] = series[1:] != series[:-1]
    if design.order_values is not None:
        order = design.order_values
        inside = ~starts
        if np.any(order[inside] <= order[np.flatnonzero(inside) - 1]):
            raise DomainError("rows are not sorted by order within series")
    scale = math.sqrt(1.0 - rho * rho)
    y = design.y.copy()
    X = design.X.copy()
    y[1:] -= rho * design.y[:-1]
    X[1:] -= rho * design.X[:-1]
    y[starts] = scale * design.y[starts]
    X[starts] = scale * design.X[starts]
    return replace(design, y=y, X=X, whitened=True, rho=rho,
                   _xtx=None, _xty=None, _yty=None)


# ---------------------------------------------------------------------------
# penalized least squares


class PlsSolution(NamedTuple):
    beta: np.ndarray
    vb_unscaled: np.ndarray
    edf_per_coef: np.ndarray
    ridged: bool


def _augmented_rows(design: AssembledDesign, lambdas: np.ndarray):
    parts = []
    for entry, lam in zip(design.penalties, lambdas):
        if lam > 0 and entry.rank > 0:
            rows = np.zeros((entry.rank, design.p))
            rows[:, entry.offset:entry.offset + entry.p_block] = \
                math.sqrt(lam) * entry.sqrt
            parts.append(rows)
    return parts


def pls_solve(design: AssembledDesign, lambdas) -> PlsSolution:
    """Penalized least squares via QR of the augmented system.

    Stacks X over the penalty square roots sqrt(lambda_j) R_j and solves the
    joint least-squares problem, which is backward stable even for extreme
    lambdas. If the penalized Hessian is numerically singular, a ridge of
    1e-10 * mean(diag) is added once and the solution is flagged.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (len(design.penalties),):
        raise ShapeError(f"expected {len(design.penalties)} lambdas, "
                         f"got shape {lambdas.shape}")
    if np.any(lambdas < 0) or not np.all(np.isfinite(lambdas)):
        raise DomainError("lambdas must be finite and >= 0")
    B = np.vstack([design.X] + _augmented_rows(design, lambdas))
    y_aug = np.concatenate([design.y, np.zeros(B.shape[0] - design.n)])
    ridged = False
    Q, R = qr(B, mode="economic")
    rdiag = np.abs(np.diag(R))
    if rdiag.min() <= 1e-10 * max(rdiag.max(), 1.0):
        diag_a = (design.X ** 2).sum(axis=0)
        for entry, lam in zip(design.penalties, lambdas):
            sl = slice(entry.offset, entry.offset + entry.p_block)
            diag_a[sl] += lam * np.diag(entry.S)
        delta = RIDGE_OF_LAST_RESORT * float(diag_a.mean())
        if delta <= 0:
            raise RankError("design is identically zero")
        B = np.vstack([B, math.sqrt(delta) * np.eye(design.p)])
        y_aug = np.concatenate([y_aug, np.zeros(design.p)])
        Q, R = qr(B, mode="economic")
        rdiag = np.abs(np.diag(R))
        if rdiag.min() <= 1e-12 * max(rdiag.max(), 1.0):
            worst = design.coef_names[int(np.argmin(rdiag))]
            raise RankError(f"penalized system singular even after ridge; "
                            f"offending column {worst!r}")
        ridged = True
    beta = solve_triangular(R, Q.T @ y_aug)
    r_inv = solve_triangular(R, np.eye(design.p))
    vb = r_inv @ r_inv.T
    vb = 0.5 * (vb + vb.T)
    xtx, _, _ = design.ensure_products()
    edf = np.einsum("ij,ji->i", vb, xtx)
    # Trim pure float noise at the [0, 1] boundaries; real excursions remain.
    edf = np.where((edf > 1.0) & (edf < 1.0 + 1e-8), 1.0, edf)
    edf = np.where((edf < 0.0) & (edf > -1e-8), 0.0, edf)
    return PlsSolution(beta=beta, vb_unscaled=vb, edf_per_coef=edf, ridged=ridged)


# ---------------------------------------------------------------------------
# REML


def _logpdet_pair(lam1: float, A1: np.ndarray, r1: int,
                  lam2: float, A2: np.ndarray, r2: int,
                  rank_total: int) -> float:
    """Log pseudo-determinant of lam1*A1 + lam2*A2 for a two-penalty group.

    Direct eigendecomposition of the weighted sum loses the lam2-scale
    eigenvalues once lam1/lam2 exceeds float precision. Instead: split on
    the range/null of A1 alone (well-scaled eigenproblem), where the top
    block T = lam1*D1 + lam2*B11 is positive definite and the Schur
    complement carries the lam2 scale exactly. log pdet = log det(T) +
    sum of the top (rank_total - r1) log eigenvalues of the Schur block,
    exact because the summed matrix's null space lies inside null(A1).
    """
    if lam2 * np.abs(A2).max(initial=0.0) > lam1 * np.abs(A1).max(initial=0.0):
        lam1, A1, r1, lam2, A2, r2 = lam2, A2, r2, lam1, A1, r1
    w1, U = np.linalg.eigh(0.5 * (A1 + A1.T))
    order = np.argsort(w1)[::-1]
    d1 = w1[order[:r1]]
    if np.any(d1 <= 0):
        raise NumericError("penalty pair dominant block lost rank")
    Uo = U[:, order]
    B = Uo.T @ (0.5 * (A2 + A2.T)) @ Uo
    total = 0.0
    if r1:
        T = lam1 * np.diag(d1) + lam2 * B[:r1, :r1]
        try:
            ct = cho_factor(T, lower=True)
        except np.linalg.LinAlgError:
            raise NumericError("penalty pair top block not positive definite") from None
        total += 2.0 * float(np.sum(np.log(np.diag(ct[0]))))
    dim = A1.shape[0]
    r_rest = rank_total - r1
    if dim > r1:
        B12 = B[:r1, r1:]
        C = B[r1:, r1:]
        if r1:
            C = C - lam2 * (B12.T @ cho_solve(ct, B12))
        w2 = np.linalg.eigvalsh(lam2 * 0.5 * (C + C.T))
        kept = np.sort(w2)[::-1][:r_rest]
        if kept.size < r_rest or np.any(kept <= 0):
            raise NumericError("penalty pair lost rank in the Schur block")
        total += float(np.sum(np.log(kept)))
    elif r_rest:
        raise NumericError("penalty pair rank exceeds its support")
    return total


def _log_pdet_slambda(design: AssembledDesign, lambdas: np.ndarray) -> float:
    """Rank-aware log pseudo-determinant of sum_j lambda_j S_j.

    Penalties with disjoint column support factor exactly into
    rank * log(lambda) + log pdet(S). Overlapping pairs (factor smooths,
    tensor margins) go through the scale-split Schur path; any larger
    group falls back to an eigendecomposition of the weighted sum
    restricted to the group's columns, keeping the structural rank computed
    at unit weights so extreme lambda ratios cannot change the rank count.
    """
    total = 0.0
    for group in design.groups:
        if len(group.indices) == 1:
            j = group.indices[0]
            total += design.penalties[j].rank * math.log(lambdas[j])
            total += design.penalties[j].logpdet_unit
            continue
        support = group.support
        pos = {c: t for t, c in enumerate(support)}
        locals_ = []
        for j in group.indices:
            e = design.penalties[j]
            supp_j = e.support()
            idx = np.array([pos[c] for c in supp_j])
            sub = e.S[np.ix_(supp_j - e.offset, supp_j - e.offset)]
            A = np.zeros((support.size, support.size))
            A[np.ix_(idx, idx)] = sub
            locals_.append((float(lambdas[j]), A, e.rank))
        if len(locals_) == 2:
            (l1, A1, r1), (l2, A2, r2) = locals_
            total += _logpdet_pair(l1, A1, r1, l2, A2, r2, group.rank)
            continue
        local = sum(lam * A for lam, A, _ in locals_)
        w = np.linalg.eigvalsh(0.5 * (local + local.T))
        kept = np.sort(w)[::-1][:group.rank]
        if np.any(kept <= 0):
            raise NumericError(f"penalty group lost rank at lambdas {lambdas}")
        total += float(np.sum(np.log(kept)))
    return total


def reml_score(design: AssembledDesign, log_lambdas) -> float:
    """Negative log restricted marginal likelihood at the given log-lambdas."""
    log_lambdas = np.atleast_1d(np.asarray(log_lambdas, dtype=np.float64))
    if log_lambdas.shape != (len(design.penalties),):
        raise ShapeError(f"expected {len(design.penalties)} log-lambdas")
    lambdas = np.exp(log_lambdas)
    if not np.all(np.isfinite(lambdas)):
        raise NumericError(f"non-finite lambdas {lambdas}")
    xtx, xty, yty = design.ensure_products()
    A = xtx.copy()
    for entry, lam in zip(design.penalties, lambdas):
        sl = slice(entry.offset, entry.offset + entry.p_block)
        A[sl, sl] += lam * entry.S
    try:
        chol = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        A[np.diag_indices_from(A)] += RIDGE_OF_LAST_RESORT * float(np.diag(A).mean())
        try:
            chol = cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            raise NumericError(f"penalized Hessian not positive definite "
                               f"at lambdas {lambdas}") from None
    beta = cho_solve(chol, xty)
    rss_pen = max(yty - float(beta @ xty), 1e-300)
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    logpdet_s = _log_pdet_slambda(design, lambdas)
    n_eff = design.n - design.m_null_total
    if n_eff <= 0:
        raise NumericError("more unpenalized directions than observations")
    phi = max(rss_pen / n_eff, 1e-300)
    score = 0.5 * n_eff * (math.log(2.0 * math.pi * phi) + 1.0) \
        - 0.5 * logpdet_s + 0.5 * logdet_a
    if not math.isfinite(score):
        raise NumericError(f"non-finite REML score at lambdas {lambdas}")
    return float(score)


@dataclass(frozen=True)
class LambdaSearch:
    lambdas: np.ndarray
    score: float
    converged: bool
    n_eval: int


def optimize_lambdas(design: AssembledDesign, init=None) -> LambdaSearch:
    """Minimize the REML score over log-lambda by Nelder-Mead simplex.

    Starts from init (default log lambda = 0) plus restarts at +-5 in log10
    space; the best of the three runs wins. Non-convergence returns the best
    point found with converged=False rather than raising.
    """
    m = len(design.penalties)
    if m == 0:
        raise DomainError("no penalties to optimize")
    if init is None:
        init = np.zeros(m)
    init = np.clip(np.asarray(init, dtype=np.float64), LOG_LAMBDA_MIN, LOG_LAMBDA_MAX)
    evals = 0

    def objective(x):
        nonlocal evals
        evals += 1
        try:
            return reml_score(design, x)
        except NumericError:
            return np.inf

    starts = [init,
              np.full(m, 5.0 * math.log(10.0)),
              np.full(m, -5.0 * math.log(10.0))]
    best = None
    for x0 in starts:
        res = minimize(objective, x0, method="Nelder-Mead",
                       bounds=[(LOG_LAMBDA_MIN, LOG_LAMBDA_MAX)] * m,
                       options={"xatol": 1e-6, "fatol": 1e-8,
                                "maxfev": 4000 * max(1, m // 2),
                                "adaptive": m > 2})
        if best is None or res.fun < best.fun:
            best = res
    if not math.isfinite(best.fun):
        raise NumericError("REML score non-finite at every candidate lambda")
    if not best.success:
        warnings.warn("lambda search hit its evaluation budget before "
                      "converging; returning best point found", stacklevel=2)
    return LambdaSearch(lambdas=np.exp(best.x), score=float(best.fun),
                        converged=bool(best.success), n_eval=evals)


# ---------------------------------------------------------------------------
# the fitted model


@dataclass
class FittedModel:
    """Coefficients, smoothing parameters, covariance, and fit scores."""

    spec: ModelSpec
    design_raw: AssembledDesign
    design: AssembledDesign
    beta: np.ndarray
    lambdas: np.ndarray
    sigma2: float
    vb: np.ndarray
    vb_unscaled: np.ndarray
    edf_per_coef: np.ndarray
    total_edf: float
    reml: float
    loglik: float
    rss_whitened: float
    residuals_raw: np.ndarray
    residuals_whitened: np.ndarray
    converged: bool
    ridged: bool

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def p(self) -> int:
        return self.design.p

    @property
    def coef_names(self) -> list:
        return self.design.coef_names

    @property
    def table(self) -> DataTable:
        return self.design_raw.table

    @property
    def param_count(self) -> int:
        """Parameter count for REML-score comparisons.

        Counts the unpenalized parametric coefficients (intercept included)
        plus one per smoothing parameter; penalized basis coefficients are
        not free parameters in this convention.
        """
        return self.design.n_parametric_cols + len(self.lambdas)

    def column_range(self, term: str) -> tuple[int, int]:
        return self.design.column_range(term)

    def term_labels(self) -> list:
        return [lbl for lbl in self.design.col_ranges]

    @property
    def fitted_values(self) -> np.ndarray:
        return self.design_raw.X @ self.beta


def fit(spec: ModelSpec, table: DataTable, lambdas=None) -> FittedModel:
    """Assemble, whiten, select smoothing parameters, and solve.

    lambdas fixes the smoothing parameters (one per penalty) instead of
    optimizing them; lambdas=None runs the REML search. sigma2 uses the
    residual-df convention RSS_whitened/(n - total edf); loglik is the
    Gaussian log-likelihood of the whitened residuals at the ML variance
    RSS/n, the convention under which AIC = n log(2 pi RSS/n) + n + 2(edf+1).
    """
    design_raw = assemble(spec, table)
    if spec.rho > 0:
        if design_raw.series_codes is None:
            raise SchemaError("rho > 0 requires the table's series/order keys")
        design = ar1_whiten(design_raw, spec.rho)
    else:
        design = design_raw

    converged = True
    if len(design.penalties) == 0:
        lambdas = np.zeros(0)
    elif lambdas is None:
        search = optimize_lambdas(design)
        lambdas = search.lambdas
        converged = search.converged
    else:
        lambdas = np.asarray(lambdas, dtype=np.float64)

    sol = pls_solve(design, lambdas)
    resid_w = design.y - design.X @ sol.beta
    rss_w = float(resid_w @ resid_w)
    total_edf = float(np.sum(sol.edf_per_coef))
    denom = design.n - total_edf
    if denom > 1e-8:
        sigma2 = rss_w / denom
    else:
        sigma2 = 0.0 if rss_w <= 1e-10 else math.nan
    n = design.n
    loglik = -0.5 * n * (math.log(2.0 * math.pi * max(rss_w, 1e-300) / n) + 1.0)
    if len(design.penalties) and np.all(lambdas > 0):
        try:
            reml = reml_score(design, np.log(lambdas))
        except NumericError:
            # user-pinned lambdas can defeat the score while the solve is fine
            reml = math.nan
    elif len(design.penalties) == 0:
        reml = reml_score(design, np.zeros(0))
    else:
        reml = math.nan
    resid_raw = design_raw.y - design_raw.X @ sol.beta
    sig = sigma2 if math.isfinite(sigma2) else 0.0
    return FittedModel(spec=spec, design_raw=design_raw, design=design,
                       beta=sol.beta, lambdas=lambdas, sigma2=sigma2,
                       vb=sig * sol.vb_unscaled, vb_unscaled=sol.vb_unscaled,
                       edf_per_coef=sol.edf_per_coef, total_edf=total_edf,
                       reml=reml, loglik=loglik, rss_whitened=rss_w,
                       residuals_raw=resid_raw, residuals_whitened=resid_w,
                       converged=converged, ridged=sol.ridged)


# ---------------------------------------------------------------------------
# prediction


def _evaluator_columns(design: AssembledDesign, term: str, table: DataTable):
    cols = []
    for name in design.term_covariates[term]:
        col = table.columns.get(name)
        if col is None:
            raise SchemaError(f"prediction table lacks column {name!r}")
        cols.append(col)
    return cols


def _extrapolation_mask(evaluator, cols) -> np.ndarray | None:
    if isinstance(evaluator, basis_mod._ConstrainedEval):
        return _extrapolation_mask(evaluator.base_ev, cols)
    if isinstance(evaluator, basis_mod._PerLevelEval):
        return _extrapolation_mask(evaluator.base_ev, cols[:-1])
    if isinstance(evaluator, basis_mod._TensorEval):
        ma = _extrapolation_mask(evaluator.ev_a, cols[:evaluator.n_cov_a])
        mb = _extrapolation_mask(evaluator.ev_b, cols[evaluator.n_cov_a:])
        if ma is None and mb is None:
            return None
        n = len(np.asarray(cols[0]))
        out = np.zeros(n, dtype=bool)
        if ma is not None:
            out |= ma
        if mb is not None:
            out |= mb
        return out
    if isinstance(evaluator, basis_mod._CrEval):
        return evaluator.out_of_range(np.asarray(cols[0], dtype=np.float64))
    return None


def design_matrix_for(model: FittedModel, newdata: DataTable,
                      include=None, exclude=None) -> np.ndarray:
    """Model matrix for new observations, with optional term masking.

    exclude zeroes the named terms' columns; include keeps only the named
    terms (plus the intercept). Spline terms extend linearly outside the
    training covariate range, with a warning naming the affected row count.
    """
    design = model.design_raw
    n = newdata.n_rows
    X = np.zeros((n, design.p))
    X[:, 0] = 1.0
    for built in design.parametric:
        a, b = design.col_ranges[built.label]
        cols, _ = built.build(newdata)
        X[:, a:b] = cols
    flagged = 0
    for label, block in design.blocks.items():
        a, b = design.col_ranges[label]
        cols = _evaluator_columns(design, label, newdata)
        mask = _extrapolation_mask(block.evaluator, cols)
        if mask is not None:
            flagged += int(mask.sum())
        X[:, a:b] = block.evaluate(cols, extrapolate=True)
    if flagged:
        warnings.warn(f"{flagged} rows lie outside a spline's training range; "
                      "linear extension applied", stacklevel=2)
    keep = dict.fromkeys(design.col_ranges, True)
    if include is not None:
        include = set(include) | {"(Intercept)"}
        for label in keep:
            keep[label] = label in include
    if exclude is not None:
        for label in exclude:
            if label not in keep:
                raise SchemaError(f"no term named {label!r}")
            keep[label] = False
    for label, flag in keep.items():
        if not flag:
            a, b = design.col_ranges[label]
            X[:, a:b] = 0.0
    return X


def predict(model: FittedModel, newdata: DataTable,
            include=None, exclude=None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and SE of the linear predictor at new observations."""
    X = design_matrix_for(model, newdata, include=include, exclude=exclude)
    mean = X @ model.beta
    se = np.sqrt(np.maximum(np.einsum("ij,ij->i", X @ model.vb, X), 0.0))
    return mean, se


def partial_effect(model: FittedModel, term: str,
                   grid: DataTable) -> tuple[np.ndarray, np.ndarray, DataTable]:
    """Centered contribution of a single term over a covariate grid.

    Only the term's own columns are evaluated, so the grid needs just that
    term's covariates (and its by/grouping factor, when it has one); all
    other model terms are irrelevant to the partial effect. The SE comes
    from the term's block of the posterior covariance and pinches to zero
    where a centered effect crosses zero.
    """
    design = model.design_raw
    if term not in design.blocks:
        raise SchemaError(f"no smooth term named {term!r}; have "
                          f"{sorted(design.blocks)}")
    a, b = design.col_ranges[term]
    block = design.blocks[term]
    cols = _evaluator_columns(design, term, grid)
    Xt = block.evaluate(cols, extrapolate=True)
    effect = Xt @ model.beta[a:b]
    vt = model.vb[a:b, a:b]
    se = np.sqrt(np.maximum(np.einsum("ij,ij->i", Xt @ vt, Xt), 0.0))
    return effect, se, grid
