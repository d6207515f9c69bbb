"""Covariance estimation by a geometric Newton method over Cholesky factors.

The coefficient matrix ``C`` of ``gamma(s, t) = Phi_p(s)' C Phi_p(t)`` is
parameterized as ``C = L L'`` with ``L`` lower triangular with positive
diagonal. The set of such ``L`` is treated as a Riemannian manifold under the
Log-Cholesky metric: off-diagonal entries move additively and diagonal
entries multiplicatively through the exponential map.

Lower-triangular tangent vectors are flattened in ``numpy.tril_indices``
order (row-major over the lower triangle).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .basis import BasisSpec
from .data import Scheme, SnippetDataset, pair_weights
from .exceptions import DataError, NumericalError
from .mean import argmin_grid
from .pilot import PilotEstimate

logger = logging.getLogger(__name__)

DEFAULT_P_GRID = (3, 5, 7, 9, 11)
DEFAULT_LAMBDA_GRID = tuple(10.0**k for k in range(-5, 0))
# candidates whose Cholesky diagonal underflows are rejected
_MIN_DIAG = 1e-150


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubjectBlock:
    """One subject's contribution: basis matrix (m x p, rows = observations),
    raw products ``R[j, l]`` and the subject weight."""

    times: np.ndarray
    B: np.ndarray
    R: np.ndarray
    weight: float


@dataclass(frozen=True, eq=False)
class CovDesign:
    """Everything the covariance objective needs, materialized once per ``p``.

    Besides the per-subject blocks, the off-diagonal data term is stored as a
    quadratic form in ``c = vec(C)``::

        sum_i w_i sum_{j != l} (R_ijl - b_ij C b_il')^2 = c'Ac - 2 r'c + const

    which makes objective, gradient and Hessian evaluations independent of
    the number of subjects.
    """

    spec: BasisSpec
    p: int
    blocks: tuple[SubjectBlock, ...]
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    pair_gram: np.ndarray
    pair_rhs: np.ndarray
    pair_const: float
    penalty: np.ndarray
    family_grid: np.ndarray = field(repr=False)
    family_basis: np.ndarray = field(repr=False)
    family_deriv: np.ndarray = field(repr=False)

    @property
    def n_subjects(self) -> int:
        return len(self.blocks)


def penalty_matrix(U: np.ndarray, V: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Symmetric P with ``vec(C)' P vec(C) = tr(CUCW) + tr(CVCV)`` for symmetric C."""
    return 0.5 * (np.kron(W, U) + np.kron(U, W)) + np.kron(V, V)


def design_from_blocks(
    spec: BasisSpec,
    p: int,
    blocks: Sequence[tuple[np.ndarray, np.ndarray, float]],
    family_grid_size: int = 101,
) -> CovDesign:
    """Build a design from ``(times, R, weight)`` triples, one per subject.

    ``R`` is the m x m matrix of raw products; its diagonal is only used by the
    diagonal-exclusion term of the trace form.
    """
    if int(p) != p or p < 1:
        raise DataError(f"p must be a positive integer, got {p}")
    p = int(p)
    out_blocks = []
    X_parts, g_parts, w_parts = [], [], []
    for times, R, w in blocks:
        times = np.asarray(times, dtype=float)
        R = np.asarray(R, dtype=float)
        m = times.size
        if m < 2:
            continue
        B = spec.evaluate(times, p)
        out_blocks.append(SubjectBlock(times, B, R, float(w)))
        j, l = np.nonzero(~np.eye(m, dtype=bool))
        X_parts.append((B[j][:, :, None] * B[l][:, None, :]).reshape(j.size, p * p))
        g_parts.append(R[j, l])
        w_parts.append(np.full(j.size, float(w)))
    if not out_blocks:
        raise DataError("no subject with at least two observations")
    X = np.concatenate(X_parts)
    g = np.concatenate(g_parts)
    w = np.concatenate(w_parts)
    A = X.T @ (w[:, None] * X)
    A = 0.5 * (A + A.T)
    U, V, W = (spec.gram(p, o) for o in "UVW")
    fg = np.linspace(0.0, 1.0, family_grid_size)
    return CovDesign(
        spec=spec,
        p=p,
        blocks=tuple(out_blocks),
        U=U,
        V=V,
        W=W,
        pair_gram=A,
        pair_rhs=X.T @ (w * g),
        pair_const=float(np.sum(w * g * g)),
        penalty=penalty_matrix(U, V, W),
        family_grid=fg,
        family_basis=spec.evaluate(fg, p),
        family_deriv=spec.evaluate(fg, p, 1),
    )


def precompute_design(
    dataset: SnippetDataset,
    mean_fn: Callable[[np.ndarray], np.ndarray],
    spec: BasisSpec,
    p: int,
    scheme: Scheme = Scheme.OBS,
) -> CovDesign:
    """Raw products of mean-centred responses, basis matrices and Gram matrices.

    Subjects with a single observation are skipped.
    """
    w = pair_weights(dataset.counts, scheme)
    blocks = []
    for i, subj in enumerate(dataset):
        if subj.m < 2:
            continue
        r = subj.values - np.asarray(mean_fn(subj.times), dtype=float)
        blocks.append((subj.times, np.outer(r, r), w[i]))
    return design_from_blocks(spec, p, blocks)


# ---------------------------------------------------------------------------
# manifold
# ---------------------------------------------------------------------------


def is_cholesky_point(L: np.ndarray) -> bool:
    L = np.asarray(L)
    return (
        L.ndim == 2
        and L.shape[0] == L.shape[1]
        and np.all(np.triu(L, 1) == 0)
        and np.all(np.diag(L) > 0)
    )


def exp_map(X: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Log-Cholesky exponential map ``Exp_X(S)``.

    Strictly lower parts add; the diagonal becomes ``diag(X) * exp(diag(S) / diag(X))``.
    """
    X = np.asarray(X, dtype=float)
    S = np.asarray(S, dtype=float)
    out = np.tril(X, -1) + np.tril(S, -1)
    dx = np.diag(X)
    out[np.diag_indices_from(out)] = dx * np.exp(np.diag(S) / dx)
    return out


def tril_to_vec(M: np.ndarray) -> np.ndarray:
    return M[np.tril_indices(M.shape[0])]


def vec_to_tril(v: np.ndarray, p: int) -> np.ndarray:
    M = np.zeros((p, p))
    M[np.tril_indices(p)] = v
    return M


# ---------------------------------------------------------------------------
# objective, gradient and Hessian
# ---------------------------------------------------------------------------


def objective(L: np.ndarray, design: CovDesign, lam: float) -> float:
    """Penalized weighted least-squares loss as a function of the Cholesky factor.

    Trace form: ``sum_i w_i {||R_i - B_i C B_i'||_F^2 - sum_j (R_ijj - b_ij C b_ij')^2}
    + lam {tr(CUCW) + tr(CVCV)}`` with ``C = L L'``.
    """
    C = L @ L.T
    total = 0.0
    for blk in design.blocks:
        resid = blk.R - blk.B @ C @ blk.B.T
        total += blk.weight * (np.sum(resid * resid) - np.sum(np.diag(resid) ** 2))
    return float(total + lam * penalty_value(C, design))


def penalty_value(C: np.ndarray, design: CovDesign) -> float:
    U, V, W = design.U, design.V, design.W
    return float(np.trace(C @ U @ C @ W) + np.trace(C @ V @ C @ V))


def gradient(L: np.ndarray, design: CovDesign, lam: float) -> np.ndarray:
    """Gradient ``F(L)`` of the objective, projected to the lower triangle.

    Sum over subjects of ``w_i {-4 B'RBL + 4 B'B C B'B L - 4 sum_j b_j'b_j C b_j'b_j L
    + 4 sum_j R_jj b_j'b_j L}`` plus ``2 lam (UCW + WCU) L + 4 lam VCV L``.
    """
    C = L @ L.T
    F = np.zeros_like(C)
    for blk in design.blocks:
        B = blk.B
        BL = B @ L
        BtB = B.T @ B
        fitted_diag = np.einsum("jk,kl,jl->j", B, C, B)
        F += blk.weight * (
            -4.0 * B.T @ blk.R @ BL
            + 4.0 * BtB @ C @ BtB @ L
            - 4.0 * B.T @ (fitted_diag[:, None] * BL)
            + 4.0 * B.T @ (np.diag(blk.R)[:, None] * BL)
        )
    U, V, W = design.U, design.V, design.W
    F += 2.0 * lam * (U @ C @ W + W @ C @ U) @ L + 4.0 * lam * V @ C @ V @ L
    return np.tril(F)


class QuadraticModel:
    """Objective, gradient and Hessian evaluated through the vec(C) quadratic form."""

    def __init__(self, design: CovDesign, lam: float):
        self.design = design
        self.lam = float(lam)
        self.p = design.p
        self.M = design.pair_gram + self.lam * design.penalty
        self.rows, self.cols = np.tril_indices(self.p)

    def value(self, L: np.ndarray) -> float:
        c = (L @ L.T).ravel()
        d = self.design
        return float(c @ (self.M @ c) - 2.0 * d.pair_rhs @ c + d.pair_const)

    def grad_C(self, C: np.ndarray) -> np.ndarray:
        G = 2.0 * (self.M @ C.ravel() - self.design.pair_rhs)
        G = G.reshape(self.p, self.p)
        return 0.5 * (G + G.T)

    def euclidean_grad(self, L: np.ndarray) -> np.ndarray:
        """Full (not triangle-projected) derivative of Q with respect to L."""
        return 2.0 * self.grad_C(L @ L.T) @ L

    def gradient(self, L: np.ndarray) -> np.ndarray:
        return np.tril(self.euclidean_grad(L))

    def jacobian(self, L: np.ndarray) -> np.ndarray:
        """Rows are ``vec(E_a L' + L E_a')`` for the lower-triangular coordinates a."""
        p, rows, cols = self.p, self.rows, self.cols
        d = rows.size
        J = np.zeros((d, p, p))
        idx = np.arange(d)
        J[idx, rows, :] += L[:, cols].T
        J[idx, :, rows] += L[:, cols].T
        return J.reshape(d, p * p)

    def hessian(self, L: np.ndarray) -> np.ndarray:
        """Hessian of ``S -> Q(Exp_L(S))`` at ``S = 0`` in lower-triangular coordinates."""
        rows, cols = self.rows, self.cols
        J = self.jacobian(L)
        H = 2.0 * J @ self.M @ J.T
        G = self.grad_C(L @ L.T)
        same_col = cols[:, None] == cols[None, :]
        H += np.where(same_col, 2.0 * G[rows[:, None], rows[None, :]], 0.0)
        # second derivative of the diagonal exponential: d^2/ds^2 L exp(s/L) = 1/L at 0
        diag = rows == cols
        Fe = 2.0 * G @ L
        H[diag, diag] += np.diag(Fe) / np.diag(L)
        return 0.5 * (H + H.T)


def hessian(L: np.ndarray, design: CovDesign, lam: float) -> np.ndarray:
    """Hessian of ``Psi(S) = Q(Exp_L(S))`` at ``S = 0``; a d x d matrix with d = p(p+1)/2."""
    return QuadraticModel(design, lam).hessian(L)


# ---------------------------------------------------------------------------
# initialization and the constraint family
# ---------------------------------------------------------------------------


def _duplication(p: int) -> np.ndarray:
    rows, cols = np.tril_indices(p)
    D = np.zeros((p, p, rows.size))
    D[rows, cols, np.arange(rows.size)] = 1.0
    D[cols, rows, np.arange(rows.size)] = 1.0
    return D.reshape(p * p, rows.size)


def unconstrained_minimizer(design: CovDesign, lam: float) -> np.ndarray:
    """Minimizer of the objective over all symmetric C (no definiteness constraint)."""
    p = design.p
    D = _duplication(p)
    M = D.T @ (design.pair_gram + lam * design.penalty) @ D
    r = D.T @ design.pair_rhs
    ev = np.linalg.eigvalsh(M)
    if ev[-1] <= 0 or ev[0] <= 1e-13 * ev[-1]:
        raise NumericalError(f"singular normal system for p={p}: too many basis functions for the pair design")
    theta = linalg.solve(M, r, assume_a="pos")
    C = (D @ theta).reshape(p, p)
    return 0.5 * (C + C.T)


def repair_psd(C: np.ndarray) -> np.ndarray:
    """Replace nonpositive eigenvalues by 0.01 x the largest singular value."""
    lam, P = np.linalg.eigh(0.5 * (C + C.T))
    top = np.max(np.abs(lam))
    if top == 0:
        return np.eye(C.shape[0]) * 1e-8
    lam = np.where(lam > 1e-12 * top, lam, 0.01 * top)
    out = (P * lam) @ P.T
    return 0.5 * (out + out.T)


def init_point(design: CovDesign, lam: float) -> np.ndarray:
    """Starting Cholesky factor from the repaired unconstrained minimizer."""
    C = repair_psd(unconstrained_minimizer(design, lam))
    return np.linalg.cholesky(C)


def family_check(C: np.ndarray, spec: BasisSpec | CovDesign, M1: float = 100.0, M2: float = 100.0,
                 grid_size: int = 101) -> bool:
    """Whether ``gamma_C`` satisfies ``sup|gamma| <= M1`` and ``sup ||grad gamma|| <= M2`` on a grid."""
    if isinstance(spec, CovDesign) and spec.family_grid.size == grid_size:
        E0, E1 = spec.family_basis, spec.family_deriv
    else:
        bspec = spec.spec if isinstance(spec, CovDesign) else spec
        g = np.linspace(0.0, 1.0, grid_size)
        E0 = bspec.evaluate(g, C.shape[0])
        E1 = bspec.evaluate(g, C.shape[0], 1)
    E0C = E0 @ C
    if np.max(np.abs(E0C @ E0.T)) > M1:
        return False
    Ds = E1 @ C @ E0.T  # d/ds gamma(s_a, t_b)
    return bool(np.max(Ds * Ds + Ds.T * Ds.T) <= M2 * M2)


# ---------------------------------------------------------------------------
# Newton iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NewtonOptions:
    max_iter: int = 50
    tol: float = 1e-6
    M1: float = 100.0
    M2: float = 100.0
    max_damping: int = 12
    max_halvings: int = 30
    feasibility_halvings: int = 10

    def __post_init__(self):
        if self.max_iter < 1:
            raise DataError("max_iter must be at least 1")
        if not self.tol > 0:
            raise DataError("tol must be positive")


@dataclass(frozen=True, eq=False)
class CovFit:
    """Fitted covariance ``gamma(s, t) = Phi_p(s)' C Phi_p(t)``."""

    spec: BasisSpec
    C: np.ndarray
    lam: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def __call__(self, s, t) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        Bs = self.spec.evaluate(s.ravel(), self.p)
        Bt = self.spec.evaluate(t.ravel(), self.p)
        return np.einsum("ik,kl,il->i", Bs, self.C, Bt).reshape(s.shape)

    def surface(self, grid_s, grid_t=None) -> np.ndarray:
        """``gamma(grid_s[a], grid_t[b])`` as a matrix."""
        grid_t = grid_s if grid_t is None else grid_t
        Es = self.spec.evaluate(grid_s, self.p)
        Et = self.spec.evaluate(grid_t, self.p)
        return Es @ self.C @ Et.T

    def to_dict(self) -> dict:
        return {
            "type": "cov_fit",
            **self.spec.to_dict(),
            "p": self.p,
            "lambda": self.lam,
            "C": [float(format(c, ".17g")) for c in self.C.ravel()],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovFit":
        try:
            if d.get("type", "cov_fit") != "cov_fit":
                raise DataError(f"not a covariance fit document (type={d.get('type')!r})")
            p = int(d["p"])
            C = np.asarray(d["C"], dtype=float)
            if C.size != p * p:
                raise DataError("covariance fit: C has wrong number of entries")
            C = C.reshape(p, p)
            if not np.allclose(C, C.T, rtol=0, atol=1e-12 * max(1.0, np.abs(C).max())):
                raise DataError("covariance fit: C is not symmetric")
            return cls(BasisSpec.from_dict(d), 0.5 * (C + C.T), float(d["lambda"]), dict(d.get("diagnostics", {})))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"invalid covariance fit document: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def eval_cov(fit: CovFit, s, t) -> np.ndarray:
    return fit(s, t)


def _try(model: QuadraticModel, L: np.ndarray, S: np.ndarray):
    """Candidate ``Exp_L(S)`` and its objective; overflowing steps score +inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        cand = exp_map(L, S)
        ok = np.all(np.isfinite(cand)) and np.min(np.diag(cand)) > _MIN_DIAG
        Qc = model.value(cand) if ok else np.inf
    return cand, (Qc if np.isfinite(Qc) else np.inf)


def _newton_step(model: QuadraticModel, L, Q, F, opts: NewtonOptions, floor: float):
    """Damped Newton step with gradient-descent fallback.

    Returns ``(candidate, value, step)`` or ``None`` when no descent was found,
    or the string ``"flat"`` when the predicted decrease is below rounding level.
    """
    p = model.p
    f = tril_to_vec(F)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        H = model.hessian(L)
    hnorm = max(np.linalg.norm(H), np.finfo(float).tiny)
    taus = [0.0] + [1e-8 * hnorm * 10.0**k for k in range(opts.max_damping)]
    if not np.all(np.isfinite(H)):
        taus = []
    for k, tau in enumerate(taus):
        try:
            cf = linalg.cho_factor(H + tau * np.eye(H.shape[0]), lower=True)
        except linalg.LinAlgError:
            continue
        eta = -linalg.cho_solve(cf, f)
        if k == 0 and -0.5 * (f @ eta) <= floor:
            return "flat"
        S = vec_to_tril(eta, p)
        cand, Qc = _try(model, L, S)
        if Qc < Q:
            return cand, Qc, S
    # steepest descent along -F with halving
    S = -F / max(1.0, np.linalg.norm(F))
    for _ in range(opts.max_halvings):
        cand, Qc = _try(model, L, S)
        if Qc < Q:
            return cand, Qc, S
        S = 0.5 * S
    if np.linalg.norm(F) ** 2 <= floor:
        return "flat"
    return None


def newton_fit(
    design: CovDesign,
    lam: float,
    opts: NewtonOptions | None = None,
    L0: np.ndarray | None = None,
) -> CovFit:
    """Fit the coefficient matrix by the geometric Newton method.

    Iterates ``L <- Exp_L(eta)`` with ``H eta = -F(L)`` (damped when needed)
    until the gradient norm drops below ``tol * max(1, ||F(L0)||)``, the
    iteration cap is hit, or every candidate leaves the constraint family
    (the last feasible iterate is returned). The objective never increases.

    Termination reasons: ``converged``, ``max_iter``, ``constraint``,
    ``stalled`` (no descent direction found even after maximum damping).
    """
    opts = opts or NewtonOptions()
    if lam < 0:
        raise DataError(f"lambda must be nonnegative, got {lam}")
    model = QuadraticModel(design, lam)
    L = init_point(design, lam) if L0 is None else np.array(L0, dtype=float)
    if not is_cholesky_point(L):
        raise DataError("initial point must be lower triangular with positive diagonal")

    def feasible(M):
        return family_check(M @ M.T, design, opts.M1, opts.M2, design.family_grid.size)

    Q = model.value(L)
    Q0 = Q
    F = model.gradient(L)
    g0 = float(np.linalg.norm(F))
    tol = opts.tol * max(1.0, g0)
    # rounding level of the quadratic-form evaluation
    floor = 1e-14 * (design.pair_const + abs(Q) + 1e-300)
    reason = "max_iter"
    it = 0
    history = [Q]
    while True:
        if np.linalg.norm(F) <= tol:
            reason = "converged"
            break
        if it >= opts.max_iter:
            reason = "max_iter"
            break
        step = _newton_step(model, L, Q, F, opts, floor)
        if isinstance(step, str):
            reason = "converged"
            break
        if step is None:
            reason = "stalled"
            break
        cand, Qc, S = step
        if not feasible(cand):
            for _ in range(opts.feasibility_halvings):
                S = 0.5 * S
                cand, Qc = _try(model, L, S)
                if Qc < Q and feasible(cand):
                    break
            else:
                reason = "constraint"
                break
        L, Q = cand, Qc
        F = model.gradient(L)
        history.append(Q)
        it += 1

    C = L @ L.T
    C = 0.5 * (C + C.T)
    diagnostics = {
        "iterations": it,
        "gradient_norm": float(np.linalg.norm(F)),
        "initial_gradient_norm": g0,
        "objective": float(Q),
        "initial_objective": float(Q0),
        "termination": reason,
        "min_cholesky_diagonal": float(np.min(np.diag(L))),
        "feasible": bool(feasible(L)),
    }
    logger.debug("newton_fit p=%d lam=%g: %s", design.p, lam, diagnostics)
    return CovFit(design.spec, C, float(lam), diagnostics)


# ---------------------------------------------------------------------------
# tuning
# ---------------------------------------------------------------------------


@dataclass
class CovTuningResult:
    p: int
    lam: float
    table: dict  # (p, lam) -> band error
    fit: CovFit
    fits: dict = field(default_factory=dict, repr=False)  # every successful grid fit

    def rows(self):
        return [(p, lam, err) for (p, lam), err in sorted(self.table.items())]


def band_error(fit: CovFit, pilot: PilotEstimate) -> float:
    """Sum of squared deviations from the pilot over band grid pairs."""
    band = pilot.band
    diff = pilot.values - fit.surface(pilot.grid)
    return float(np.sum(diff[band] ** 2))


def select_cov_tuning(
    dataset: SnippetDataset,
    mean_fn: Callable[[np.ndarray], np.ndarray],
    spec: BasisSpec,
    p_grid: Sequence[int] = DEFAULT_P_GRID,
    lam_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    pilot: PilotEstimate | None = None,
    scheme: Scheme = Scheme.OBS,
    opts: NewtonOptions | None = None,
) -> CovTuningResult:
    """Choose ``(p, lambda)`` minimizing the band error against a pilot estimate.

    Ties are broken by smaller ``p`` then smaller ``lambda``. Grid points
    whose fit fails get an infinite error; if all fail, the last error is
    re-raised.
    """
    if pilot is None:
        raise DataError("a pilot estimate is required for tuning selection")
    p_grid = sorted({int(p) for p in p_grid})
    lam_grid = sorted({float(x) for x in lam_grid})
    if not p_grid or not lam_grid:
        raise DataError("candidate grids must be nonempty")
    table, fits = {}, {}
    last_error: Exception | None = None
    for p in p_grid:
        try:
            design = precompute_design(dataset, mean_fn, spec, p, scheme)
        except NumericalError as exc:
            last_error = exc
            for lam in lam_grid:
                table[p, lam] = np.inf
            continue
        for lam in lam_grid:
            try:
                fit = newton_fit(design, lam, opts)
            except NumericalError as exc:
                last_error = exc
                table[p, lam] = np.inf
                continue
            table[p, lam] = band_error(fit, pilot)
            fits[p, lam] = fit
    if not fits:
        assert last_error is not None
        raise last_error
    p, lam = argmin_grid(table)
    return CovTuningResult(p, lam, table, fits[p, lam], fits)
