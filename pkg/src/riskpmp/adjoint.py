"""Backward costate solver along a candidate optimal ensemble.

The costate pair (p, q) is produced in three moves:

1. terminal assembly: p(T) from the stored risk subgradient, the cost
   gradient and any constraint gradients with signed multipliers,
2. martingale estimation: conditional expectations of the weighted terminal
   vector G = phi(T)^T p(T) by least-squares Monte Carlo on polynomial
   features of (x(t_k), W(t_k)),
3. extraction: p(t_k) = psi(t_k)^T m_k, and q_i(t_k) = psi^T mu_i - D_i^T p
   where mu_i is fitted per step from martingale increments times dW_i/dt.

All ensemble reductions go through single einsum calls with a fixed
contraction order, so results do not depend on any thread count.
"""

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .sde import (
    BrownianEnsemble,
    ControlLaw,
    DynamicsSpec,
    FundamentalMatrices,
    StateEnsemble,
    TimeGrid,
)

RIDGE = 1e-10
RIDGE_FLAG_SHIFT = 1e-8


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of (state, Brownian level) up to a total degree.

    Degree 2 over (x, W) is the default working basis; it reproduces every
    conditional expectation that is affine-quadratic in the linear-dynamics
    benchmarks exactly, and its inadequacy elsewhere shows up in the
    residual diagnostics rather than failing silently.
    """

    degree: int = 2
    include_brownian: bool = True

    def n_features(self, state_dim: int, noise_dim: int) -> int:
        v = state_dim + (noise_dim if self.include_brownian else 0)
        return sum(comb(v + deg - 1, deg) for deg in range(self.degree + 1))

    def feature_matrix(self, x: np.ndarray, w: Optional[np.ndarray]) -> np.ndarray:
        if self.include_brownian and w is not None:
            z = np.concatenate([x, w], axis=1)
        else:
            z = x
        m, v = z.shape
        cols = [np.ones((m, 1))]
        for deg in range(1, self.degree + 1):
            for idx in combinations_with_replacement(range(v), deg):
                cols.append(np.prod(z[:, idx], axis=1)[:, None])
        return np.concatenate(cols, axis=1)


def _regress(features: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Ridge-damped normal-equation fit with a least-squares cross solve.

    Returns (fitted values, residual rms, max abs shift of the fitted values
    caused by the ridge term).  The ridge is applied always; the shift is
    measured against a plain lstsq solution of the same system so that rank
    deficiency is handled on both routes.
    """
    m = features.shape[0]
    scale = np.sqrt(np.mean(features**2, axis=0))
    scale[scale == 0.0] = 1.0
    xs = features / scale
    target_2d = target if target.ndim == 2 else target[:, None]

    xtx = np.einsum("pb,pc->bc", xs, xs) / m
    xty = np.einsum("pb,pr->br", xs, target_2d) / m
    coef = np.linalg.solve(xtx + RIDGE * np.eye(xtx.shape[0]), xty)
    fitted = xs @ coef

    plain = np.linalg.lstsq(xs, target_2d, rcond=None)[0]
    shift = float(np.max(np.abs(fitted - xs @ plain))) if m else 0.0

    resid = target_2d - fitted
    resid_rms = float(np.sqrt(np.mean(resid**2)))
    if target.ndim == 1:
        fitted = fitted[:, 0]
    return fitted, resid_rms, shift


def conditional_expectation(
    regressand: np.ndarray,
    states: StateEnsemble,
    brownian: BrownianEnsemble,
    k: int,
    basis: Optional[RegressionBasis] = None,
) -> np.ndarray:
    """Least-squares projection of a terminal-measurable quantity onto
    polynomial features of (x(t_k), W(t_k)); the numerical realization of
    E[. | F_{t_k}] along the ensemble."""
    basis = basis or RegressionBasis()
    levels = brownian.levels()
    x = states.values[:, k, :]
    w = levels[:, k, :] if basis.include_brownian else None
    features = basis.feature_matrix(x, w)
    fitted, _, _ = _regress(features, np.asarray(regressand, dtype=float))
    return fitted


# ---------------------------------------------------------------------------
# terminal condition


@dataclass(frozen=True)
class TerminalCostate:
    p_T: np.ndarray          # (M, n)
    multipliers: Tuple[float, ...]
    xi: np.ndarray           # (M,) risk subgradient weights used in assembly

    @property
    def normal(self) -> bool:
        return self.multipliers[0] == -1.0


def assemble_terminal(
    xi,
    cost_gradient: np.ndarray,
    multipliers: Sequence[float] = (-1.0,),
    constraint_gradients: Sequence[np.ndarray] = (),
) -> TerminalCostate:
    """p(T) = xi * m0 * grad(cost) + sum_i m_i * grad(constraint_i).

    The leading multiplier must be -1 (normal) or 0 (abnormal); the rest are
    nonpositive, and the whole vector must be nontrivial.  xi may be a
    RiskSubgradient or a plain per-path array.
    """
    xi_values = np.asarray(getattr(xi, "xi", xi), dtype=float)
    grad = np.asarray(cost_gradient, dtype=float)
    if grad.ndim != 2:
        raise ValueError("cost_gradient must have shape (n_paths, state_dim)")
    if xi_values.shape != (grad.shape[0],):
        raise ValueError("xi must supply one weight per path")
    if np.any(xi_values < -1e-12):
        raise ValueError("risk subgradient weights must be nonnegative")

    mults = tuple(float(m) for m in multipliers)
    if mults[0] not in (-1.0, 0.0):
        raise ValueError("leading multiplier must be -1 (normal) or 0 (abnormal)")
    if any(m > 0.0 for m in mults[1:]):
        raise ValueError("constraint multipliers must be nonpositive")
    if all(m == 0.0 for m in mults):
        raise ValueError("multiplier vector must be nontrivial")
    if len(constraint_gradients) != len(mults) - 1:
        raise ValueError("need one gradient per constraint multiplier")

    p_T = mults[0] * xi_values[:, None] * grad
    for m_i, g_i in zip(mults[1:], constraint_gradients):
        p_T = p_T + m_i * np.asarray(g_i, dtype=float)
    if not np.all(np.isfinite(p_T)):
        raise ValueError("terminal costate is not finite")
    return TerminalCostate(p_T=p_T, multipliers=mults, xi=xi_values)


# ---------------------------------------------------------------------------
# backward solve


@dataclass(frozen=True)
class RegressionDiagnostics:
    basis_size: int
    residual_rms: np.ndarray      # (K+1,) martingale fit residuals per node
    mu_residual_rms: np.ndarray   # (K,) increment fit residuals per step
    ridge_max_shift: float
    ridge_flagged: bool
    notes: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class CostatePair:
    grid: TimeGrid
    p: np.ndarray                 # (M, K+1, n)
    q: np.ndarray                 # (M, K, n, d), per step
    diagnostics: RegressionDiagnostics
    bsde_residuals: np.ndarray    # (K,) ensemble-mean one-step residual norms
    bsde_residual_max: float

    @property
    def n_paths(self) -> int:
        return self.p.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.p[:, -1, :]


def linearization_along(dyn: DynamicsSpec, states: StateEnsemble, control) -> Tuple:
    """Per-step accessors for A_k, D_k along the candidate trajectory,
    suitable for fundamental_matrices and solve_adjoint.

    Declare diffusion_jac on the dynamics only when it is genuinely nonzero;
    leaving it None for additive noise keeps the fundamental pair
    deterministic, which is much cheaper.
    """
    if dyn.drift_jac is None:
        raise ValueError("adjoint machinery needs drift_jac on the dynamics")
    law = control if isinstance(control, ControlLaw) else ControlLaw(np.asarray(control, float))
    nodes = states.grid.nodes
    n_paths = states.n_paths

    def a_fn(k: int) -> np.ndarray:
        return dyn.drift_jac(nodes[k], states.values[:, k, :], law.at(k, n_paths))

    if dyn.diffusion_jac is None:
        return a_fn, None

    def d_fn(k: int) -> np.ndarray:
        return dyn.diffusion_jac(nodes[k], states.values[:, k, :], law.at(k, n_paths))

    return a_fn, d_fn


def solve_adjoint(
    dyn: DynamicsSpec,
    states: StateEnsemble,
    control,
    terminal: TerminalCostate,
    fund: FundamentalMatrices,
    brownian: BrownianEnsemble,
    basis: Optional[RegressionBasis] = None,
) -> CostatePair:
    """Solve the backward costate equation by regression.

    p(t_k) = psi(t_k)^T m_k with m_k the fitted conditional expectation of
    G = phi(T)^T p(T); the diffusion loading mu_i comes from regressing
    martingale increments times dW_i/dt on the same features, and
    q_i = psi^T mu_i - D_i^T p.  The terminal slice is set to p(T) exactly
    rather than through psi phi, so it matches the assembled condition
    bit for bit.
    """
    basis = basis or RegressionBasis()
    if isinstance(control, ControlLaw) or not callable(control):
        law = control if isinstance(control, ControlLaw) else ControlLaw(np.asarray(control, float))
    else:
        raise TypeError("pass the recorded ControlLaw from euler_maruyama, not a feedback callable")

    m_paths, n_nodes, n = states.values.shape
    n_steps = n_nodes - 1
    dt = states.grid.dt
    d = brownian.increments.shape[2]
    levels = brownian.levels()
    a_fn, d_fn = linearization_along(dyn, states, law)

    g_vec = np.einsum("...ji,...j->...i", fund.phi_at(n_steps), terminal.p_T)

    martingale = np.empty((m_paths, n_nodes, n))
    martingale[:, n_steps] = g_vec
    p = np.empty_like(martingale)
    p[:, n_steps] = terminal.p_T

    resid_rms = np.zeros(n_nodes)
    mu_resid_rms = np.zeros(n_steps)
    ridge_shift = 0.0

    def node_features(k: int) -> np.ndarray:
        w = levels[:, k, :] if basis.include_brownian else None
        return basis.feature_matrix(states.values[:, k, :], w)

    for k in range(n_steps):
        fitted, rms, shift = _regress(node_features(k), g_vec)
        martingale[:, k] = fitted
        resid_rms[k] = rms
        ridge_shift = max(ridge_shift, shift)
        p[:, k] = np.einsum("...ji,...j->...i", fund.psi_at(k), fitted)

    q = np.empty((m_paths, n_steps, n, d))
    bsde = np.empty(n_steps)
    for k in range(n_steps):
        dm = martingale[:, k + 1] - martingale[:, k]
        dw = brownian.increments[:, k, :]
        target = np.einsum("pn,pd->pnd", dm, dw).reshape(m_paths, n * d) / dt
        fitted, rms, shift = _regress(node_features(k), target)
        mu_resid_rms[k] = rms
        ridge_shift = max(ridge_shift, shift)
        mu = fitted.reshape(m_paths, n, d)
        q_k = np.einsum("...ji,...jd->...id", fund.psi_at(k), mu)
        if d_fn is not None:
            d_k = d_fn(k)
            q_k = q_k - np.einsum("pdji,pj->pid", d_k, p[:, k])
        q[:, k] = q_k

        hx = np.einsum("...ji,...j->...i", a_fn(k), p[:, k])
        if d_fn is not None:
            hx = hx + np.einsum("pdji,pjd->pi", d_k, q_k)
        step_resid = p[:, k + 1] - p[:, k] + hx * dt - np.einsum("pid,pd->pi", q_k, dw)
        bsde[k] = float(np.mean(np.linalg.norm(step_resid, axis=1)))

    diagnostics = RegressionDiagnostics(
        basis_size=basis.n_features(n, d if basis.include_brownian else 0),
        residual_rms=resid_rms,
        mu_residual_rms=mu_resid_rms,
        ridge_max_shift=ridge_shift,
        ridge_flagged=ridge_shift > RIDGE_FLAG_SHIFT,
        notes=["ridge damping changed fitted values beyond 1e-8"] if ridge_shift > RIDGE_FLAG_SHIFT else [],
    )
    return CostatePair(
        grid=states.grid,
        p=p,
        q=q,
        diagnostics=diagnostics,
        bsde_residuals=bsde,
        bsde_residual_max=float(bsde.max()) if n_steps else 0.0,
    )


# ---------------------------------------------------------------------------
# diagnostics on a solved pair


@dataclass(frozen=True)
class MartingaleReport:
    slopes: np.ndarray      # (n,) fitted drift of mean phi^T p per component
    stderrs: np.ndarray     # (n,)
    means: np.ndarray       # (K+1, n)
    passed: bool


def martingale_check(pair: CostatePair, fund: FundamentalMatrices) -> MartingaleReport:
    """The phi(t)^T-weighted costate must be a martingale, so the ensemble
    mean of each component should be flat in t.

    The slope estimate is the least-squares drift of the mean curve, which
    equals the mean of the per-path drifts; its standard error comes from
    the scatter of those per-path drifts, since paths are independent while
    the nodes of the mean curve are not.
    """
    weighted = np.einsum("...kji,...kj->...ki", fund.phi, pair.p)
    means = weighted.mean(axis=0)
    t_centered = pair.grid.nodes - pair.grid.nodes.mean()
    denom = float(t_centered @ t_centered)
    path_slopes = np.einsum("k,pki->pi", t_centered, weighted) / denom
    slopes = path_slopes.mean(axis=0)
    m_paths = path_slopes.shape[0]
    if m_paths > 1:
        stderrs = path_slopes.std(axis=0, ddof=1) / np.sqrt(m_paths)
    else:
        stderrs = np.zeros_like(slopes)
    passed = bool(np.all(np.abs(slopes) <= 5.0 * stderrs + 1e-12))
    return MartingaleReport(slopes=slopes, stderrs=stderrs, means=means, passed=passed)


@dataclass(frozen=True)
class TowerReport:
    node_pairs: List[Tuple[int, int]]
    rms_gaps: np.ndarray
    tolerances: np.ndarray
    passed: bool


def tower_check(
    regressand: np.ndarray,
    states: StateEnsemble,
    brownian: BrownianEnsemble,
    basis: Optional[RegressionBasis] = None,
    node_pairs: Optional[Sequence[Tuple[int, int]]] = None,
) -> TowerReport:
    """Projecting the step-k estimate down to step j < k must reproduce the
    step-j estimate: the gap is the j-projection of the step-k residual,
    whose sampling size is resid_rms * sqrt(B/M).  Pass at five times that,
    plus a small absolute floor covering ridge-level noise in exact fits."""
    basis = basis or RegressionBasis()
    n_steps = states.grid.n_steps
    if node_pairs is None:
        node_pairs = [(n_steps // 4, n_steps // 2), (n_steps // 2, (3 * n_steps) // 4)]
        node_pairs = [(j, k) for j, k in node_pairs if j < k]
    levels = brownian.levels()
    g = np.asarray(regressand, dtype=float)
    m_paths = g.shape[0]
    n_feat = basis.feature_matrix(
        states.values[:, 0, :], levels[:, 0, :] if basis.include_brownian else None
    ).shape[1]

    gaps = np.empty(len(node_pairs))
    tols = np.empty(len(node_pairs))
    for i, (j, k) in enumerate(node_pairs):
        if not 0 <= j < k <= n_steps:
            raise ValueError("node pairs must satisfy 0 <= j < k <= K")
        feats_k = basis.feature_matrix(
            states.values[:, k, :], levels[:, k, :] if basis.include_brownian else None
        )
        m_k, rms_k, _ = _regress(feats_k, g)
        feats_j = basis.feature_matrix(
            states.values[:, j, :], levels[:, j, :] if basis.include_brownian else None
        )
        m_j, _, _ = _regress(feats_j, g)
        m_jk, _, _ = _regress(feats_j, m_k)
        diff = m_jk - m_j
        gaps[i] = float(np.sqrt(np.mean(diff**2)))
        tols[i] = 5.0 * rms_k * np.sqrt(n_feat / m_paths) + 1e-7
    return TowerReport(
        node_pairs=list(node_pairs),
        rms_gaps=gaps,
        tolerances=tols,
        passed=bool(np.all(gaps <= tols)),
    )
