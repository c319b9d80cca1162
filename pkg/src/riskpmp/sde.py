"""Forward SDE machinery on uniform time grids.

State processes follow

    dx = f(t, x, u) dt + sigma(t, x, u) dW,      x(0) = x0,

integrated with Euler-Maruyama over a path ensemble.  The module also solves
the linearized dynamics around a reference pair, builds the fundamental
matrix pair (phi, psi) with psi tracking the inverse flow, checks the
variation-of-constants representation of linearized solutions, and estimates
strong convergence order against registered closed-form solutions.

Array conventions (vectorized over paths):
  states x           (M, n)
  controls u         (M, m)
  drift f(t, x, u)   (M, n)
  diffusion          (M, n, d), column i is the coefficient of dW^i
  drift Jacobian     (M, n, n),    [p, i, j] = d f_i / d x_j
  diffusion Jacobian (M, d, n, n), [p, i, :, :] = d sigma_i / d x
Coefficient inputs to the linear solvers may drop leading axes (deterministic
or time-constant data) or be callables of the step index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .rng import ensemble_normals, validate_seed


class MissingClosedFormError(ValueError):
    """Raised when a convergence study needs an exact solution that is absent."""


class FundamentalMatrixError(RuntimeError):
    """Raised when the psi*phi inverse identity degrades past a tolerance."""


# ---------------------------------------------------------------------------
# time grid and Brownian ensemble


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if not (isinstance(self.n_steps, (int, np.integer)) and self.n_steps >= 1):
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def make_grid(horizon: float, n_steps: int) -> TimeGrid:
    """Uniform grid {0, dt, ..., horizon} with dt = horizon / n_steps."""
    return TimeGrid(float(horizon), int(n_steps))


@dataclass(frozen=True)
class BrownianEnsemble:
    """Brownian increments on a grid; increments[p, k, i] = W^i(t_{k+1}) - W^i(t_k)."""

    grid: TimeGrid
    increments: np.ndarray  # (M, K, d)
    seed: Optional[int] = None
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def levels(self) -> np.ndarray:
        """Brownian values at the grid nodes, shape (M, K+1, d), W(0) = 0."""
        m, k, d = self.increments.shape
        out = np.empty((m, k + 1, d))
        out[:, 0] = 0.0
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def terminal(self) -> np.ndarray:
        return self.increments.sum(axis=1)

    def coarsen(self, factor: int) -> "BrownianEnsemble":
        """Aggregate increments onto a grid with n_steps/factor steps (exact coupling)."""
        k = self.grid.n_steps
        if factor < 1 or k % factor != 0:
            raise ValueError(f"factor {factor} must divide n_steps {k}")
        m, _, d = self.increments.shape
        coarse = self.increments.reshape(m, k // factor, factor, d).sum(axis=2)
        return BrownianEnsemble(
            grid=make_grid(self.grid.horizon, k // factor),
            increments=coarse,
            seed=self.seed,
            path_offset=self.path_offset,
        )


def sample_brownian(
    grid: TimeGrid, dim: int, n_paths: int, seed: int, path_offset: int = 0
) -> BrownianEnsemble:
    """Sample a Brownian ensemble reproducibly from (seed, path, step, component).

    Increment (p, k, i) is sqrt(dt) times the normal at position k*dim + i of
    the counter-derived stream of global path index path_offset + p, so any
    path slice of a larger ensemble regenerates bit-exactly.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    seed = validate_seed(seed)
    z = ensemble_normals(seed, n_paths, grid.n_steps * dim, path_offset=path_offset)
    increments = math.sqrt(grid.dt) * z.reshape(n_paths, grid.n_steps, dim)
    return BrownianEnsemble(grid=grid, increments=increments, seed=seed, path_offset=path_offset)


# ---------------------------------------------------------------------------
# control laws


class ControlLaw:
    """Grid-adapted control signal.

    Values have shape (K, m) for a deterministic (open-loop) signal or
    (M, K, m) for a per-path signal; per-path values may only depend on the
    path's history up to each node, which holds by construction for recorded
    feedback laws and any deterministic array.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim not in (2, 3):
            raise ValueError("control values must have shape (K, m) or (M, K, m)")
        self.values = values

    @classmethod
    def constant(cls, u, n_steps: int) -> "ControlLaw":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(np.tile(u, (n_steps, 1)))

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], grid: TimeGrid) -> "ControlLaw":
        rows = [np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.nodes[:-1]]
        return cls(np.stack(rows))

    @property
    def deterministic(self) -> bool:
        return self.values.ndim == 2

    @property
    def n_steps(self) -> int:
        return self.values.shape[-2]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, k: int, n_paths: int) -> np.ndarray:
        """Control at step k broadcast to (n_paths, m)."""
        if self.deterministic:
            return np.broadcast_to(self.values[k], (n_paths, self.dim))
        return self.values[:, k, :]


class FeedbackLaw:
    """State feedback u = fn(t, x); realized values are recorded during integration."""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray], dim: int):
        self.fn = fn
        self.dim = dim

    def at_state(self, t: float, x: np.ndarray) -> np.ndarray:
        u = np.asarray(self.fn(t, x), dtype=float)
        return np.broadcast_to(u, (x.shape[0], self.dim))


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class DynamicsSpec:
    """Controlled SDE coefficients plus the metadata the checks rely on.

    ``control_grid`` is the finite working subset of the control set used for
    Hamiltonian maximization; it must contain the box vertices of the true
    control set.  ``convex_velocity_sets`` attests that the velocity sets
    {(f, sigma)(t, x, u) : u in U} are convex, which is what licenses tangent
    selections built from control differences when the diffusion is
    controlled.
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    drift_jac: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None
    diffusion_jac: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None
    control_grid: Optional[np.ndarray] = None
    lipschitz_bound: Optional[float] = None
    growth_envelope: Optional[Callable[[float], float]] = None
    controlled_diffusion: bool = False
    convex_velocity_sets: bool = False
    exact_terminal: Optional[Callable[[np.ndarray, float, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.control_grid is not None:
            grid = np.asarray(self.control_grid, dtype=float)
            if grid.ndim == 1:
                grid = grid[:, None]
            if grid.shape[1] != self.control_dim:
                raise ValueError("control_grid width must equal control_dim")
            self.control_grid = grid

    def check_jacobians(self, t: float, x: np.ndarray, u: np.ndarray,
                        rtol: float = 1e-4, atol: float = 1e-6) -> None:
        """Probe the declared Jacobians against central finite differences."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.broadcast_to(np.asarray(u, dtype=float), (x.shape[0], self.control_dim))
        h = 1e-6
        if self.drift_jac is not None:
            jac = self.drift_jac(t, x, u)
            fd = np.empty_like(jac)
            for j in range(self.state_dim):
                dx = np.zeros_like(x)
                dx[:, j] = h
                fd[:, :, j] = (self.drift(t, x + dx, u) - self.drift(t, x - dx, u)) / (2 * h)
            if not np.allclose(jac, fd, rtol=rtol, atol=atol):
                raise ValueError("drift_jac disagrees with finite differences")
        if self.diffusion_jac is not None:
            jac = self.diffusion_jac(t, x, u)
            fd = np.empty_like(jac)
            for j in range(self.state_dim):
                dx = np.zeros_like(x)
                dx[:, j] = h
                diff = (self.diffusion(t, x + dx, u) - self.diffusion(t, x - dx, u)) / (2 * h)
                fd[:, :, :, j] = np.swapaxes(diff, 1, 2)
            if not np.allclose(jac, fd, rtol=rtol, atol=atol):
                raise ValueError("diffusion_jac disagrees with finite differences")


# ---------------------------------------------------------------------------
# forward integration


@dataclass(frozen=True)
class StateEnsemble:
    grid: TimeGrid
    values: np.ndarray  # (M, K+1, n)
    first_failure: Optional[np.ndarray] = None  # (M,) step index of first non-finite, -1 if none

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def state_dim(self) -> int:
        return self.values.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]

    @property
    def failed_paths(self) -> np.ndarray:
        if self.first_failure is None:
            return np.empty(0, dtype=int)
        return np.nonzero(self.first_failure >= 0)[0]


def _as_law(law) -> Union[ControlLaw, FeedbackLaw]:
    if isinstance(law, (ControlLaw, FeedbackLaw)):
        return law
    return ControlLaw(np.asarray(law, dtype=float))


def euler_maruyama(
    dyn: DynamicsSpec,
    law,
    x0: np.ndarray,
    brownian: BrownianEnsemble,
    return_controls: bool = False,
):
    """Integrate the controlled SDE over the ensemble.

    x0 may be a single state (broadcast to all paths) or one state per path.
    Paths that turn non-finite are aborted: their values stay NaN from the
    offending node on and the first bad step is recorded on the ensemble.
    """
    grid = brownian.grid
    n_paths, n_steps, d = brownian.increments.shape
    n = dyn.state_dim
    if d != dyn.noise_dim:
        raise ValueError(f"Brownian dim {d} does not match dynamics noise_dim {dyn.noise_dim}")
    law = _as_law(law)
    feedback = isinstance(law, FeedbackLaw)
    if not feedback and law.n_steps != n_steps:
        raise ValueError("control law length does not match the grid")

    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, n)))
    out = np.empty((n_paths, n_steps + 1, n))
    out[:, 0] = x
    first_failure = np.full(n_paths, -1, dtype=int)
    alive = np.ones(n_paths, dtype=bool)
    realized = np.empty((n_paths, n_steps, law.dim)) if (feedback or return_controls) else None

    dt = grid.dt
    nodes = grid.nodes
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            t = nodes[k]
            u = law.at_state(t, x) if feedback else law.at(k, n_paths)
            if realized is not None:
                realized[:, k] = u
            f = dyn.drift(t, x, u)
            sig = dyn.diffusion(t, x, u)
            if f.shape != (n_paths, n):
                raise ValueError(f"drift returned shape {f.shape}, expected {(n_paths, n)}")
            if sig.shape != (n_paths, n, d):
                raise ValueError(f"diffusion returned shape {sig.shape}, expected {(n_paths, n, d)}")
            x = x + f * dt + np.einsum("pnd,pd->pn", sig, brownian.increments[:, k])
            bad = alive & ~np.isfinite(x).all(axis=1)
            if bad.any():
                first_failure[bad] = k + 1
                alive &= ~bad
            x[~alive] = np.nan
            out[:, k + 1] = x

    n_failed = int((first_failure >= 0).sum())
    if n_failed:
        warnings.warn(
            f"{n_failed} path(s) aborted on non-finite state "
            f"(first at step {int(first_failure[first_failure >= 0].min())})",
            RuntimeWarning,
            stacklevel=2,
        )
    states = StateEnsemble(grid=grid, values=out, first_failure=first_failure)
    if realized is not None and (return_controls or feedback):
        return states, ControlLaw(realized)
    return states


# ---------------------------------------------------------------------------
# linearized dynamics and fundamental matrices


def _stepper(obj, n_paths: int, n_steps: int, trailing: int):
    """Normalize a coefficient to a per-step accessor returning (M or 1, ...)."""
    if obj is None:
        return None
    if callable(obj):
        return lambda k: np.asarray(obj(k), dtype=float)
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == trailing:  # constant in time and paths
        view = arr[None]
        return lambda k: view
    if arr.ndim == trailing + 1:  # (K, ...)
        if arr.shape[0] != n_steps:
            raise ValueError(f"coefficient leading axis {arr.shape[0]} != n_steps {n_steps}")
        return lambda k: arr[k][None]
    if arr.ndim == trailing + 2:  # (M, K, ...)
        if arr.shape[1] != n_steps:
            raise ValueError(f"coefficient time axis {arr.shape[1]} != n_steps {n_steps}")
        return lambda k: arr[:, k]
    raise ValueError(f"coefficient has unsupported ndim {arr.ndim}")


def solve_linearized(
    A, D, g1, g2, brownian: BrownianEnsemble, y0: Optional[np.ndarray] = None
) -> StateEnsemble:
    """Integrate dy = (A y + g1) dt + sum_i (D_i y + g2^i) dW^i, y(0) = y0 (default 0).

    A: (n, n), (K, n, n), (M, K, n, n) or callable k -> (M or 1, n, n).
    D: stacked per-component Jacobians with trailing shape (d, n, n); may be None.
    g1 trailing (n,), g2 trailing (n, d); either may be None.
    """
    n_paths, n_steps, d = brownian.increments.shape
    a_at = _stepper(A, n_paths, n_steps, 2)
    if a_at is None:
        raise ValueError("A is required (use zeros for driftless linearization)")
    n = a_at(0).shape[-1]
    d_at = _stepper(D, n_paths, n_steps, 3)
    g1_at = _stepper(g1, n_paths, n_steps, 1)
    g2_at = _stepper(g2, n_paths, n_steps, 2)

    y = np.zeros((n_paths, n)) if y0 is None else np.array(
        np.broadcast_to(np.asarray(y0, dtype=float), (n_paths, n))
    )
    out = np.empty((n_paths, n_steps + 1, n))
    out[:, 0] = y
    dt = brownian.grid.dt
    for k in range(n_steps):
        dw = brownian.increments[:, k]
        drift = np.einsum("...ij,...j->...i", a_at(k), y)
        if g1_at is not None:
            drift = drift + g1_at(k)
        noise = np.zeros((n_paths, d, n))
        if d_at is not None:
            noise = noise + np.einsum("...dij,...j->...di", d_at(k), y)
        if g2_at is not None:
            noise = noise + np.swapaxes(g2_at(k), -1, -2)
        y = y + drift * dt + np.einsum("pdn,pd->pn", np.broadcast_to(noise, (n_paths, d, n)), dw)
        out[:, k + 1] = y
    return StateEnsemble(grid=brownian.grid, values=out)


@dataclass(frozen=True)
class FundamentalMatrices:
    grid: TimeGrid
    phi: np.ndarray  # (M or 1, K+1, n, n)
    psi: np.ndarray  # (M or 1, K+1, n, n)
    inverse_error: float
    worst_path: int
    worst_node: int

    @property
    def per_path(self) -> bool:
        return self.phi.shape[0] > 1

    def phi_at(self, k: int) -> np.ndarray:
        return self.phi[:, k]

    def psi_at(self, k: int) -> np.ndarray:
        return self.psi[:, k]


def fundamental_matrices(
    A, D, brownian: BrownianEnsemble, tol: Optional[float] = None
) -> FundamentalMatrices:
    """Euler-Maruyama fundamental pair phi (forward flow) and psi (inverse flow).

    phi_{k+1} = phi_k + A phi_k dt + sum_i D_i phi_k dW^i
    psi_{k+1} = psi_k - psi_k (A - sum_i D_i^2) dt - sum_i psi_k D_i dW^i

    Tracks the worst deviation of psi*phi from the identity (Frobenius norm)
    over all paths and nodes; raises FundamentalMatrixError if it exceeds tol.
    """
    n_paths, n_steps, d = brownian.increments.shape
    a_at = _stepper(A, n_paths, n_steps, 2)
    d_at = _stepper(D, n_paths, n_steps, 3)
    n = a_at(0).shape[-1]

    stochastic = False
    if d_at is not None:
        if callable(D):
            stochastic = True
        else:
            stochastic = bool(np.any(np.asarray(D) != 0.0))
    m_eff = n_paths if stochastic else max(a_at(0).shape[0], 1 if d_at is None else d_at(0).shape[0])

    eye = np.broadcast_to(np.eye(n), (m_eff, n, n)).copy()
    phi = np.empty((m_eff, n_steps + 1, n, n))
    psi = np.empty((m_eff, n_steps + 1, n, n))
    phi[:, 0] = eye
    psi[:, 0] = eye

    dt = brownian.grid.dt
    worst = (0.0, 0, 0)
    p_cur = phi[:, 0]
    s_cur = psi[:, 0]
    for k in range(n_steps):
        a_k = a_at(k)
        p_new = p_cur + np.einsum("...ij,...jk->...ik", a_k, p_cur) * dt
        b_k = a_k
        if d_at is not None:
            d_k = d_at(k)
            b_k = a_k - np.einsum("...dij,...djk->...ik", d_k, d_k)
        s_new = s_cur - np.einsum("...ij,...jk->...ik", s_cur, b_k) * dt
        if stochastic:
            dw = brownian.increments[:, k]
            d_k = d_at(k)
            p_new = p_new + np.einsum(
                "pdik,pd->pik", np.einsum("...dij,...jk->...dik", d_k, p_cur), dw
            )
            s_new = s_new - np.einsum(
                "pdik,pd->pik", np.einsum("...ij,...djk->...dik", s_cur, d_k), dw
            )
        phi[:, k + 1] = p_new
        psi[:, k + 1] = s_new
        p_cur, s_cur = p_new, s_new
        dev = np.einsum("...ij,...jk->...ik", s_new, p_new) - np.eye(n)
        err = np.sqrt(np.einsum("...ij,...ij->...", dev, dev))
        idx = int(np.argmax(err))
        if float(err.flat[idx]) > worst[0]:
            worst = (float(err.flat[idx]), idx, k + 1)

    fund = FundamentalMatrices(
        grid=brownian.grid, phi=phi, psi=psi,
        inverse_error=worst[0], worst_path=worst[1], worst_node=worst[2],
    )
    if tol is not None and fund.inverse_error > tol:
        raise FundamentalMatrixError(
            f"psi*phi deviates from identity by {fund.inverse_error:.3e} "
            f"(> {tol:.3e}) at node {fund.worst_node}, path {fund.worst_path}"
        )
    return fund


def representation_formula_check(
    A, D, g1, g2, brownian: BrownianEnsemble,
    fund: Optional[FundamentalMatrices] = None,
) -> float:
    """Sup-norm discrepancy between the directly integrated linearized solution
    and its variation-of-constants representation

        y(t) = phi(t) [ int_0^t psi (g1 - sum_i D_i g2^i) ds
                        + sum_i int_0^t psi g2^i dW^i ],

    both sides discretized on the shared grid.
    """
    n_paths, n_steps, d = brownian.increments.shape
    direct = solve_linearized(A, D, g1, g2, brownian).values
    if fund is None:
        fund = fundamental_matrices(A, D, brownian)
    n = direct.shape[2]
    d_at = _stepper(D, n_paths, n_steps, 3)
    g1_at = _stepper(g1, n_paths, n_steps, 1)
    g2_at = _stepper(g2, n_paths, n_steps, 2)

    acc = np.zeros((n_paths, n))
    dt = brownian.grid.dt
    sup_err = 0.0
    for k in range(n_steps):
        psi_k = fund.psi_at(k)
        integrand = np.zeros((n_paths, n))
        if g1_at is not None:
            integrand = integrand + g1_at(k)
        if g2_at is not None and d_at is not None:
            integrand = integrand - np.einsum("...dnm,...md->...n", d_at(k), g2_at(k))
        acc = acc + np.einsum("...nm,...m->...n", psi_k, integrand) * dt
        if g2_at is not None:
            psig2 = np.einsum("...nm,...md->...nd", psi_k, g2_at(k))
            acc = acc + np.einsum(
                "pnd,pd->pn",
                np.broadcast_to(psig2, (n_paths, n, d)),
                brownian.increments[:, k],
            )
        formula = np.einsum("...nm,...m->...n", fund.phi_at(k + 1), acc)
        sup_err = max(sup_err, float(np.abs(direct[:, k + 1] - formula).max()))
    return sup_err


# ---------------------------------------------------------------------------
# benchmarks and convergence order


def scalar_linear_dynamics(drift_coef: float, noise_coef: float) -> DynamicsSpec:
    """dx = a x dt + b x dW with registered exact solution (control-free)."""
    a, b = float(drift_coef), float(noise_coef)

    def drift(t, x, u):
        return a * x

    def diffusion(t, x, u):
        return (b * x)[:, :, None]

    def drift_jac(t, x, u):
        return np.broadcast_to(a * np.eye(1), (x.shape[0], 1, 1))

    def diffusion_jac(t, x, u):
        return np.broadcast_to(b * np.eye(1), (x.shape[0], 1, 1, 1))

    def exact_terminal(x0, horizon, w_terminal):
        return x0 * np.exp((a - 0.5 * b * b) * horizon + b * w_terminal)

    return DynamicsSpec(
        state_dim=1, control_dim=0, noise_dim=1,
        drift=drift, diffusion=diffusion,
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        control_grid=np.zeros((1, 0)),
        lipschitz_bound=max(abs(a), abs(b)),
        exact_terminal=exact_terminal,
    )


@dataclass(frozen=True)
class StrongOrderReport:
    n_steps_levels: tuple
    errors: tuple
    pairwise_orders: tuple
    estimate: float


def strong_convergence_order(
    dyn: DynamicsSpec,
    x0,
    horizon: float,
    n_steps_levels: Sequence[int],
    n_paths: int,
    seed: int,
) -> StrongOrderReport:
    """Estimate the strong order of Euler-Maruyama against dyn's closed form.

    Uses one Brownian ensemble at the finest level; coarser levels reuse the
    same paths through increment aggregation.  The estimate is the slope of
    log(error) against log(dt).
    """
    if dyn.exact_terminal is None:
        raise MissingClosedFormError("dynamics has no registered closed-form solution")
    levels = sorted(int(k) for k in n_steps_levels)
    if len(levels) < 2:
        raise ValueError("need at least two grid levels")
    finest = levels[-1]
    for k in levels:
        if finest % k != 0:
            raise ValueError(f"level {k} must divide the finest level {finest}")
    fine = sample_brownian(make_grid(horizon, finest), dyn.noise_dim, n_paths, seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    exact = dyn.exact_terminal(
        np.broadcast_to(x0, (n_paths, dyn.state_dim)), horizon, fine.terminal()
    )
    law_width = dyn.control_dim
    errors = []
    for k in levels:
        ens = fine.coarsen(finest // k)
        law = ControlLaw(np.zeros((k, law_width)))
        states = euler_maruyama(dyn, law, x0, ens)
        err = np.linalg.norm(states.terminal - exact, axis=1).mean()
        errors.append(float(err))
    dts = [horizon / k for k in levels]
    pairwise = tuple(
        float(np.log(errors[i] / errors[i + 1]) / np.log(dts[i] / dts[i + 1]))
        for i in range(len(levels) - 1)
    )
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    return StrongOrderReport(
        n_steps_levels=tuple(levels),
        errors=tuple(errors),
        pairwise_orders=pairwise,
        estimate=slope,
    )


def apriori_bound_report(dyn: DynamicsSpec, law, x0, brownian: BrownianEnsemble) -> dict:
    """Empirical version of the a priori estimate: compares E[sup_t |x|] with
    E[|x0| + int |f(s, 0, u)| ds + (int |sigma(s, 0, u)|^2 ds)^(1/2)]."""
    states = euler_maruyama(dyn, law, x0, brownian)
    lhs = float(np.linalg.norm(states.values, axis=2).max(axis=1).mean())
    n_paths = brownian.n_paths
    law = _as_law(law)
    zero = np.zeros((n_paths, dyn.state_dim))
    dt = brownian.grid.dt
    drift_part = np.zeros(n_paths)
    diff_part = np.zeros(n_paths)
    for k in range(brownian.grid.n_steps):
        t = brownian.grid.nodes[k]
        u = law.at(k, n_paths)
        drift_part += np.linalg.norm(dyn.drift(t, zero, u), axis=1) * dt
        sig = dyn.diffusion(t, zero, u)
        diff_part += np.einsum("pnd,pnd->p", sig, sig) * dt
    x0_norm = np.linalg.norm(np.broadcast_to(np.asarray(x0, dtype=float),
                                             (n_paths, dyn.state_dim)), axis=1)
    rhs = float((x0_norm + drift_part + np.sqrt(diff_part)).mean())
    return {"sup_norm": lhs, "bound_argument": rhs,
            "ratio": lhs / rhs if rhs > 0 else float("inf")}
