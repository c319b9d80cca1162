"""Coherent risk measures on weighted sample spaces.

Implements expectation, average value-at-risk

    AVaR_alpha(Z) = inf_t ( t + E[max(Z - t, 0)] / alpha ),

and convex mixtures of AVaR levels, together with subgradients, the dual
(sup over densities) representation check, directional derivatives, and a
randomized audit of the coherence axioms.

Conventions on a finite weighted sample: quantiles use the lower convention
q = inf{t : P(Z <= t) >= 1 - alpha}; the subgradient weight on the atom
{Z = q} may sit anywhere in the closed interval [0, 1/alpha], with boundary
contact flagged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_AGREEMENT_TOL = 1e-9
_SUBGRADIENT_SUM_TOL = 1e-9


class RiskConsistencyError(ArithmeticError):
    """Raised when two required routes to the same quantity disagree."""


@dataclass(frozen=True)
class SampledRandomVariable:
    """Real-valued random variable on a finite weighted sample space."""

    values: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValueError("sample is empty")
        if not np.isfinite(values).all():
            raise ValueError("sample values must be finite")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape != values.shape:
                raise ValueError("weights shape does not match values")
            if (w < 0).any():
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must sum to 1 within 1e-12, got {w.sum()!r}")
            object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.values.size

    def weight_array(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def mean(self) -> float:
        return float(self.weight_array() @ self.values)


def _as_sample(z) -> SampledRandomVariable:
    if isinstance(z, SampledRandomVariable):
        return z
    return SampledRandomVariable(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class RiskSubgradient:
    """A maximizing density xi from the dual representation, per sample point."""

    xi: np.ndarray
    quantile: Optional[float] = None          # single-level AVaR quantile, if applicable
    atom_weight: Optional[float] = None       # density value shared on {Z = quantile}
    boundary_hit: bool = False                # atom weight sits at 0 or 1/alpha
    unique: bool = True                       # face is a singleton on this sample


def _lower_quantile(values_sorted: np.ndarray, cum_weights: np.ndarray, level: float) -> int:
    """Index of inf{t : P(Z <= t) >= level} in the ascending sorted sample."""
    target = level * cum_weights[-1]
    # tolerate float drift in the cumulative sum when the level is attained exactly
    idx = int(np.searchsorted(cum_weights, target - 1e-12 * max(1.0, abs(target))))
    return min(idx, len(cum_weights) - 1)


class RiskMeasure:
    """Base class; subclasses fill in value/subgradient/directional derivative."""

    name = "risk"

    def value(self, z) -> float:
        raise NotImplementedError

    def subgradient(self, z) -> RiskSubgradient:
        raise NotImplementedError

    def directional_derivative(self, z, h, check: bool = True) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": self.name}


class Expectation(RiskMeasure):
    name = "expectation"

    def value(self, z) -> float:
        return _as_sample(z).mean()

    def subgradient(self, z) -> RiskSubgradient:
        sample = _as_sample(z)
        return RiskSubgradient(xi=np.ones(sample.size))

    def directional_derivative(self, z, h, check: bool = True) -> float:
        sample = _as_sample(z)
        h = np.asarray(h, dtype=float).reshape(-1)
        return float(sample.weight_array() @ h)


class AVaR(RiskMeasure):
    """Average value-at-risk at tail mass alpha in (0, 1]."""

    name = "avar"

    def __init__(self, alpha: float):
        alpha = float(alpha)
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.alpha = alpha

    def describe(self) -> dict:
        return {"type": self.name, "alpha": self.alpha}

    # -- internals ---------------------------------------------------------

    def _sorted(self, sample: SampledRandomVariable):
        order = np.argsort(sample.values, kind="stable")
        values = sample.values[order]
        weights = sample.weight_array()[order]
        return order, values, weights, np.cumsum(weights)

    def _tail_average(self, values, weights, cum, q_idx) -> float:
        # primal form evaluated at the lower quantile q:
        # AVaR = q + E[(Z - q)_+] / alpha
        q = values[q_idx]
        excess = weights @ np.maximum(values - q, 0.0)
        return float(q + excess / self.alpha)

    def _objective_at_knots(self, values, weights, cum) -> np.ndarray:
        # g(t) = t + E[(Z - t)_+] / alpha evaluated at every sample value via
        # suffix sums; exact because g is piecewise linear with these knots.
        total_wz = float(weights @ values)
        total_w = cum[-1]
        # suffix sums excluding index i: sum_{j > i} w_j z_j and sum_{j > i} w_j
        cum_wz = np.cumsum(weights * values)
        suffix_wz = total_wz - cum_wz
        suffix_w = total_w - cum
        return values + (suffix_wz - values * suffix_w) / self.alpha

    # -- public API --------------------------------------------------------

    def value(self, z) -> float:
        """Tail average, cross-checked against minimizing the primal objective.

        Route (a): lower quantile q plus the normalized excess above q.
        Route (b): exact minimum of t + E[(Z-t)_+]/alpha over its knots.
        The two must agree within 1e-9 (relative-guarded); route (a) is returned.
        """
        sample = _as_sample(z)
        _, values, weights, cum = self._sorted(sample)
        q_idx = _lower_quantile(values, cum, 1.0 - self.alpha)
        route_a = self._tail_average(values, weights, cum, q_idx)
        route_b = float(self._objective_at_knots(values, weights, cum).min())
        tol = _AGREEMENT_TOL * max(1.0, abs(route_a), abs(route_b))
        if abs(route_a - route_b) > tol:
            raise RiskConsistencyError(
                f"AVaR routes disagree: tail average {route_a!r} vs objective minimum {route_b!r}"
            )
        return route_a

    def subgradient(self, z) -> RiskSubgradient:
        """Maximizing density: 0 below the quantile, 1/alpha above, and the
        mean-one balancing weight on the atom {Z = q} (closed interval
        [0, 1/alpha]; boundary contact flagged)."""
        sample = _as_sample(z)
        order, values, weights, cum = self._sorted(sample)
        q_idx = _lower_quantile(values, cum, 1.0 - self.alpha)
        q = values[q_idx]
        above = sample.values > q
        atom = sample.values == q
        w = sample.weight_array()
        p_above = float(w[above].sum())
        p_atom = float(w[atom].sum())
        if p_atom <= 0.0:
            raise RiskConsistencyError("quantile atom has zero probability")
        lam = (1.0 - p_above / self.alpha) / p_atom
        boundary = lam <= 1e-12 or lam >= 1.0 / self.alpha - 1e-12
        lam_clipped = min(max(lam, 0.0), 1.0 / self.alpha)
        xi = np.zeros(sample.size)
        xi[above] = 1.0 / self.alpha
        xi[atom] = lam_clipped
        total = float(w @ xi)
        if abs(total - 1.0) > _SUBGRADIENT_SUM_TOL:
            raise RiskConsistencyError(f"subgradient mean {total!r} not 1 within 1e-9")
        n_atom = int(atom.sum())
        unique = n_atom == 1 or boundary
        return RiskSubgradient(
            xi=xi, quantile=float(q), atom_weight=float(lam_clipped),
            boundary_hit=bool(boundary), unique=bool(unique),
        )

    def directional_derivative(self, z, h, check: bool = True) -> float:
        """max{ E[xi h] : xi in the subdifferential at Z }.

        The face is parametrized by the atom weights: fixed 0/1-over-alpha
        off the atom, and on the atom a continuous knapsack (cap 1/alpha,
        budget fixed by mean one) filled greedily along descending h.
        Cross-checked against the one-sided finite difference when check=True.
        """
        sample = _as_sample(z)
        h = np.asarray(h, dtype=float).reshape(-1)
        if h.shape != sample.values.shape:
            raise ValueError("direction must match the sample shape")
        w = sample.weight_array()
        sub = self.subgradient(sample)
        q = sub.quantile
        above = sample.values > q
        atom = sample.values == q
        deriv = float((w[above] / self.alpha) @ h[above])
        budget = 1.0 - float(w[above].sum()) / self.alpha  # total atom density mass
        if budget > 1e-15:
            idx = np.nonzero(atom)[0]
            order = idx[np.argsort(-h[idx], kind="stable")]
            cap = 1.0 / self.alpha
            remaining = budget
            for i in order:
                take = min(cap * w[i], remaining)
                deriv += take * h[i]
                remaining -= take
                if remaining <= 1e-18:
                    break
        if check:
            self._check_directional(sample, h, deriv)
        return deriv

    def _check_directional(self, sample, h, deriv):
        base = self.value(sample)
        fds = []
        for step in (1e-3, 1e-4):
            shifted = SampledRandomVariable(sample.values + step * h, sample.weights)
            fds.append((self.value(shifted) - base) / step)
        extrapolated = fds[1] + (fds[1] - fds[0]) / 9.0  # h -> 0 limit of the linear trend
        tol = 1e-4 * max(1.0, abs(deriv))
        if abs(extrapolated - deriv) > tol:
            warnings.warn(
                f"directional derivative {deriv!r} differs from finite-difference "
                f"extrapolation {extrapolated!r}",
                RuntimeWarning,
                stacklevel=3,
            )


class MixtureAVaR(RiskMeasure):
    """Convex combination sum_j lambda_j AVaR_{alpha_j}."""

    name = "mixture"

    def __init__(self, alphas: Sequence[float], weights: Sequence[float]):
        alphas = [float(a) for a in alphas]
        weights = [float(w) for w in weights]
        if len(alphas) != len(weights) or not alphas:
            raise ValueError("alphas and weights must be equal-length and nonempty")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.components = [AVaR(a) for a in alphas]
        self.mix_weights = weights

    def describe(self) -> dict:
        return {
            "type": self.name,
            "alphas": [c.alpha for c in self.components],
            "weights": list(self.mix_weights),
        }

    def value(self, z) -> float:
        sample = _as_sample(z)
        return float(sum(w * c.value(sample) for c, w in zip(self.components, self.mix_weights)))

    def subgradient(self, z) -> RiskSubgradient:
        sample = _as_sample(z)
        xi = np.zeros(sample.size)
        unique = True
        boundary = False
        for comp, w in zip(self.components, self.mix_weights):
            sub = comp.subgradient(sample)
            xi += w * sub.xi
            unique &= sub.unique
            boundary |= sub.boundary_hit
        total = float(sample.weight_array() @ xi)
        if abs(total - 1.0) > _SUBGRADIENT_SUM_TOL:
            raise RiskConsistencyError(f"mixture subgradient mean {total!r} not 1")
        return RiskSubgradient(xi=xi, boundary_hit=boundary, unique=unique)

    def directional_derivative(self, z, h, check: bool = True) -> float:
        sample = _as_sample(z)
        return float(
            sum(
                w * c.directional_derivative(sample, h, check=check)
                for c, w in zip(self.components, self.mix_weights)
            )
        )


# ---------------------------------------------------------------------------
# module-level operations


def risk_value(measure: RiskMeasure, z) -> float:
    return measure.value(z)


def risk_subgradient(measure: RiskMeasure, z) -> RiskSubgradient:
    return measure.subgradient(z)


def directional_derivative(measure: RiskMeasure, z, h, check: bool = True) -> float:
    return measure.directional_derivative(z, h, check=check)


@dataclass(frozen=True)
class RepresentationReport:
    """Audit of rho(Z) = sup{E[xi Z] : xi in the risk envelope}."""

    risk: float
    best_sampled: float
    attained: float
    sup_gap: float          # rho - best sampled feasible density (>= -1e-9)
    attainment_error: float  # |rho - E[xi* Z]|
    n_trials: int

    @property
    def passed(self) -> bool:
        return self.sup_gap >= -_AGREEMENT_TOL and self.attainment_error <= _AGREEMENT_TOL


def representation_check(
    measure: RiskMeasure, z, n_trials: int = 64, seed: int = 0
) -> RepresentationReport:
    """Sample feasible densities from the risk envelope and verify none beats
    rho(Z), while the computed subgradient attains it.

    Feasible densities are built as convex mixtures of envelope extreme
    points (subgradients of the measure at random directions) and the
    constant density 1, so feasibility is exact by convexity.
    """
    sample = _as_sample(z)
    w = sample.weight_array()
    rng = np.random.default_rng(seed)
    rho = measure.value(sample)
    best = -np.inf
    for _ in range(int(n_trials)):
        direction = rng.normal(size=sample.size)
        extreme = measure.subgradient(
            SampledRandomVariable(direction, sample.weights)
        ).xi
        theta = rng.uniform()
        xi = theta * extreme + (1.0 - theta) * np.ones(sample.size)
        best = max(best, float((w * xi) @ sample.values))
    attained = float((w * measure.subgradient(sample).xi) @ sample.values)
    return RepresentationReport(
        risk=rho,
        best_sampled=best,
        attained=attained,
        sup_gap=rho - best,
        attainment_error=abs(rho - attained),
        n_trials=int(n_trials),
    )


@dataclass(frozen=True)
class CoherenceViolation:
    axiom: str
    lhs: float
    rhs: float
    witness: dict


@dataclass(frozen=True)
class CoherenceReport:
    n_trials: int
    tolerance: float
    violations: tuple

    @property
    def passed(self) -> bool:
        return len(self.violations) == 0


def coherence_suite(
    value_fn,
    n_trials: int = 200,
    seed: int = 0,
    tolerance: float = _AGREEMENT_TOL,
    max_size: int = 64,
) -> CoherenceReport:
    """Randomized audit of the coherence axioms for any sample functional.

    value_fn: RiskMeasure or callable SampledRandomVariable -> float.
    Checks convexity, monotonicity, translation invariance, and positive
    homogeneity on random weighted samples; violations carry witnesses.
    """
    if isinstance(value_fn, RiskMeasure):
        fn: Callable = value_fn.value
    else:
        fn = value_fn
    rng = np.random.default_rng(seed)
    violations = []

    def record(axiom, lhs, rhs, **witness):
        if lhs > rhs + tolerance:
            violations.append(
                CoherenceViolation(axiom=axiom, lhs=float(lhs), rhs=float(rhs), witness=witness)
            )

    for trial in range(int(n_trials)):
        size = int(rng.integers(2, max_size + 1))
        if rng.uniform() < 0.5:
            weights = None
        else:
            weights = rng.uniform(0.05, 1.0, size=size)
            weights = weights / weights.sum()
        z1 = rng.normal(scale=rng.uniform(0.5, 3.0), size=size)
        z2 = rng.normal(scale=rng.uniform(0.5, 3.0), size=size)
        s1 = SampledRandomVariable(z1, weights)
        s2 = SampledRandomVariable(z2, weights)

        lam = rng.uniform(0.05, 0.95)
        mix = SampledRandomVariable(lam * z1 + (1 - lam) * z2, weights)
        record(
            "convexity", fn(mix), lam * fn(s1) + (1 - lam) * fn(s2),
            trial=trial, lam=lam,
        )

        bigger = SampledRandomVariable(z1 + np.abs(z2), weights)
        record("monotonicity", fn(s1), fn(bigger), trial=trial)

        shift = float(rng.uniform(-3.0, 3.0))
        shifted = SampledRandomVariable(z1 + shift, weights)
        val = fn(s1)
        record("translation", fn(shifted), val + shift, trial=trial, shift=shift)
        record("translation", val + shift, fn(shifted), trial=trial, shift=shift)

        scale = float(rng.uniform(0.1, 4.0))
        scaled = SampledRandomVariable(scale * z1, weights)
        record("homogeneity", fn(scaled), scale * val, trial=trial, scale=scale)
        record("homogeneity", scale * val, fn(scaled), trial=trial, scale=scale)

    return CoherenceReport(
        n_trials=int(n_trials), tolerance=tolerance, violations=tuple(violations)
    )
