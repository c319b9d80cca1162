import numpy as np
import pytest

from riskpmp.sde import ControlLaw, DynamicsSpec, euler_maruyama, make_grid, sample_brownian
from riskpmp.variational import (
    ItoGapReport,
    TangentSelection,
    ito_counterexample,
    linearization_rate,
    selection_continuity,
    tangent_from_control,
)

# ---------------------------------------------------------------------------
# dynamics used throughout


def double_integrator(cubic=0.0):
    """dy = v dt + dW, dv = (u - cubic*y^3) dt; cubic=0 is the planner model."""

    def drift(t, x, u):
        return np.stack([x[:, 1], u[:, 0] - cubic * x[:, 0] ** 3], axis=1)

    def diffusion(t, x, u):
        out = np.zeros(x.shape + (1,))
        out[:, 0, 0] = 1.0
        return out

    def drift_jac(t, x, u):
        jac = np.zeros((x.shape[0], 2, 2))
        jac[:, 0, 1] = 1.0
        jac[:, 1, 0] = -3.0 * cubic * x[:, 0] ** 2
        return jac

    return DynamicsSpec(
        state_dim=2, control_dim=1, noise_dim=1,
        drift=drift, diffusion=diffusion, drift_jac=drift_jac,
        control_grid=np.linspace(-1, 1, 21),
    )


def scalar_linear(a=0.8, b=0.3):
    return DynamicsSpec(
        state_dim=1, control_dim=1, noise_dim=1,
        drift=lambda t, x, u: a * x + u,
        diffusion=lambda t, x, u: b * x[..., None],
        drift_jac=lambda t, x, u: np.full((x.shape[0], 1, 1), a),
        diffusion_jac=lambda t, x, u: np.full((x.shape[0], 1, 1, 1), b),
    )


# ---------------------------------------------------------------------------
# tangent selections


def test_tangent_same_control_is_zero():
    dyn = double_integrator()
    grid = make_grid(1.0, 10)
    bm = sample_brownian(grid, 1, 30, seed=1)
    law = ControlLaw.constant(0.5, 10)
    states = euler_maruyama(dyn, law, np.zeros(2), bm)
    sel = tangent_from_control(dyn, states, law, law)
    assert sel.zero
    assert not np.any(sel.g1)
    assert sel.g2 is None


def test_tangent_sop_substitution():
    dyn = double_integrator()
    grid = make_grid(2.0, 8)
    bm = sample_brownian(grid, 1, 25, seed=2)
    u_star = ControlLaw.constant(-1.0, 8)
    states = euler_maruyama(dyn, u_star, np.zeros(2), bm)
    sel = tangent_from_control(dyn, states, u_star, ControlLaw.constant(1.0, 8))
    np.testing.assert_allclose(sel.g1[:, :, 0], 0.0)
    np.testing.assert_allclose(sel.g1[:, :, 1], 2.0)
    assert sel.g2 is None


def test_tangent_control_affine_difference():
    dyn = scalar_linear()
    grid = make_grid(1.0, 6)
    bm = sample_brownian(grid, 1, 12, seed=3)
    u_star = ControlLaw.constant(0.25, 6)
    states = euler_maruyama(dyn, u_star, np.ones(1), bm)
    w = ControlLaw(np.linspace(-1, 1, 6)[:, None])
    sel = tangent_from_control(dyn, states, u_star, w)
    expected = np.linspace(-1, 1, 6) - 0.25
    np.testing.assert_allclose(sel.g1[:, :, 0] - expected[None, :], 0.0, atol=1e-12)


def test_tangent_warns_on_controlled_diffusion_without_attestation():
    def diffusion(t, x, u):
        return u[:, :, None] * np.ones((x.shape[0], 1, 1))

    base = dict(
        state_dim=1, control_dim=1, noise_dim=1,
        drift=lambda t, x, u: -x,
        drift_jac=lambda t, x, u: np.full((x.shape[0], 1, 1), -1.0),
        controlled_diffusion=True,
    )
    grid = make_grid(1.0, 5)
    bm = sample_brownian(grid, 1, 10, seed=4)
    u_star = ControlLaw.constant(0.2, 5)
    w = ControlLaw.constant(0.8, 5)

    dyn = DynamicsSpec(diffusion=diffusion, **base)
    states = euler_maruyama(dyn, u_star, np.ones(1), bm)
    with pytest.warns(UserWarning, match="velocity sets"):
        tangent_from_control(dyn, states, u_star, w)

    attested = DynamicsSpec(diffusion=diffusion, convex_velocity_sets=True, **base)
    import warnings as warnings_mod
    with warnings_mod.catch_warnings(record=True) as record:
        warnings_mod.simplefilter("always")
        sel = tangent_from_control(attested, states, u_star, w)
    assert len(record) == 0
    np.testing.assert_allclose(sel.g2, 0.6, atol=1e-12)


# ---------------------------------------------------------------------------
# linearization rate


def test_rate_zero_selection_is_zero():
    dyn = double_integrator()
    grid = make_grid(1.0, 50)
    bm = sample_brownian(grid, 1, 200, seed=5)
    law = ControlLaw.constant(0.0, 50)
    states = euler_maruyama(dyn, law, np.zeros(2), bm)
    sel = tangent_from_control(dyn, states, law, law)
    table = linearization_rate(dyn, states, law, sel, [0.5, 0.25, 0.125], bm)
    np.testing.assert_array_equal(table.rates, 0.0)
    assert table.passed


@pytest.mark.parametrize("n_steps", [100, 400])
def test_rate_linear_dynamics_floor_is_roundoff(n_steps):
    # Euler linearizes linear dynamics exactly, so the gap is pure float
    # accumulation at any grid
    dyn = scalar_linear()
    grid = make_grid(1.0, n_steps)
    bm = sample_brownian(grid, 1, 500, seed=6)
    u_star = ControlLaw.constant(0.1, n_steps)
    states = euler_maruyama(dyn, u_star, np.ones(1), bm)
    sel = tangent_from_control(dyn, states, u_star, ControlLaw.constant(0.9, n_steps))
    table = linearization_rate(dyn, states, u_star, sel, [0.2, 0.05, 0.0125], bm)
    assert np.max(table.rates) <= 1e-9
    assert table.passed


def test_rate_nonlinear_drift_halves():
    dyn = double_integrator(cubic=0.1)
    n_steps = 400
    grid = make_grid(1.0, n_steps)
    bm = sample_brownian(grid, 1, 2000, seed=7)
    u_star = ControlLaw.constant(0.3, n_steps)
    states = euler_maruyama(dyn, u_star, np.zeros(2), bm)
    sel = tangent_from_control(dyn, states, u_star, ControlLaw.constant(-0.8, n_steps))
    eps = [0.2, 0.1, 0.05, 0.025]
    table = linearization_rate(dyn, states, u_star, sel, eps, bm)
    assert table.passed
    assert table.rates[-1] < 0.5 * table.rates[0]
    # smooth drift: the rate is close to linear in eps
    assert table.rates[-1] < 0.25 * table.rates[0]

    rerun = linearization_rate(dyn, states, u_star, sel, eps, bm)
    assert np.array_equal(table.rates, rerun.rates)


def test_rate_rejects_bad_epsilons():
    dyn = scalar_linear()
    grid = make_grid(1.0, 4)
    bm = sample_brownian(grid, 1, 8, seed=8)
    law = ControlLaw.constant(0.0, 4)
    states = euler_maruyama(dyn, law, np.ones(1), bm)
    sel = tangent_from_control(dyn, states, law, law)
    for bad in ([], [0.5, 0.5], [0.1, 0.2], [1.5, 0.2], [-0.1]):
        with pytest.raises(ValueError):
            linearization_rate(dyn, states, law, sel, bad, bm)


# ---------------------------------------------------------------------------
# selection continuity


def test_continuity_equal_selections_zero():
    dyn = double_integrator()
    grid = make_grid(1.0, 20)
    bm = sample_brownian(grid, 1, 50, seed=9)
    law = ControlLaw.constant(0.0, 20)
    states = euler_maruyama(dyn, law, np.zeros(2), bm)
    sel = tangent_from_control(dyn, states, law, ControlLaw.constant(1.0, 20))
    assert selection_continuity(dyn, states, law, sel, sel, bm) == 0.0


def test_continuity_scaled_pair_matches_zero_pair():
    dyn = scalar_linear()
    n_steps = 30
    grid = make_grid(1.0, n_steps)
    bm = sample_brownian(grid, 1, 300, seed=10)
    u_star = ControlLaw.constant(0.0, n_steps)
    states = euler_maruyama(dyn, u_star, np.ones(1), bm)
    sel = tangent_from_control(dyn, states, u_star, ControlLaw.constant(0.7, n_steps))
    doubled = TangentSelection(g1=2 * sel.g1, g2=None, w=sel.w, base=sel.base)
    zero = tangent_from_control(dyn, states, u_star, u_star)
    r_scaled = selection_continuity(dyn, states, u_star, sel, doubled, bm)
    r_zero = selection_continuity(dyn, states, u_star, sel, zero, bm)
    assert r_scaled == pytest.approx(r_zero, rel=1e-12)


def _staircase_law(rng, grid, n_pieces=20):
    levels = rng.uniform(-1.0, 1.0, size=n_pieces)

    def fn(t):
        idx = min(int(t / grid.horizon * n_pieces), n_pieces - 1)
        return np.array([levels[idx]])

    return ControlLaw.from_function(fn, grid)


def test_continuity_ratio_stable_under_refinement():
    dyn = double_integrator()
    maxima = {}
    for n_steps in (40, 80):
        grid = make_grid(1.0, n_steps)
        bm = sample_brownian(grid, 1, 400, seed=11)
        u_star = ControlLaw.constant(0.0, n_steps)
        states = euler_maruyama(dyn, u_star, np.zeros(2), bm)
        rng = np.random.default_rng(123)
        ratios = []
        for _ in range(100):
            sel_a = tangent_from_control(dyn, states, u_star, _staircase_law(rng, grid))
            sel_b = tangent_from_control(dyn, states, u_star, _staircase_law(rng, grid))
            ratios.append(selection_continuity(dyn, states, u_star, sel_a, sel_b, bm))
        maxima[n_steps] = max(ratios)
        assert np.isfinite(maxima[n_steps])
    assert abs(maxima[40] - maxima[80]) <= 0.1 * max(maxima.values())


# ---------------------------------------------------------------------------
# the Ito gap


def butterfly_grid_oracle(n=801):
    """Dense sampling of both triangle pieces; naive distance minimization."""
    target = np.array([0.5, 1.0])
    best = np.inf
    for x in np.linspace(0.0, 0.5, n):
        for y in np.linspace(0.0, 1.0 - 2 * x, max(int((1 - 2 * x) * n), 2)):
            best = min(best, (x - target[0]) ** 2 + (y - target[1]) ** 2)
    for x in np.linspace(0.5, 1.0, n):
        for y in np.linspace(0.0, 2 * x - 1.0, max(int((2 * x - 1) * n), 2)):
            best = min(best, (x - target[0]) ** 2 + (y - target[1]) ** 2)
    return best


def test_ito_counterexample_values():
    report = ito_counterexample()
    assert isinstance(report, ItoGapReport)
    assert report.pointwise_min_sq_dist == pytest.approx(0.2, abs=1e-12)
    assert report.ito_lower_bound == pytest.approx(0.2, abs=1e-12)
    assert report.lebesgue_gap == 0.0
    # both feet of the perpendicular are nearest points
    feet = sorted(report.nearest_points)
    assert feet[0] == pytest.approx((0.1, 0.8), abs=1e-9)
    assert feet[1] == pytest.approx((0.9, 0.8), abs=1e-9)


def test_ito_counterexample_against_grid_oracle():
    oracle = butterfly_grid_oracle(n=301)
    report = ito_counterexample()
    assert report.pointwise_min_sq_dist <= oracle + 1e-9
    assert abs(report.pointwise_min_sq_dist - oracle) <= 5e-3
