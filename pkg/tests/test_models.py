import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linpam.errors import ConfigError, NumericalBlowup, StiffnessError
from linpam.invariant_subspace import SubUnitaryBasis, evaluate_invariants
from linpam.models import (
    build_advection,
    build_embedded_lorenz,
    build_synthetic_linear,
    integrate_ssprk43,
    invariant_preserving_process_noise,
    lorenz63_rhs,
    observe,
    rk4_step,
    spectral_advection_rhs,
    ssprk43_step,
)


# integrators

def test_rk4_zero_field():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda v: 0.0 * v, x, 0.3), x)


def test_rk4_decay_polynomial():
    # 1 - h + h^2/2 - h^3/6 + h^4/24 at h = 0.1
    assert rk4_step(lambda v: -v, np.array([1.0]), 0.1)[0] == pytest.approx(0.9048375, abs=1e-15)


def test_rk4_lorenz_step_halving():
    x = np.array([1.0, 1.0, 1.0])
    coarse, fine = x.copy(), x.copy()
    for _ in range(1000):
        coarse = rk4_step(lorenz63_rhs, coarse, 1e-3)
    for _ in range(10000):
        fine = rk4_step(lorenz63_rhs, fine, 1e-4)
    np.testing.assert_allclose(coarse, fine, atol=1e-5)


def test_rk4_blowup_detected():
    with pytest.raises(NumericalBlowup), np.errstate(over="ignore", invalid="ignore"):
        rk4_step(lambda v: v**8, np.array([1e60]), 1.0)


def test_rk4_rejects_nonpositive_step():
    with pytest.raises(ConfigError):
        rk4_step(lambda v: v, np.array([1.0]), 0.0)


def test_lorenz_rhs_fixed_point():
    b, r = 8.0 / 3.0, 28.0
    s = np.sqrt(b * (r - 1))
    np.testing.assert_allclose(lorenz63_rhs(np.array([s, s, r - 1])), 0.0, atol=1e-12)
    np.testing.assert_allclose(lorenz63_rhs(np.array([1.0, 2.0, 3.0])), [10.0, 23.0, -6.0])


def test_ssprk_zero_field():
    x = np.array([3.0, 4.0])
    out, dt, nxt = ssprk43_step(lambda v: 0.0 * v, x, 0.1)
    np.testing.assert_array_equal(out, x)
    assert dt == 0.1 and nxt > dt


def test_ssprk_third_order_on_decay():
    # exact for cubic Taylor polynomial: local error of order h^4
    errs = []
    for h in (0.1, 0.05):
        out, _, _ = ssprk43_step(lambda v: -v, np.array([1.0]), h, abs_tol=1.0, rel_tol=1.0)
        errs.append(abs(out[0] - np.exp(-h)))
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.1)


def test_ssprk_underflow_raises():
    with pytest.raises(StiffnessError):
        ssprk43_step(lambda v: 1e20 * np.sin(1e20 * v), np.array([0.3]), 1.0,
                     abs_tol=1e-16, rel_tol=1e-16)


def test_integrate_covers_duration_exactly():
    out, _ = integrate_ssprk43(lambda v: -v, np.array([1.0]), 0.37, 0.05, 1e-10, 1e-10)
    assert out[0] == pytest.approx(np.exp(-0.37), rel=1e-8)


def test_advection_single_mode_full_period():
    n = 64
    s = np.arange(n) / n
    x = np.sin(2 * np.pi * s)
    out, _ = integrate_ssprk43(spectral_advection_rhs, x, 1.0, 1.0 / n, 1e-8, 1e-8)
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_constant_field_unchanged():
    x = np.ones(32)
    out, _ = integrate_ssprk43(spectral_advection_rhs, x, 0.2, 1.0 / 32)
    np.testing.assert_allclose(out, x, atol=1e-15)


# spectral derivative

def test_spectral_rhs_sine():
    n = 128
    s = np.arange(n) / n
    c = 1.3
    np.testing.assert_allclose(spectral_advection_rhs(np.sin(2 * np.pi * s), c),
                               -c * 2 * np.pi * np.cos(2 * np.pi * s), atol=1e-10)


def test_spectral_rhs_constant_and_mean():
    assert np.max(np.abs(spectral_advection_rhs(np.full(16, 2.5)))) < 1e-14
    x = np.random.default_rng(0).standard_normal((16, 3))
    np.testing.assert_allclose(spectral_advection_rhs(x).mean(axis=0), 0.0, atol=1e-13)


def test_spectral_rhs_columnwise():
    x = np.random.default_rng(1).standard_normal((16, 3))
    cols = np.stack([spectral_advection_rhs(x[:, j]) for j in range(3)], axis=1)
    np.testing.assert_allclose(spectral_advection_rhs(x), cols, atol=1e-13)


def test_spectral_rhs_odd_grid():
    with pytest.raises(ConfigError):
        spectral_advection_rhs(np.ones(7))


# synthetic model

def test_synthetic_layout_and_errors():
    model = build_synthetic_linear(np.random.default_rng(0), n=20, r=19)
    eig = np.linalg.eigvalsh(model.propagator(0.1))
    assert np.sum(np.isclose(eig, 1.0, atol=1e-12)) == 19
    np.testing.assert_allclose(model.propagator(0.0), np.eye(20), atol=1e-14)
    with pytest.raises(ConfigError):
        build_synthetic_linear(np.random.default_rng(0), n=5, r=5)


def test_synthetic_eigenvalue_range():
    model = build_synthetic_linear(np.random.default_rng(3), n=20, r=4)
    assert np.all(model.lam[:4] == 0)
    assert np.all((model.lam[4:] >= -5) & (model.lam[4:] < 0))
    np.testing.assert_allclose(model.u.T @ model.u, np.eye(20), atol=1e-12)


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
def test_synthetic_preserves_invariants(t):
    model = build_synthetic_linear(np.random.default_rng(1), n=20, r=7)
    x0 = np.random.default_rng(2).standard_normal(20)
    xt = model.propagator(t) @ x0
    np.testing.assert_allclose(evaluate_invariants(model.basis, xt),
                               evaluate_invariants(model.basis, x0), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(dt1=st.floats(0, 2), dt2=st.floats(0, 2), seed=st.integers(0, 1000))
def test_synthetic_propagators_compose(dt1, dt2, seed):
    model = build_synthetic_linear(np.random.default_rng(seed), n=20, r=5)
    np.testing.assert_allclose(model.propagator(dt1) @ model.propagator(dt2),
                               model.propagator(dt1 + dt2), atol=1e-12)


# advection model

def test_advection_observation_layout():
    model = build_advection()
    assert model.d == 32 and model.n == 128
    np.testing.assert_array_equal(model.obs_locations, np.arange(0, 128, 4))
    x = np.arange(128.0)
    np.testing.assert_array_equal(model.obs_matrix @ x, x[::4])


def test_advection_mass_scale():
    model = build_advection()
    x = np.random.default_rng(0).standard_normal(128)
    assert evaluate_invariants(model.basis, x)[0] == pytest.approx(model.mass_scale * x.mean(), rel=1e-12)


@pytest.mark.parametrize("tol, atol", [(1e-7, 1e-5), (None, 1e-3)])
def test_advection_conserves_mass(tol, atol):
    model = build_advection() if tol is None else build_advection(abs_tol=tol, rel_tol=tol)
    s = model.grid
    x = 1.0 + 0.3 * np.sin(2 * np.pi * s) + 0.1 * np.cos(6 * np.pi * s)
    out = model.propagate(x)
    assert out.mean() == pytest.approx(x.mean(), rel=1e-12)
    # one window shifts the field by c * dt_obs
    np.testing.assert_allclose(out, 1.0 + 0.3 * np.sin(2 * np.pi * (s - 0.2))
                               + 0.1 * np.cos(6 * np.pi * (s - 0.2)), atol=atol)


# embedded Lorenz

def test_lorenz_identity_rotation_reduces_to_l63():
    model = build_embedded_lorenz(q=np.eye(4))
    x = np.array([1.0, 2.0, 3.0, 7.0])
    np.testing.assert_allclose(model.rhs(x)[:3], lorenz63_rhs(x[:3]))
    assert model.rhs(x)[3] == 0.0
    assert model.propagate(x)[3] == 7.0


def test_lorenz_random_rotation_orthogonal():
    model = build_embedded_lorenz(np.random.default_rng(4))
    np.testing.assert_allclose(model.q.T @ model.q, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(model.basis.u_perp[:, 0], model.q[:, 3])
    np.testing.assert_array_equal(model.obs_matrix, np.eye(4))


def test_lorenz_invariant_over_trajectory():
    model = build_embedded_lorenz(np.random.default_rng(5))
    x = model.q @ np.array([1.0, 1.0, 20.0, 1.0])
    c0 = evaluate_invariants(model.basis, x)[0]
    step = evaluate_invariants(model.basis, model.propagate(x))[0]
    assert abs(step - c0) < 1e-9
    for _ in range(100):
        x = model.propagate(x)
    assert abs(evaluate_invariants(model.basis, x)[0] - c0) < 1e-7


def test_lorenz_requires_rotation_source():
    with pytest.raises(ConfigError):
        build_embedded_lorenz()


# noise and observation

def test_process_noise_zero_and_projected():
    basis = SubUnitaryBasis.from_constraints(np.random.default_rng(0).standard_normal((20, 5)))
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(invariant_preserving_process_noise(rng, basis, 0.0), np.zeros(20))
    w = invariant_preserving_process_noise(rng, basis, 0.5, size=50)
    assert np.max(np.abs(basis.u_perp.T @ w)) <= 1e-12


def test_process_noise_covariance():
    basis = SubUnitaryBasis.from_constraints(np.random.default_rng(0).standard_normal((20, 5)))
    sw = 0.3
    w = invariant_preserving_process_noise(np.random.default_rng(2), basis, sw, size=100_000)
    target = sw**2 * basis.u_para @ basis.u_para.T
    cov = w @ w.T / w.shape[1]
    assert np.linalg.norm(cov - target) <= 0.05 * np.linalg.norm(target)


def test_observe_noiseless_and_noisy():
    model = build_embedded_lorenz(q=np.eye(4), sigma_e=0.0)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(observe(model, x), x)
    noisy = build_embedded_lorenz(q=np.eye(4), sigma_e=1.0)
    with pytest.raises(ConfigError):
        observe(noisy, x)
    y = observe(noisy, np.zeros((4, 20_000)), np.random.default_rng(0))
    assert y.std() == pytest.approx(1.0, rel=0.02)


def test_forward_preserves_invariants_with_noise():
    model = build_synthetic_linear(np.random.default_rng(7), n=20, r=10)
    x = np.random.default_rng(8).standard_normal((20, 5))
    out = model.forward(x, np.random.default_rng(9))
    np.testing.assert_allclose(model.basis.u_perp.T @ out, model.basis.u_perp.T @ x, atol=1e-12)
