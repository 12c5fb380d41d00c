"""Reproduction criteria. Slow: the whole module takes a few hours on one core.

Run only these with ``pytest -m acceptance``; skip them with ``-m "not acceptance"``.
"""
import numpy as np
import pytest

from linpam.enkf import (
    EnKFConfig,
    constrained_analysis_rotated,
    enkf_analysis,
    kalman_posterior,
    kalman_posterior_sequential,
)
from linpam.harness import TwinExperimentConfig, build_model, run_twin_experiment, tune_regularization
from linpam.invariant_subspace import SubUnitaryBasis
from linpam.models import StateSpaceModel
from linpam.sampling import RngStream
from linpam.transport import FeatureSpec, fit_component, invert_last_input

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
# grids are trimmed where the full default grid would not fit the time budget
SYNTH_BETAS = (1.0, 1.02, 1.05, 1.1, 1.2)
SYNTH_TAPERS = (2.0, 4.0, 8.0, 16.0, 32.0, None)
ADV_BETAS = (1.0, 1.02, 1.05)
ADV_TAPERS = (2.0, 4.0, 8.0, 16.0, None)
LORENZ_BETAS = (1.0, 1.02, 1.05)

_cache = {}


def _tuned(**kw):
    """Best run over the grid; memoized so criteria can share experiments."""
    key = tuple(sorted((k, str(v)) for k, v in kw.items()))
    if key not in _cache:
        _cache[key] = tune_regularization(TwinExperimentConfig(**kw))[2][0]
    return _cache[key]


def _synthetic(filter, M, r, seed):
    return _tuned(model="synthetic", filter=filter, M=M, model_params={"r": r}, seed=seed,
                  beta_grid=SYNTH_BETAS, taper_grid=SYNTH_TAPERS)


def _lorenz(filter, M, seed):
    return _tuned(model="lorenz", filter=filter, M=M, seed=seed,
                  beta_grid=LORENZ_BETAS, taper_grid=(None,))


def test_criterion_01_invariant_preservation(verdict):
    worst, runs, failures = 0.0, 0, []
    for model in ("synthetic", "advection", "lorenz"):
        for M in (10, 40, 160):
            for filt in ("cons_enkf", "cons_smf"):
                radius = 4.0 if filt == "cons_enkf" and model != "lorenz" else None
                # the advection map has ~390 features; a ridge keeps small ensembles stable
                ridge = 0.1 if filt == "cons_smf" and model == "advection" else 0.0
                res = run_twin_experiment(TwinExperimentConfig(
                    model=model, filter=filt, M=M, beta=1.02, radius=radius, ridge=ridge))
                runs += 1
                worst = max(worst, res.member_invariant_drift)
                if res.diverged or res.member_invariant_drift > 1e-8:
                    failures.append(f"{model}/{filt}/M={M}: drift {res.member_invariant_drift:.2e} "
                                    f"{res.failure}")
    verdict(1, not failures,
            f"max member drift {worst:.2e} over {runs} runs of 2000 cycles {failures}")


def _shared_invariant_drift(beta, radius, cycles=100):
    cfg = TwinExperimentConfig(model="synthetic", M=20, model_params={"r": 10}, cycles=cycles,
                               spinup=0, seed=0)
    model = build_model(cfg)
    basis = model.basis
    rng = np.random.default_rng(0)
    x = basis.u_perp @ rng.standard_normal((basis.r, 1)) + basis.u_para @ rng.standard_normal(
        (basis.n - basis.r, cfg.M))
    truth = x[:, :1].copy()
    ecfg = EnKFConfig(beta=beta, taper_radius=radius)
    rng_fc = RngStream(0, (0, 5)).generator()
    rng_an = RngStream(0, (0, 6)).generator()
    total = per_cycle = 0.0
    inv0 = basis.u_perp.T @ x
    for _ in range(cycles):
        truth = model.forward(truth, rng_fc)
        x = model.forward(x, rng_fc)
        before = basis.u_perp.T @ x
        y_star = model.observe(truth[:, 0], rng_an)
        x = enkf_analysis(x, y_star, model, ecfg, rng_an)
        after = basis.u_perp.T @ x
        per_cycle = max(per_cycle, float(np.max(np.abs(after - before))))
        total = max(total, float(np.max(np.abs(after - inv0))))
    return total, per_cycle


def test_criterion_02_scenario_one(verdict):
    plain, _ = _shared_invariant_drift(1.0, None)
    _, inflated = _shared_invariant_drift(1.05, None)
    _, tapered = _shared_invariant_drift(1.0, 4.0)
    ok = plain <= 1e-8 and inflated > 1e-6 and tapered > 1e-6
    verdict(2, ok, f"beta=1 drift {plain:.2e} (<=1e-8); per-cycle drift with beta=1.05 "
                   f"{inflated:.2e}, with taper 4 {tapered:.2e} (each >1e-6)")


def test_criterion_03_gaussian_equivalence(verdict):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 11))
        r = int(rng.integers(1, min(3, n - 1) + 1))
        d = int(rng.integers(1, n + 1))
        m = int(rng.integers(5, 40))
        basis = SubUnitaryBasis.from_constraints(rng.standard_normal((n, r)), rng=rng)
        g = rng.standard_normal((d, n))
        root = rng.standard_normal((n, n))
        x = root @ rng.standard_normal((n, m)) + rng.standard_normal((n, 1))
        y_star = rng.standard_normal(d)
        sigma_e = float(rng.uniform(0.1, 2.0))
        model = StateSpaceModel(basis=basis, obs_matrix=g, obs_noise_std=sigma_e,
                                process_noise_std=0.0, dt_obs=1.0, taper_metric="index")
        a = enkf_analysis(x, y_star, model, EnKFConfig(constrained=True),
                          np.random.default_rng(1000 + seed))
        b = constrained_analysis_rotated(x, y_star, g, sigma_e, basis,
                                         np.random.default_rng(1000 + seed))
        worst = max(worst, float(np.max(np.abs(a - b))))
    verdict(3, worst <= 1e-10, f"max member difference {worst:.2e} over 50 instances (<=1e-10)")


def test_criterion_04_synthetic_reproduction(verdict):
    un = np.median([_synthetic("un_enkf", 20, 19, s).rmse_avg for s in SEEDS])
    cons = np.median([_synthetic("cons_enkf", 20, 19, s).rmse_avg for s in SEEDS])
    reduction = 1.0 - cons / un
    ok = 5e-2 <= un <= 1.2e-1 and 1.5e-2 <= cons <= 4e-2 and reduction >= 0.4
    verdict(4, ok, f"median UnEnKF {un:.4f} in [0.05, 0.12], ConsEnKF {cons:.4f} in "
                   f"[0.015, 0.04], reduction {reduction:.0%} (>=40%)")


def test_criterion_05_gap_trend(verdict):
    gaps = [_synthetic("un_enkf", 20, r, 0).rmse_avg - _synthetic("cons_enkf", 20, r, 0).rmse_avg
            for r in (1, 5, 10, 15, 19)]
    inversions = int(np.sum(np.diff(gaps) < 0))
    gap_small = _synthetic("un_enkf", 10, 10, 0).rmse_avg - _synthetic("cons_enkf", 10, 10, 0).rmse_avg
    gap_large = (_synthetic("un_enkf", 100, 10, 0).rmse_avg
                 - _synthetic("cons_enkf", 100, 10, 0).rmse_avg)
    ok = inversions <= 1 and gap_small > gap_large
    verdict(5, ok, f"gaps over r=1,5,10,15,19: {np.round(gaps, 4).tolist()} ({inversions} "
                   f"inversions, <=1); gap M=10 {gap_small:.4f} > M=100 {gap_large:.4f}")


def _mass_deviation(res, spinup):
    truth = res.inv_truth[spinup:, 0]
    return float(np.max(np.abs(res.inv_mean[spinup:, 0] - truth) / np.abs(truth)))


def test_criterion_06_advection_mass(verdict):
    un = _tuned(model="advection", filter="un_enkf", M=40, beta_grid=ADV_BETAS,
                taper_grid=ADV_TAPERS, seed=0)
    # the constrained filter keeps the mass whatever the regularization; reuse the tuned one
    cons = run_twin_experiment(TwinExperimentConfig(model="advection", filter="cons_enkf", M=40,
                                                    beta=un.beta, radius=un.radius, seed=0))
    dev_un = _mass_deviation(un, 1000)
    dev_cons = _mass_deviation(cons, 1000)
    ok = not un.diverged and not cons.diverged and dev_un > 0.05 and dev_cons < 1e-8
    verdict(6, ok, f"peak relative mass deviation UnEnKF {dev_un:.2%} (>5%, beta={un.beta}, "
                   f"radius={un.radius}), ConsEnKF {dev_cons:.2e} (<1e-8)")


def test_criterion_07_lorenz_ordering(verdict):
    med = {}
    for M, filters in ((160, ("un_smf", "cons_smf")), (500, ("un_enkf", "un_smf", "cons_smf"))):
        for f in filters:
            med[f, M] = float(np.median([_lorenz(f, M, s).rmse_avg for s in SEEDS]))
    order = med["cons_smf", 160] <= med["un_smf", 160]
    gain = max(med["un_smf", 500], med["cons_smf", 500]) <= 0.95 * med["un_enkf", 500]
    plateau = all(0.4 <= med["cons_smf", M] <= 0.7 for M in (160, 500))
    detail = ", ".join(f"{f}@{M} {v:.4f}" for (f, M), v in med.items())
    verdict(7, order and gain and plateau,
            f"medians {detail}; ConsSMF<=UnSMF at 160: {order}; both SMF <= 0.95 UnEnKF at 500: "
            f"{gain}; ConsSMF plateau in [0.4, 0.7]: {plateau}")


def test_criterion_08_lorenz_invariant_drift(verdict):
    un = _lorenz("un_smf", 160, 0)
    cons = _lorenz("cons_smf", 160, 0)
    exc_un = float(np.max(np.abs(un.inv_mean[:, 0] - un.inv_truth[:, 0]) / np.abs(un.inv_truth[:, 0])))
    exc_cons = float(np.max(np.abs(cons.inv_mean[:, 0] - cons.inv_truth[:, 0])))
    ok = exc_un > 0.25 and exc_cons <= 1e-8
    verdict(8, ok, f"UnSMF peak invariant excursion {exc_un:.0%} (>25%), ConsSMF {exc_cons:.2e} "
                   f"(<=1e-8)")


def _bimodal(m, seed):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(m)
    x2 = np.sin(x1) + np.where(rng.random(m) < 0.5, -2.0, 2.0) + rng.standard_normal(m)
    return np.stack([x1, x2], axis=1)


def test_criterion_09_transport(verdict):
    spec = FeatureSpec(p=3, diagonal="monotone")
    mono = fd = trip = 0.0
    monotone_ok = True
    for seed in range(10):
        x = _bimodal(400, seed)
        comp = fit_component(x, spec)
        grid = np.linspace(-12.0, 12.0, 801)
        prefix = np.full(grid.size, x[seed, 0])
        pts = np.stack([prefix, grid], axis=1)
        der = comp.derivative(pts)
        monotone_ok &= bool(np.all(der > 0) and np.all(np.diff(comp.evaluate(pts)) > 0))
        mono = min(mono if seed else np.inf, float(der.min()))
        h = 1e-5
        up, dn = pts.copy(), pts.copy()
        up[:, 1] += h
        dn[:, 1] -= h
        num = (comp.evaluate(up) - comp.evaluate(dn)) / (2 * h)
        fd = max(fd, float(np.max(np.abs(num - der) / np.abs(der))))
        z = comp.evaluate(x)
        back = invert_last_input(comp, x[:, :1], z)
        trip = max(trip, float(np.max(np.abs(back - x[:, 1]))))

    rng = np.random.default_rng(7)
    root = rng.standard_normal((3, 3))
    cov = root @ root.T + 0.5 * np.eye(3)
    chol = np.linalg.cholesky(cov)
    target = np.linalg.inv(chol)[2]
    medians = []
    for m in (100, 1000, 10000):
        errs = []
        for seed in range(20):
            x = (chol @ np.random.default_rng(seed).standard_normal((3, m))).T
            comp = fit_component(x, FeatureSpec(p=0))
            base = comp.evaluate(np.zeros((1, 3)))[0]
            slope = np.array([comp.evaluate(e[None])[0] - base for e in np.eye(3)])
            errs.append(np.max(np.abs(slope - target)))
        medians.append(float(np.median(errs)))
    converging = medians[0] > medians[1] > medians[2]
    ok = monotone_ok and fd <= 1e-6 and trip <= 1e-10 and converging
    verdict(9, ok, f"monotone: {monotone_ok} (min slope {mono:.2e}); FD rel error {fd:.2e} "
                   f"(<=1e-6); round trip {trip:.2e} (<=1e-10); p=0 median coefficient error "
                   f"{[f'{v:.2e}' for v in medians]} (strictly decreasing)")


def test_criterion_10_recursive_oracle(verdict):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        root = rng.standard_normal((n, n))
        cov = root @ root.T + 0.1 * np.eye(n)
        mean = rng.standard_normal(n)
        g = rng.standard_normal((d, n))
        noise = rng.uniform(0.1, 2.0, size=d)
        y = rng.standard_normal(d)
        m1, c1 = kalman_posterior(mean, cov, y, g, noise)
        m2, c2 = kalman_posterior_sequential(mean, cov, y, g, noise)
        worst = max(worst, float(np.max(np.abs(m1 - m2))), float(np.max(np.abs(c1 - c2))))
    verdict(10, worst <= 1e-10, f"max difference {worst:.2e} over 50 instances (<=1e-10)")
