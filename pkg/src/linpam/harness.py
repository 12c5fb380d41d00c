"""Twin experiments: truth simulation, filtering cycles, metrics and tuning sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enkf import EnKFConfig, enkf_analysis, enkf_analysis_sequential
from .errors import AllDiverged, ConfigError, LinpamError
from .models import (
    StateSpaceModel,
    build_advection,
    build_embedded_lorenz,
    build_synthetic_linear,
)
from .sampling import RngStream, SmoothPeriodicPrior, sample_smooth_periodic
from .smf import SMFConfig, smf_analysis
from .transport import FeatureSpec

MODELS = ("synthetic", "advection", "lorenz")
FILTERS = ("un_enkf", "cons_enkf", "un_smf", "cons_smf")
SPREAD_DEFS = ("trace", "sqrt")
DIVERGENCE_RMSE = 1e3

MODEL_PARAMS = {
    "synthetic": {"n", "r", "dt_obs", "sigma_w", "sigma_e", "init_std"},
    "advection": {"n", "obs_stride", "dt_obs", "sigma_w", "sigma_e", "c", "alpha",
                  "mass_mean", "mass_std", "abs_tol", "rel_tol"},
    "lorenz": {"dt_obs", "sigma_e", "sigma_w", "substeps"},
}

# stream purposes within one repetition
STREAM_MODEL, STREAM_TRUTH_INIT, STREAM_ENS_INIT = 0, 1, 2
STREAM_TRUTH_NOISE, STREAM_OBS_NOISE, STREAM_MEMBER_NOISE, STREAM_ANALYSIS = 3, 4, 5, 6

BETA_GRID = tuple(round(1.0 + 0.01 * i, 2) for i in range(21))
TAPER_GRID = (2.0, 4.0, 8.0, 16.0, 32.0, None)


def _norm_filter(name: str) -> str:
    key = str(name).replace("-", "_").lower()
    if key not in FILTERS:
        raise ConfigError(f"unknown filter {name!r}; expected one of {FILTERS}")
    return key


def _radius(v):
    if v is None:
        return None
    if isinstance(v, str) and v.lower() in ("none", "inf", "infinity"):
        return None
    v = float(v)
    return None if math.isinf(v) else v


@dataclass(frozen=True)
class TwinExperimentConfig:
    """Everything that determines a twin experiment (and its tuning grid)."""

    model: str = "synthetic"
    filter: str = "un_enkf"
    M: int = 20
    model_params: dict = field(default_factory=dict)
    cycles: int = 2000
    spinup: int = 1000
    beta: float = 1.0
    radius: float | None = None
    beta_grid: tuple = BETA_GRID
    taper_grid: tuple = TAPER_GRID
    seed: int = 0
    reps: int = 1
    spread_def: str = "trace"
    sequential: bool | None = None
    p: int = 2
    gamma: float = 2.0
    ridge: float = 0.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        object.__setattr__(self, "filter", _norm_filter(self.filter))
        params = dict(self.model_params or {})
        unknown = set(params) - MODEL_PARAMS[self.model]
        if unknown:
            raise ConfigError(f"unknown parameters for model {self.model!r}: {sorted(unknown)}")
        object.__setattr__(self, "model_params", params)
        if int(self.M) < 2:
            raise ConfigError("ensemble size must be at least 2")
        if not 0 <= int(self.spinup) < int(self.cycles):
            raise ConfigError("need 0 <= spinup < cycles")
        if int(self.reps) < 1:
            raise ConfigError("reps must be positive")
        if self.spread_def not in SPREAD_DEFS:
            raise ConfigError(f"spread_def must be one of {SPREAD_DEFS}")
        if not self.beta >= 1.0:
            raise ConfigError("beta must be >= 1")
        object.__setattr__(self, "radius", _radius(self.radius))
        grid = tuple(float(b) for b in self.beta_grid)
        if not grid or min(grid) < 1.0:
            raise ConfigError("beta grid must be nonempty with values >= 1")
        object.__setattr__(self, "beta_grid", grid)
        taper = tuple(_radius(r) for r in self.taper_grid)
        if not taper or any(r is not None and r <= 0 for r in taper):
            raise ConfigError("taper grid must be nonempty with positive radii")
        object.__setattr__(self, "taper_grid", taper)

    @classmethod
    def from_dict(cls, data: dict) -> "TwinExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("beta_grid", "taper_grid"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["beta_grid"] = list(self.beta_grid)
        out["taper_grid"] = [r if r is not None else "inf" for r in self.taper_grid]
        out["radius"] = self.radius if self.radius is not None else "inf"
        return out

    def replace(self, **kw) -> "TwinExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def uses_taper(self) -> bool:
        return self.filter in ("un_enkf", "cons_enkf") and self.model != "lorenz"

    @property
    def is_sequential(self) -> bool:
        return self.model == "lorenz" if self.sequential is None else bool(self.sequential)


@dataclass
class TwinExperimentResult:
    """Per-cycle metrics, invariant series and post-spinup averages of one run."""

    config: TwinExperimentConfig
    rmse: np.ndarray
    spread: np.ndarray
    inv_mean: np.ndarray
    inv_q10: np.ndarray
    inv_q90: np.ndarray
    inv_truth: np.ndarray
    rmse_avg: float
    spread_avg: float
    diverged: bool
    beta: float
    radius: float | None
    member_invariant_drift: float = 0.0
    failure: str = ""

    def summary(self) -> dict:
        return {
            "model": self.config.model,
            "filter": self.config.filter,
            "M": self.config.M,
            "rmse_avg": self.rmse_avg,
            "spread_avg": self.spread_avg,
            "diverged": self.diverged,
            "beta": self.beta,
            "radius": self.radius if self.radius is not None else "inf",
            "member_invariant_drift": self.member_invariant_drift,
            "failure": self.failure,
        }


# --------------------------------------------------------------------------
# metrics


def rmse(x_truth, ensemble) -> float:
    """``||x_truth - ensemble mean|| / sqrt(n)``."""
    x_truth = np.asarray(x_truth, dtype=float)
    mean = np.asarray(ensemble, dtype=float).mean(axis=1)
    return float(np.linalg.norm(x_truth - mean) / math.sqrt(x_truth.size))


def spread(ensemble, definition: str = "trace") -> float:
    """Ensemble dispersion: ``tr(cov) / sqrt(n)`` or, for ``"sqrt"``, ``sqrt(tr(cov) / n)``."""
    x = np.asarray(ensemble, dtype=float)
    n, m = x.shape
    if m < 2:
        raise ConfigError("spread needs at least two members")
    tr = float(np.sum(np.var(x, axis=1, ddof=1)))
    if definition == "trace":
        return tr / math.sqrt(n)
    if definition == "sqrt":
        return math.sqrt(tr / n)
    raise ConfigError(f"unknown spread definition {definition!r}")


# --------------------------------------------------------------------------
# experiment pieces


def build_model(config: TwinExperimentConfig, rep: int = 0) -> StateSpaceModel:
    params = dict(config.model_params)
    rng = RngStream(config.seed, (rep, STREAM_MODEL)).generator()
    if config.model == "synthetic":
        params.pop("init_std", None)
        return build_synthetic_linear(rng, **params)
    if config.model == "advection":
        for key in ("alpha", "mass_mean", "mass_std"):
            params.pop(key, None)
        return build_advection(**params)
    return build_embedded_lorenz(rng, **params)


def initial_states(config: TwinExperimentConfig, model: StateSpaceModel, rep: int = 0):
    """Truth ``(n,)`` and ensemble ``(n, M)`` at time zero.

    Synthetic model: the truth is standard Gaussian and the members scatter
    around it with standard deviation ``init_std`` (default 0.1) in every
    direction, so their invariants differ slightly from the truth's.
    Advection and Lorenz: every member carries the truth's invariant value.
    """
    basis = model.basis
    g_truth = RngStream(config.seed, (rep, STREAM_TRUTH_INIT)).generator()
    g_ens = RngStream(config.seed, (rep, STREAM_ENS_INIT)).generator()
    m = config.M
    if config.model == "synthetic":
        x0 = g_truth.standard_normal(model.n)
        std = config.model_params.get("init_std", 0.1)
        return x0, x0[:, None] + std * g_ens.standard_normal((model.n, m))
    if config.model == "advection":
        p = config.model_params
        mass = p.get("mass_mean", 1.0) + p.get("mass_std", 5e-2) * g_truth.standard_normal()
        prior = SmoothPeriodicPrior(basis, np.array([mass * model.mass_scale]),
                                    alpha=p.get("alpha", 1.0))
        return sample_smooth_periodic(prior, g_truth), sample_smooth_periodic(prior, g_ens, m)
    # embedded Lorenz: standard Gaussian draws moved onto the invariant level 1
    u = basis.u_perp

    def lift(z):
        return z - u @ (u.T @ z) + u @ np.ones((1,) + z.shape[1:])

    return lift(g_truth.standard_normal(model.n)), lift(g_ens.standard_normal((model.n, m)))


def simulate_truth(config: TwinExperimentConfig, model: StateSpaceModel, x0, rep: int = 0):
    """Truth states ``(cycles + 1, n)`` and observations ``(cycles, d)``."""
    g_noise = RngStream(config.seed, (rep, STREAM_TRUTH_NOISE)).generator()
    g_obs = RngStream(config.seed, (rep, STREAM_OBS_NOISE)).generator()
    truth = np.empty((config.cycles + 1, model.n))
    obs = np.empty((config.cycles, model.d))
    truth[0] = x0
    x = np.asarray(x0, dtype=float)
    for t in range(config.cycles):
        x = model.forward(x, g_noise)
        truth[t + 1] = x
        obs[t] = model.observe(x, g_obs)
    return truth, obs


def _analysis_fn(config: TwinExperimentConfig, model: StateSpaceModel, beta: float, radius):
    if config.filter in ("un_enkf", "cons_enkf"):
        ecfg = EnKFConfig(beta=beta, taper_radius=radius if config.uses_taper else None,
                          taper_metric=model.taper_metric,
                          constrained=config.filter == "cons_enkf",
                          sequential=config.is_sequential)
        step = enkf_analysis_sequential if ecfg.sequential else enkf_analysis
        return lambda x, y, rng: step(x, y, model, ecfg, rng)
    spec = FeatureSpec(p=config.p, gamma=config.gamma, ridge=config.ridge)
    scfg = SMFConfig(spec=spec, beta=beta, constrained=config.filter == "cons_smf")
    return lambda x, y, rng: smf_analysis(x, y, model, scfg, rng)


class _Problem:
    """Model, initial ensemble and truth shared by every grid point of one repetition."""

    def __init__(self, config: TwinExperimentConfig, rep: int):
        self.rep = rep
        self.model = build_model(config, rep)
        x0, self.ens0 = initial_states(config, self.model, rep)
        self.truth, self.obs = simulate_truth(config, self.model, x0, rep)


def _run(config: TwinExperimentConfig, problem: _Problem, beta: float, radius) -> TwinExperimentResult:
    model = problem.model
    basis = model.basis
    r = basis.r
    cycles, spinup = config.cycles, config.spinup
    rng_fc = RngStream(config.seed, (problem.rep, STREAM_MEMBER_NOISE)).generator()
    rng_an = RngStream(config.seed, (problem.rep, STREAM_ANALYSIS)).generator()
    analysis = _analysis_fn(config, model, beta, radius)

    out_rmse = np.full(cycles, np.nan)
    out_spread = np.full(cycles, np.nan)
    inv_mean = np.full((cycles, r), np.nan)
    inv_q10 = np.full((cycles, r), np.nan)
    inv_q90 = np.full((cycles, r), np.nan)
    inv_truth = problem.truth[1:] @ basis.u_perp
    x = problem.ens0.copy()
    inv0 = basis.u_perp.T @ x
    drift = 0.0
    diverged = False
    failure = ""
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(cycles):
            try:
                x = model.forward(x, rng_fc)
                x = analysis(x, problem.obs[t], rng_an)
            except (LinpamError, FloatingPointError, np.linalg.LinAlgError) as exc:
                diverged, failure = True, f"cycle {t}: {type(exc).__name__}: {exc}"
                break
            e = rmse(problem.truth[t + 1], x)
            out_rmse[t] = e
            out_spread[t] = spread(x, config.spread_def)
            if r:
                inv = basis.u_perp.T @ x
                inv_mean[t] = inv.mean(axis=1)
                inv_q10[t], inv_q90[t] = np.quantile(inv, [0.1, 0.9], axis=1)
                drift = max(drift, float(np.max(np.abs(inv - inv0))))
            if not np.isfinite(e) or e > DIVERGENCE_RMSE:
                diverged, failure = True, f"cycle {t}: rmse {e:.3g}"
                break
    if diverged:
        rmse_avg = spread_avg = math.inf
    else:
        rmse_avg = float(np.mean(out_rmse[spinup:]))
        spread_avg = float(np.mean(out_spread[spinup:]))
    return TwinExperimentResult(
        config=config.replace(beta=beta, radius=radius), rmse=out_rmse, spread=out_spread,
        inv_mean=inv_mean, inv_q10=inv_q10, inv_q90=inv_q90, inv_truth=inv_truth,
        rmse_avg=rmse_avg, spread_avg=spread_avg, diverged=diverged, beta=beta,
        radius=radius, member_invariant_drift=drift, failure=failure)


def run_twin_experiment(config: TwinExperimentConfig, rep: int = 0) -> TwinExperimentResult:
    """One filtering run with the fixed ``config.beta`` and ``config.radius``."""
    return _run(config, _Problem(config, rep), config.beta, config.radius)


def _grid(config: TwinExperimentConfig):
    radii = config.taper_grid if config.uses_taper else (None,)
    # ties go to the smaller beta, then the larger radius
    order = sorted(set(radii), key=lambda v: -math.inf if v is None else -v)
    return [(b, rad) for b in sorted(set(config.beta_grid)) for rad in order]


def tune_regularization(config: TwinExperimentConfig):
    """Grid search over inflation and taper radius.

    Every grid point runs the same truths and initial ensembles (one per
    repetition). The score is the post-spinup RMSE averaged over repetitions;
    a point counts as diverged if any repetition diverged.

    Returns
    -------
    beta, radius, results
        ``results`` holds the runs of the selected point, one per repetition.
    """
    problems = [_Problem(config, rep) for rep in range(config.reps)]
    best = None
    for beta, radius in _grid(config):
        runs = [_run(config, pr, beta, radius) for pr in problems]
        if any(run.diverged for run in runs):
            continue
        score = float(np.mean([run.rmse_avg for run in runs]))
        if best is None or score < best[0]:
            best = (score, beta, radius, runs)
    if best is None:
        raise AllDiverged("every grid point diverged")
    return best[1], best[2], best[3]


def sweep(config: TwinExperimentConfig, Ms=None, rs=None) -> list:
    """Tune every ``(M, r)`` cell independently; returns long-format rows."""
    Ms = list(Ms) if Ms else [config.M]
    if rs is None:
        rs = [config.model_params.get("r")] if "r" in config.model_params else [None]
    rows = []
    for m in Ms:
        for r in rs:
            params = dict(config.model_params)
            if r is not None:
                params["r"] = int(r)
            cell = config.replace(M=int(m), model_params=params)
            r_out = r if r is not None else build_model(cell).basis.r
            try:
                beta, radius, runs = tune_regularization(cell)
                rmse_avg = float(np.mean([run.rmse_avg for run in runs]))
                spread_avg = float(np.mean([run.spread_avg for run in runs]))
                diverged = False
            except AllDiverged:
                beta = radius = None
                rmse_avg = spread_avg = math.inf
                diverged = True
            rows.append({"model": cell.model, "filter": cell.filter, "M": int(m), "r": r_out,
                         "beta": beta, "radius": radius, "rmse_avg": rmse_avg,
                         "spread_avg": spread_avg, "diverged": diverged})
    return rows


# --------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if v is None:
        return "inf"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_metrics_csv(result: TwinExperimentResult, path) -> Path:
    path = Path(path)
    r = result.inv_truth.shape[1]
    header = ["cycle", "rmse", "spread"]
    for name in ("inv_mean", "inv_q10", "inv_q90", "inv_truth"):
        header += [f"{name}_{i + 1}" for i in range(r)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(result.rmse.size):
            row = [t + 1, result.rmse[t], result.spread[t]]
            for arr in (result.inv_mean, result.inv_q10, result.inv_q90, result.inv_truth):
                row += list(arr[t])
            w.writerow([_fmt(v) for v in row])
    return path


def git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, float):
        return float("%.17g" % v)
    return v


def write_summary_json(results, path, tuned=None) -> Path:
    """Time-averaged metrics, tuned parameters, diverged flag, config echo and git hash."""
    path = Path(path)
    results = results if isinstance(results, (list, tuple)) else [results]
    runs = [{k: _json_float(v) for k, v in res.summary().items()} for res in results]
    data = {
        "rmse_avg": _json_float(float(np.mean([r.rmse_avg for r in results]))),
        "spread_avg": _json_float(float(np.mean([r.spread_avg for r in results]))),
        "diverged": any(r.diverged for r in results),
        "tuned": tuned,
        "runs": runs,
        "config": results[0].config.to_dict(),
        "git_hash": git_hash(),
    }
    path.write_text(json.dumps(data, indent=2))
    return path


SWEEP_COLUMNS = ("model", "filter", "M", "r", "beta", "radius", "rmse_avg", "spread_avg", "diverged")


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    return path


__all__ = [
    "TwinExperimentConfig", "TwinExperimentResult", "rmse", "spread", "build_model",
    "initial_states", "simulate_truth", "run_twin_experiment", "tune_regularization", "sweep",
    "write_metrics_csv", "write_summary_json", "write_sweep_csv", "BETA_GRID", "TAPER_GRID",
]
