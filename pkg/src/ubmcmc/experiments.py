"""Experiment driver: named studies over the built-in models.

Each experiment resolves a JSON-able config against per-model defaults,
runs its replicates (optionally across worker processes), and writes three
files into the output directory:

* ``replicates.csv``  - one row per unit of work (levels, replicates,
  groups, or SGD iterations, depending on the experiment);
* ``summary.json``    - estimates, standard errors, rate fits,
  meeting-time quantiles, total cost, and the outcome of the experiment's
  threshold checks;
* ``manifest.json``   - the fully resolved config, so a run can be
  reproduced or diffed.

Outputs contain no timestamps and floats are written in shortest
round-trip form, so re-running the same config + seed reproduces the
files byte for byte.  Replicates are reduced in replicate-id order no
matter how many workers ran them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import couplings as cp
from .errors import ConfigError
from .estimators import (
    EstimatorConfig,
    independent_sum,
    lift_state_fn,
    run_coupled_pair,
    run_coupled_quad,
    single_term,
)
from .kernels import CoupledKernel, HmcSettings, KernelSettings
from .models import exact_g, make_data, make_model, MODEL_NAMES
from .proposals import GaussianProposal
from .rng import replicate_streams
from .sgd import SgdConfig, sgd_run
from .targets import DiscretizedTarget

SCHEMA_VERSION = 1

EXPERIMENT_NAMES = (
    "forward-rate",
    "increment-rate",
    "mse-vs-n",
    "estimate",
    "sgd",
    "coupling-tests",
)

#: Optimal random-walk step multiplier for a 2-d Gaussian target (2.38/sqrt(d)).
RW_STEP = 2.38 / math.sqrt(2.0)

_PILOT_LEVEL = 6


# ---------------------------------------------------------------------------
# rate fits and meeting-time reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through (l, log2 value) points."""

    slope: float
    intercept: float
    r_squared: float


def fit_rate(points: Sequence[tuple[float, float]]) -> RateFit:
    """OLS fit of log2(value) against level.

    ``points`` are (level, value) pairs with positive values; at least
    three are required for a meaningful line.
    """
    if len(points) < 3:
        raise ConfigError(f"rate fit needs >= 3 points, got {len(points)}")
    ls = np.array([p[0] for p in points], dtype=float)
    vals = np.array([p[1] for p in points], dtype=float)
    if np.any(vals <= 0):
        raise ConfigError("rate fit needs positive values")
    ys = np.log2(vals)
    slope, intercept = np.polyfit(ls, ys, 1)
    resid = ys - (slope * ls + intercept)
    total = ys - ys.mean()
    denom = float(total @ total)
    r2 = 1.0 if denom == 0.0 else 1.0 - float(resid @ resid) / denom
    return RateFit(slope=float(slope), intercept=float(intercept), r_squared=r2)


def trend_confidence(
    xs: Sequence[float], ys: Sequence[float], level: float = 0.95
) -> tuple[float, float, float]:
    """Slope of ys on xs with a symmetric t confidence interval.

    Returns (slope, lo, hi).  Used for the "mean meeting time does not
    grow with level" check.
    """
    from scipy.stats import t as student_t

    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = x.size
    if n < 3:
        raise ConfigError(f"trend fit needs >= 3 points, got {n}")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    sxx = float(np.sum((x - x.mean()) ** 2))
    sigma2 = float(resid @ resid) / (n - 2)
    se = math.sqrt(sigma2 / sxx)
    q = float(student_t.ppf(0.5 + level / 2.0, n - 2))
    return float(slope), float(slope - q * se), float(slope + q * se)


def meeting_time_report(taus_by_level: Mapping[int, Sequence[int]]) -> dict:
    """Quantiles of tau-check per level plus a geometric tail fit.

    The tail fit regresses log2 P(tau > n) on n over the observed range
    (pooled across levels); a clean geometric tail gives r_squared near 1.
    """
    report: dict[str, Any] = {"levels": {}}
    pooled: list[int] = []
    for level in sorted(taus_by_level):
        taus = np.asarray(taus_by_level[level], dtype=float)
        pooled.extend(int(t) for t in taus)
        report["levels"][str(level)] = {
            "mean": float(taus.mean()),
            "q50": float(np.quantile(taus, 0.5)),
            "q90": float(np.quantile(taus, 0.9)),
            "q99": float(np.quantile(taus, 0.99)),
            "max": int(taus.max()),
        }
    arr = np.asarray(pooled, dtype=float)
    ns = np.arange(1, int(arr.max()))
    surv = np.array([np.mean(arr > n) for n in ns])
    keep = surv > 0
    if keep.sum() >= 3:
        ys = np.log2(surv[keep])
        slope, intercept = np.polyfit(ns[keep], ys, 1)
        resid = ys - (slope * ns[keep] + intercept)
        total = ys - ys.mean()
        denom = float(total @ total)
        r2 = 1.0 if denom == 0.0 else 1.0 - float(resid @ resid) / denom
        report["tail"] = {
            "log2_rate": float(slope),
            "r_squared": float(r2),
            "points": int(keep.sum()),
        }
    else:
        report["tail"] = None
    if len(taus_by_level) >= 3:
        levels = sorted(taus_by_level)
        means = [report["levels"][str(l)]["mean"] for l in levels]
        slope, lo, hi = trend_confidence(levels, means)
        report["mean_trend"] = {"slope": slope, "ci_lo": lo, "ci_hi": hi}
    else:
        report["mean_trend"] = None
    return report


# ---------------------------------------------------------------------------
# per-model tuned settings
# ---------------------------------------------------------------------------


_TOY_S_MAX = float(np.linalg.eigvalsh(exact_g().T @ exact_g())[-1])


def toy_hmc_settings(theta: float) -> HmcSettings:
    """Hamiltonian mixture tuned to the toy posterior at this theta.

    The stiffest posterior curvature is lambda_max = theta * s_max + 1/16
    (s_max the largest eigenvalue of G^T G, 1/16 the prior precision), and
    the leapfrog step is set so epsilon * sqrt(lambda_max) = 1.5: the
    per-trajectory rotation angles then stay bounded away from 0 and 2 pi
    for every theta, which is what makes the coupled pair contract.
    """
    scale = 1.0 / math.sqrt(_TOY_S_MAX * theta + 1.0 / 16.0)
    return HmcSettings(
        epsilon=1.5 * scale, n_steps=3, kappa=0.9, fallback_sigma=5e-4 * scale
    )


def toy_pair_settings(model) -> KernelSettings:
    """Random-walk kernel scaled to the analytic posterior marginals."""
    _, cov = model.posterior_moments()
    sd = np.sqrt(np.diag(cov))
    return KernelSettings(kind="rwmh", sigma=RW_STEP * sd, coupling="reflection-max")


def toy_quad_settings(model) -> KernelSettings:
    return KernelSettings(kind="hmc-mix", hmc=toy_hmc_settings(model.theta))


def elliptic_bundle(model) -> tuple[KernelSettings, Callable, Callable[[int], float]]:
    """Pilot-tuned kernel, warm initializer, and offset rule.

    Everything derives from the deterministic Laplace pilot: the leapfrog
    step targets the stiffest curvature direction (epsilon * sqrt(
    lambda_max) = 1.25), the fallback scale sits well inside the smallest
    posterior sd, chains start from an inflated pilot Gaussian, and the
    cross-level offset keeps its 4x-per-level decay but is expressed in
    posterior scale (the raw 2^-(2l+1) rule would start the fine chains
    thousands of log-units into the tail here).
    """
    _, sd, hess = model.laplace_pilot(_PILOT_LEVEL)
    lam_max = float(np.linalg.eigvalsh(hess)[-1])
    sd_min = float(np.min(sd))
    settings = KernelSettings(
        kind="hmc-mix",
        hmc=HmcSettings(
            epsilon=1.25 / math.sqrt(lam_max),
            n_steps=8,
            kappa=0.9,
            fallback_sigma=1.6e-3 * sd_min,
        ),
    )
    offset = sd_min**2

    def init_variance(level: int) -> float:
        return offset * 2.0 ** -(2 * level + 1)

    return settings, model.warm_initializer(pilot_level=_PILOT_LEVEL), init_variance


def sirx_settings() -> KernelSettings:
    """Autoregressive kernel in prior-standardized coordinates."""
    return KernelSettings(
        kind="pcn",
        sigma=np.array([0.001, 0.1, 10.0]),
        rho=0.95,
        center=np.array([0.002, 0.3, 15.0]),
        coupling="sync-pcn-mix",
        kappa=0.5,
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


_DATA_DEFAULTS: dict[str, dict[str, Any]] = {
    "toy": {"seed": 2024, "theta": 1.0, "x_true": [2.0, -2.0]},
    "elliptic": {"seed": 99, "theta": 100.0, "x_true": [0.6, -0.4], "level": 10},
    "sirx": {
        "seed": 404,
        "theta": [1.0, 1.0],
        "x_true": [0.002, 0.3, 15.0],
        "level": 5,
    },
}

_PARAM_DEFAULTS: dict[tuple[str, str], dict[str, Any]] = {
    ("toy", "forward-rate"): {
        "levels": [1, 7], "probe": [2.0, -2.0],
        "target_slope": -4.0, "slope_tol": 1.0,
    },
    ("elliptic", "forward-rate"): {
        "levels": [1, 7], "probe": [0.6, -0.4],
        "target_slope": -4.0, "slope_tol": 1.0,
    },
    ("sirx", "forward-rate"): {
        "levels": [1, 5], "probe": [0.002, 0.3, 15.0],
        "target_slope": -8.0, "slope_tol": 1.5,
    },
    ("toy", "increment-rate"): {
        "levels": [1, 6], "replicates": 100, "k": 100, "m": 1000,
        "slope_range": [-5.0, -3.0],
    },
    ("elliptic", "increment-rate"): {
        "levels": [1, 6], "replicates": 100, "k": 50, "m": 200,
        "slope_range": [-5.0, -3.0],
    },
    ("sirx", "increment-rate"): {
        "levels": [1, 5], "replicates": 20, "k": 200, "m": 2000,
        "slope_range": [-9.5, -6.5],
    },
    ("toy", "mse-vs-n"): {
        "n_grid": [64, 128, 256, 512, 1024, 2048, 4096, 8192],
        "reps_max": 160, "reps_min": 20, "k": 10, "m": 100, "eta": 2.5,
        "flavor": "single-term", "target_slope": -1.0, "slope_tol": 0.2,
    },
    ("toy", "estimate"): {
        "flavor": "single-term", "replicates": 10_000,
        "k": 100, "m": 1000, "eta": 2.5, "phi": "coordinates", "z_max": 4.0,
    },
    ("elliptic", "estimate"): {
        "flavor": "single-term", "replicates": 200,
        "k": 50, "m": 200, "eta": 2.5, "phi": "coordinates", "z_max": None,
    },
    ("sirx", "estimate"): {
        "flavor": "single-term", "replicates": 50,
        "k": 200, "m": 2000, "eta": 4.5, "phi": "coordinates", "z_max": None,
    },
    ("toy", "sgd"): {
        "theta0": [10.0], "alpha1": 0.03, "iterations": 1000,
        "replicates": 100, "k": 25, "m": 75, "eta": 2.5,
        "contraction": 0.1, "data": {"theta": 100.0},
    },
    ("toy", "coupling-tests"): {
        "draws": 100_000, "pair_runs": 10_000, "quad_runs": 500,
        "k": 10, "m": 100, "freq_tol": 0.01, "p_min": 0.01,
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (JSON round-trippable)."""

    model: str
    experiment: str
    seed: int
    output: Optional[str] = None
    workers: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)
    data: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model not in MODEL_NAMES:
            raise ConfigError(
                f"unknown model {self.model!r}; expected one of {MODEL_NAMES}"
            )
        if self.experiment not in EXPERIMENT_NAMES:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; "
                f"expected one of {EXPERIMENT_NAMES}"
            )
        if (self.model, self.experiment) not in _PARAM_DEFAULTS:
            raise ConfigError(
                f"experiment {self.experiment!r} has no defaults for model "
                f"{self.model!r}"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an int, got {type(self.seed).__name__}")

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "experiment": self.experiment,
            "seed": self.seed,
            "workers": self.workers,
            "params": _plain(self.params),
            "data": _plain(self.data),
        }


def resolve_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Merge a user config document onto the per-model defaults."""
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {version}; this build reads "
            f"{SCHEMA_VERSION}"
        )
    known = {
        "schema_version", "model", "experiment", "seed", "output", "workers",
        "params", "data",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = raw.get("model")
    experiment = raw.get("experiment")
    if model is None or experiment is None:
        raise ConfigError("config must set both 'model' and 'experiment'")
    key = (model, experiment)
    if key not in _PARAM_DEFAULTS:
        raise ConfigError(
            f"experiment {experiment!r} is not available for model {model!r}"
        )
    params = dict(_PARAM_DEFAULTS[key])
    embedded_data = params.pop("data", {})
    params.update(raw.get("params", {}))
    data = dict(_DATA_DEFAULTS[model])
    data.update(embedded_data)
    data.update(raw.get("data", {}))
    return ExperimentConfig(
        model=model,
        experiment=experiment,
        seed=int(raw.get("seed", 0)),
        output=raw.get("output"),
        workers=int(raw.get("workers", 1)),
        params=params,
        data=data,
    )


def load_config(path: "str | Path") -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(json.load(fh))


# ---------------------------------------------------------------------------
# model/data construction
# ---------------------------------------------------------------------------


def build_model(model_name: str, data_cfg: Mapping[str, Any]) -> DiscretizedTarget:
    """Deterministically construct the target from its data config."""
    cfg = dict(data_cfg)
    theta = cfg.pop("theta")
    if "file" in cfg:
        with open(cfg["file"], "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        y = np.asarray(doc["y"], dtype=float)
        return make_model(model_name, y, theta)
    seed = cfg.pop("seed")
    kwargs: dict[str, Any] = {"theta": _theta_arg(model_name, theta)}
    if "x_true" in cfg:
        kwargs["x_true"] = tuple(cfg["x_true"])
    if "level" in cfg:
        kwargs["level"] = int(cfg["level"])
    y = make_data(model_name, replicate_streams(seed, 0).init, **kwargs)
    return make_model(model_name, y, _theta_arg(model_name, theta))


def _theta_arg(model_name: str, theta) -> Any:
    if model_name == "sirx":
        return tuple(float(t) for t in theta)
    return float(theta)


def generate_data_document(
    model_name: str, level: Optional[int], seed: int, **overrides
) -> dict:
    """The payload written by the data-generation command."""
    if model_name not in MODEL_NAMES:
        raise ConfigError(
            f"unknown model {model_name!r}; expected one of {MODEL_NAMES}"
        )
    cfg = dict(_DATA_DEFAULTS[model_name])
    cfg.update(overrides)
    cfg["seed"] = seed
    if level is not None:
        cfg["level"] = level
    kwargs: dict[str, Any] = {
        "theta": _theta_arg(model_name, cfg["theta"]),
        "x_true": tuple(cfg["x_true"]),
    }
    if model_name != "toy" and "level" in cfg:
        kwargs["level"] = int(cfg["level"])
    y = make_data(model_name, replicate_streams(seed, 0).init, **kwargs)
    return {
        "schema_version": SCHEMA_VERSION,
        "model": model_name,
        "seed": seed,
        "params": _plain(kwargs),
        "y": [float(v) for v in y],
    }


# ---------------------------------------------------------------------------
# kernel/estimator assembly per model
# ---------------------------------------------------------------------------


def _estimator_config(model_name: str, model, params: Mapping[str, Any]) -> EstimatorConfig:
    k, m = int(params["k"]), int(params["m"])
    eta = float(params.get("eta", 2.5))
    if model_name == "toy":
        return EstimatorConfig(
            k=k, m=m, eta=eta,
            kernel=toy_pair_settings(model),
            quad_kernel=toy_quad_settings(model),
        )
    if model_name == "elliptic":
        settings, initializer, init_variance = elliptic_bundle(model)
        return EstimatorConfig(
            k=k, m=m, eta=eta,
            kernel=settings,
            initializer=initializer,
            init_variance=init_variance,
        )
    return EstimatorConfig(k=k, m=m, eta=eta, kernel=sirx_settings())


def _quad_kernel(model_name: str, model, config: EstimatorConfig) -> CoupledKernel:
    kwargs: dict[str, Any] = {}
    if config.init_variance is not None:
        kwargs["init_variance"] = config.init_variance
    if config.initializer is not None:
        kwargs["initializer"] = config.initializer
    settings = config.quad_kernel if config.quad_kernel is not None else config.kernel
    return CoupledKernel(model, settings, **kwargs)


def per_application_units(
    settings: KernelSettings, target: DiscretizedTarget, level: int
) -> float:
    """Worst-case ledger units for one application of the level-l kernel.

    Metropolis-Hastings kernels evaluate one proposal density per
    application; the Hamiltonian mixture spends n_steps + 1 gradients plus
    one density (its random-walk branch costs less, so this is an upper
    envelope).
    """
    c = target.cost_units(level)
    if settings.kind == "hmc-mix":
        return (settings.hmc.n_steps + 2) * c
    return c


def cost_bound_units(
    settings: KernelSettings,
    target: DiscretizedTarget,
    level: int,
    m: int,
    tau_check: int,
) -> float:
    """Ledger-unit budget implied by the kernel-application bound
    2[(2 tau - 1) or (m + tau - 1), whichever is larger]."""
    apps = 2 * max(2 * tau_check - 1, m + tau_check - 1)
    return apps * per_application_units(settings, target, level)


# ---------------------------------------------------------------------------
# worker-side task execution
# ---------------------------------------------------------------------------

_WORKER_CTX: dict[str, Any] = {}


def _context_for(ctx_key: str) -> dict:
    """Build (or fetch) the per-process model/kernel context."""
    ctx = _WORKER_CTX.get(ctx_key)
    if ctx is None:
        doc = json.loads(ctx_key)
        model = build_model(doc["model"], doc["data"])
        est = _estimator_config(doc["model"], model, doc["params"])
        ctx = {
            "model_name": doc["model"],
            "model": model,
            "est": est,
            "params": doc["params"],
            "seed": doc["seed"],
        }
        _WORKER_CTX[ctx_key] = ctx
    return ctx


def _phi_for(name: str, model) -> Callable:
    if name == "coordinates":
        return lift_state_fn(lambda x: x.copy())
    if name == "score":
        return lambda level, x: model.score(level, x)
    raise ConfigError(f"unknown phi {name!r}; expected 'coordinates' or 'score'")


def _task_quad(ctx_key: str, payload: tuple) -> tuple:
    """One increment-rate replicate: (level, rep) -> row data."""
    level, rep, n_reps = payload
    ctx = _context_for(ctx_key)
    model, est = ctx["model"], ctx["est"]
    kernel = _quad_kernel(ctx["model_name"], model, est)
    phi = _phi_for(ctx["params"].get("phi", "coordinates"), model)
    streams = replicate_streams(ctx["seed"], level * n_reps + rep)
    rec = run_coupled_quad(
        model, kernel, level, phi, est.k, est.m, streams, n_max=est.n_max
    )
    settings = est.quad_kernel if est.quad_kernel is not None else est.kernel
    bound = cost_bound_units(settings, model, level, est.m, rec.tau_check)
    return (
        level, rep, tuple(float(v) for v in rec.estimate),
        rec.tau, rec.tau_lm1, rec.stop_time, rec.cost_units, bound,
    )


def _task_estimate(ctx_key: str, payload: tuple) -> tuple:
    """One debiased replicate (single-term or independent-sum)."""
    (rep,) = payload
    ctx = _context_for(ctx_key)
    model, est = ctx["model"], ctx["est"]
    flavor = ctx["params"]["flavor"]
    phi = _phi_for(ctx["params"].get("phi", "coordinates"), model)
    fn = single_term if flavor == "single-term" else independent_sum
    out = fn(phi, model, est, replicate_streams(ctx["seed"], rep))
    bound = 0.0
    for level, tau, tau_lm1 in out.meeting_times:
        tau_check = tau if tau_lm1 is None else max(tau, tau_lm1)
        settings = (
            est.kernel
            if level == 0 or est.quad_kernel is None
            else est.quad_kernel
        )
        bound += cost_bound_units(settings, model, max(level, 0), est.m, tau_check)
    return (
        rep, tuple(float(v) for v in out.value), out.level,
        out.cost_units, bound, out.meeting_times,
    )


def _task_sgd(ctx_key: str, payload: tuple) -> tuple:
    (rep,) = payload
    ctx = _context_for(ctx_key)
    params = ctx["params"]
    model = ctx["model"]
    if ctx["model_name"] != "toy":
        raise ConfigError("the sgd experiment currently ships toy defaults only")

    def make_target(theta: np.ndarray):
        return model.with_theta(float(theta[0]))

    def est_for(theta: np.ndarray) -> EstimatorConfig:
        hmc = KernelSettings(
            kind="hmc-mix", hmc=toy_hmc_settings(float(theta[0]))
        )
        return EstimatorConfig(
            k=int(params["k"]), m=int(params["m"]),
            eta=float(params.get("eta", 2.5)), kernel=hmc,
        )

    cfg = SgdConfig(
        theta0=params["theta0"],
        alpha1=float(params["alpha1"]),
        iterations=int(params["iterations"]),
        log_transform_mask=[True] * len(params["theta0"]),
    )
    trace = sgd_run(cfg, make_target, est_for, root_seed=ctx["seed"] + rep)
    return (
        rep,
        tuple(tuple(float(v) for v in row) for row in trace.thetas),
        tuple(tuple(float(v) for v in row) for row in trace.grads),
        tuple(float(v) for v in trace.costs),
    )


def _task_faithfulness(ctx_key: str, payload: tuple) -> tuple:
    """Full stored run; counts any post-meeting divergence."""
    kind, rep = payload
    ctx = _context_for(ctx_key)
    model, est = ctx["model"], ctx["est"]
    phi = lift_state_fn(lambda x: x.copy())
    streams = replicate_streams(ctx["seed"] + 1, rep)
    if kind == "pair":
        kernel = CoupledKernel(model, est.kernel)
        rec = run_coupled_pair(
            model, kernel, 0, phi, est.k, est.m, streams, store=True
        )
        pairs = [("x", "w", rec.tau)]
    else:
        kernel = _quad_kernel(ctx["model_name"], model, est)
        rec = run_coupled_quad(
            model, kernel, 2, phi, est.k, est.m, streams, store=True
        )
        pairs = [("x_fine", "w_fine", rec.tau), ("x_coarse", "w_coarse", rec.tau_lm1)]
    violations = 0
    for x_name, w_name, tau in pairs:
        xs = rec.trajectories[x_name]
        ws = rec.trajectories[w_name]
        if tau <= rec.stop_time:
            same = np.all(xs[tau:] == ws[tau:], axis=1)
            violations += int(np.sum(~same))
    return (kind, rep, rec.tau_check, violations)


_TASK_FNS: dict[str, Callable[[str, tuple], tuple]] = {
    "quad": _task_quad,
    "estimate": _task_estimate,
    "sgd": _task_sgd,
    "faithfulness": _task_faithfulness,
}


def _pool_entry(args: tuple) -> tuple:
    ctx_key, task_name, payload = args
    return _TASK_FNS[task_name](ctx_key, payload)


def _run_tasks(
    config: ExperimentConfig, task_name: str, payloads: list[tuple]
) -> list[tuple]:
    """Execute payloads in order, in-process or across workers.

    Results come back in payload order either way, so reductions are
    deterministic no matter how many workers ran.
    """
    ctx_key = json.dumps(
        {
            "model": config.model,
            "data": _plain(config.data),
            "params": _plain(config.params),
            "seed": config.seed,
        },
        sort_keys=True,
    )
    fn = _TASK_FNS[task_name]
    if config.workers == 1:
        return [fn(ctx_key, p) for p in payloads]
    args = [(ctx_key, task_name, p) for p in payloads]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(_pool_entry, args, chunksize=8))


# ---------------------------------------------------------------------------
# the experiments
# ---------------------------------------------------------------------------


def _exp_forward_rate(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    params = config.params
    model = build_model(config.model, config.data)
    lo, hi = (int(v) for v in params["levels"])
    probe = np.asarray(params["probe"], dtype=float)
    header = ["level", "sq_diff"]
    rows = []
    points = []
    for level in range(lo, hi + 1):
        d = model.forward(level, probe) - model.forward(level - 1, probe)
        sq = float(d @ d)
        rows.append([level, sq])
        points.append((level, sq))
    fit = fit_rate(points)
    target = float(params["target_slope"])
    tol = float(params["slope_tol"])
    checks = [
        _check(
            "forward-rate-slope",
            abs(fit.slope - target) <= tol,
            f"slope {fit.slope:.3f} vs {target} +/- {tol}",
        )
    ]
    summary = {"rate_fit": _plain(fit.__dict__), "probe": _plain(probe)}
    return header, rows, summary, checks


def _exp_increment_rate(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    params = config.params
    lo, hi = (int(v) for v in params["levels"])
    n_reps = int(params["replicates"])
    payloads = [
        (level, rep, n_reps)
        for level in range(lo, hi + 1)
        for rep in range(n_reps)
    ]
    results = _run_tasks(config, "quad", payloads)

    dim = len(results[0][2])
    header = (
        ["level", "rep"]
        + [f"xi_{i}" for i in range(dim)]
        + ["tau", "tau_lm1", "stop", "cost_units", "cost_bound_units"]
    )
    rows = []
    sq_by_level: dict[int, list[float]] = {}
    taus_by_level: dict[int, list[int]] = {}
    cost_ok = True
    for level, rep, xi, tau, tau_lm1, stop, cost, bound in results:
        rows.append([level, rep, *xi, tau, tau_lm1, stop, cost, bound])
        sq_by_level.setdefault(level, []).append(sum(v * v for v in xi))
        taus_by_level.setdefault(level, []).append(max(tau, tau_lm1))
        cost_ok = cost_ok and cost <= bound

    points = [(level, float(np.mean(sq_by_level[level]))) for level in sorted(sq_by_level)]
    fit = fit_rate(points)
    report = meeting_time_report(taus_by_level)
    lo_s, hi_s = (float(v) for v in params["slope_range"])
    checks = [
        _check(
            "increment-slope",
            lo_s <= fit.slope <= hi_s,
            f"slope {fit.slope:.3f} in [{lo_s}, {hi_s}]",
        ),
        _check("cost-bound", cost_ok, "all replicate costs within the bound"),
    ]
    trend = report["mean_trend"]
    if trend is not None:
        checks.append(
            _check(
                "tau-no-growth",
                trend["ci_lo"] <= 0.0 <= trend["ci_hi"],
                f"mean-tau slope {trend['slope']:.3f}, "
                f"CI [{trend['ci_lo']:.3f}, {trend['ci_hi']:.3f}]",
            )
        )
    summary = {
        "rate_fit": _plain(fit.__dict__),
        "mean_sq_by_level": {str(l): v for l, v in points},
        "meeting_times": report,
    }
    return header, rows, summary, checks


def _exp_mse_vs_n(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    if config.model != "toy":
        raise ConfigError("mse-vs-n needs the analytic reference (toy only)")
    params = config.params
    n_grid = [int(n) for n in params["n_grid"]]
    reps_max, reps_min = int(params["reps_max"]), int(params["reps_min"])
    reps_of = {
        n: max(reps_min, min(reps_max, (reps_max * n_grid[0]) // n)) for n in n_grid
    }
    pool_size = max(reps_of[n] * n for n in n_grid)
    results = _run_tasks(config, "estimate", [(rep,) for rep in range(pool_size)])
    values = np.array([r[1] for r in results])  # (pool, dim)

    model = build_model(config.model, config.data)
    truth, _ = model.posterior_moments()

    header = ["n", "group", "mean_0", "mean_1", "sq_error"]
    rows = []
    points = []
    for n in n_grid:
        reps = reps_of[n]
        groups = values[: reps * n].reshape(reps, n, -1).mean(axis=1)
        errs = ((groups - truth) ** 2).sum(axis=1)
        for g, (mean, err) in enumerate(zip(groups, errs)):
            rows.append([n, g, float(mean[0]), float(mean[1]), float(err)])
        points.append((math.log2(n), float(errs.mean())))
    fit = fit_rate(points)
    target = float(params["target_slope"])
    tol = float(params["slope_tol"])
    checks = [
        _check(
            "mse-slope",
            abs(fit.slope - target) <= tol,
            f"slope {fit.slope:.3f} vs {target} +/- {tol}",
        )
    ]
    summary = {
        "rate_fit": _plain(fit.__dict__),
        "mse_by_n": {str(n): p[1] for n, p in zip(n_grid, points)},
        "replicates_by_n": {str(n): reps_of[n] for n in n_grid},
        "pool_size": pool_size,
        "reference_mean": _plain(truth),
    }
    return header, rows, summary, checks


def _exp_estimate(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    params = config.params
    n_reps = int(params["replicates"])
    results = _run_tasks(config, "estimate", [(rep,) for rep in range(n_reps)])
    dim = len(results[0][1])
    header = (
        ["rep"]
        + [f"value_{i}" for i in range(dim)]
        + ["level", "cost_units", "cost_bound_units", "tau_check_max"]
    )
    rows = []
    values = np.empty((n_reps, dim))
    total_cost = 0.0
    cost_ok = True
    taus_by_level: dict[int, list[int]] = {}
    for rep, value, level, cost, bound, meetings in results:
        tau_max = 0
        for lv, tau, tau_lm1 in meetings:
            tc = tau if tau_lm1 is None else max(tau, tau_lm1)
            taus_by_level.setdefault(lv, []).append(tc)
            tau_max = max(tau_max, tc)
        rows.append([rep, *value, level, cost, bound, tau_max])
        values[rep] = value
        total_cost += cost
        cost_ok = cost_ok and cost <= bound

    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / math.sqrt(n_reps) if n_reps > 1 else None
    summary: dict[str, Any] = {
        "flavor": params["flavor"],
        "mean": _plain(mean),
        "se": _plain(se),
        "total_cost_units": total_cost,
        "meeting_times": meeting_time_report(taus_by_level),
        "reference_mean": None,
        "z_scores": None,
    }
    checks = [_check("cost-bound", cost_ok, "all replicate costs within the bound")]
    if (
        config.model == "toy"
        and se is not None
        and params.get("phi", "coordinates") == "coordinates"
    ):
        model = build_model(config.model, config.data)
        truth, _ = model.posterior_moments()
        z = (mean - truth) / se
        summary["reference_mean"] = _plain(truth)
        summary["z_scores"] = _plain(z)
        z_max = params.get("z_max")
        if z_max is not None:
            checks.append(
                _check(
                    "mean-within-4se",
                    bool(np.all(np.abs(z) <= float(z_max))),
                    f"z = {np.round(z, 3).tolist()}, limit {z_max}",
                )
            )
    return header, rows, summary, checks


def _exp_sgd(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    params = config.params
    n_reps = int(params["replicates"])
    results = _run_tasks(config, "sgd", [(rep,) for rep in range(n_reps)])

    model = build_model(config.model, config.data)
    theta_mle = model.mle_theta()
    theta0 = float(params["theta0"][0])

    dim = len(params["theta0"])
    header = (
        ["rep", "iteration"]
        + [f"theta_{i}" for i in range(dim)]
        + [f"grad_{i}" for i in range(dim)]
        + ["cost_units", "cumulative_cost"]
    )
    rows = []
    finals = np.empty(n_reps)
    for rep, thetas, grads, costs in results:
        cum = 0.0
        rows.append([rep, 0, *thetas[0], *([None] * dim), 0.0, 0.0])
        for i, (th, g, c) in enumerate(zip(thetas[1:], grads, costs), start=1):
            cum += c
            rows.append([rep, i, *th, *g, c, cum])
        finals[rep] = thetas[-1][0]

    ratios = np.abs(finals - theta_mle) / abs(theta0 - theta_mle)
    median_ratio = float(np.median(ratios))
    contraction = float(params["contraction"])
    checks = [
        _check(
            "sgd-contraction",
            median_ratio < contraction,
            f"median |theta_I - theta_mle| / |theta_0 - theta_mle| = "
            f"{median_ratio:.4f} < {contraction}",
        )
    ]
    summary = {
        "theta_mle": float(theta_mle),
        "theta0": theta0,
        "median_ratio": median_ratio,
        "final_thetas": _plain(finals),
    }
    return header, rows, summary, checks


def _exp_coupling_tests(config: ExperimentConfig) -> tuple[list[str], list, dict, list]:
    from scipy.stats import kstest, norm

    params = config.params
    n_draws = int(params["draws"])
    p_min = float(params["p_min"])
    freq_tol = float(params["freq_tol"])
    header = ["case", "statistic", "value"]
    rows: list[list] = []
    checks: list[dict] = []
    summary: dict[str, Any] = {"cases": {}}

    def ks_case(name: str, sample: np.ndarray, mean: float, sd: float) -> float:
        p = float(kstest(sample, norm(loc=mean, scale=sd).cdf).pvalue)
        rows.append([name, "ks_p", p])
        summary["cases"].setdefault(name, {})["ks_p"] = p
        checks.append(_check(name, p > p_min, f"KS p = {p:.4f} > {p_min}"))
        return p

    stream = replicate_streams(config.seed, 0).coupling

    # 1-d maximal coupling: N(0,1) proposals from points 3 apart.
    prop1 = GaussianProposal("rwmh", 1, 1.0)
    x1, w1 = np.zeros(1), np.full(1, 3.0)
    xs = np.empty(n_draws)
    ws = np.empty(n_draws)
    met = 0
    for i in range(n_draws):
        draw = cp.maximal_pair(prop1, x1, w1, stream)
        xs[i] = draw.x_prop[0]
        ws[i] = draw.w_prop[0]
        met += draw.met
    ks_case("max-pair-x", xs, 0.0, 1.0)
    ks_case("max-pair-w", ws, 3.0, 1.0)
    freq = met / n_draws
    overlap = 2.0 * float(norm.cdf(-1.5))
    rows.append(["max-pair", "meet_frequency", freq])
    rows.append(["max-pair", "overlap_mass", overlap])
    summary["cases"]["max-pair"] = {"meet_frequency": freq, "overlap_mass": overlap}
    checks.append(
        _check(
            "meet-frequency",
            abs(freq - overlap) <= freq_tol,
            f"|{freq:.4f} - {overlap:.4f}| <= {freq_tol}",
        )
    )

    # 2-d reflection-maximal coupling, anisotropic scale.
    sigma2 = np.array([1.0, 2.0])
    prop2 = GaussianProposal("rwmh", 2, sigma2)
    x2, w2 = np.zeros(2), np.array([1.0, -1.0])
    xs2 = np.empty((n_draws, 2))
    ws2 = np.empty((n_draws, 2))
    for i in range(n_draws):
        draw = cp.reflection_maximal_pair(prop2, x2, w2, stream)
        xs2[i] = draw.x_prop
        ws2[i] = draw.w_prop
    for j in range(2):
        ks_case(f"reflection-x{j}", xs2[:, j], x2[j], sigma2[j])
        ks_case(f"reflection-w{j}", ws2[:, j], w2[j], sigma2[j])

    # 4-way maximal coupling of autoregressive proposals at two levels.
    pf = GaussianProposal("pcn", 1, 1.0, 0.9)
    pc = GaussianProposal("pcn", 1, 1.5, 0.8)
    states = {
        "quad-xf": (np.array([0.2]), pf),
        "quad-wf": (np.array([-0.3]), pf),
        "quad-xc": (np.array([1.0]), pc),
        "quad-wc": (np.array([0.5]), pc),
    }
    draws4 = {name: np.empty(n_draws) for name in states}
    for i in range(n_draws):
        d4 = cp.maximal_quad(
            pf, pc,
            states["quad-xf"][0], states["quad-wf"][0],
            states["quad-xc"][0], states["quad-wc"][0],
            stream,
        )
        draws4["quad-xf"][i] = d4.x_fine[0]
        draws4["quad-wf"][i] = d4.w_fine[0]
        draws4["quad-xc"][i] = d4.x_coarse[0]
        draws4["quad-wc"][i] = d4.w_coarse[0]
    for name, (state, prop) in states.items():
        mean = float(prop.mean(state)[0])
        sd = float(prop.scale_noise(np.ones(prop.dim))[0])
        ks_case(name, draws4[name], mean, sd)

    # faithfulness over full coupled runs
    pair_runs = int(params["pair_runs"])
    quad_runs = int(params["quad_runs"])
    payloads = [("pair", rep) for rep in range(pair_runs)]
    payloads += [("quad", rep) for rep in range(quad_runs)]
    results = _run_tasks(config, "faithfulness", payloads)
    violations = sum(r[3] for r in results)
    rows.append(["faithfulness", "violations", violations])
    rows.append(["faithfulness", "runs", len(results)])
    summary["cases"]["faithfulness"] = {
        "violations": int(violations),
        "runs": len(results),
    }
    checks.append(
        _check("faithfulness", violations == 0, f"{violations} violations")
    )
    return header, rows, summary, checks


_EXPERIMENT_FNS = {
    "forward-rate": _exp_forward_rate,
    "increment-rate": _exp_increment_rate,
    "mse-vs-n": _exp_mse_vs_n,
    "estimate": _exp_estimate,
    "sgd": _exp_sgd,
    "coupling-tests": _exp_coupling_tests,
}


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    summary: dict
    checks: list[dict]
    csv_text: str

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def _check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def _plain(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays for JSON emission."""
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        return obj
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: list[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute one experiment; write outputs if the config names a path."""
    header, rows, summary, checks = _EXPERIMENT_FNS[config.experiment](config)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "model": config.model,
        "experiment": config.experiment,
        **summary,
        "checks": checks,
    }
    csv_text = _csv_text(header, rows)
    result = ExperimentResult(
        config=config, summary=_plain(summary), checks=checks, csv_text=csv_text
    )
    if config.output is not None:
        out = Path(config.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replicates.csv").write_text(csv_text, encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(result.summary, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        (out / "manifest.json").write_text(
            json.dumps(config.manifest(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return result
