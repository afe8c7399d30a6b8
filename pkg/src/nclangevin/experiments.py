"""End-to-end simulation studies and their comparison reports.

Three scenarios:

* ``gmm_bias``: 2-D Gaussian-mixture targets; every sampled arm is
  reduced to a kernel density estimate on one shared grid and scored by
  normalized L2 distance against a ground-truth (exact-sampling)
  reference, with standard errors over replicate seeds.
* ``gaussian_bias``: white Gaussian targets in higher dimension; arms
  are scored by Frobenius distance between tail covariance and the
  identity, with the closed-form stationary predictions attached.
* ``mixing``: ensembles of short chains from a concentrated initializer;
  per-step covariance error curves with bootstrap bands.

Reports are pure functions of their spec (the seed included): rerunning
reproduces every number bit-exactly. Execution may fan replicate chains
out over worker processes; the reduction order is fixed, so results do
not depend on the worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .errors import UsageError
from .models import (
    GmmModel,
    canonical_gmm,
    exact_sample,
    gaussian_model,
    noisy_score_field,
    score_field,
)
from .gaussian_theory import gaussian_theory_report
from .rng import RandomSource, derive_seed
from .samplers import InitSpec, SamplerConfig, run_chain_tail

SCENARIOS = ("gmm_bias", "gaussian_bias", "mixing")

DESK_STEPS = 100_000
PAPER_STEPS = 1_000_000

MIXING_STEPS = 100
MIXING_TRIALS = 10_000
MIXING_INIT_VARIANCE = 0.01

# method -> (variant, which score, step-size factor); ground_truth is exact sampling
METHODS = {
    "proposed": ("half_denoise", "noisy", 1.0),
    "basic": ("basic", "noisy", 1.0),
    "basic_mu4": ("basic", "noisy", 0.25),
    "oracle": ("basic", "true", 1.0),
    "oracle_mu4": ("basic", "true", 0.25),
    "ground_truth": (None, None, None),
}

_DEFAULT_METHODS = {
    "gmm_bias": ("proposed", "basic", "basic_mu4", "oracle", "oracle_mu4", "ground_truth"),
    "gaussian_bias": ("proposed", "basic", "oracle", "ground_truth"),
    "mixing": ("proposed", "basic"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved description of one study run."""

    scenario: str
    sigma2: tuple[float, ...] = (0.3,)
    kernels: Optional[int] = None
    dim: Optional[int] = None
    methods: tuple[str, ...] = ()
    n_steps: int = 0
    n_trials: int = MIXING_TRIALS
    n_replicates: int = 5
    seed: int = 0
    mu: Optional[float] = None
    tail_fraction: float = 0.3
    bandwidth: float = 0.1
    spacing: float = 0.1
    init_variance: float = MIXING_INIT_VARIANCE
    bootstrap: int = 200

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise UsageError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        sigma2 = self.sigma2
        if isinstance(sigma2, (int, float)):
            sigma2 = (float(sigma2),)
        sigma2 = tuple(float(s) for s in sigma2)
        if not sigma2 or any(s <= 0.0 for s in sigma2):
            raise UsageError("sigma2 must be one or more positive values")
        if self.scenario != "mixing" and len(sigma2) != 1:
            raise UsageError(f"{self.scenario} takes a single sigma2 level")
        object.__setattr__(self, "sigma2", sigma2)

        methods = tuple(self.methods) or _DEFAULT_METHODS[self.scenario]
        for m in methods:
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}; expected one of {sorted(METHODS)}")
        if len(set(methods)) != len(methods):
            raise UsageError("methods must be unique")
        if self.scenario == "mixing" and "ground_truth" in methods:
            raise UsageError("the mixing study compares chain ensembles; drop ground_truth")
        object.__setattr__(self, "methods", methods)

        if self.scenario == "gmm_bias" or self.scenario == "mixing":
            kernels = 2 if self.kernels is None and self.scenario == "mixing" else self.kernels
            if kernels is None:
                raise UsageError(f"{self.scenario} requires a kernel count")
            if not 1 <= int(kernels) <= 16:
                raise UsageError(f"kernel count must be in [1, 16], got {kernels}")
            if self.dim not in (None, 2):
                raise UsageError(f"{self.scenario} is a 2-D scenario")
            object.__setattr__(self, "kernels", int(kernels))
            object.__setattr__(self, "dim", 2)
        else:
            if self.dim is None or int(self.dim) < 1:
                raise UsageError("gaussian_bias requires a positive dimension")
            if self.kernels is not None:
                raise UsageError("gaussian_bias does not take a kernel count")
            object.__setattr__(self, "dim", int(self.dim))

        n_steps = self.n_steps
        if n_steps == 0:
            n_steps = MIXING_STEPS if self.scenario == "mixing" else DESK_STEPS
        if n_steps < 1:
            raise UsageError("n_steps must be positive")
        object.__setattr__(self, "n_steps", int(n_steps))

        if self.scenario == "mixing" and self.n_trials < 2:
            raise UsageError("mixing requires at least 2 trials")
        if self.n_replicates < 1:
            raise UsageError("n_replicates must be at least 1")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise UsageError("tail_fraction must be in (0, 1]")
        if self.bandwidth <= 0.0 or self.spacing <= 0.0:
            raise UsageError("bandwidth and spacing must be positive")

        if self.mu is not None:
            if self.mu <= 0.0:
                raise UsageError("mu override must be positive")
            if self.scenario == "mixing":
                raise UsageError("mixing derives mu = sigma2/2 per level; drop the mu override")
            if "proposed" in methods and not math.isclose(self.mu, sigma2[0] / 2.0, rel_tol=1e-12):
                raise UsageError(
                    "the proposed method fixes mu = sigma2/2; drop the mu override or the method"
                )

    def base_mu(self, sigma2: float) -> float:
        return float(self.mu) if self.mu is not None else sigma2 / 2.0

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "sigma2": list(self.sigma2),
            "kernels": self.kernels,
            "dim": self.dim,
            "methods": list(self.methods),
            "n_steps": self.n_steps,
            "n_trials": self.n_trials,
            "n_replicates": self.n_replicates,
            "seed": self.seed,
            "mu": self.mu,
            "tail_fraction": self.tail_fraction,
            "bandwidth": self.bandwidth,
            "spacing": self.spacing,
            "init_variance": self.init_variance,
            "bootstrap": self.bootstrap,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown experiment keys {sorted(unknown)}")
        kwargs = dict(data)
        if "sigma2" in kwargs and isinstance(kwargs["sigma2"], list):
            kwargs["sigma2"] = tuple(kwargs["sigma2"])
        if "methods" in kwargs and kwargs["methods"] is not None:
            kwargs["methods"] = tuple(kwargs["methods"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ExperimentReport:
    """Per-method comparison results plus run metadata.

    ``methods`` maps each requested method to its distances (raw and
    log10), standard errors over replicate seeds, and, where
    applicable, closed-form theory predictions. ``extras`` carries
    scenario-specific payloads (grid geometry, mixing curves, ...).
    """

    spec: ExperimentSpec
    methods: dict
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [m for m in self.spec.methods if not any(k == m for k in self.methods)]
        if missing:
            raise UsageError(f"report is missing methods {missing}; refusing a partial report")

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "methods": self.methods, "extras": self.extras}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_jsonify)

    def distance_rows(self) -> list[dict]:
        """Rows (method, sigma2, distance, log10_distance, stderr) for CSV export."""
        rows = []
        for name in self.spec.methods:
            entry = self.methods[name]
            if "distance_mean" not in entry:
                continue
            rows.append(
                {
                    "method": name,
                    "sigma2": entry.get("sigma2", self.spec.sigma2[0]),
                    "distance": entry["distance_mean"],
                    "log10_distance": entry["log10_distance_mean"],
                    "stderr": entry["distance_stderr"],
                }
            )
        return rows


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def write_report_json(report: ExperimentReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


def write_distances_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method,sigma2,distance,log10_distance,stderr\n")
        for row in report.distance_rows():
            fh.write(
                f"{row['method']},{row['sigma2']!r},{row['distance']!r},"
                f"{row['log10_distance']!r},{row['stderr']!r}\n"
            )


# ---------------------------------------------------------------------------
# Shared arm machinery
# ---------------------------------------------------------------------------


def _method_score(model: GmmModel, which: str, sigma2: float):
    return noisy_score_field(model, sigma2) if which == "noisy" else score_field(model)


def _arm_task(args) -> np.ndarray:
    """Compute one (method, replicate) arm; top-level for process pools."""
    model, method, sigma2, base_mu, n_steps, tail_fraction, seed = args
    variant, which, factor = METHODS[method]
    n_tail = math.ceil(tail_fraction * (n_steps + 1))
    if variant is None:
        return exact_sample(model, n_tail, RandomSource(seed)).points
    mu = base_mu * factor
    score = _method_score(model, which, sigma2)
    if variant == "half_denoise":
        config = SamplerConfig(
            variant=variant, n_steps=n_steps, seed=seed, sigma2=sigma2,
            init=InitSpec.gaussian(),
        )
    else:
        config = SamplerConfig(
            variant=variant, n_steps=n_steps, seed=seed, mu=mu, sigma2=sigma2,
            init=InitSpec.gaussian(),
        )
    return run_chain_tail(config, score, tail_fraction).points


def _run_arms(spec: ExperimentSpec, model: GmmModel, sigma2: float, threads: int) -> dict:
    """Tail samples for every (method, replicate), in a fixed order.

    Seeds derive from (seed, scenario, method, replicate); the
    ground-truth arm's tags exclude the noise level entirely, so its
    draws are identical across sigma2 settings of the same study.
    """
    tasks = []
    keys = []
    for method in spec.methods:
        for rep in range(spec.n_replicates):
            seed = derive_seed(spec.seed, spec.scenario, method, rep)
            tasks.append(
                (model, method, sigma2, spec.base_mu(sigma2), spec.n_steps, spec.tail_fraction, seed)
            )
            keys.append((method, rep))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_arm_task, tasks))
    else:
        results = [_arm_task(t) for t in tasks]
    out: dict = {}
    for (method, rep), points in zip(keys, results):
        out.setdefault(method, {})[rep] = points
    return out


def _distance_stats(distances: Sequence[float]) -> dict:
    d = np.asarray(distances, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise UsageError("distances must be finite and positive")
    logs = np.log10(d)
    stderr = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
    log_stderr = float(logs.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
    return {
        "distances": d.tolist(),
        "distance_mean": float(d.mean()),
        "distance_stderr": stderr,
        "log10_distances": logs.tolist(),
        "log10_distance_mean": float(logs.mean()),
        "log10_distance_stderr": log_stderr,
    }


# ---------------------------------------------------------------------------
# Scenario runners
# ---------------------------------------------------------------------------


def run_gmm_bias_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """2-D mixture study: KDE distance to an exact-sampling reference."""
    if spec.scenario != "gmm_bias":
        raise UsageError(f"expected a gmm_bias spec, got {spec.scenario!r}")
    sigma2 = spec.sigma2[0]
    model = canonical_gmm(spec.kernels)
    n_tail = math.ceil(spec.tail_fraction * (spec.n_steps + 1))
    ref = exact_sample(
        model, n_tail, RandomSource(derive_seed(spec.seed, spec.scenario, "ground-truth-ref"))
    )
    arms = _run_arms(spec, model, sigma2, threads)

    all_sets = [ref.points] + [arms[m][r] for m in spec.methods for r in sorted(arms[m])]
    # Coarse snap so the grid box does not wobble with the noise level;
    # the ground-truth floor then matches exactly across sigma2 settings.
    extent = analysis.shared_extent(all_sets, spec.bandwidth, spec.spacing, snap=1.0)
    ref_grid = analysis.kde2d(ref.points, spec.bandwidth, spec.spacing, extent=extent)

    methods: dict = {}
    grids: dict = {}
    for method in spec.methods:
        distances = []
        for rep in sorted(arms[method]):
            grid = analysis.kde2d(arms[method][rep], spec.bandwidth, spec.spacing, extent=extent)
            distances.append(analysis.density_distance(grid, ref_grid, ref_grid))
            if rep == 0:
                grids[method] = grid
        entry = _distance_stats(distances)
        variant, which, factor = METHODS[method]
        entry.update(
            {
                "sigma2": sigma2,
                "variant": variant,
                "score": which,
                "mu": None if factor is None else spec.base_mu(sigma2) * factor,
            }
        )
        methods[method] = entry

    extras = {
        "model": {"kernels": spec.kernels, "dim": 2},
        "grid": {
            "origin": list(ref_grid.origin),
            "spacing": ref_grid.spacing,
            "shape": list(ref_grid.shape),
            "bandwidth": ref_grid.bandwidth,
            "mass_reference": ref_grid.mass(),
        },
        "n_tail": n_tail,
    }
    report = ExperimentReport(spec=spec, methods=methods, extras=extras)
    report.extras["first_replicate_grids"] = {m: g.values.tolist() for m, g in grids.items()}
    return report


def run_gaussian_bias_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """White-Gaussian study: covariance distance to the identity, with
    closed-form stationary predictions per sampled arm."""
    if spec.scenario != "gaussian_bias":
        raise UsageError(f"expected a gaussian_bias spec, got {spec.scenario!r}")
    sigma2 = spec.sigma2[0]
    dim = spec.dim
    model = gaussian_model(dim)
    truth = np.eye(dim)
    arms = _run_arms(spec, model, sigma2, threads)

    methods: dict = {}
    for method in spec.methods:
        variant, which, factor = METHODS[method]
        covs = [analysis.covariance(arms[method][r]) for r in sorted(arms[method])]
        pooled = np.mean(covs, axis=0)
        distances = [analysis.covariance_distance(c, truth) for c in covs]
        entry = _distance_stats(distances)
        entry.update(
            {
                "sigma2": sigma2,
                "variant": variant,
                "score": which,
                "mu": None if factor is None else spec.base_mu(sigma2) * factor,
                "pooled_covariance": pooled.tolist(),
                "pooled_distance_to_truth": analysis.covariance_distance(pooled, truth),
            }
        )
        if variant is not None:
            mu = spec.base_mu(sigma2) * factor
            score_cov = (1.0 + sigma2) * truth if which == "noisy" else truth
            correction = sigma2 if variant in ("half_denoise", "noise_corrected") else 0.0
            theory = gaussian_theory_report(truth, score_cov, mu, correction)
            entry["theory"] = {
                "stationary_cov_diag": float(theory.stationary_cov[0, 0]),
                "predicted_distance_to_truth": analysis.covariance_distance(
                    theory.stationary_cov, truth
                ),
                "pooled_distance_to_prediction": analysis.covariance_distance(
                    pooled, theory.stationary_cov
                ),
                "first_order_bias_diag": float(theory.predicted_first_order_bias[0, 0]),
                "spectral_norm_m": theory.spectral_norm_m,
                "converged_in": theory.converged_in,
            }
        methods[method] = entry

    extras = {"model": {"dim": dim, "white": True}, "n_tail": math.ceil(spec.tail_fraction * (spec.n_steps + 1))}
    return ExperimentReport(spec=spec, methods=methods, extras=extras)


def run_mixing_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Short-chain ensemble study from a concentrated initializer.

    One arm per (method, noise level); all arms share the step-0
    ensemble. Bootstrap bands quantify trial noise per step.
    """
    if spec.scenario != "mixing":
        raise UsageError(f"expected a mixing spec, got {spec.scenario!r}")
    del threads  # ensembles are vectorized across trials already
    model = canonical_gmm(spec.kernels)
    true_cov = model.covariance()
    midpoint = model.weights @ model.means
    init = InitSpec.gaussian(mean=midpoint, variance=spec.init_variance)

    arms = []
    for method in spec.methods:
        variant, which, factor = METHODS[method]
        for level in spec.sigma2:
            mu = (level / 2.0) * factor
            arms.append(
                analysis.MixingArm(
                    label=f"{method}@sigma2={level:g}",
                    variant=variant,
                    mu=None if variant == "half_denoise" else mu,
                    sigma2=0.0 if variant == "basic" else level,
                    score=_method_score(model, which, level),
                )
            )
    curves = analysis.mixing_curves(
        arms,
        n_trials=spec.n_trials,
        n_steps=spec.n_steps,
        init=init,
        true_cov=true_cov,
        seed=derive_seed(spec.seed, "mixing"),
        bootstrap=spec.bootstrap,
    )

    methods: dict = {}
    for method in spec.methods:
        entry: dict = {}
        for level in spec.sigma2:
            label = f"{method}@sigma2={level:g}"
            curve = curves[label]
            tail = curve.per_step_error[-10:]
            entry[f"sigma2={level:g}"] = {
                "label": label,
                "per_step_error": curve.per_step_error.tolist(),
                "band_lower": None if curve.band_lower is None else curve.band_lower.tolist(),
                "band_upper": None if curve.band_upper is None else curve.band_upper.tolist(),
                "step0_error": float(curve.per_step_error[0]),
                "final_error": float(curve.per_step_error[-1]),
                "plateau_mean": float(tail.mean()),
            }
        methods[method] = entry

    extras = {
        "model": {"kernels": spec.kernels, "dim": 2},
        "true_covariance": true_cov.tolist(),
        "init": {"mean": list(midpoint), "variance": spec.init_variance},
        "labels": sorted(curves),
    }
    report = ExperimentReport(spec=spec, methods=methods, extras=extras)
    report.extras["curves"] = {
        label: curves[label].per_step_error.tolist() for label in sorted(curves)
    }
    return report


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    runner = {
        "gmm_bias": run_gmm_bias_experiment,
        "gaussian_bias": run_gaussian_bias_experiment,
        "mixing": run_mixing_experiment,
    }[spec.scenario]
    return runner(spec, threads=threads)


def mixing_curves_from_report(report: ExperimentReport) -> dict[str, analysis.MixingCurve]:
    """Rehydrate MixingCurve objects from a mixing report."""
    out = {}
    for method, entry in report.methods.items():
        for _, arm in entry.items():
            out[arm["label"]] = analysis.MixingCurve(
                per_step_error=np.asarray(arm["per_step_error"]),
                n_trials=report.spec.n_trials,
                band_lower=None if arm["band_lower"] is None else np.asarray(arm["band_lower"]),
                band_upper=None if arm["band_upper"] is None else np.asarray(arm["band_upper"]),
            )
    return out
