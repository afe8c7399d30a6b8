"""Sample-quality metrics: 2-D kernel density estimation, normalized L2
density distance, covariance distances, and mixing curves.

Density comparisons only make sense on geometrically identical grids,
so grid extents are built from the union bounding box of every sample
set entering a comparison, padded by three bandwidths and snapped to
the grid spacing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import UsageError
from .models import SampleSet, ScoreField
from .rng import RandomSource
from .samplers import InitSpec, run_ensemble

_KDE_CHUNK = 20_000
_MARGIN_BANDWIDTHS = 3.0


@dataclass(frozen=True)
class DensityGrid2D:
    """Gaussian KDE evaluated on a regular 2-D grid.

    ``values[i, j]`` is the density at ``origin + (i, j) * spacing``.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray
    bandwidth: float

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(2)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise UsageError("grid values must be a 2-D matrix")
        if self.spacing <= 0.0 or self.bandwidth <= 0.0:
            raise UsageError("spacing and bandwidth must be positive")
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise UsageError("grid values must be finite and nonnegative")
        origin.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def axis(self, which: int) -> np.ndarray:
        return self.origin[which] + self.spacing * np.arange(self.values.shape[which])

    def mass(self) -> float:
        """Riemann-sum probability mass over the grid."""
        return float(self.values.sum() * self.spacing**2)

    def same_geometry(self, other: "DensityGrid2D") -> bool:
        return (
            self.values.shape == other.values.shape
            and self.spacing == other.spacing
            and bool(np.all(self.origin == other.origin))
        )


def _points_2d(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        if samples.dim != 2:
            raise UsageError(f"kde2d needs 2-D samples, got dim {samples.dim}")
        pts = samples.points
    else:
        pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise UsageError(f"kde2d needs an (n, 2) sample array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise UsageError("kde2d needs a nonempty sample set")
    return pts


def shared_extent(
    sample_sets: Sequence, bandwidth: float, spacing: float, snap: Optional[float] = None
) -> tuple[float, float, float, float]:
    """Snapped bounding box of the union of sample sets plus margin.

    The margin is three bandwidths on every side; edges land on integer
    multiples of ``snap`` (the spacing by default) so that separately
    built grids coincide. A coarser snap absorbs small sample-to-sample
    wobble in the bounding box.
    """
    if bandwidth <= 0.0 or spacing <= 0.0:
        raise UsageError("bandwidth and spacing must be positive")
    snap = spacing if snap is None else float(snap)
    if snap <= 0.0:
        raise UsageError("snap must be positive")
    arrays = [_points_2d(s) for s in sample_sets]
    if not arrays:
        raise UsageError("need at least one sample set")
    lo = np.min([a.min(axis=0) for a in arrays], axis=0) - _MARGIN_BANDWIDTHS * bandwidth
    hi = np.max([a.max(axis=0) for a in arrays], axis=0) + _MARGIN_BANDWIDTHS * bandwidth
    lo = np.floor(lo / snap) * snap
    hi = np.ceil(hi / snap) * snap
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def kde2d(
    samples,
    bandwidth: float,
    spacing: float,
    extent: Optional[tuple[float, float, float, float]] = None,
) -> DensityGrid2D:
    """Isotropic Gaussian KDE of 2-D samples on a regular grid.

    ``extent`` (xmin, xmax, ymin, ymax) fixes the grid geometry for
    cross-sample comparisons; it must cover every sample point with a
    three-bandwidth margin, which also keeps the Riemann-sum mass
    within 1% of unity. Defaults to :func:`shared_extent` of the single
    input.
    """
    pts = _points_2d(samples)
    bandwidth = float(bandwidth)
    spacing = float(spacing)
    if extent is None:
        extent = shared_extent([pts], bandwidth, spacing)
    xmin, xmax, ymin, ymax = (float(e) for e in extent)
    margin = _MARGIN_BANDWIDTHS * bandwidth
    tol = 1e-9 * max(1.0, bandwidth)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if (
        lo[0] < xmin + margin - tol
        or lo[1] < ymin + margin - tol
        or hi[0] > xmax - margin + tol
        or hi[1] > ymax - margin + tol
    ):
        raise UsageError("grid extent must cover all sample points plus 3 bandwidths of margin")

    nx = int(round((xmax - xmin) / spacing)) + 1
    ny = int(round((ymax - ymin) / spacing)) + 1
    gx = xmin + spacing * np.arange(nx)
    gy = ymin + spacing * np.arange(ny)

    # The isotropic kernel separates per axis, so each chunk of samples
    # contributes through one (nx, chunk) @ (chunk, ny) product.
    inv_two_b2 = 1.0 / (2.0 * bandwidth**2)
    values = np.zeros((nx, ny))
    for start in range(0, pts.shape[0], _KDE_CHUNK):
        block = pts[start : start + _KDE_CHUNK]
        kx = np.exp(-inv_two_b2 * (block[:, 0][:, None] - gx[None, :]) ** 2)
        ky = np.exp(-inv_two_b2 * (block[:, 1][:, None] - gy[None, :]) ** 2)
        values += kx.T @ ky
    values /= pts.shape[0] * 2.0 * math.pi * bandwidth**2
    return DensityGrid2D(
        origin=np.array([xmin, ymin]), spacing=spacing, values=values, bandwidth=bandwidth
    )


def density_distance(a: DensityGrid2D, b: DensityGrid2D, reference: DensityGrid2D) -> float:
    """L2 distance between two grids, normalized by the reference norm.

    All three grids must share origin, spacing, and shape. The result
    reads as a relative error against the reference density (0.1 means
    10%, i.e. -1.0 in log10).
    """
    for other in (b, reference):
        if not a.same_geometry(other):
            raise UsageError("density grids must share origin, spacing, and shape")
    ref_norm = float(np.linalg.norm(reference.values))
    if ref_norm == 0.0:
        raise UsageError("reference grid has zero norm")
    return float(np.linalg.norm(a.values - b.values)) / ref_norm


def export_grid_csv(grid: DensityGrid2D, path) -> None:
    """Write (x, y, density) rows at full double precision."""
    xs = grid.axis(0)
    ys = grid.axis(1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("x,y,density\n")
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                fh.write(f"{x!r},{y!r},{grid.values[i, j]!r}\n")


# ---------------------------------------------------------------------------
# Covariance metrics
# ---------------------------------------------------------------------------


def covariance(samples) -> np.ndarray:
    """Sample covariance with denominator n (not n - 1)."""
    pts = samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if pts.ndim != 2:
        raise UsageError("samples must be an (n, dim) array")
    if pts.shape[0] < 2:
        raise UsageError("covariance needs at least 2 samples")
    centered = pts - pts.mean(axis=0)
    return centered.T @ centered / pts.shape[0]


def covariance_distance(a, b) -> float:
    """Frobenius norm of the difference of two symmetric matrices."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise UsageError(f"covariance matrices differ in shape: {a.shape} vs {b.shape}")
    for name, m in (("a", a), ("b", b)):
        if np.max(np.abs(m - m.T)) > 1e-8 * max(1.0, float(np.max(np.abs(m)))):
            raise UsageError(f"matrix {name} is not symmetric")
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------------------
# Mixing curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixingCurve:
    """Covariance error of a chain ensemble at every step.

    ``per_step_error[t]`` is the Frobenius distance between the
    cross-trial covariance at step t and the true covariance. Optional
    bootstrap bands (over trials) bracket each entry.
    """

    per_step_error: np.ndarray
    n_trials: int
    band_lower: Optional[np.ndarray] = None
    band_upper: Optional[np.ndarray] = None

    def __post_init__(self):
        err = np.asarray(self.per_step_error, dtype=float)
        if err.ndim != 1 or not np.all(np.isfinite(err)):
            raise UsageError("per-step errors must be a finite 1-D sequence")
        err.setflags(write=False)
        object.__setattr__(self, "per_step_error", err)

    def __len__(self) -> int:
        return self.per_step_error.shape[0]


@dataclass(frozen=True)
class MixingArm:
    """One sampler entering the mixing comparison."""

    label: str
    variant: str
    mu: Optional[float]
    sigma2: float
    score: ScoreField


def mixing_curves(
    arms: Sequence[MixingArm],
    n_trials: int,
    n_steps: int,
    init: InitSpec,
    true_cov,
    seed: int,
    bootstrap: int = 0,
    rng: Optional[RandomSource] = None,
) -> dict[str, MixingCurve]:
    """Ensemble mixing comparison across sampler arms.

    All arms start from one shared draw of ``n_trials`` initial points,
    so their step-0 errors coincide exactly; each arm then evolves
    under its own variate stream. With ``bootstrap`` > 0, that many
    trial resamplings produce 2.5%/97.5% bands per step.
    """
    if n_trials < 2:
        raise UsageError("mixing needs at least 2 trials")
    if len(arms) == 0:
        raise UsageError("need at least one mixing arm")
    if len({arm.label for arm in arms}) != len(arms):
        raise UsageError("mixing arm labels must be unique")
    true_cov = np.atleast_2d(np.asarray(true_cov, dtype=float))
    dim = arms[0].score.dim
    if any(arm.score.dim != dim for arm in arms):
        raise UsageError("all mixing arms must share one dimension")
    base = rng if rng is not None else RandomSource(seed)
    init_states = init.draw(dim, base.spawn("mixing-init"), n=int(n_trials))

    curves: dict[str, MixingCurve] = {}
    for arm in arms:
        errors = np.empty(int(n_steps) + 1)
        states_per_step = np.empty((int(n_steps) + 1, int(n_trials), dim)) if bootstrap else None

        def observe(step: int, states: np.ndarray) -> None:
            errors[step] = covariance_distance(covariance(states), true_cov)
            if states_per_step is not None:
                states_per_step[step] = states

        run_ensemble(
            arm.variant,
            arm.score,
            arm.mu,
            arm.sigma2,
            init_states,
            int(n_steps),
            base.spawn("mixing-arm", arm.label),
            on_state=observe,
        )
        lower = upper = None
        if bootstrap:
            lower, upper = _bootstrap_bands(
                states_per_step, true_cov, int(bootstrap), base.spawn("mixing-bootstrap", arm.label)
            )
        curves[arm.label] = MixingCurve(
            per_step_error=errors,
            n_trials=int(n_trials),
            band_lower=lower,
            band_upper=upper,
        )
    return curves


def _bootstrap_bands(
    states_per_step: np.ndarray, true_cov: np.ndarray, n_boot: int, rng: RandomSource
) -> tuple[np.ndarray, np.ndarray]:
    """Percentile bands of the per-step covariance error over trial resamples."""
    n_steps_plus, n_trials, _ = states_per_step.shape
    errors = np.empty((n_boot, n_steps_plus))
    for b in range(n_boot):
        idx = np.minimum((rng.uniform(n_trials) * n_trials).astype(int), n_trials - 1)
        resampled = states_per_step[:, idx, :]
        centered = resampled - resampled.mean(axis=1, keepdims=True)
        covs = np.einsum("tnd,tne->tde", centered, centered) / n_trials
        errors[b] = np.linalg.norm(covs - true_cov, axis=(1, 2))
    return np.quantile(errors, 0.025, axis=0), np.quantile(errors, 0.975, axis=0)


def export_mixing_csv(curves: dict[str, MixingCurve], path) -> None:
    """Write (step, error, variant) rows for every curve."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,error,variant\n")
        for label in sorted(curves):
            for step, err in enumerate(curves[label].per_step_error):
                fh.write(f"{step},{err!r},{label}\n")
