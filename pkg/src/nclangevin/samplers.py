"""Langevin iterations and chain execution.

Three iteration variants share one noise-stream layout:

* ``basic``: x' = x + mu * score(x) + sqrt(2 mu) * nu. Run with the
  true score this is the oracle reference; run with a noisy-data score
  it is the biased baseline.
* ``noise_corrected``: x_noisy = x + sigma * n, then
  x' = x_noisy + mu * score(x_noisy) + sqrt(2 mu - sigma2) * nu,
  valid for mu >= sigma2 / 2.
* ``half_denoise``: the minimal-step special case mu = sigma2 / 2,
  where the nu term vanishes and each step is "add noise, remove half
  of it": x' = x_noisy + (sigma2 / 2) * score(x_noisy).

Variates are consumed in a fixed order per step (the n block, then the
nu block, each of ``dim`` values), so the degenerate cases reduce to
each other bit-exactly, not merely in distribution: ``noise_corrected``
with sigma2 = 0 reproduces ``basic`` and with mu = sigma2 / 2
reproduces ``half_denoise`` under an aligned variate stream.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import NumericDivergenceError, StepSizeError, UsageError
from .models import SampleSet, ScoreField
from .rng import RandomSource

VARIANTS = ("basic", "noise_corrected", "half_denoise")

_DIVERGENCE_BOUND = 1e6
_CHUNK_STEPS = 16384


@dataclass(frozen=True)
class InitSpec:
    """Initial distribution of a chain: a fixed point or an isotropic Gaussian."""

    kind: str = "gaussian"
    point: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "gaussian"):
            raise UsageError(f"unknown init kind {self.kind!r}")
        if self.kind == "point":
            if self.point is None:
                raise UsageError("point init requires a point")
            object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(-1))
        else:
            if self.variance < 0.0:
                raise UsageError("init variance must be nonnegative")
            if self.mean is not None:
                object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))

    @classmethod
    def at_point(cls, point) -> "InitSpec":
        return cls(kind="point", point=point)

    @classmethod
    def gaussian(cls, mean=None, variance: float = 1.0) -> "InitSpec":
        return cls(kind="gaussian", mean=mean, variance=float(variance))

    def dim_hint(self) -> Optional[int]:
        if self.kind == "point":
            return int(self.point.shape[0])
        if self.mean is not None:
            return int(self.mean.shape[0])
        return None

    def draw(self, dim: int, rng: RandomSource, n: Optional[int] = None) -> np.ndarray:
        """One draw of shape (dim,), or (n, dim) when ``n`` is given.

        A point init consumes no variates; a Gaussian init consumes one
        normal block of the returned shape.
        """
        hint = self.dim_hint()
        if hint is not None and hint != dim:
            raise UsageError(f"init has dimension {hint}, expected {dim}")
        shape = (dim,) if n is None else (int(n), dim)
        if self.kind == "point":
            return np.broadcast_to(self.point, shape).copy()
        mean = np.zeros(dim) if self.mean is None else self.mean
        return mean + math.sqrt(self.variance) * rng.standard_normal(shape)


@dataclass(frozen=True)
class SamplerConfig:
    """Variant selector plus step size, correction noise, length, and seed."""

    variant: str
    n_steps: int
    seed: int
    mu: Optional[float] = None
    sigma2: float = 0.0
    init: InitSpec = field(default_factory=InitSpec.gaussian)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_steps < 0:
            raise UsageError("n_steps must be nonnegative")
        if self.sigma2 < 0.0:
            raise UsageError("sigma2 must be nonnegative")
        if self.variant == "basic":
            if self.mu is None or self.mu <= 0.0:
                raise UsageError("basic variant requires a positive step size mu")
        elif self.variant == "noise_corrected":
            if self.mu is None:
                raise UsageError("noise_corrected variant requires a step size mu")
            _check_step_size(self.mu, self.sigma2)
        else:  # half_denoise
            if self.sigma2 <= 0.0:
                raise UsageError("half_denoise requires sigma2 > 0")
            implied = self.sigma2 / 2.0
            if self.mu is not None and not math.isclose(self.mu, implied, rel_tol=1e-12):
                raise UsageError(
                    f"half_denoise implies mu = sigma2/2 = {implied!r}; got mu = {self.mu!r}"
                )

    @property
    def effective_mu(self) -> float:
        if self.variant == "half_denoise":
            return self.sigma2 / 2.0
        return float(self.mu)

    def with_seed(self, seed: int) -> "SamplerConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class Chain:
    """A full trajectory x_0..x_T plus the configuration that produced it."""

    states: np.ndarray
    config: SamplerConfig
    score_tag: float
    noisy_states: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        if self.noisy_states is not None:
            noisy = np.asarray(self.noisy_states, dtype=float)
            noisy.setflags(write=False)
            object.__setattr__(self, "noisy_states", noisy)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def _check_step_size(mu: float, sigma2: float) -> None:
    if mu < sigma2 / 2.0:
        raise StepSizeError(
            f"step-size condition violated: mu = {mu!r} < sigma2/2 = {sigma2 / 2.0!r}"
        )


def _check_score_tag(score: ScoreField, sigma2: float) -> None:
    if not math.isclose(score.noise_variance, sigma2, rel_tol=1e-9, abs_tol=1e-15):
        warnings.warn(
            f"score field carries noise variance {score.noise_variance!r} but the "
            f"iteration uses sigma2 = {sigma2!r}; proceeding (annealing-style use)",
            stacklevel=3,
        )


def _drift(score: Callable, point: np.ndarray) -> np.ndarray:
    out = np.asarray(score(point), dtype=float)
    if out.shape != point.shape:
        raise UsageError(f"score returned shape {out.shape} for input shape {point.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericDivergenceError("score returned a non-finite value", state=point)
    return out


def basic_langevin_step(score: ScoreField, mu: float, state, rng: RandomSource) -> np.ndarray:
    """One basic Langevin update; consumes one normal block (dim values)."""
    mu = float(mu)
    if mu <= 0.0:
        raise UsageError(f"step size mu must be positive, got {mu!r}")
    state = np.asarray(state, dtype=float)
    nu = rng.standard_normal(state.shape)
    return state + mu * _drift(score, state) + math.sqrt(2.0 * mu) * nu


def noise_corrected_step(
    noisy_score: ScoreField, mu: float, sigma2: float, state, rng: RandomSource
) -> np.ndarray:
    """One noise-corrected update; consumes the n block then the nu block."""
    mu = float(mu)
    sigma2 = float(sigma2)
    if sigma2 < 0.0:
        raise UsageError("sigma2 must be nonnegative")
    _check_step_size(mu, sigma2)
    _check_score_tag(noisy_score, sigma2)
    state = np.asarray(state, dtype=float)
    n = rng.standard_normal(state.shape)
    nu = rng.standard_normal(state.shape)
    x_noisy = state + math.sqrt(sigma2) * n
    coef = math.sqrt(2.0 * mu - sigma2)
    return x_noisy + mu * _drift(noisy_score, x_noisy) + coef * nu


def half_denoise_step(noisy_score: ScoreField, sigma2: float, state, rng: RandomSource) -> np.ndarray:
    """One half-denoising update; consumes one normal block (no nu draw).

    Adds fresh noise, then takes half of the Tweedie correction: the
    score coefficient is sigma2 / 2 where full denoising would use
    sigma2.
    """
    sigma2 = float(sigma2)
    if sigma2 <= 0.0:
        raise UsageError(f"sigma2 must be positive, got {sigma2!r}")
    _check_score_tag(noisy_score, sigma2)
    state = np.asarray(state, dtype=float)
    n = rng.standard_normal(state.shape)
    x_noisy = state + math.sqrt(sigma2) * n
    return x_noisy + (sigma2 / 2.0) * _drift(noisy_score, x_noisy)


def _check_state(state: np.ndarray, step: int) -> None:
    if not np.all(np.abs(state) <= _DIVERGENCE_BOUND):
        raise NumericDivergenceError(
            f"chain diverged at step {step}: a coordinate left [-1e6, 1e6]",
            state=state,
            step=step,
        )


def _run(
    variant: str,
    score: ScoreField,
    mu: float,
    sigma2: float,
    state: np.ndarray,
    n_steps: int,
    rng: RandomSource,
    on_state: Callable[[int, np.ndarray], None],
    record_noisy: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Drive ``n_steps`` updates, invoking ``on_state(t, x_t)`` for t >= 1.

    ``state`` may be (dim,) or (n_chains, dim); normal blocks match its
    shape and are pre-drawn in chunks, which is bit-identical to
    per-step draws. The update arithmetic mirrors the public step
    functions exactly.
    """
    sigma = math.sqrt(sigma2)
    if variant == "basic":
        blocks = 1
        coef = math.sqrt(2.0 * mu)
    elif variant == "noise_corrected":
        blocks = 2
        coef = math.sqrt(2.0 * mu - sigma2)
    else:
        blocks = 1
        coef = 0.0
    done = 0
    while done < n_steps:
        count = min(_CHUNK_STEPS, n_steps - done)
        noise = rng.standard_normal((count, blocks) + state.shape)
        for j in range(count):
            step = done + j + 1
            try:
                if variant == "basic":
                    state = state + mu * _drift(score, state) + coef * noise[j, 0]
                elif variant == "noise_corrected":
                    x_noisy = state + sigma * noise[j, 0]
                    state = x_noisy + mu * _drift(score, x_noisy) + coef * noise[j, 1]
                    if record_noisy is not None:
                        record_noisy(step - 1, x_noisy)
                else:
                    x_noisy = state + sigma * noise[j, 0]
                    state = x_noisy + (sigma2 / 2.0) * _drift(score, x_noisy)
                    if record_noisy is not None:
                        record_noisy(step - 1, x_noisy)
            except NumericDivergenceError as exc:
                exc.step = step
                raise
            _check_state(state, step)
            on_state(step, state)
        done += count
    return state


def _validate_run(config: SamplerConfig, score: ScoreField) -> None:
    hint = config.init.dim_hint()
    if hint is not None and hint != score.dim:
        raise UsageError(f"init dimension {hint} does not match score dimension {score.dim}")
    if config.variant in ("noise_corrected", "half_denoise"):
        _check_score_tag(score, config.sigma2)


def run_chain(
    config: SamplerConfig,
    score: ScoreField,
    rng: Optional[RandomSource] = None,
    record_noisy: bool = False,
) -> Chain:
    """Run the configured iteration for ``config.n_steps`` updates.

    Returns the full trajectory (n_steps + 1 states). Bit-reproducible:
    two runs with the same config and score produce identical chains;
    ``rng`` defaults to a fresh source seeded with ``config.seed``.

    With ``record_noisy=True`` the pre-noised intermediates
    x_noisy_t = x_t + sigma n_t are stored as well (noise-adding
    variants only).
    """
    _validate_run(config, score)
    if record_noisy and config.variant == "basic":
        raise UsageError("basic variant has no noisy intermediates to record")
    if rng is None:
        rng = RandomSource(config.seed)
    state = config.init.draw(score.dim, rng)
    states = np.empty((config.n_steps + 1, score.dim))
    states[0] = state
    noisy = np.empty((config.n_steps, score.dim)) if record_noisy else None

    def on_state(step: int, x: np.ndarray) -> None:
        states[step] = x

    record = None
    if record_noisy:

        def record(idx: int, x_noisy: np.ndarray) -> None:
            noisy[idx] = x_noisy

    _run(
        config.variant,
        score,
        config.effective_mu,
        config.sigma2,
        state,
        config.n_steps,
        rng,
        on_state,
        record,
    )
    return Chain(states=states, config=config, score_tag=score.noise_variance, noisy_states=noisy)


def run_chain_tail(
    config: SamplerConfig,
    score: ScoreField,
    fraction: float,
    rng: Optional[RandomSource] = None,
) -> SampleSet:
    """Run a chain but keep only its tail, in constant memory.

    Produces exactly ``tail_samples(run_chain(config, score), fraction)``
    without materializing the full trajectory; the experiment harness
    uses this for long high-dimensional chains.
    """
    _validate_run(config, score)
    length = config.n_steps + 1
    if length < 2:
        raise UsageError("chain must have at least 2 states to take a tail")
    keep = _tail_count(length, fraction)
    if rng is None:
        rng = RandomSource(config.seed)
    state = config.init.draw(score.dim, rng)
    start = length - keep
    tail = np.empty((keep, score.dim))
    if start == 0:
        tail[0] = state

    def on_state(step: int, x: np.ndarray) -> None:
        if step >= start:
            tail[step - start] = x

    _run(
        config.variant,
        score,
        config.effective_mu,
        config.sigma2,
        state,
        config.n_steps,
        rng,
        on_state,
    )
    return SampleSet(tail, score.dim, provenance=_tail_provenance(config, score.noise_variance, fraction))


def run_ensemble(
    variant: str,
    score: ScoreField,
    mu: Optional[float],
    sigma2: float,
    init_states: np.ndarray,
    n_steps: int,
    rng: RandomSource,
    on_state: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Advance ``n_chains`` trajectories in lockstep; returns final states.

    One random source drives the whole ensemble; each step consumes
    (n_chains, dim) blocks in the same (n, nu) order as single chains.
    ``on_state(t, states)`` is invoked for every t in 0..n_steps.
    """
    config = SamplerConfig(variant=variant, n_steps=int(n_steps), seed=rng.seed, mu=mu, sigma2=sigma2)
    if config.variant in ("noise_corrected", "half_denoise"):
        _check_score_tag(score, config.sigma2)
    states = np.array(init_states, dtype=float)
    if states.ndim != 2 or states.shape[1] != score.dim:
        raise UsageError(f"init_states must have shape (n_chains, {score.dim})")
    if on_state is not None:
        on_state(0, states)
    callback = (lambda step, x: None) if on_state is None else on_state
    return _run(
        config.variant,
        score,
        config.effective_mu,
        config.sigma2,
        states,
        config.n_steps,
        rng,
        callback,
    )


def _tail_count(length: int, fraction: float) -> int:
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"tail fraction must be in (0, 1], got {fraction!r}")
    return min(length, math.ceil(fraction * length))


def _tail_provenance(config: SamplerConfig, score_tag: float, fraction: float) -> dict:
    return {
        "generator": "chain-tail",
        "variant": config.variant,
        "mu": config.effective_mu,
        "sigma2": config.sigma2,
        "n_steps": config.n_steps,
        "seed": config.seed,
        "fraction": float(fraction),
        "score_noise_variance": float(score_tag),
    }


def tail_samples(chain: Chain, fraction: float) -> SampleSet:
    """The final ceil(fraction * length) states as a sample set."""
    length = len(chain)
    if length < 2:
        raise UsageError("chain must have at least 2 states to take a tail")
    keep = _tail_count(length, fraction)
    return SampleSet(
        chain.states[length - keep :].copy(),
        chain.dim,
        provenance=_tail_provenance(chain.config, chain.score_tag, fraction),
    )


def export_chain_csv(chain: Chain, path) -> None:
    """Write (step, coordinates) rows at full double precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step," + ",".join(f"x{d}" for d in range(chain.dim)) + "\n")
        for t, state in enumerate(chain.states):
            fh.write(str(t) + "," + ",".join(repr(float(c)) for c in state) + "\n")
