"""Command-line surface: configuration, dispatch, manifests, artifacts.

Subcommands: ``sample``, ``gmm-bias``, ``gaussian-bias``, ``mixing``,
``theory``, ``denoise``, ``dsm-fit``. Every run writes its artifacts
plus a ``manifest.json`` into one output directory and nothing outside
it; ``--replay`` re-executes a manifest and reproduces the artifacts
byte-for-byte (the manifest itself differs only in its recorded
duration).

Standard output carries machine-readable summaries; progress and
diagnostics go to standard error. Exit codes: 0 success, 2 usage error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, experiments
from .errors import EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE, NumericDivergenceError, UsageError
from .gaussian_theory import arm_stationary_values
from .models import (
    GmmModel,
    canonical_gmm,
    dsm_fit_affine,
    exact_sample,
    gaussian_model,
    load_gmm_model,
    noisy_score_field,
    score_field,
    tweedie_denoise,
)
from .rng import RandomSource, derive_seed
from .samplers import InitSpec, SamplerConfig, export_chain_csv, run_chain

OUTPUT_DIR_ENV = "NCLANGEVIN_OUTPUT_DIR"

_CONFIG_KEYS = {
    "scenario": str,
    "kernels": int,
    "dim": int,
    "sigma2": str,
    "mu": float,
    "steps": int,
    "trials": int,
    "replicates": int,
    "methods": str,
    "seed": int,
    "output_dir": str,
}

_VARIANT_NAMES = {
    "basic": "basic",
    "noise-corrected": "noise_corrected",
    "half-denoise": "half_denoise",
}


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _read_key_values(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    return values


def _parse_sigma2_list(text: str, key: str = "sigma2") -> tuple[float, ...]:
    try:
        parts = tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise UsageError(f"{key}: malformed numeric value ({exc})") from exc
    if not parts:
        raise UsageError(f"{key}: expected at least one value")
    return parts


def load_config(path, scenario: str | None = None, overrides: dict | None = None):
    """Build an :class:`~nclangevin.experiments.ExperimentSpec` from a
    key-value config file plus CLI overrides.

    Documented keys: scenario, kernels, dim, sigma2, mu, steps, trials,
    replicates, methods, seed, output_dir. Unknown keys, type errors,
    and constraint violations are reported with the offending key.
    Returns (spec, output_dir or None); override values win over file
    values.
    """
    raw = _read_key_values(path) if path is not None else {}
    file_scenario = raw.pop("scenario", None)
    if file_scenario is not None and scenario is not None and file_scenario != scenario:
        raise UsageError(
            f"config scenario {file_scenario!r} conflicts with subcommand {scenario!r}"
        )
    resolved_scenario = scenario or file_scenario
    if resolved_scenario is None:
        raise UsageError("no scenario given (config key 'scenario' or a subcommand)")

    output_dir = raw.pop("output_dir", None)
    kwargs: dict = {"scenario": resolved_scenario}
    for key, value in raw.items():
        caster = _CONFIG_KEYS[key]
        try:
            if key == "sigma2":
                kwargs["sigma2"] = _parse_sigma2_list(value)
            elif key == "methods":
                kwargs["methods"] = tuple(t for t in value.replace(",", " ").split())
            else:
                target = {
                    "steps": "n_steps",
                    "trials": "n_trials",
                    "replicates": "n_replicates",
                }.get(key, key)
                kwargs[target] = caster(value)
        except ValueError as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    try:
        spec = experiments.ExperimentSpec(**kwargs)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    return spec, output_dir


# ---------------------------------------------------------------------------
# Models on the command line
# ---------------------------------------------------------------------------


def resolve_model(spec: str) -> tuple[GmmModel, str, str]:
    """Resolve a --model argument to (model, canonical spec, content hash).

    Accepts a path to a key-value model file, or a builtin name:
    ``gauss<dim>`` (white Gaussian) or ``gmm<K>`` (the canonical 2-D
    benchmark family); ``gauss1d`` is an alias for ``gauss1``.
    """
    if os.path.exists(spec):
        model = load_gmm_model(spec)
        digest = hashlib.sha256(Path(spec).read_bytes()).hexdigest()
        return model, str(spec), digest
    name = spec.strip().lower()
    if name == "gauss1d":
        name = "gauss1"
    digest = hashlib.sha256(f"builtin:{name}".encode()).hexdigest()
    if name.startswith("gauss") and name[5:].isdigit():
        return gaussian_model(int(name[5:])), name, digest
    if name.startswith("gmm") and name[3:].isdigit():
        return canonical_gmm(int(name[3:])), name, digest
    raise UsageError(
        f"unknown model {spec!r}: not a readable file and not a builtin (gauss<dim>, gmm<K>)"
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _write_manifest(out_dir: Path, command: str, spec: dict, seed, model_hash, outputs, started) -> None:
    manifest = {
        "tool": "nclangevin",
        "version": __version__,
        "command": command,
        "spec": spec,
        "seed": seed,
        "model_hash": model_hash,
        "outputs": sorted(outputs),
        "duration_seconds": time.perf_counter() - started,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _summary(out_dir: Path, command: str, **fields) -> None:
    payload = {"command": command, "output_dir": str(out_dir)}
    payload.update(fields)
    print(json.dumps(payload, sort_keys=True))


def _resolve_out_dir(arg: str | None, command: str) -> Path:
    if arg:
        base = Path(arg)
    elif os.environ.get(OUTPUT_DIR_ENV):
        base = Path(os.environ[OUTPUT_DIR_ENV]) / command
    else:
        base = Path("nclangevin-out") / command
    base.mkdir(parents=True, exist_ok=True)
    return base


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_theory(args) -> int:
    started = time.perf_counter()
    out_dir = _resolve_out_dir(args.output_dir, "theory")
    values = arm_stationary_values(args.sigma2, args.mu, args.dim)
    for key in (
        "proposed_stationary_var",
        "basic_stationary_var",
        "oracle_stationary_var",
        "basic_over_proposed_bias_ratio",
        "first_order_ratio",
        "spectral_norm_m",
    ):
        print(f"{key}={values[key]:.7f}")
    with open(out_dir / "theory.json", "w", encoding="utf-8") as fh:
        json.dump(values, fh, sort_keys=True, indent=2)
        fh.write("\n")
    spec = {"kind": "theory", "sigma2": args.sigma2, "mu": args.mu, "dim": args.dim}
    _write_manifest(out_dir, "theory", spec, None, None, ["theory.json"], started)
    return EXIT_OK


def _score_for(model: GmmModel, which: str, sigma2: float):
    if which == "auto":
        which = "noisy" if sigma2 > 0.0 else "true"
    if which == "noisy":
        if sigma2 <= 0.0:
            raise UsageError("a noisy score requires sigma2 > 0")
        return noisy_score_field(model, sigma2), "noisy"
    return score_field(model), "true"


def _parse_init(text: str | None) -> InitSpec:
    if text is None or text == "gaussian":
        return InitSpec.gaussian()
    if text.startswith("gaussian:"):
        return InitSpec.gaussian(variance=float(text.split(":", 1)[1]))
    if text.startswith("point:"):
        coords = [float(t) for t in text.split(":", 1)[1].split(",")]
        return InitSpec.at_point(coords)
    raise UsageError(f"unknown init {text!r}; use 'gaussian', 'gaussian:VAR', or 'point:X,Y,...'")


def _cmd_sample(args) -> int:
    started = time.perf_counter()
    out_dir = _resolve_out_dir(args.output_dir, "sample")
    model, model_spec, model_hash = resolve_model(args.model)
    variant = _VARIANT_NAMES[args.variant]
    score, score_kind = _score_for(model, args.score, args.sigma2)
    mu = args.mu
    if variant == "half_denoise" and mu is None:
        mu = None
    elif mu is None:
        mu = args.sigma2 / 2.0 if args.sigma2 > 0.0 else None
    if variant != "half_denoise" and mu is None:
        raise UsageError(f"variant {args.variant} requires --mu (or a positive --sigma2)")
    config = SamplerConfig(
        variant=variant,
        n_steps=args.steps,
        seed=args.seed,
        mu=mu,
        sigma2=args.sigma2,
        init=_parse_init(args.init),
    )
    chain = run_chain(config, score)
    export_chain_csv(chain, out_dir / "chain.csv")
    spec = {
        "kind": "sample",
        "variant": args.variant,
        "model": model_spec,
        "sigma2": args.sigma2,
        "mu": mu,
        "steps": args.steps,
        "seed": args.seed,
        "score": score_kind,
        "init": args.init or "gaussian",
    }
    _write_manifest(out_dir, "sample", spec, args.seed, model_hash, ["chain.csv"], started)
    _summary(out_dir, "sample", states=len(chain), variant=args.variant, score=score_kind)
    return EXIT_OK


def _read_points_csv(path, dim: int) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(t) for t in parts])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise UsageError(f"{path}:{lineno}: malformed point row {line!r}")
    pts = np.asarray(rows, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise UsageError(f"{path}: expected points of dimension {dim}")
    return pts


def _cmd_denoise(args) -> int:
    started = time.perf_counter()
    out_dir = _resolve_out_dir(args.output_dir, "denoise")
    model, model_spec, model_hash = resolve_model(args.model)
    if (args.points is None) == (args.point is None):
        raise UsageError("give exactly one of --points CSV or --point X,Y,...")
    if args.point is not None:
        pts = np.asarray([[float(t) for t in args.point.split(",")]])
        if pts.shape[1] != model.dim:
            raise UsageError(f"--point must have {model.dim} coordinates")
    else:
        pts = _read_points_csv(args.points, model.dim)
    score = noisy_score_field(model, args.sigma2)
    denoised = tweedie_denoise(score, args.sigma2, pts)
    with open(out_dir / "denoised.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(
            ",".join(f"noisy_x{d}" for d in range(model.dim))
            + ","
            + ",".join(f"denoised_x{d}" for d in range(model.dim))
            + "\n"
        )
        for noisy_pt, clean_pt in zip(pts, denoised):
            fh.write(",".join(repr(float(c)) for c in noisy_pt))
            fh.write("," + ",".join(repr(float(c)) for c in clean_pt) + "\n")
    spec = {
        "kind": "denoise",
        "model": model_spec,
        "sigma2": args.sigma2,
        "point": args.point,
        "points": args.points,
    }
    _write_manifest(out_dir, "denoise", spec, None, model_hash, ["denoised.csv"], started)
    _summary(out_dir, "denoise", n_points=int(pts.shape[0]))
    return EXIT_OK


def _cmd_dsm_fit(args) -> int:
    started = time.perf_counter()
    out_dir = _resolve_out_dir(args.output_dir, "dsm-fit")
    model, model_spec, model_hash = resolve_model(args.model)
    rng = RandomSource(derive_seed(args.seed, "dsm-fit"))
    data = exact_sample(model, args.samples, rng.spawn("data"))
    fit = dsm_fit_affine(data, args.sigma2, rng.spawn("noise"))
    payload = {
        "matrix": fit.matrix.tolist(),
        "offset": fit.offset.tolist(),
        "sigma2": args.sigma2,
        "n_samples": args.samples,
        "model": model_spec,
        "seed": args.seed,
    }
    with open(out_dir / "affine_score.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    spec = {
        "kind": "dsm-fit",
        "model": model_spec,
        "sigma2": args.sigma2,
        "samples": args.samples,
        "seed": args.seed,
    }
    _write_manifest(out_dir, "dsm-fit", spec, args.seed, model_hash, ["affine_score.json"], started)
    _summary(out_dir, "dsm-fit", matrix_diag=[float(fit.matrix[i, i]) for i in range(fit.dim)])
    return EXIT_OK


def _experiment_overrides(args, scenario: str) -> dict:
    overrides: dict = {
        "seed": args.seed,
        "n_steps": args.steps,
        "mu": getattr(args, "mu", None),
        "n_replicates": args.replicates,
    }
    if scenario == "gmm_bias":
        overrides["kernels"] = args.kernels
    elif scenario == "gaussian_bias":
        overrides["dim"] = args.dim
    else:
        overrides["kernels"] = args.kernels
        overrides["n_trials"] = args.trials
    if args.sigma2 is not None:
        overrides["sigma2"] = _parse_sigma2_list(args.sigma2)
    if args.methods is not None:
        overrides["methods"] = tuple(args.methods.replace(",", " ").split())
    if getattr(args, "paper_scale", False):
        if args.steps is not None:
            raise UsageError("give either --steps or --paper-scale, not both")
        overrides["n_steps"] = experiments.PAPER_STEPS
    return {k: v for k, v in overrides.items() if v is not None}


def _cmd_experiment(args, scenario: str, command: str) -> int:
    started = time.perf_counter()
    spec, cfg_out_dir = load_config(args.config, scenario, _experiment_overrides(args, scenario))
    out_dir = _resolve_out_dir(args.output_dir or cfg_out_dir, command)
    print(f"running {scenario} (steps={spec.n_steps}, methods={','.join(spec.methods)})", file=sys.stderr)
    report = experiments.run_experiment(spec, threads=args.threads)
    outputs = ["report.json"]
    experiments.write_report_json(report, out_dir / "report.json")
    if scenario == "mixing":
        curves = experiments.mixing_curves_from_report(report)
        analysis.export_mixing_csv(curves, out_dir / "curves.csv")
        outputs.append("curves.csv")
        summary_fields = {
            label: float(curves[label].per_step_error[-1]) for label in sorted(curves)
        }
    else:
        experiments.write_distances_csv(report, out_dir / "distances.csv")
        outputs.append("distances.csv")
        if scenario == "gmm_bias":
            _write_grids_csv(report, out_dir / "density_grids.csv")
            outputs.append("density_grids.csv")
        summary_fields = {
            row["method"]: float(row["distance"]) for row in report.distance_rows()
        }
    _write_manifest(out_dir, command, spec.to_dict(), spec.seed, None, outputs, started)
    _summary(out_dir, command, results=summary_fields)
    return EXIT_OK


def _write_grids_csv(report, path) -> None:
    """First-replicate density grids of every method, in long form."""
    grid_info = report.extras["grid"]
    origin = grid_info["origin"]
    spacing = grid_info["spacing"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method,x,y,density\n")
        for method in sorted(report.extras["first_replicate_grids"]):
            values = report.extras["first_replicate_grids"][method]
            for i, row in enumerate(values):
                x = origin[0] + spacing * i
                for j, density in enumerate(row):
                    y = origin[1] + spacing * j
                    fh.write(f"{method},{x!r},{y!r},{density!r}\n")


def _cmd_replay(args) -> int:
    with open(args.replay, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest.get("command")
    spec = manifest.get("spec", {})
    out_dir = args.output_dir
    argv = [command]
    if command in ("gmm-bias", "gaussian-bias", "mixing"):
        scenario = command.replace("-", "_")
        exp_spec = experiments.ExperimentSpec.from_dict(spec)
        return _dispatch_experiment_spec(exp_spec, scenario, command, out_dir, args.threads)
    if command == "theory":
        argv += ["--sigma2", str(spec["sigma2"]), "--dim", str(spec["dim"])]
        if spec.get("mu") is not None:
            argv += ["--mu", str(spec["mu"])]
    elif command == "sample":
        argv += [
            "--variant", spec["variant"], "--model", spec["model"],
            "--sigma2", str(spec["sigma2"]), "--steps", str(spec["steps"]),
            "--seed", str(spec["seed"]), "--score", spec["score"], "--init", spec["init"],
        ]
        if spec.get("mu") is not None and spec["variant"] != "half-denoise":
            argv += ["--mu", str(spec["mu"])]
    elif command == "denoise":
        argv += ["--model", spec["model"], "--sigma2", str(spec["sigma2"])]
        if spec.get("point"):
            argv += ["--point", spec["point"]]
        else:
            argv += ["--points", spec["points"]]
    elif command == "dsm-fit":
        argv += [
            "--model", spec["model"], "--sigma2", str(spec["sigma2"]),
            "--samples", str(spec["samples"]), "--seed", str(spec["seed"]),
        ]
    else:
        raise UsageError(f"manifest has unknown command {command!r}")
    if out_dir:
        argv += ["--output-dir", out_dir]
    return execute(argv)


def _dispatch_experiment_spec(spec, scenario, command, out_dir, threads) -> int:
    ns = argparse.Namespace(
        config=None,
        output_dir=out_dir,
        seed=spec.seed,
        steps=spec.n_steps,
        mu=spec.mu,
        replicates=spec.n_replicates,
        kernels=spec.kernels,
        dim=spec.dim,
        trials=spec.n_trials,
        sigma2=",".join(str(s) for s in spec.sigma2),
        methods=",".join(spec.methods),
        paper_scale=False,
        threads=threads,
    )
    return _cmd_experiment(ns, scenario, command)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    # Flags that also exist at the top level use SUPPRESS defaults in the
    # subparsers: subcommand parsing copies its whole namespace over the
    # parent one, and a plain default would clobber a value given before
    # the subcommand name.
    parser = argparse.ArgumentParser(
        prog="nclangevin",
        description="Noise-corrected Langevin sampling, half-denoising, and the paper-style studies",
    )
    parser.add_argument("--replay", metavar="MANIFEST", help="re-run a recorded manifest")
    parser.add_argument("--output-dir", default=None, help=f"directory for artifacts (default: ${OUTPUT_DIR_ENV})")
    parser.add_argument("--threads", type=int, default=1, help="max worker processes")
    sub = parser.add_subparsers(dest="command")

    def add_common(p, seed_default=0):
        p.add_argument("--output-dir", default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("theory", help="closed-form stationary covariances and bias ratios")
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--mu", type=float, default=None, help="step size (default sigma2/2)")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--output-dir", default=argparse.SUPPRESS)

    p = sub.add_parser("sample", help="run one chain and export it as CSV")
    p.add_argument("--variant", choices=sorted(_VARIANT_NAMES), required=True)
    p.add_argument("--model", required=True, help="model file or builtin (gauss<d>, gmm<K>)")
    p.add_argument("--sigma2", type=float, default=0.0)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--score", choices=["auto", "noisy", "true"], default="auto")
    p.add_argument("--init", default=None, help="'gaussian', 'gaussian:VAR', or 'point:X,Y,...'")
    add_common(p)

    p = sub.add_parser("denoise", help="apply the posterior-mean denoiser to points")
    p.add_argument("--model", required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--points", help="CSV of points, one row each")
    p.add_argument("--point", help="a single point as comma-separated coordinates")
    p.add_argument("--output-dir", default=argparse.SUPPRESS)

    p = sub.add_parser("dsm-fit", help="closed-form affine denoising-score fit")
    p.add_argument("--model", required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--samples", type=int, default=100_000)
    add_common(p)

    for name, scenario in (
        ("gmm-bias", "gmm_bias"),
        ("gaussian-bias", "gaussian_bias"),
        ("mixing", "mixing"),
    ):
        p = sub.add_parser(name, help=f"run the {scenario} study")
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--sigma2", default=None, help="noise level(s), comma separated")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--methods", default=None, help="comma-separated method subset")
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--mu", type=float, default=None)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        if scenario == "gaussian_bias":
            p.add_argument("--dim", type=int, default=None)
        else:
            p.add_argument("--kernels", type=int, default=None)
        if scenario == "mixing":
            p.add_argument("--trials", type=int, default=None)
        else:
            p.add_argument("--paper-scale", action="store_true", help=f"use {experiments.PAPER_STEPS} steps")
        p.add_argument("--output-dir", default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=None)
    return parser


def execute(argv=None) -> int:
    """Parse ``argv`` and run the requested subcommand; returns the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        if args.replay:
            return _cmd_replay(args)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "theory":
            return _cmd_theory(args)
        if args.command == "sample":
            return _cmd_sample(args)
        if args.command == "denoise":
            return _cmd_denoise(args)
        if args.command == "dsm-fit":
            return _cmd_dsm_fit(args)
        scenario = args.command.replace("-", "_")
        return _cmd_experiment(args, scenario, args.command)
    except NumericDivergenceError as exc:
        print(f"nclangevin: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except UsageError as exc:
        print(f"nclangevin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"nclangevin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
