"""Batch experiment harness.

Each run resolves one configuration from defaults, an optional JSON or
TOML file and command line flags, executes a single experiment kind and
writes its artifacts into the output directory: ``manifest.json`` with
the resolved configuration and library version, ``run_info.json`` with
the wall-clock timestamp, ``summary.json`` with machine readable
results, and the experiment's CSV tables.  The exit status encodes the
outcome: 0 when every enabled check passed, 1 when a check failed, 2
for an invalid configuration, 3 for a numerical failure during the run.

Reruns from the same configuration and seed produce byte identical CSV
bodies; the timestamp is kept out of the manifest for that reason, and
a manifest can be fed back through ``--config`` to reproduce its run.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from liefbm import __version__
from liefbm.csvio import (
    comparison_rows,
    eigenvalue_rows,
    fit_rows,
    flow_rows,
    ibp_rows,
    sample_rows,
    signature_rows,
    write_csv,
    write_json,
)
from liefbm.fbm import (
    FbmError,
    KernelEval,
    TimeGrid,
    check_hurst,
    sample_fbm,
    sample_volterra,
)
from liefbm.integrator import IntegratorError, integrate
from liefbm.liegroup import (
    AlgebraBasis,
    LieGroupError,
    basis_from_json,
    exp_matrix,
    make_basis,
)
from liefbm.malliavin import (
    MalliavinError,
    constant_field,
    ibp_report_from_trace,
    ibp_trace,
    malliavin_matrix,
)
from liefbm.signature import SignatureError, nilpotent_flow_path, signature_table
from liefbm.stats import (
    MIN_COMPARISON_SAMPLES,
    GroupMorphism,
    MonteCarloConfig,
    StatsError,
    derivative_at_identity,
    entry_functional,
    global_scaling_test,
    isometry_invariance_test,
    local_selfsimilarity_test,
    log_coordinate_functional,
    stationary_increments_test,
)

__all__ = ["ConfigError", "ExperimentConfig", "load_config_file", "resolve_config", "run", "main"]

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NUMERICAL = 3

OUT_ENV_VAR = "LIEFBM_OUT"

KINDS = (
    "sample",
    "integrate",
    "signature",
    "scaling-local",
    "scaling-global",
    "stationarity",
    "isometry",
    "malliavin",
    "ibp",
)

# The short-time limit law only emerges once curvature corrections are
# negligible, so the default fit window sits well below the horizon.
LOCAL_SCALE_DEFAULT = (1.0 / 128, 1.0 / 64, 1.0 / 32, 1.0 / 16)
GLOBAL_SCALE_DEFAULT = (0.25, 1.0, 4.0)

MEMBERSHIP_GATE = 1e-8
ORACLE_GATE = 1e-9
SLOPE_GATE = 0.1
AMPLITUDE_GATE = 0.1
IDENTITY_GATE = 1e-3

_DEFAULT_BASIS = {"signature": "heisenberg1", "scaling-global": "heisenberg1"}
_MIN_HURST = {"malliavin": 0.5, "ibp": 0.5}
_FLOW_MIN_HURST = 0.25


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings for one run; built through ``resolve_config``."""

    kind: str
    basis: str | None = None
    hurst: float = 0.75
    level: int = 6
    horizon: float = 1.0
    paths: int | None = None
    scales: tuple | None = None
    seed: int = 0
    dim: int = 2
    out: str | None = None


def _allowed_keys(kind: str) -> set:
    keys = {"kind", "hurst", "level", "horizon", "paths", "seed", "out"}
    if kind == "sample":
        keys.add("dim")
    else:
        keys.add("basis")
    if kind in ("scaling-local", "scaling-global"):
        keys.add("scales")
    return keys


def _coerce(key: str, value):
    if key in ("kind", "basis", "out"):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if key in ("level", "paths", "seed", "dim"):
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if key in ("hurst", "horizon"):
        if isinstance(value, bool) or not isinstance(value, (int, float, np.floating)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key == "scales":
        if isinstance(value, str):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            try:
                value = [float(p) for p in parts]
            except ValueError:
                raise ConfigError(f"scales must be a comma separated list of numbers, got {value!r}")
        if not isinstance(value, (list, tuple)) or len(value) == 0:
            raise ConfigError("scales must be a non-empty list of numbers")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"scales must be numbers, got {v!r}")
            out.append(float(v))
        return tuple(out)
    raise ConfigError(f"unknown configuration key {key!r}")


def load_config_file(path) -> dict:
    """Parse a JSON or TOML configuration document into a plain dict.

    A manifest written by an earlier run can be fed back in; its
    ``config`` block is unwrapped so the run reproduces exactly.
    """
    p = Path(path)
    try:
        if p.suffix.lower() == ".toml":
            doc = tomllib.loads(p.read_text())
        else:
            doc = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc}") from exc
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {str(path)!r}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a table of settings")
    if "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    return doc


def resolve_config(kind: str, file_values=None, flag_values=None) -> ExperimentConfig:
    """Merge defaults, file values and flags; flags win over the file.

    Unknown keys and keys that do not apply to the requested experiment
    kind are rejected rather than ignored.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    allowed = _allowed_keys(kind)
    merged = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in allowed:
                raise ConfigError(f"unknown configuration key {key!r} for kind {kind!r}")
            merged[key] = _coerce(key, value)
    declared = merged.pop("kind", kind)
    if declared != kind:
        raise ConfigError(
            f"config file is for kind {declared!r} but the subcommand is {kind!r}"
        )
    return _validated(ExperimentConfig(kind=kind, **merged))


def _validated(cfg: ExperimentConfig) -> ExperimentConfig:
    minimum = 0.0 if cfg.kind == "sample" else _MIN_HURST.get(cfg.kind, _FLOW_MIN_HURST)
    try:
        check_hurst(cfg.hurst, minimum=minimum)
    except FbmError as exc:
        raise ConfigError(f"kind {cfg.kind!r}: {exc}") from exc
    if not 0 <= cfg.level <= 12:
        raise ConfigError(f"mesh level must lie between 0 and 12, got {cfg.level}")
    if cfg.kind == "stationarity" and cfg.level < 1:
        raise ConfigError("stationarity needs mesh level at least 1 to place the split time")
    if not cfg.horizon > 0:
        raise ConfigError(f"horizon must be positive, got {cfg.horizon}")
    paths = cfg.paths if cfg.paths is not None else (4 if cfg.kind == "sample" else 4000)
    if paths < 1:
        raise ConfigError(f"paths must be at least 1, got {paths}")
    if cfg.kind in ("stationarity", "isometry", "scaling-global") and paths < MIN_COMPARISON_SAMPLES:
        raise ConfigError(
            f"kind {cfg.kind!r} compares laws and needs at least "
            f"{MIN_COMPARISON_SAMPLES} paths per side, got {paths}"
        )
    if cfg.kind == "ibp" and paths < 2:
        raise ConfigError(f"the paired test needs at least 2 paths, got {paths}")
    if cfg.kind == "sample" and cfg.dim < 1:
        raise ConfigError(f"dim must be at least 1, got {cfg.dim}")
    scales = cfg.scales
    if cfg.kind in ("scaling-local", "scaling-global"):
        if scales is None:
            scales = LOCAL_SCALE_DEFAULT if cfg.kind == "scaling-local" else GLOBAL_SCALE_DEFAULT
        if len(scales) < 3 or len(set(scales)) != len(scales) or min(scales) <= 0:
            raise ConfigError("scale fits need at least three distinct positive scales")
    basis = cfg.basis
    if cfg.kind != "sample" and basis is None:
        basis = _DEFAULT_BASIS.get(cfg.kind, "so3")
    out = cfg.out or os.environ.get(OUT_ENV_VAR) or f"liefbm-{cfg.kind}"
    return dataclasses.replace(cfg, basis=basis, paths=paths, scales=scales, out=out)


def load_basis(source: str) -> AlgebraBasis:
    """A named family, or a custom basis given as a JSON file or string."""
    try:
        if source.lstrip().startswith("{") or source.endswith(".json"):
            return basis_from_json(source)
        return make_basis(source)
    except (LieGroupError, OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load basis {source!r}: {exc}") from exc


def _basis_for(cfg: ExperimentConfig) -> AlgebraBasis:
    basis = load_basis(cfg.basis)
    if cfg.kind == "signature" and basis.step is None:
        raise ConfigError(
            f"the closed form needs a nilpotent family with a declared step, got {basis.family!r}"
        )
    if cfg.kind == "scaling-global" and basis.layers is None:
        raise ConfigError(
            f"dilation needs a graded family, but {basis.family!r} carries no grading"
        )
    if cfg.kind in ("isometry", "malliavin", "ibp"):
        if not basis.orthonormal:
            raise ConfigError(
                f"kind {cfg.kind!r} needs an orthonormal basis, got family {basis.family!r}"
            )
        if basis.d != basis.dim:
            raise ConfigError(
                f"kind {cfg.kind!r} needs driving directions spanning the algebra"
            )
    return basis


def _public_config(cfg: ExperimentConfig) -> dict:
    keys = sorted(_allowed_keys(cfg.kind))
    doc = {}
    for key in keys:
        value = getattr(cfg, key)
        if isinstance(value, tuple):
            value = list(value)
        doc[key] = value
    return doc


def _mc(cfg: ExperimentConfig) -> MonteCarloConfig:
    return MonteCarloConfig(n_paths=cfg.paths, seed=cfg.seed, mesh_level=cfg.level)


def _default_functional(basis: AlgebraBasis):
    if basis.family == "abelian":
        return log_coordinate_functional(basis, 0)
    return entry_functional(0, 1)


# ---------------------------------------------------------------------------
# per-kind runners


def _run_sample(cfg, basis, out_dir):
    grid = TimeGrid.dyadic(cfg.level, cfg.horizon)
    sample = sample_fbm(cfg.hurst, grid, cfg.dim, cfg.seed, paths=cfg.paths)
    if not np.isfinite(sample.values).all():
        raise FbmError("sampler produced non-finite values")
    header = ["t"] + [f"b{k + 1}" for k in range(cfg.dim)]
    write_csv(out_dir / "paths.csv", header, sample_rows(sample))
    return {
        "kind": cfg.kind,
        "paths": cfg.paths,
        "grid_points": int(grid.points.size),
        "rows": int(cfg.paths * grid.points.size),
        "passed": True,
    }


def _run_integrate(cfg, basis, out_dir):
    grid = TimeGrid.dyadic(cfg.level, cfg.horizon)
    defect = 0.0
    first = None
    done = 0
    while done < cfg.paths:
        count = min(1024, cfg.paths - done)
        sample = sample_fbm(cfg.hurst, grid, basis.d, cfg.seed, paths=count, first_path=done)
        flow = integrate(sample, basis)
        defect = max(defect, float(flow.max_membership_defect()))
        if first is None:
            first = dataclasses.replace(flow, elements=flow.elements[0], source=None)
        done += count
    write_csv(out_dir / "flow.csv", _matrix_header(basis), flow_rows(first))
    return {
        "kind": cfg.kind,
        "basis": basis.family,
        "paths": cfg.paths,
        "max_membership_defect": defect,
        "gate": MEMBERSHIP_GATE,
        "passed": bool(defect < MEMBERSHIP_GATE),
    }


def _matrix_header(basis: AlgebraBasis) -> list:
    n = basis.generators.shape[-1]
    return ["t"] + [f"x{i + 1}{j + 1}" for i in range(n) for j in range(n)]


def _run_signature(cfg, basis, out_dir):
    grid = TimeGrid.dyadic(cfg.level, cfg.horizon)
    gap = 0.0
    done = 0
    while done < cfg.paths:
        count = min(512, cfg.paths - done)
        sample = sample_fbm(cfg.hurst, grid, basis.d, cfg.seed, paths=count, first_path=done)
        flow = integrate(sample, basis)
        closed = nilpotent_flow_path(sample, basis)
        gap = max(gap, float(np.abs(flow.elements - closed.elements).max()))
        done += count
    level = min(max(basis.step, 2), 4)
    table = signature_table(sample_fbm(cfg.hurst, grid, basis.d, cfg.seed), cfg.horizon, level)
    write_csv(out_dir / "signatures.csv", ("word", "value"), signature_rows(table))
    return {
        "kind": cfg.kind,
        "basis": basis.family,
        "paths": cfg.paths,
        "signature_level": level,
        "max_oracle_gap": gap,
        "gate": ORACLE_GATE,
        "passed": bool(gap < ORACLE_GATE),
    }


def _run_scaling_local(cfg, basis, out_dir):
    f = _default_functional(basis)
    fit = local_selfsimilarity_test(basis, f, cfg.hurst, _mc(cfg), scales=cfg.scales, t=cfg.horizon)
    oracle = float(np.linalg.norm(derivative_at_identity(f, basis)))
    slope_err = abs(fit.slope - 2.0 * cfg.hurst)
    amp_err = abs(fit.amplitude - oracle)
    write_csv(out_dir / "scaling.csv", ("scale", "normalized_variance"), fit_rows(fit))
    return {
        "kind": cfg.kind,
        "functional": f.name,
        "slope": float(fit.slope),
        "slope_target": 2.0 * cfg.hurst,
        "amplitude": float(fit.amplitude),
        "amplitude_oracle": oracle,
        "passed": bool(slope_err < SLOPE_GATE and amp_err <= AMPLITUDE_GATE * oracle),
    }


def _run_scaling_global(cfg, basis, out_dir):
    result = global_scaling_test(basis, cfg.hurst, _mc(cfg), scales=cfg.scales, t=cfg.horizon)

    def rows():
        for c in sorted(result.comparisons):
            for row in comparison_rows(result.comparisons[c]):
                yield (c, *row)

    write_csv(out_dir / "comparisons.csv", ("scale", "label", "dilated", "sampled", "z"), rows())
    worst = max(comp.worst_z for comp in result.comparisons.values())
    summary = {
        "kind": cfg.kind,
        "basis": basis.family,
        "scales": list(cfg.scales),
        "worst_z": float(worst),
        "passed": bool(result.passed),
    }
    for layer, fit in sorted(result.layer_fits.items()):
        summary[f"layer_{layer}_slope"] = float(fit.slope)
        summary[f"layer_{layer}_slope_target"] = 2.0 * cfg.hurst * layer
    return summary


def _run_stationarity(cfg, basis, out_dir):
    s = t = cfg.horizon / 2.0
    result = stationary_increments_test(basis, cfg.hurst, s, t, _mc(cfg))
    write_csv(
        out_dir / "comparisons.csv",
        ("label", "shifted", "fresh", "z"),
        comparison_rows(result),
    )
    return {
        "kind": cfg.kind,
        "basis": basis.family,
        "shift": s,
        "span": t,
        "worst_z": float(result.worst_z),
        "worst_label": result.worst_label,
        "passed": bool(result.passed),
    }


def _run_isometry(cfg, basis, out_dir):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC04)))
    coords = 0.8 * rng.standard_normal(basis.dim)
    psi = GroupMorphism("conjugation", exp_matrix(basis.element(coords), basis))
    result = isometry_invariance_test(basis, psi, cfg.hurst, cfg.horizon, _mc(cfg))
    write_csv(
        out_dir / "comparisons.csv",
        ("label", "transformed", "plain", "z"),
        comparison_rows(result),
    )
    return {
        "kind": cfg.kind,
        "basis": basis.family,
        "morphism": "conjugation",
        "worst_z": float(result.worst_z),
        "worst_label": result.worst_label,
        "passed": bool(result.passed),
    }


def _run_malliavin(cfg, basis, out_dir):
    ker = KernelEval(cfg.hurst)
    grid = TimeGrid.dyadic(cfg.level, cfg.horizon)
    target = cfg.horizon ** (2.0 * cfg.hurst)
    eigs = []
    identity_gap = 0.0
    done = 0
    while done < cfg.paths:
        count = min(256, cfg.paths - done)
        sample = sample_volterra(cfg.hurst, grid, basis.d, cfg.seed, paths=count, first_path=done)
        flow = integrate(sample, basis)
        mm = malliavin_matrix(flow, ker, cfg.horizon)
        eigs.append(np.atleast_1d(mm.min_eigenvalue))
        if basis.family == "abelian":
            gap = np.abs(mm.gamma - target * np.eye(basis.dim)).max()
            identity_gap = max(identity_gap, float(gap) / target)
        done += count
    eigs = np.concatenate(eigs)
    write_csv(out_dir / "eigenvalues.csv", ("path", "min_eigenvalue"), eigenvalue_rows(eigs))
    passed = bool(eigs.min() > 0.0)
    summary = {
        "kind": cfg.kind,
        "basis": basis.family,
        "paths": cfg.paths,
        "time": cfg.horizon,
        "min_eigenvalue": float(eigs.min()),
        "passed": passed,
    }
    if basis.family == "abelian":
        summary["identity_gap"] = identity_gap
        summary["passed"] = passed and identity_gap < IDENTITY_GATE
    return summary


def _run_ibp(cfg, basis, out_dir):
    f = _default_functional(basis)
    direction = np.zeros(basis.d)
    direction[0] = 1.0
    field = constant_field(direction, cfg.horizon)
    lhs, rhs = ibp_trace(basis, f, field, cfg.hurst, cfg.horizon, _mc(cfg))
    report = ibp_report_from_trace(f.name, lhs, rhs)
    write_csv(out_dir / "traces.csv", ("lhs", "rhs"), ibp_rows(lhs, rhs))
    return {
        "kind": cfg.kind,
        "basis": basis.family,
        "functional": report.functional,
        "paths": report.n_paths,
        "lhs_mean": report.lhs_mean,
        "rhs_mean": report.rhs_mean,
        "difference": report.difference,
        "std_error": report.std_error,
        "z": report.z,
        "passed": bool(report.passed),
    }


_RUNNERS = {
    "sample": _run_sample,
    "integrate": _run_integrate,
    "signature": _run_signature,
    "scaling-local": _run_scaling_local,
    "scaling-global": _run_scaling_global,
    "stationarity": _run_stationarity,
    "isometry": _run_isometry,
    "malliavin": _run_malliavin,
    "ibp": _run_ibp,
}


def run(config: ExperimentConfig) -> int:
    """Execute one experiment and write its artifacts.

    Returns the process exit status instead of raising so callers can
    hand the value straight to ``sys.exit``.
    """
    try:
        basis = None if config.kind == "sample" else _basis_for(config)
        out_dir = Path(config.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        summary = _RUNNERS[config.kind](config, basis, out_dir)
    except (
        FbmError,
        IntegratorError,
        SignatureError,
        StatsError,
        MalliavinError,
        LieGroupError,
        np.linalg.LinAlgError,
        FloatingPointError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_json(out_dir / "manifest.json", {"config": _public_config(config), "version": __version__})
    write_json(
        out_dir / "run_info.json",
        {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()},
    )
    write_json(out_dir / "summary.json", summary)
    print(f"{config.kind}: {'PASS' if summary['passed'] else 'FAIL'}")
    for key, value in summary.items():
        if key not in ("kind", "passed"):
            print(f"  {key}: {value}")
    print(f"  artifacts: {out_dir}")
    return EXIT_PASS if summary["passed"] else EXIT_CHECK_FAILED


_KIND_HELP = {
    "sample": "draw fractional Brownian driver paths and write them as CSV",
    "integrate": "integrate group flows and check membership defects",
    "signature": "compare the integrator against the nilpotent closed form",
    "scaling-local": "fit the short-time fluctuation law of a scalar functional",
    "scaling-global": "check dilation covariance of graded flows",
    "stationarity": "two-sample test of increment stationarity",
    "isometry": "two-sample test of invariance under a group isometry",
    "malliavin": "per-path derivative covariance matrices and their spectra",
    "ibp": "Monte Carlo check of the integration by parts identity",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liefbm",
        description=(
            "Fractional Brownian flows on matrix groups: sampling, integration "
            "and statistical verification, one experiment per run."
        ),
    )
    sub = parser.add_subparsers(dest="kind", required=True, metavar="kind")
    for kind in KINDS:
        p = sub.add_parser(kind, help=_KIND_HELP[kind])
        p.add_argument("--config", help="JSON or TOML configuration file")
        p.add_argument("--hurst", type=float, help="Hurst index of the driver")
        p.add_argument("--level", type=int, help="dyadic mesh level")
        p.add_argument("--horizon", type=float, help="time horizon")
        p.add_argument("--paths", type=int, help="Monte Carlo path count")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR})")
        if kind == "sample":
            p.add_argument("--dim", type=int, help="number of driver channels")
        else:
            p.add_argument("--basis", help="family name or JSON basis file")
        if kind in ("scaling-local", "scaling-global"):
            p.add_argument("--scales", help="comma separated positive scale factors")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {
        key: getattr(args, key, None)
        for key in ("basis", "hurst", "level", "horizon", "paths", "seed", "out", "dim", "scales")
    }
    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_config(args.kind, file_values, flags)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
