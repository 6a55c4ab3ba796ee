"""Monte Carlo machinery for distributional claims about group flows.

Equality in law is operationalized as agreement of means and variances
(optionally marginal quantiles) of a fixed functional family, each
within four combined bootstrap standard errors.  On top of that sit the
four flow-level checks: stationarity of increments, invariance under
isometries, small-time self-similarity of scalar functionals, and the
graded scaling law for nilpotent flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from liefbm.fbm import FbmSample, FbmSampler, TimeGrid
from liefbm.integrator import integrate, shifted_flow
from liefbm.liegroup import (
    AlgebraBasis,
    TOL,
    adjoint_coordinates,
    bracket,
    exp_matrix,
    log_unipotent,
)

__all__ = [
    "StatsError",
    "MonteCarloConfig",
    "MatrixFunctional",
    "MomentReport",
    "LawComparison",
    "ScalingFit",
    "GroupMorphism",
    "moment_report",
    "compare_laws",
    "stationary_increments_test",
    "isometry_invariance_test",
    "local_selfsimilarity_test",
    "global_scaling_test",
    "entry_functional",
    "trace_functional",
    "log_coordinate_functional",
    "derivative_at_identity",
]

Z_GATE = 4.0
MIN_COMPARISON_SAMPLES = 1000
QUANTILE_LEVELS = (0.1, 0.5, 0.9)
DERIVATIVE_STEP = 1e-5
LOCAL_SCALES = (1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0)
GLOBAL_SCALES = (0.25, 1.0, 4.0)


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class MonteCarloConfig:
    """Batch size, seeding and mesh for one Monte Carlo experiment."""

    n_paths: int = 4000
    seed: int = 0
    mesh_level: int = 6
    bootstrap: int = 200
    chunk: int = 4096

    def __post_init__(self):
        if self.n_paths < 1:
            raise StatsError("n_paths must be positive")
        if self.bootstrap < 10:
            raise StatsError("bootstrap replicate count must be at least 10")
        if self.chunk < 1:
            raise StatsError("chunk must be positive")


@dataclass(frozen=True)
class MatrixFunctional:
    """Named scalar (or vector) function of a group element."""

    name: str
    fn: Callable

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float)


def entry_functional(i: int, j: int) -> MatrixFunctional:
    return MatrixFunctional(f"entry[{i},{j}]", lambda x: x[..., i, j])


def trace_functional() -> MatrixFunctional:
    return MatrixFunctional("trace", lambda x: np.einsum("...ii->...", x))


def log_coordinate_functional(basis: AlgebraBasis, index: int) -> MatrixFunctional:
    if basis.family == "so3":
        raise StatsError("log coordinates are provided for unipotent families only")

    def fn(x):
        return basis.coordinates(log_unipotent(x))[..., index]

    return MatrixFunctional(f"log-coordinate[{index}]", fn)


def _entries(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[:-2] + (-1,))


def _entry_labels(n: int) -> tuple:
    return tuple(f"entry[{i},{j}]" for i in range(n) for j in range(n))


def derivative_at_identity(
    f: MatrixFunctional, basis: AlgebraBasis, eps: float = DERIVATIVE_STEP
) -> np.ndarray:
    """Directional derivatives of f at the identity along each generator."""
    out = np.empty(basis.d)
    for i in range(basis.d):
        v = basis.generators[i]
        plus = f(exp_matrix(eps * v, basis))
        minus = f(exp_matrix(-eps * v, basis))
        out[i] = (plus - minus) / (2.0 * eps)
    return out


# ---------------------------------------------------------------------------
# moment reports and law comparison


@dataclass(frozen=True, eq=False)
class MomentReport:
    """Empirical moments of one functional with bootstrap uncertainty.

    ``mean``/``variance`` are per statistic entry; ``quantiles`` stacks
    the 10/50/90 percent levels.  Half-widths at 95% are derived from
    the bootstrap standard errors.
    """

    functional: str
    n_samples: int
    mean: np.ndarray
    variance: np.ndarray
    quantiles: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray
    quantile_se: np.ndarray | None = None
    labels: tuple | None = None

    @property
    def mean_halfwidth(self) -> np.ndarray:
        return 1.96 * self.mean_se

    @property
    def variance_halfwidth(self) -> np.ndarray:
        return 1.96 * self.variance_se

    @property
    def n_entries(self) -> int:
        return len(self.mean)


def moment_report(
    name: str,
    samples: np.ndarray,
    seed: int = 0,
    n_boot: int = 200,
    with_quantile_se: bool = False,
    labels: tuple | None = None,
) -> MomentReport:
    data = np.asarray(samples, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise StatsError("samples must be a vector or a (paths, entries) table")
    n, k = data.shape
    if n < 2:
        raise StatsError("at least two samples are required")
    if labels is not None and len(labels) != k:
        raise StatsError("one label per statistic entry is required")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EB007)))
    means = np.empty((n_boot, k))
    variances = np.empty((n_boot, k))
    qs = np.empty((n_boot, len(QUANTILE_LEVELS), k)) if with_quantile_se else None
    for b in range(n_boot):
        pick = data[rng.integers(0, n, size=n)]
        means[b] = pick.mean(axis=0)
        variances[b] = pick.var(axis=0, ddof=1)
        if qs is not None:
            qs[b] = np.quantile(pick, QUANTILE_LEVELS, axis=0)
    return MomentReport(
        functional=name,
        n_samples=n,
        mean=data.mean(axis=0),
        variance=data.var(axis=0, ddof=1),
        quantiles=np.quantile(data, QUANTILE_LEVELS, axis=0),
        mean_se=means.std(axis=0, ddof=1),
        variance_se=variances.std(axis=0, ddof=1),
        quantile_se=None if qs is None else qs.std(axis=0, ddof=1),
        labels=labels,
    )


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    value_a: float
    value_b: float
    z: float


@dataclass(frozen=True, eq=False)
class LawComparison:
    functional: str
    passed: bool
    worst_z: float
    worst_label: str
    n_a: int
    n_b: int
    rows: tuple


def _z_scores(da, db, sa, sb):
    delta = np.abs(da - db)
    spread = np.sqrt(sa**2 + sb**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(delta == 0.0, 0.0, delta / spread)
    return np.where((spread == 0.0) & (delta > 0.0), np.inf, z)


def compare_laws(
    a: MomentReport, b: MomentReport, with_quantiles: bool = False
) -> LawComparison:
    """Four-sigma agreement check of two moment reports.

    The gate is |difference| < 4 combined bootstrap standard errors for
    every compared statistic; the worst offender is reported either way.
    """
    if a.functional != b.functional:
        raise StatsError(
            f"cannot compare {a.functional!r} against {b.functional!r}"
        )
    if a.n_entries != b.n_entries:
        raise StatsError("reports summarize different numbers of statistics")
    if min(a.n_samples, b.n_samples) < MIN_COMPARISON_SAMPLES:
        raise StatsError(
            f"comparisons need at least {MIN_COMPARISON_SAMPLES} samples per side"
        )
    ratio = max(a.n_samples, b.n_samples) / min(a.n_samples, b.n_samples)
    if ratio > 2.0:
        raise StatsError("sample sizes differ by more than a factor of two")
    labels = a.labels or tuple(f"[{i}]" for i in range(a.n_entries))
    rows = []
    for stat, va, vb, sa, sb in (
        ("mean", a.mean, b.mean, a.mean_se, b.mean_se),
        ("variance", a.variance, b.variance, a.variance_se, b.variance_se),
    ):
        z = _z_scores(va, vb, sa, sb)
        for i in range(a.n_entries):
            rows.append(ComparisonRow(f"{stat} {labels[i]}", va[i], vb[i], z[i]))
    if with_quantiles:
        if a.quantile_se is None or b.quantile_se is None:
            raise StatsError("quantile comparison needs bootstrap quantile errors")
        z = _z_scores(a.quantiles, b.quantiles, a.quantile_se, b.quantile_se)
        for lev in range(len(QUANTILE_LEVELS)):
            for i in range(a.n_entries):
                rows.append(
                    ComparisonRow(
                        f"q{int(100 * QUANTILE_LEVELS[lev])} {labels[i]}",
                        a.quantiles[lev, i],
                        b.quantiles[lev, i],
                        z[lev, i],
                    )
                )
    worst = max(rows, key=lambda r: r.z)
    return LawComparison(
        functional=a.functional,
        passed=bool(worst.z < Z_GATE),
        worst_z=float(worst.z),
        worst_label=worst.label,
        n_a=a.n_samples,
        n_b=b.n_samples,
        rows=tuple(rows),
    )


# ---------------------------------------------------------------------------
# flow sampling helpers


def _branch(seed: int, k: int):
    # distinct sub-streams for the two sides of a comparison
    return (int(seed), int(k))


def _endpoint_batches(
    basis: AlgebraBasis,
    h: float,
    grid: TimeGrid,
    seed,
    mc: MonteCarloConfig,
    driver_map: np.ndarray | None = None,
    shift_index: int | None = None,
):
    """Endpoints of flow batches, chunked to bound memory.

    ``driver_map`` mixes driver channels before integration;
    ``shift_index`` replaces the endpoint by the left-translated-out
    increment from that grid index onward.
    """
    sampler = FbmSampler(h, grid)
    chunks = []
    done = 0
    while done < mc.n_paths:
        count = min(mc.chunk, mc.n_paths - done)
        sample = sampler.sample(basis.d, seed, paths=count, first_path=done)
        if driver_map is not None:
            mixed = np.einsum("ij,...jk->...ik", driver_map, sample.values)
            sample = FbmSample(
                hurst=sample.hurst, grid=grid, values=mixed, wiener=None
            )
        if shift_index is None:
            path = integrate(sample, basis)
        else:
            path = shifted_flow(sample, basis, shift_index)
        chunks.append(path.endpoints)
        done += count
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# stationarity


def stationary_increments_test(
    basis: AlgebraBasis,
    h: float,
    s: float,
    t: float,
    mc: MonteCarloConfig,
    broken_shift: bool = False,
) -> LawComparison:
    """Increment law over [s, s+t] against the law at horizon t.

    ``broken_shift`` skips the left translation and compares the raw
    endpoint at s+t instead, which must fail; it exists as a negative
    control for the comparison machinery.
    """
    if s <= 0 or t <= 0:
        raise StatsError("shift and horizon must be positive")
    grid = TimeGrid.dyadic(mc.mesh_level, horizon=s + t)
    s_index = int(round(s / (s + t) * grid.n_cells))
    if abs(grid.points[s_index] - s) > 1e-12 * max(1.0, s):
        raise StatsError(f"shift {s} is not resolved by mesh level {mc.mesh_level}")
    ends_a = _endpoint_batches(
        basis,
        h,
        grid,
        _branch(mc.seed, 0),
        mc,
        shift_index=None if broken_shift else s_index,
    )
    sub = grid.points[s_index:] - grid.points[s_index]
    grid_t = TimeGrid(points=sub)
    ends_b = _endpoint_batches(basis, h, grid_t, _branch(mc.seed, 1), mc)
    labels = _entry_labels(basis.generators.shape[-1])
    name = "flow increment entries"
    rep_a = moment_report(
        name, _entries(ends_a), seed=mc.seed, n_boot=mc.bootstrap, labels=labels
    )
    rep_b = moment_report(
        name, _entries(ends_b), seed=mc.seed + 1, n_boot=mc.bootstrap, labels=labels
    )
    return compare_laws(rep_a, rep_b)


# ---------------------------------------------------------------------------
# isometry invariance


@dataclass(frozen=True)
class GroupMorphism:
    """Group self-map given by conjugation or by mixing the generators.

    ``matrix`` is the conjugating element for kind ``conjugation`` and
    the coefficient matrix O (new generator j = sum_i O[i, j] V_i) for
    kind ``algebra_rotation``.
    """

    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.kind not in ("conjugation", "algebra_rotation"):
            raise StatsError(f"unknown morphism kind {self.kind!r}")
        object.__setattr__(
            self, "matrix", np.asarray(self.matrix, dtype=float)
        )

    def differential(self, basis: AlgebraBasis) -> np.ndarray:
        if self.kind == "conjugation":
            return adjoint_coordinates(basis, self.matrix)
        o = self.matrix
        if o.shape != (basis.d, basis.d):
            raise StatsError(
                f"generator map must be {basis.d}x{basis.d}, got {o.shape}"
            )
        return o


def _check_isometry(basis: AlgebraBasis, psi: GroupMorphism) -> np.ndarray:
    if not basis.orthonormal:
        raise StatsError(
            "isometry checks need a basis with orthonormal coordinates"
        )
    dmat = psi.differential(basis)
    defect = np.max(np.abs(dmat.T @ dmat - np.eye(basis.d)))
    if defect > TOL.adjoint_orthogonality:
        raise StatsError(
            "morphism differential is not orthogonal in the generator "
            f"coordinates (defect {defect:.3e}); not an isometry"
        )
    if psi.kind == "algebra_rotation":
        # mixing generators must still respect the bracket table
        new = np.einsum("ij,ikl->jkl", dmat, basis.generators)
        for i in range(basis.d):
            for j in range(i + 1, basis.d):
                want = bracket(new[i], new[j])
                coeff = basis.coordinates(bracket(basis.generators[i], basis.generators[j]))
                got = np.einsum("k,k...->...", coeff[: basis.d], new)
                if np.max(np.abs(want - got)) > TOL.group_morphism:
                    raise StatsError(
                        "generator mixing does not preserve the bracket; "
                        "the induced map is not a group morphism"
                    )
    return dmat


def isometry_invariance_test(
    basis: AlgebraBasis,
    psi: GroupMorphism,
    h: float,
    t: float,
    mc: MonteCarloConfig,
) -> LawComparison:
    """Law of the transformed flow endpoint against the plain one."""
    dmat = _check_isometry(basis, psi)
    grid = TimeGrid.dyadic(mc.mesh_level, horizon=t)
    if psi.kind == "conjugation":
        ends_a = _endpoint_batches(basis, h, grid, _branch(mc.seed, 0), mc)
        g = psi.matrix
        ends_a = np.einsum("ij,...jk,kl->...il", g, ends_a, np.linalg.inv(g))
    else:
        ends_a = _endpoint_batches(
            basis, h, grid, _branch(mc.seed, 0), mc, driver_map=dmat.T
        )
    ends_b = _endpoint_batches(basis, h, grid, _branch(mc.seed, 1), mc)
    labels = _entry_labels(basis.generators.shape[-1])
    name = "transformed flow entries"
    rep_a = moment_report(
        name, _entries(ends_a), seed=mc.seed, n_boot=mc.bootstrap, labels=labels
    )
    rep_b = moment_report(
        name, _entries(ends_b), seed=mc.seed + 1, n_boot=mc.bootstrap, labels=labels
    )
    return compare_laws(rep_a, rep_b)


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True, eq=False)
class ScalingFit:
    """Log-log regression of a per-scale statistic against the scale."""

    scales: tuple
    statistics: np.ndarray
    slope: float
    intercept: float
    residual_norm: float
    amplitude: float | None = None

    def __post_init__(self):
        sc = np.asarray(self.scales, dtype=float)
        if len(sc) < 3:
            raise StatsError("a scaling fit needs at least three scales")
        if np.any(sc <= 0) or len(np.unique(sc)) != len(sc):
            raise StatsError("scales must be positive and distinct")


def _loglog_fit(scales, values):
    x = np.log(np.asarray(scales, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    coeffs, res = np.polyfit(x, y, 1, full=True)[:2]
    slope, intercept = float(coeffs[0]), float(coeffs[1])
    residual = float(np.sqrt(res[0])) if len(res) else 0.0
    return slope, intercept, residual


def local_selfsimilarity_test(
    basis: AlgebraBasis,
    f: MatrixFunctional,
    h: float,
    mc: MonteCarloConfig,
    scales=LOCAL_SCALES,
    t: float = 1.0,
) -> ScalingFit:
    """Small-time variance growth of a scalar functional of the flow.

    Each scale gets its own grid of ``2**mesh_level`` cells over [0, ct]
    so the driver law is exactly self-similar across scales.  The slope
    of log Var(f(X_ct) - f(1)) against log c recovers twice the Hurst
    parameter; the amplitude estimate divides out the expected power at
    the smallest scale and should match the generator-derivative norm.
    """
    deriv = derivative_at_identity(f, basis)
    amp_theory = float(np.sqrt(np.sum(deriv**2)))
    if amp_theory < 1e-8:
        raise StatsError(
            f"functional {f.name!r} has vanishing generator derivatives at "
            "the identity; its small-time fluctuations are higher order "
            "and outside this first-order check"
        )
    scales = tuple(float(c) for c in scales)
    f_id = float(f(np.eye(basis.generators.shape[-1])))
    variances = []
    for k, c in enumerate(sorted(scales)):
        grid = TimeGrid.dyadic(mc.mesh_level, horizon=c * t)
        ends = _endpoint_batches(basis, h, grid, _branch(mc.seed, k), mc)
        vals = f(ends) - f_id
        variances.append(float(np.var(vals, ddof=1)))
    variances = np.asarray(variances)
    slope, intercept, residual = _loglog_fit(sorted(scales), variances)
    c_min = min(scales)
    amplitude = float(np.sqrt(variances[0]) / (c_min * t) ** h)
    normalized = variances / np.asarray(sorted(scales)) ** (2 * h)
    return ScalingFit(
        scales=tuple(sorted(scales)),
        statistics=normalized,
        slope=slope,
        intercept=intercept,
        residual_norm=residual,
        amplitude=amplitude,
    )


@dataclass(frozen=True, eq=False)
class GlobalScalingResult:
    comparisons: dict
    layer_fits: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons.values())


def global_scaling_test(
    basis: AlgebraBasis,
    h: float,
    mc: MonteCarloConfig,
    scales=GLOBAL_SCALES,
    t: float = 1.0,
) -> GlobalScalingResult:
    """Dilation covariance of the whole nilpotent flow.

    For each scale c the log-coordinates of the flow at time ct are
    compared in law against the layer-wise c**(h*layer) dilation of the
    reference coordinates at time t.  Per-layer variance fits across
    scales are returned as diagnostics; layer L should show slope
    2*h*L.
    """
    if basis.layers is None:
        raise StatsError(
            f"family {basis.family!r} carries no grading; the dilation "
            "scaling law needs a graded basis"
        )
    scales = tuple(float(c) for c in scales)
    if len(scales) < 3:
        raise StatsError("a scaling fit needs at least three scales")
    grid_ref = TimeGrid.dyadic(mc.mesh_level, horizon=t)
    ends_ref = _endpoint_batches(basis, h, grid_ref, _branch(mc.seed, 1000), mc)
    coords_ref = basis.coordinates(log_unipotent(ends_ref))
    layers = np.asarray(basis.layers)
    labels = tuple(f"log-coordinate[{i}]" for i in range(basis.dim))
    comparisons = {}
    per_scale_var = []
    for k, c in enumerate(scales):
        grid_c = TimeGrid.dyadic(mc.mesh_level, horizon=c * t)
        ends_c = _endpoint_batches(basis, h, grid_c, _branch(mc.seed, k), mc)
        coords_c = basis.coordinates(log_unipotent(ends_c))
        scaled_ref = coords_ref * (c**h) ** layers
        name = "dilated log coordinates"
        rep_a = moment_report(
            name, coords_c, seed=mc.seed + k, n_boot=mc.bootstrap, labels=labels
        )
        rep_b = moment_report(
            name, scaled_ref, seed=mc.seed + k + 7, n_boot=mc.bootstrap, labels=labels
        )
        comparisons[c] = compare_laws(rep_a, rep_b)
        per_scale_var.append(coords_c.var(axis=0, ddof=1))
    per_scale_var = np.asarray(per_scale_var)  # (n_scales, dim)
    layer_fits = {}
    for level in sorted(set(int(v) for v in layers)):
        mask = layers == level
        agg = per_scale_var[:, mask].mean(axis=1)
        slope, intercept, residual = _loglog_fit(scales, agg)
        layer_fits[level] = ScalingFit(
            scales=scales,
            statistics=agg,
            slope=slope,
            intercept=intercept,
            residual_norm=residual,
        )
    return GlobalScalingResult(comparisons=comparisons, layer_fits=layer_fits)
