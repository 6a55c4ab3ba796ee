"""Exact fractional Brownian motion sampling and the Volterra kernel.

The sampler factorises the exact covariance of the grid increments, so
sampled paths carry the exact joint law at the grid times for any Hurst
index in (0, 1).  The kernel half of the module evaluates the Volterra
kernel of the long-memory regime (Hurst index above one half) with a
singularity-removing substitution and synthesises paths from Wiener
increments, keeping those increments around for joint-law work.

Randomness discipline: path ``i`` of any batch draws its own generator
from ``SeedSequence(seed, spawn_key=(i,))`` and consumes one standard
normal block of shape ``(n_cells, d)``, so a path is bit-reproducible
regardless of how the batch is sized or split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import beta as _beta

__all__ = [
    "FbmError",
    "TimeGrid",
    "FbmSample",
    "KernelEval",
    "check_hurst",
    "fbm_covariance",
    "increment_covariance",
    "FbmSampler",
    "sample_fbm",
    "synthesize_from_wiener",
    "sample_volterra",
]


class FbmError(ValueError):
    pass


def check_hurst(h, minimum: float = 0.0) -> float:
    """Validate a Hurst index, optionally enforcing a stricter lower bound."""
    h = float(h)
    if not 0.0 < h < 1.0:
        raise FbmError(f"hurst index must lie in (0, 1), got {h}")
    if h <= minimum:
        raise FbmError(f"operation requires hurst index above {minimum}, got {h}")
    return h


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid of times starting at zero.

    ``mesh_level`` marks grids whose points are ``i * 2**-m * horizon``;
    dyadic refinement keeps those exact in binary floating point.
    """

    points: np.ndarray
    mesh_level: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or len(pts) < 2:
            raise FbmError("grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise FbmError("grid points must be finite")
        if pts[0] != 0.0:
            raise FbmError("grid must start at time zero")
        if np.any(np.diff(pts) <= 0):
            raise FbmError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def dyadic(cls, mesh_level: int, horizon: float = 1.0) -> "TimeGrid":
        if mesh_level < 0:
            raise FbmError("mesh level must be non-negative")
        n = 2**mesh_level
        points = horizon * (np.arange(n + 1) * 2.0**-mesh_level)
        return cls(points=points, mesh_level=mesh_level)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def n_cells(self) -> int:
        return len(self.points) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[:-1] + self.points[1:])

    def scaled(self, c: float) -> "TimeGrid":
        if c <= 0:
            raise FbmError("scale factor must be positive")
        return TimeGrid(points=self.points * c, mesh_level=self.mesh_level)


@dataclass(frozen=True, eq=False)
class FbmSample:
    """Sampled paths on a grid.

    ``values`` has shape ``(..., d, n + 1)`` with the path starting at
    zero; an optional batch axis comes first.  ``wiener`` holds the
    driving Wiener increments ``(..., d, n)`` when the sample came from
    the Volterra synthesis route.
    """

    hurst: float
    grid: TimeGrid
    values: np.ndarray
    wiener: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim < 2 or vals.shape[-1] != self.grid.n_cells + 1:
            raise FbmError(f"values shape {vals.shape} does not match the grid")
        if np.abs(vals[..., 0]).max() > 1e-12:
            raise FbmError("paths must start at zero")
        object.__setattr__(self, "values", vals)
        if self.wiener is not None:
            w = np.asarray(self.wiener, dtype=float)
            if w.shape != vals.shape[:-1] + (self.grid.n_cells,):
                raise FbmError(f"wiener shape {w.shape} does not match values")
            object.__setattr__(self, "wiener", w)

    @property
    def dim(self) -> int:
        return self.values.shape[-2]

    @property
    def n_paths(self) -> int | None:
        return self.values.shape[0] if self.values.ndim == 3 else None


# ---------------------------------------------------------------------------
# covariance and exact sampling


def fbm_covariance(s, t, h) -> np.ndarray | float:
    """Covariance of a standard fractional Brownian motion, batched."""
    h = check_hurst(h)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise FbmError("covariance times must be non-negative")
    out = 0.5 * (s ** (2 * h) + t ** (2 * h) - np.abs(t - s) ** (2 * h))
    return out if out.ndim else float(out)


def increment_covariance(h, grid: TimeGrid) -> np.ndarray:
    """Exact covariance matrix of the grid increments."""
    h = check_hurst(h)
    pts = grid.points
    r = fbm_covariance(pts[:, None], pts[None, :], h)
    return r[1:, 1:] - r[1:, :-1] - r[:-1, 1:] + r[:-1, :-1]


def _normal_blocks(seed, indices, n: int, d: int) -> np.ndarray:
    out = np.empty((len(indices), n, d))
    for row, i in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(i),)))
        out[row] = rng.standard_normal((n, d))
    return out


class FbmSampler:
    """Reusable exact sampler: one factorisation, many batches.

    The factorisation and grid are immutable after construction, so an
    instance can be shared across workers; individual paths depend only
    on their sub-seed.
    """

    def __init__(self, h, grid: TimeGrid):
        self.hurst = check_hurst(h)
        self.grid = grid
        cov = increment_covariance(self.hurst, grid)
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            min_eig = float(np.linalg.eigvalsh(cov).min())
            raise FbmError(
                "increment covariance is numerically non-positive-definite "
                f"(minimum eigenvalue {min_eig:.3e}); the grid is too fine "
                "for floating-point exact sampling"
            ) from None

    def sample(
        self, d: int, seed, paths: int | None = None, first_path: int = 0
    ) -> FbmSample:
        """Draw one path (``paths=None``) or a batch of them.

        ``first_path`` offsets the per-path sub-seeds, so a large batch
        can be assembled from consecutive chunks bit-identically.
        """
        if d < 1:
            raise FbmError("dimension must be positive")
        n = self.grid.n_cells
        count = paths if paths is not None else 1
        indices = range(first_path, first_path + count)
        z = _normal_blocks(seed, indices, n, d)
        incr = np.einsum("jk,pkd->pjd", self._chol, z)
        values = np.concatenate(
            [np.zeros((len(z), 1, d)), np.cumsum(incr, axis=1)], axis=1
        )
        values = np.swapaxes(values, -1, -2)
        if paths is None:
            values = values[0]
        return FbmSample(hurst=self.hurst, grid=self.grid, values=values)


def sample_fbm(
    h, grid: TimeGrid, d: int, seed, paths: int | None = None, first_path: int = 0
) -> FbmSample:
    """Exact fractional Brownian motion sample via covariance factorisation."""
    return FbmSampler(h, grid).sample(d, seed, paths, first_path)


# ---------------------------------------------------------------------------
# Volterra kernel


@dataclass(frozen=True)
class KernelEval:
    """Evaluator for the Volterra kernel of the long-memory regime.

    Holds the normalisation constant and a fixed Gauss-Legendre rule;
    construction rejects Hurst indices at or below one half, where this
    kernel representation does not apply.
    """

    h: float
    quadrature_nodes: int = 64
    c_h: float = field(init=False)

    def __post_init__(self):
        h = check_hurst(self.h, minimum=0.5)
        object.__setattr__(self, "h", h)
        if self.quadrature_nodes < 2:
            raise FbmError("need at least two quadrature nodes")
        c = float(np.sqrt(h * (2 * h - 1) / _beta(2 - 2 * h, h - 0.5)))
        object.__setattr__(self, "c_h", c)
        nodes, weights = leggauss(self.quadrature_nodes)
        object.__setattr__(self, "_nodes01", (nodes + 1.0) / 2.0)
        object.__setattr__(self, "_weights01", weights / 2.0)

    def _kernel_raw(self, t: np.ndarray, s: np.ndarray) -> np.ndarray:
        # substitute v = (u - s)**(h - 1/2); the singular factor cancels
        # and the remaining integrand is smooth on [0, (t - s)**(h - 1/2)]
        alpha = self.h - 0.5
        ub = (t - s) ** alpha
        v = ub[..., None] * self._nodes01
        integrand = (s[..., None] + v ** (1.0 / alpha)) ** alpha
        integral = (ub / alpha) * (integrand @ self._weights01)
        return self.c_h * s ** (0.5 - self.h) * integral

    def kernel(self, t, s) -> np.ndarray | float:
        """Kernel value ``K(t, s)`` for ``0 < s < t``, batched."""
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0):
            raise FbmError("kernel requires s > 0")
        if np.any(s >= t):
            raise FbmError("kernel requires s < t")
        out = self._kernel_raw(*np.broadcast_arrays(t, s))
        return out if out.ndim else float(out)

    def kernel_time_derivative(self, u, s) -> np.ndarray | float:
        """Derivative of the kernel in its first argument, ``0 < s < u``."""
        u = np.asarray(u, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0):
            raise FbmError("kernel derivative requires s > 0")
        if np.any(u <= s):
            raise FbmError("kernel derivative requires u > s")
        out = (
            self.c_h
            * s ** (0.5 - self.h)
            * (u - s) ** (self.h - 1.5)
            * u ** (self.h - 0.5)
        )
        return out if np.ndim(out) else float(out)

    def kernel_matrix(self, grid: TimeGrid) -> np.ndarray:
        """Synthesis matrix ``M[k, j] = K(t_k, mid_j)`` (zero for ``mid_j >= t_k``).

        Midpoint evaluation stands in for the cell average of the kernel
        over cell ``j``, which keeps the bias near the moving endpoint
        small compared to left-endpoint evaluation.
        """
        t = grid.points[:, None]
        s = grid.midpoints[None, :]
        mask = s < t
        t_safe = np.where(mask, t, s + 1.0)
        with np.errstate(invalid="ignore"):
            raw = self._kernel_raw(*np.broadcast_arrays(t_safe, s))
        return np.where(mask, raw, 0.0)


def synthesize_from_wiener(wiener, grid: TimeGrid, ker: KernelEval) -> FbmSample:
    """Build sample paths from Wiener increments through the kernel.

    ``wiener`` holds increments of shape ``(..., d, n)`` matching the
    grid cells; the result keeps them for joint-law computations.
    """
    w = np.asarray(wiener, dtype=float)
    if w.ndim < 2 or w.shape[-1] != grid.n_cells:
        raise FbmError(
            f"wiener increments shape {w.shape} does not match the "
            f"{grid.n_cells}-cell grid"
        )
    km = ker.kernel_matrix(grid)
    values = w @ km.T
    return FbmSample(hurst=ker.h, grid=grid, values=values, wiener=w)


def sample_volterra(
    h,
    grid: TimeGrid,
    d: int,
    seed,
    paths: int | None = None,
    quadrature_nodes: int = 64,
    first_path: int = 0,
) -> FbmSample:
    """Sample paths through the Volterra route, keeping Wiener increments.

    Approximate in the grid resolution (unlike ``sample_fbm``) but gives
    the joint law of the path with its driving white noise.
    """
    ker = KernelEval(h, quadrature_nodes)
    if d < 1:
        raise FbmError("dimension must be positive")
    n = grid.n_cells
    count = paths if paths is not None else 1
    indices = range(first_path, first_path + count)
    z = _normal_blocks(seed, indices, n, d)
    wiener = np.swapaxes(z, -1, -2) * np.sqrt(grid.widths)
    if paths is None:
        wiener = wiener[0]
    return synthesize_from_wiener(wiener, grid, ker)
