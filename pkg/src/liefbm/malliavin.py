"""Malliavin-style diagnostics for group flows in the long-memory regime.

Builds the path-dependent sensitivity kernel M(s), the d x d
non-degeneracy matrix obtained by integrating M(s)^T M(s), and a Monte
Carlo check of the integration-by-parts identity that pairs a
functional's gradient with the Cameron-Martin variation of the flow.

Quadrature layout: the s-integral runs per grid cell with a singular
substitution on the first cell (algebraic blow-up at s = 0) and the
last cell (kernel kink at s = t); the u-integral inside M(s) is exact,
by differences of kernel values, with the adjoint action frozen per
cell at its left endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from liefbm.fbm import KernelEval, TimeGrid, sample_volterra
from liefbm.integrator import GroupPath, integrate
from liefbm.liegroup import AlgebraBasis, adjoint_coordinates, exp_matrix
from liefbm.stats import MatrixFunctional, MonteCarloConfig

__all__ = [
    "MalliavinError",
    "MalliavinMatrix",
    "VariationField",
    "IbpReport",
    "constant_field",
    "malliavin_matrix",
    "pathwise_variation",
    "ibp_terms",
    "ibp_check",
]

INTERIOR_NODES = 8
ENDPOINT_NODES = 16


class MalliavinError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    """Non-degeneracy matrix of the flow at one time.

    ``gamma`` has shape ``(..., d, d)`` with an optional path batch
    axis; ``min_eigenvalue`` reduces over matrix eigenvalues per path.
    """

    t: float
    gamma: np.ndarray
    min_eigenvalue: np.ndarray | float
    path: GroupPath

    @property
    def worst_eigenvalue(self) -> float:
        return float(np.min(self.min_eigenvalue))


@dataclass(frozen=True, eq=False)
class VariationField:
    """Direction of a Cameron-Martin shift, given by its derivative.

    ``derivative`` is either a callable ``s -> (d,)`` (evaluated at
    quadrature points) or an array of per-grid-point values with shape
    ``(n + 1, d)`` that is interpolated linearly in between.
    """

    t: float
    derivative: Callable | np.ndarray

    def evaluate(self, s: np.ndarray, grid: TimeGrid) -> np.ndarray:
        if callable(self.derivative):
            out = np.asarray(
                [np.asarray(self.derivative(float(v)), dtype=float) for v in s]
            )
        else:
            table = np.asarray(self.derivative, dtype=float)
            if table.ndim != 2 or table.shape[0] != len(grid.points):
                raise MalliavinError(
                    f"sampled derivative shape {table.shape} does not match the grid"
                )
            out = np.stack(
                [np.interp(s, grid.points, table[:, i]) for i in range(table.shape[1])],
                axis=-1,
            )
        if out.ndim == 1:
            out = out[:, None]
        if not np.all(np.isfinite(out)):
            raise MalliavinError("variation derivative must be finite")
        return out


def constant_field(vector, t: float) -> VariationField:
    v = np.asarray(vector, dtype=float)
    return VariationField(t=float(t), derivative=lambda s: v)


def _require_orthonormal(basis: AlgebraBasis):
    if not basis.orthonormal:
        raise MalliavinError(
            "adjoint-based quadrature needs a basis with orthonormal "
            f"coordinates; family {basis.family!r} does not declare one"
        )
    if basis.d != basis.dim:
        raise MalliavinError("driving directions must span the whole algebra")


def _grid_index(grid: TimeGrid, t: float) -> int:
    pts = grid.points
    k = int(np.argmin(np.abs(pts - t)))
    if abs(pts[k] - t) > 1e-12 * max(1.0, abs(t)):
        raise MalliavinError(f"time {t} is not a grid point")
    if k == 0:
        raise MalliavinError("time must be positive")
    return k


def _gauss01(n: int):
    x, w = leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def _s_quadrature(grid: TimeGrid, t_index: int, h: float):
    """Nodes and weights for the s-integral over [0, t_index grid time].

    Interior cells take a plain Gauss rule.  The first cell substitutes
    u = s**(2 - 2h) to absorb the s**(1 - 2h) blow-up of the squared
    kernel, the last cell u = (t - s)**(2h) to absorb the (t - s)**(2h - 1)
    kink; both make the transformed integrand smooth.
    """
    pts = grid.points
    t = pts[t_index]
    nodes = []
    weights = []
    x_int, w_int = _gauss01(INTERIOR_NODES)
    x_end, w_end = _gauss01(ENDPOINT_NODES)
    for c in range(t_index):
        a, b = pts[c], pts[c + 1]
        if c == 0:
            p = 2.0 - 2.0 * h
            ub = b**p
            u = ub * x_end
            s = u ** (1.0 / p)
            w = ub * w_end * s ** (2.0 * h - 1.0) / p
        elif c == t_index - 1:
            p = 2.0 * h
            ub = (t - a) ** p
            u = ub * x_end
            s = t - u ** (1.0 / p)
            w = ub * w_end * (t - s) ** (1.0 - p) / p
        else:
            s = a + (b - a) * x_int
            w = (b - a) * w_int
        nodes.append(s)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def _kernel_difference_table(
    ker: KernelEval, grid: TimeGrid, t_index: int, s_nodes: np.ndarray
) -> np.ndarray:
    """Exact per-cell u-integrals of the kernel derivative.

    Entry ``(q, c)`` is the integral of the derivative kernel over the
    part of cell ``c`` to the right of ``s_q``, evaluated as a kernel
    difference; zero when the cell lies left of ``s_q``.
    """
    pts = grid.points[: t_index + 1]
    tt = pts[None, :]
    ss = s_nodes[:, None]
    mask = tt > ss
    t_safe = np.where(mask, tt, ss + 1.0)
    with np.errstate(invalid="ignore"):
        kvals = ker._kernel_raw(*np.broadcast_arrays(t_safe, ss))
    kvals = np.where(mask, kvals, 0.0)
    return kvals[:, 1:] - kvals[:, :-1]


def _adjoint_cells(path: GroupPath, t_index: int) -> np.ndarray:
    # adjoint action frozen at the left endpoint of each cell
    lefts = path.elements[..., :t_index, :, :]
    return adjoint_coordinates(path.basis, lefts)


def malliavin_matrix(path: GroupPath, ker: KernelEval, t: float) -> MalliavinMatrix:
    """Integrated squared sensitivity of the flow at time ``t``.

    Positive definiteness of the result is the computable footprint of
    the flow's law having a density; the minimum eigenvalue comes along
    for direct inspection.
    """
    basis = path.basis
    _require_orthonormal(basis)
    t_index = _grid_index(path.grid, t)
    h = ker.h
    s_nodes, s_weights = _s_quadrature(path.grid, t_index, h)
    dk = _kernel_difference_table(ker, path.grid, t_index, s_nodes)
    ad = _adjoint_cells(path, t_index)  # (..., C, d, d)
    gram = (dk * s_weights[:, None]).T @ dk  # (C, C)
    d = basis.d
    big = np.kron(gram, np.eye(d))
    batch = ad.shape[:-3]
    c = ad.shape[-3]
    stacked = ad.reshape(batch + (c * d, d))
    gamma = np.swapaxes(stacked, -1, -2) @ (big @ stacked)
    gamma = 0.5 * (gamma + np.swapaxes(gamma, -1, -2))
    eigs = np.linalg.eigvalsh(gamma)
    min_eig = eigs[..., 0]
    if min_eig.ndim == 0:
        min_eig = float(min_eig)
    return MalliavinMatrix(t=float(t), gamma=gamma, min_eigenvalue=min_eig, path=path)


def _variation_cells(
    grid: TimeGrid, t_index: int, ker: KernelEval, field: VariationField, d: int
) -> np.ndarray:
    """Path-independent per-cell weights of the variation integral."""
    s_nodes, s_weights = _s_quadrature(grid, t_index, ker.h)
    dk = _kernel_difference_table(ker, grid, t_index, s_nodes)
    hprime = field.evaluate(s_nodes, grid)  # (Q, d)
    if hprime.shape[1] != d:
        raise MalliavinError(
            f"variation derivative has {hprime.shape[1]} channels, expected {d}"
        )
    return dk.T @ (s_weights[:, None] * hprime)  # (C, d)


def pathwise_variation(
    path: GroupPath, field: VariationField, ker: KernelEval
) -> np.ndarray:
    """Direction in which the flow endpoint moves under a noise shift.

    Coordinates of the double integral of the derivative kernel against
    the adjoint action and the shift derivative.  The result is the
    right-translated tangent direction: the perturbed endpoint moves as
    ``exp(eps * variation) X_t`` to first order.  Shape ``(..., d)``.
    """
    basis = path.basis
    _require_orthonormal(basis)
    if abs(field.t) <= 1e-12:
        return np.zeros(path.elements.shape[:-3] + (basis.d,))
    t_index = _grid_index(path.grid, field.t)
    gamma_cells = _variation_cells(path.grid, t_index, ker, field, basis.d)
    ad = _adjoint_cells(path, t_index)
    return np.einsum("...cij,cj->...i", ad, gamma_cells)


def _to_left_frame(
    basis: AlgebraBasis, endpoint: np.ndarray, direction: np.ndarray
) -> np.ndarray:
    """Re-express a right-translated direction in the endpoint's left frame.

    Pairing against left-translated finite differences requires both
    tangent coordinates in the same frame; this applies the inverse
    adjoint of the endpoint.
    """
    end_ad = adjoint_coordinates(basis, endpoint)
    if basis.family == "so3":
        inv = np.swapaxes(end_ad, -1, -2)
    else:
        inv = np.linalg.inv(end_ad)
    return np.einsum("...ij,...j->...i", inv, direction)


def _gradient_coordinates(
    f: MatrixFunctional, basis: AlgebraBasis, points: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Left-translated central differences of ``f`` at group points."""
    out = np.empty(points.shape[:-2] + (basis.d,))
    for i in range(basis.d):
        v = basis.generators[i]
        plus = points @ exp_matrix(eps * v, basis)
        minus = points @ exp_matrix(-eps * v, basis)
        out[..., i] = (f(plus) - f(minus)) / (2.0 * eps)
    return out


@dataclass(frozen=True)
class IbpReport:
    """Both sides of the integration-by-parts identity with a 4-sigma gate."""

    functional: str
    n_paths: int
    lhs_mean: float
    rhs_mean: float
    difference: float
    std_error: float
    z: float
    passed: bool

    @property
    def interval(self) -> tuple:
        return (
            self.difference - 4.0 * self.std_error,
            self.difference + 4.0 * self.std_error,
        )


def ibp_terms(
    path: GroupPath, f: MatrixFunctional, field: VariationField, ker: KernelEval
) -> tuple:
    """Per-path left and right sides of the integration-by-parts pairing.

    The left side pairs the functional's left-translated gradient with
    the frame-transported variation; the right side integrates the shift
    derivative against the stored driving Wiener increments.
    """
    basis = path.basis
    sample = path.source
    if sample is None or sample.wiener is None:
        raise MalliavinError(
            "flow carries no stored Wiener increments; the identity needs "
            "samples from the synthesis route"
        )
    t_index = _grid_index(path.grid, field.t)
    variation = pathwise_variation(path, field, ker)
    end = path.elements[..., t_index, :, :]
    left_frame = _to_left_frame(basis, end, variation)
    grad = _gradient_coordinates(f, basis, end)
    lhs = np.einsum("...i,...i->...", grad, left_frame)
    mids = path.grid.midpoints[:t_index]
    hmid = field.evaluate(mids, path.grid)  # (t_index, d)
    rhs = f(end) * np.einsum("...dj,jd->...", sample.wiener[..., :t_index], hmid)
    return lhs, rhs


def ibp_trace(
    basis: AlgebraBasis,
    f: MatrixFunctional,
    field: VariationField,
    h,
    t: float,
    mc: MonteCarloConfig,
) -> tuple:
    """Per-path estimator traces of both identity sides.

    Samples flows jointly with their driving noise in chunks and
    returns the concatenated left and right side arrays.
    """
    ker = KernelEval(h)
    if abs(field.t - t) > 1e-12 * max(1.0, abs(t)):
        raise MalliavinError("variation field and check disagree on the time")
    _require_orthonormal(basis)
    grid = TimeGrid.dyadic(mc.mesh_level, horizon=t)
    lhs_parts = []
    rhs_parts = []
    done = 0
    while done < mc.n_paths:
        count = min(mc.chunk, mc.n_paths - done)
        sample = sample_volterra(
            h, grid, basis.d, mc.seed, paths=count, first_path=done
        )
        path = integrate(sample, basis)
        lhs, rhs = ibp_terms(path, f, field, ker)
        lhs_parts.append(lhs)
        rhs_parts.append(rhs)
        done += count
    return np.concatenate(lhs_parts), np.concatenate(rhs_parts)


def ibp_report_from_trace(name: str, lhs: np.ndarray, rhs: np.ndarray) -> IbpReport:
    diff = lhs - rhs
    se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
    mean_diff = float(diff.mean())
    z = abs(mean_diff) / se if se > 0 else (0.0 if mean_diff == 0 else np.inf)
    return IbpReport(
        functional=name,
        n_paths=len(diff),
        lhs_mean=float(lhs.mean()),
        rhs_mean=float(rhs.mean()),
        difference=mean_diff,
        std_error=se,
        z=float(z),
        passed=bool(z < 4.0),
    )


def ibp_check(
    basis: AlgebraBasis,
    f: MatrixFunctional,
    field: VariationField,
    h,
    t: float,
    mc: MonteCarloConfig,
) -> IbpReport:
    """Monte Carlo verification of the integration-by-parts identity.

    Gates the paired mean difference of the two sides at four standard
    errors of the difference.
    """
    lhs, rhs = ibp_trace(basis, f, field, h, t, mc)
    return ibp_report_from_trace(f.name, lhs, rhs)
