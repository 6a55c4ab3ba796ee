"""Matrix Lie algebra and group primitives.

Provides the built-in algebra bases (rotations, Heisenberg, abelian,
free nilpotent of step two), commutator brackets, exponentials and
logarithms specialised to the structure at hand, adjoint actions, and
the graded dilations that exist on the nilpotent families.

All matrices are plain float ndarrays.  Batched variants accept leading
axes and are used heavily by the integrator, so the hot paths avoid
Python-level loops over paths.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.linalg import expm as _expm_dense


@dataclass(frozen=True)
class Tolerances:
    """Numerical acceptance thresholds used across the library."""

    membership: float = 1e-9
    path_membership: float = 1e-8
    grading: float = 1e-12
    dilation_automorphism: float = 1e-12
    group_morphism: float = 1e-10
    adjoint_orthogonality: float = 1e-10
    exp_log_roundtrip: float = 1e-12
    jacobi: float = 1e-12


TOL = Tolerances()


class LieGroupError(ValueError):
    pass


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise LieGroupError(f"expected square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LieGroupError("non-finite matrix entries")
    return a


def bracket(a, b) -> np.ndarray:
    """Commutator ``ab - ba``, batched over leading axes."""
    a = _as_matrix(a)
    b = _as_matrix(b)
    return a @ b - b @ a


@dataclass(frozen=True, eq=False)
class AlgebraBasis:
    """A matrix realisation of a Lie algebra with distinguished generators.

    Attributes
    ----------
    family:
        One of ``so3``, ``heisenberg``, ``abelian``, ``free_step2`` or
        ``custom``.
    generators:
        Array of shape ``(d, n, n)``; the driving directions, one per
        noise channel.
    completed:
        Array of shape ``(dim, n, n)`` extending ``generators`` to a
        linear basis of the algebra they generate.
    layers:
        Layer index of each completed element under the natural grading,
        or ``None`` when no grading is declared (so3).
    step:
        Nilpotency step, ``None`` for non-nilpotent families.
    orthonormal:
        True when the coordinate inner product on the completed basis is
        invariant under the adjoint action of the group.
    """

    family: str
    generators: np.ndarray
    completed: np.ndarray
    layers: tuple[int, ...] | None = None
    step: int | None = None
    orthonormal: bool = False

    def __post_init__(self):
        gens = _as_matrix(self.generators)
        comp = _as_matrix(self.completed)
        if gens.ndim != 3 or comp.ndim != 3:
            raise LieGroupError("generators and completed must be stacks of matrices")
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "completed", comp)
        if comp.shape[1:] != gens.shape[1:]:
            raise LieGroupError("generator and completed matrix sizes disagree")
        if not np.array_equal(comp[: len(gens)], gens):
            raise LieGroupError("completed basis must start with the generators")
        flat = comp.reshape(len(comp), -1)
        if np.linalg.matrix_rank(flat) != len(comp):
            raise LieGroupError("completed basis is linearly dependent")
        if self.layers is not None:
            layers = tuple(int(k) for k in self.layers)
            if len(layers) != len(comp) or min(layers) < 1:
                raise LieGroupError("layers must assign a positive layer to each basis element")
            object.__setattr__(self, "layers", layers)
        # pseudo-inverse of the flattened basis, used for coordinates
        object.__setattr__(self, "_pinv", np.linalg.pinv(flat))
        self._check_grading()

    @property
    def d(self) -> int:
        return len(self.generators)

    @property
    def dim(self) -> int:
        return len(self.completed)

    @property
    def matrix_dim(self) -> int:
        return self.completed.shape[-1]

    @property
    def is_nilpotent(self) -> bool:
        return self.step is not None

    def _check_grading(self):
        if self.layers is None:
            return
        comp = self.completed
        step = self.step if self.step is not None else max(self.layers)
        scale = max(np.abs(comp).max(), 1.0)
        for i in range(self.dim):
            for j in range(self.dim):
                br = bracket(comp[i], comp[j])
                target = self.layers[i] + self.layers[j]
                if target > step:
                    if np.abs(br).max() > TOL.grading * scale:
                        raise LieGroupError(
                            f"bracket of layers {self.layers[i]},{self.layers[j]} "
                            "exceeds the declared step"
                        )
                    continue
                coeffs = self.coordinates(br)
                recon = np.tensordot(coeffs, comp, axes=(0, 0))
                if np.abs(recon - br).max() > TOL.grading * scale:
                    raise LieGroupError("bracket leaves the span of the completed basis")
                off = [
                    abs(c)
                    for c, layer in zip(coeffs, self.layers)
                    if layer != target and abs(c) > TOL.grading
                ]
                if off:
                    raise LieGroupError("grading is not respected by the bracket")

    def coordinates(self, x) -> np.ndarray:
        """Coordinates of algebra elements in the completed basis.

        Batched: input ``(..., n, n)`` gives output ``(..., dim)``.
        """
        x = _as_matrix(x)
        return x.reshape(x.shape[:-2] + (-1,)) @ self._pinv

    def from_coordinates(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        return np.tensordot(coeffs, self.completed, axes=(-1, 0))

    def element(self, coeffs) -> np.ndarray:
        """Linear combination of the driving generators only."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.d:
            raise LieGroupError(f"expected {self.d} driving coefficients")
        return np.tensordot(coeffs, self.generators, axes=(-1, 0))


# ---------------------------------------------------------------------------
# built-in bases


def so3_basis() -> AlgebraBasis:
    """Skew-symmetric 3x3 algebra with generators spanning all of so(3)."""
    v1 = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    v2 = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    v3 = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    gens = np.stack([v1, v2, v3])
    return AlgebraBasis(
        family="so3", generators=gens, completed=gens.copy(), orthonormal=True
    )


def abelian_basis(d: int) -> AlgebraBasis:
    """Commuting unipotent generators: d translations in (d+1)x(d+1) matrices."""
    if d < 1:
        raise LieGroupError("abelian dimension must be positive")
    gens = np.zeros((d, d + 1, d + 1))
    for i in range(d):
        gens[i, 0, i + 1] = 1.0
    return AlgebraBasis(
        family="abelian",
        generators=gens,
        completed=gens.copy(),
        layers=(1,) * d,
        step=1,
        orthonormal=True,
    )


def heisenberg_basis(n: int = 1) -> AlgebraBasis:
    """Heisenberg algebra with 2n driving directions and one central one.

    Realised in (n+2)x(n+2) strictly upper triangular matrices; the
    bracket of the i-th pair of generators is the central element and
    all other brackets vanish.
    """
    if n < 1:
        raise LieGroupError("heisenberg parameter must be positive")
    size = n + 2
    gens = np.zeros((2 * n, size, size))
    for i in range(n):
        gens[i, 0, 1 + i] = 1.0            # pairs with gens[n + i]
        gens[n + i, 1 + i, size - 1] = 1.0
    center = np.zeros((size, size))
    center[0, size - 1] = 1.0
    comp = np.concatenate([gens, center[None]])
    return AlgebraBasis(
        family="heisenberg",
        generators=gens,
        completed=comp,
        layers=(1,) * (2 * n) + (2,),
        step=2,
    )


def free_step2_basis(d: int) -> AlgebraBasis:
    """Free nilpotent algebra of step two on d generators.

    Matrix model of size 1 + d + d(d-1)/2 acting on a vector
    (pair block, generator block, scalar): generator i maps the scalar
    slot to its own slot and feeds half of each wedge product into the
    pair block, so the commutator of generators i < j is exactly the
    basis element carrying the (i, j) pair slot.
    """
    if d < 2:
        raise LieGroupError("free step-2 algebra needs at least two generators")
    pairs = list(combinations(range(d), 2))
    w = len(pairs)
    size = w + d + 1
    pair_row = {p: k for k, p in enumerate(pairs)}
    gens = np.zeros((d, size, size))
    for i in range(d):
        gens[i, w + i, size - 1] = 1.0
        for j in range(d):
            if j == i:
                continue
            if i < j:
                gens[i, pair_row[(i, j)], w + j] = 0.5
            else:
                gens[i, pair_row[(j, i)], w + j] = -0.5
    centers = np.zeros((w, size, size))
    for k in range(w):
        centers[k, k, size - 1] = 1.0
    comp = np.concatenate([gens, centers])
    return AlgebraBasis(
        family="free_step2",
        generators=gens,
        completed=comp,
        layers=(1,) * d + (2,) * w,
        step=2,
    )


_NAME_RE = re.compile(r"^(so3|heisenberg|abelian|free_step2)(?::(\d+))?$")


def make_basis(name: str) -> AlgebraBasis:
    """Build a basis from a short name.

    ``so3``, ``heisenberg1`` (alias ``heisenberg:1``), ``heisenberg:n``,
    ``abelian:d`` and ``free_step2:d`` are understood.
    """
    if name == "heisenberg1":
        return heisenberg_basis(1)
    m = _NAME_RE.match(name)
    if m is None:
        raise LieGroupError(f"unknown basis name {name!r}")
    family, arg = m.group(1), m.group(2)
    if family == "so3":
        if arg is not None:
            raise LieGroupError("so3 takes no size parameter")
        return so3_basis()
    if arg is None:
        raise LieGroupError(f"{family} needs a size, e.g. {family}:2")
    k = int(arg)
    if family == "heisenberg":
        return heisenberg_basis(k)
    if family == "abelian":
        return abelian_basis(k)
    return free_step2_basis(k)


def basis_from_json(source) -> AlgebraBasis:
    """Load a basis from a JSON document, path, or already-parsed dict.

    Built-in families can be requested by name alone; custom documents
    carry explicit row-major generator matrices and an optional grading.
    """
    if isinstance(source, (str, Path)):
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        doc = json.loads(text)
    else:
        doc = dict(source)
    family = doc.get("family", "custom")
    if family != "custom" and "generators" not in doc:
        name = family if "size" not in doc else f"{family}:{doc['size']}"
        return make_basis(name)
    raw = doc["generators"]
    mats = []
    for entry in raw:
        a = np.asarray(entry, dtype=float)
        if a.ndim == 1:
            n = round(len(a) ** 0.5)
            if n * n != len(a):
                raise LieGroupError("row-major generator length is not a square")
            a = a.reshape(n, n)
        mats.append(a)
    gens = np.stack(mats)
    layers = doc.get("grading")
    step = doc.get("step")
    if layers is not None:
        layers = tuple(int(k) for k in layers)
        if step is None:
            step = max(layers)
    return AlgebraBasis(
        family="custom",
        generators=gens,
        completed=gens.copy(),
        layers=layers,
        step=step,
        orthonormal=bool(doc.get("orthonormal", False)),
    )


# ---------------------------------------------------------------------------
# exponentials and logarithms


def _is_strictly_upper(a: np.ndarray) -> bool:
    il, jl = np.tril_indices(a.shape[-1])
    return bool(np.abs(a[..., il, jl]).max() == 0.0)


def _exp_nilpotent(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    out = np.zeros_like(a)
    out[...] = np.eye(n)
    term = out.copy()
    for k in range(1, n):
        term = term @ a / k
        if np.abs(term).max() == 0.0:
            break
        out = out + term
    return out


def _exp_skew3(a: np.ndarray) -> np.ndarray:
    # Rodrigues formula with series fallback near zero angle
    x = a[..., 0, 1]
    y = a[..., 1, 2]
    z = a[..., 0, 2]
    theta2 = x * x + y * y + z * z
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        q = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    out = np.zeros_like(a)
    out[...] = np.eye(3)
    out = out + s[..., None, None] * a + q[..., None, None] * (a @ a)
    return out


def _is_skew(a: np.ndarray) -> bool:
    return bool(np.abs(a + np.swapaxes(a, -1, -2)).max() < 1e-12 * max(1.0, np.abs(a).max()))


def exp_matrix(a, basis: AlgebraBasis | None = None) -> np.ndarray:
    """Matrix exponential, batched, with fast paths for the built-ins.

    Strictly upper triangular input uses the terminating series, 3x3
    skew input the Rodrigues formula; anything else falls back to the
    dense Pade exponential.
    """
    a = _as_matrix(a)
    if basis is not None and basis.is_nilpotent:
        return _exp_nilpotent(a)
    if _is_strictly_upper(a):
        return _exp_nilpotent(a)
    if a.shape[-1] == 3 and _is_skew(a):
        return _exp_skew3(a)
    if a.ndim == 2:
        return _expm_dense(a)
    flat = a.reshape((-1,) + a.shape[-2:])
    out = np.stack([_expm_dense(m) for m in flat])
    return out.reshape(a.shape)


def log_unipotent(g) -> np.ndarray:
    """Principal logarithm of unipotent matrices via the terminating series.

    Raises when ``g - I`` is not nilpotent to working precision.
    """
    g = _as_matrix(g)
    n = g.shape[-1]
    x = g - np.eye(n)
    power = x.copy()
    for _ in range(n - 1):
        power = power @ x
    if np.abs(power).max() > 1e-10 * max(1.0, np.abs(g).max()) ** n:
        raise LieGroupError("matrix is not unipotent; logarithm series does not terminate")
    out = np.zeros_like(x)
    term = np.zeros_like(x)
    term[...] = np.eye(n)
    for k in range(1, n):
        term = term @ x
        out = out + ((-1.0) ** (k + 1) / k) * term
    return out


# ---------------------------------------------------------------------------
# adjoint action


def adjoint(g, x) -> np.ndarray:
    """Conjugation ``g x g^{-1}``, batched over leading axes."""
    g = _as_matrix(g)
    x = _as_matrix(x)
    try:
        zt = np.linalg.solve(np.swapaxes(g, -1, -2), np.swapaxes(g @ x, -1, -2))
    except np.linalg.LinAlgError as exc:
        raise LieGroupError("group element is numerically singular") from exc
    return np.swapaxes(zt, -1, -2)


def adjoint_coordinates(basis: AlgebraBasis, g) -> np.ndarray:
    """Matrix of the adjoint action in the completed basis.

    Batched: ``g`` of shape ``(..., n, n)`` gives ``(..., dim, dim)``
    with column ``i`` holding the coordinates of ``g B_i g^{-1}``.
    """
    g = _as_matrix(g)
    if basis.family == "so3":
        ginv = np.swapaxes(g, -1, -2)
    else:
        ginv = np.linalg.inv(g)
    cols = []
    for i in range(basis.dim):
        conj = g @ basis.completed[i] @ ginv
        cols.append(basis.coordinates(conj))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# dilations


def dilate_algebra(basis: AlgebraBasis, c: float, x) -> np.ndarray:
    """Graded dilation on the algebra: layer k scales by ``c**k``."""
    if basis.layers is None:
        raise LieGroupError(f"family {basis.family!r} carries no grading")
    if c <= 0:
        raise LieGroupError("dilation factor must be positive")
    coeffs = basis.coordinates(x)
    scale = np.asarray([float(c) ** k for k in basis.layers])
    return basis.from_coordinates(coeffs * scale)


def dilate_group(basis: AlgebraBasis, c: float, g) -> np.ndarray:
    """Group dilation obtained by conjugating the algebra dilation with exp."""
    if not basis.is_nilpotent:
        raise LieGroupError("group dilations need a nilpotent family")
    return exp_matrix(dilate_algebra(basis, c, log_unipotent(g)), basis)


# ---------------------------------------------------------------------------
# membership


def membership_defect(basis: AlgebraBasis, g) -> float:
    """Distance-like defect of a matrix from the group of the basis.

    Zero (to rounding) on genuine group elements, of the order of the
    perturbation on perturbed ones.  Rotations measure orthogonality
    plus determinant; unipotent families measure lower-triangle and
    diagonal deviation plus the part of the logarithm outside the span
    of the completed basis.
    """
    g = _as_matrix(g)
    n = g.shape[-1]
    if basis.family == "so3":
        gram = np.swapaxes(g, -1, -2) @ g - np.eye(n)
        defect = np.sqrt(np.sum(gram * gram, axis=(-1, -2)))
        defect = defect + np.abs(np.linalg.det(g) - 1.0)
        return float(np.max(defect))
    il, jl = np.tril_indices(n, k=-1)
    lower = np.abs(g[..., il, jl]).max() if len(il) else 0.0
    diag = np.abs(np.einsum("...ii->...i", g) - 1.0).max()
    # sanitise to unipotent, then measure the part of the logarithm
    # that falls outside the algebra
    u = np.triu(g, k=1) + np.eye(n)
    logm = log_unipotent(u)
    recon = basis.from_coordinates(basis.coordinates(logm))
    outside = np.abs(logm - recon).max()
    return float(lower + diag + outside)
