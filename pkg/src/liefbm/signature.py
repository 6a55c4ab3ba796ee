"""Iterated integrals of interpolated drivers and the nilpotent closed form.

Iterated integrals are taken along the piecewise-linear interpolation
of a sampled driver and computed exactly: the concatenation relation
moves across cells while each linear cell contributes tensor powers of
its increment.  On top of that sit the descent-weighted permutation
sums that turn signatures into logarithm coefficients, the Lévy area,
and the closed-form flow on nilpotent families, which matches the
product-of-exponentials flow to rounding for the same driver.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations, product
from math import comb, factorial

import numpy as np

from liefbm.fbm import FbmSample
from liefbm.integrator import GroupPath
from liefbm.liegroup import AlgebraBasis, bracket, exp_matrix

__all__ = [
    "SignatureError",
    "SignatureTable",
    "descent_count",
    "words_of_length",
    "iterated_integral",
    "signature_prefixes",
    "signature_table",
    "lambda_coefficient",
    "levy_area",
    "nilpotent_flow",
    "nilpotent_flow_path",
]

MAX_WORD_LENGTH = 4


class SignatureError(ValueError):
    pass


def descent_count(sigma) -> int:
    """Number of positions where a permutation of ``1..k`` steps down."""
    sig = tuple(int(v) for v in sigma)
    if sorted(sig) != list(range(1, len(sig) + 1)):
        raise SignatureError(f"{sigma!r} is not a permutation of 1..{len(sig)}")
    return sum(1 for a, b in zip(sig, sig[1:]) if a > b)


def _inverse_permutation(sigma: tuple[int, ...]) -> tuple[int, ...]:
    inv = [0] * len(sigma)
    for pos, val in enumerate(sigma):
        inv[val - 1] = pos + 1
    return tuple(inv)


def _permute_word(word: tuple[int, ...], sigma: tuple[int, ...]) -> tuple[int, ...]:
    # letter j of the result is letter sigma(j) of the input
    return tuple(word[s - 1] for s in sigma)


def _check_word(word, d: int, max_word_length: int) -> tuple[int, ...]:
    w = tuple(int(v) for v in word)
    if not 1 <= len(w) <= max_word_length:
        raise SignatureError(
            f"word length must lie in 1..{max_word_length}, got {len(w)}"
        )
    if any(not 1 <= v <= d for v in w):
        raise SignatureError(f"word {w} uses letters outside 1..{d}")
    return w


def words_of_length(d: int, k: int):
    """All words over ``1..d`` of length ``k`` in lexicographic order."""
    return product(range(1, d + 1), repeat=k)


def _word_flat_index(word: tuple[int, ...], d: int) -> int:
    idx = 0
    for letter in word:
        idx = idx * d + (letter - 1)
    return idx


def _grid_index(sample: FbmSample, t: float) -> int:
    pts = sample.grid.points
    k = int(np.argmin(np.abs(pts - t)))
    if abs(pts[k] - t) > 1e-12 * max(1.0, abs(t)):
        raise SignatureError(f"time {t} is not a grid point")
    return k


def signature_prefixes(sample: FbmSample, level: int) -> dict[int, np.ndarray]:
    """Flattened signature tensors of all path prefixes, per level.

    Returns a map ``k -> array (..., n + 1, d**k)`` where entry ``m``
    holds the level-``k`` signature of the interpolated driver on
    ``[0, t_m]``.  Exact for the interpolation: each cell contributes
    tensor powers of its increment divided by factorials, composed with
    the running prefix by the concatenation relation.
    """
    if level < 1:
        raise SignatureError("level must be at least 1")
    incr = np.diff(sample.values, axis=-1)
    delta = np.moveaxis(incr, -2, -1)  # (..., n, d)
    batch = delta.shape[:-2]
    n, d = delta.shape[-2], delta.shape[-1]
    powers = {1: delta}
    for b in range(2, level + 1):
        outer = powers[b - 1][..., :, None] * delta[..., None, :]
        powers[b] = outer.reshape(batch + (n, d**b))
    prefixes: dict[int, np.ndarray] = {}
    for k in range(1, level + 1):
        terms = powers[k] / factorial(k)
        for b in range(1, k):
            left = prefixes[k - b][..., :-1, :]
            piece = left[..., :, None] * (powers[b] / factorial(b))[..., None, :]
            terms = terms + piece.reshape(batch + (n, d**k))
        csum = np.cumsum(terms, axis=-2)
        prefixes[k] = np.concatenate(
            [np.zeros(batch + (1, d**k)), csum], axis=-2
        )
    return prefixes


def iterated_integral(
    word, sample: FbmSample, t: float, max_word_length: int = MAX_WORD_LENGTH
):
    """Iterated integral of the interpolated driver over the simplex at ``t``."""
    w = _check_word(word, sample.dim, max_word_length)
    k = _grid_index(sample, t)
    pref = signature_prefixes(sample, len(w))[len(w)]
    out = pref[..., k, _word_flat_index(w, sample.dim)]
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True, eq=False)
class SignatureTable:
    """All iterated integrals up to a level, at one time."""

    driver: FbmSample
    horizon: float
    values: dict

    def __getitem__(self, word):
        return self.values[tuple(word)]

    @property
    def level(self) -> int:
        return max(len(w) for w in self.values)


def signature_table(
    sample: FbmSample, t: float, level: int, max_word_length: int = MAX_WORD_LENGTH
) -> SignatureTable:
    if level > max_word_length:
        raise SignatureError(f"level {level} exceeds the word-length cap {max_word_length}")
    idx = _grid_index(sample, t)
    pref = signature_prefixes(sample, level)
    d = sample.dim
    values = {}
    for k in range(1, level + 1):
        for w in words_of_length(d, k):
            out = pref[k][..., idx, _word_flat_index(w, d)]
            values[w] = out if np.ndim(out) else float(out)
    return SignatureTable(driver=sample, horizon=float(t), values=values)


def _lambda_from_prefix(
    word: tuple[int, ...], pref_k: np.ndarray, d: int
) -> np.ndarray:
    k = len(word)
    out = 0.0
    for sigma in permutations(range(1, k + 1)):
        e = descent_count(sigma)
        coeff = (-1.0) ** e / (k**2 * comb(k - 1, e))
        permuted = _permute_word(word, _inverse_permutation(sigma))
        out = out + coeff * pref_k[..., _word_flat_index(permuted, d)]
    return out


def lambda_coefficient(
    word, sample: FbmSample, t: float, max_word_length: int = MAX_WORD_LENGTH
):
    """Logarithm coefficient of the word: descent-weighted permutation sum."""
    w = _check_word(word, sample.dim, max_word_length)
    idx = _grid_index(sample, t)
    pref = signature_prefixes(sample, len(w))[len(w)]
    out = _lambda_from_prefix(w, pref[..., idx, :], sample.dim)
    return out if np.ndim(out) else float(out)


def levy_area(sample: FbmSample, i: int, j: int, t: float):
    """Antisymmetric second-level area between two channels."""
    if i == j:
        raise SignatureError("area needs two distinct letters")
    d = sample.dim
    _check_word((i, j), d, 2)
    idx = _grid_index(sample, t)
    pref = signature_prefixes(sample, 2)[2]
    sij = pref[..., idx, _word_flat_index((i, j), d)]
    sji = pref[..., idx, _word_flat_index((j, i), d)]
    out = 0.5 * (sij - sji)
    return out if np.ndim(out) else float(out)


def _nested_bracket(basis: AlgebraBasis, word: tuple[int, ...]) -> np.ndarray:
    # right-nested: [V_{i1}, [V_{i2}, [..., V_{ik}]]]
    mats = basis.generators
    out = mats[word[-1] - 1]
    for letter in reversed(word[:-1]):
        out = bracket(mats[letter - 1], out)
    return out


def _nilpotent_log(
    sample: FbmSample,
    basis: AlgebraBasis,
    max_word_length: int,
) -> np.ndarray:
    if not basis.is_nilpotent:
        raise SignatureError("closed-form flow needs a nilpotent basis")
    step = int(basis.step)
    if step > max_word_length:
        raise SignatureError(
            f"nilpotency step {step} exceeds the word-length cap {max_word_length}"
        )
    if sample.dim != basis.d:
        raise SignatureError(
            f"sample has {sample.dim} channels but the basis drives {basis.d}"
        )
    d = sample.dim
    pref = signature_prefixes(sample, step)
    n1 = sample.grid.n_cells + 1
    nm = basis.matrix_dim
    batch = sample.values.shape[:-2]
    logs = np.zeros(batch + (n1, nm, nm))
    for k in range(1, step + 1):
        for w in words_of_length(d, k):
            v_word = _nested_bracket(basis, w)
            if np.abs(v_word).max() == 0.0:
                continue
            lam = _lambda_from_prefix(w, pref[k], d)
            logs = logs + lam[..., None, None] * v_word
    return logs


def nilpotent_flow(
    sample: FbmSample,
    basis: AlgebraBasis,
    t: float,
    max_word_length: int = MAX_WORD_LENGTH,
):
    """Closed-form flow value at one grid time on a nilpotent family.

    Exponential of the truncated logarithm series, which terminates at
    the nilpotency step; agrees with the product-of-exponentials flow
    of the same interpolated driver to rounding.
    """
    idx = _grid_index(sample, t)
    logs = _nilpotent_log(sample, basis, max_word_length)
    return exp_matrix(logs[..., idx, :, :], basis)


def nilpotent_flow_path(
    sample: FbmSample,
    basis: AlgebraBasis,
    max_word_length: int = MAX_WORD_LENGTH,
) -> GroupPath:
    """Closed-form flow at every grid point, packaged as a path."""
    logs = _nilpotent_log(sample, basis, max_word_length)
    elements = exp_matrix(logs, basis)
    return GroupPath(
        basis=basis,
        grid=sample.grid,
        elements=elements,
        side="left",
        source=sample,
    )
