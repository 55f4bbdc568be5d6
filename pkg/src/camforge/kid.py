"""Kernel Inception Distance over externally computed feature vectors.

KID is the block-averaged unbiased MMD^2 under the cubic polynomial kernel
k(x, y) = (x.y / d + 1)^3.  Feature extraction is not done here; callers
supply one vector per row.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class KidError(ValueError):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray
    source_name: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise KidError(f"{self.source_name or 'features'}: expected an n x d matrix")
        if self.vectors.shape[0] < 2:
            raise KidError(f"{self.source_name or 'features'}: need at least 2 vectors")
        if not np.isfinite(self.vectors).all():
            raise KidError(f"{self.source_name or 'features'}: non-finite entries")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class KidResult:
    mean: float
    std: float
    blocks: int
    block_values: list[float]
    dropped: tuple[int, int]


def poly_kernel(x, y, d_dim: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise KidError(f"dimension mismatch {x.shape} vs {y.shape}")
    return float((np.dot(x, y) / d_dim + 1.0) ** 3)


def _gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** 3


def mmd2_unbiased(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased MMD^2 between two equally sized blocks, summed with fsum."""
    m = a.shape[0]
    kaa = _gram(a, a)
    kbb = _gram(b, b)
    kab = _gram(a, b)
    off = ~np.eye(m, dtype=bool)
    t_aa = math.fsum(kaa[off]) / (m * (m - 1))
    t_bb = math.fsum(kbb[off]) / (m * (m - 1))
    t_ab = math.fsum(kab.ravel()) / (m * m)
    return t_aa + t_bb - 2.0 * t_ab


def _permutation(seed: int, n: int) -> np.ndarray:
    # depends only on (seed, n): both sets get the same shuffle rule
    return np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF)).permutation(n)


def _digest(v: np.ndarray) -> bytes:
    h = hashlib.sha256(str(v.shape).encode())
    h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.digest()


def kid(a: FeatureSet, b: FeatureSet, block_size: int, seed: int = 0) -> KidResult:
    """Block-averaged KID estimate.

    Each set is shuffled with a permutation that depends only on the seed
    and its size.  The second set's shuffled order is rotated by half its
    length, so comparing a set against itself pairs disjoint blocks.  The
    operands are put in a canonical order (by content digest) first, which
    makes ``kid(a, b)`` and ``kid(b, a)`` bit-identical.  Remainder vectors
    beyond the last full block are dropped and reported in ``dropped``.
    """
    if a.d != b.d:
        raise KidError(f"feature dimensions differ: {a.d} vs {b.d}")
    if block_size < 2:
        raise KidError("block_size must be >= 2")
    if _digest(b.vectors) < _digest(a.vectors):
        a, b = b, a
    blocks = min(a.n, b.n) // block_size
    if blocks < 1:
        raise KidError(f"need at least one full block of {block_size} vectors in each set "
                       f"(have {a.n} and {b.n})")
    xa = a.vectors[_permutation(seed, a.n)]
    xb = np.roll(b.vectors[_permutation(seed, b.n)], -(b.n // 2), axis=0)
    values = []
    for k in range(blocks):
        sl = slice(k * block_size, (k + 1) * block_size)
        values.append(mmd2_unbiased(xa[sl], xb[sl]))
    mean = math.fsum(values) / blocks
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (blocks - 1)) if blocks > 1 else 0.0
    return KidResult(mean, std, blocks, values, (a.n - blocks * block_size, b.n - blocks * block_size))


def load_features(path, source_name: str = "") -> FeatureSet:
    path = Path(path)
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except ValueError as exc:
        raise KidError(f"{path}: {exc}") from None
    return FeatureSet(arr, source_name or path.stem)


def format_result(res: KidResult) -> str:
    return f"kid_mean={res.mean!r} kid_std={res.std!r} blocks={res.blocks}\n"
