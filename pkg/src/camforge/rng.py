"""Counter-based random numbers for order-independent sensor noise.

Every pixel draws its noise from a Philox4x64-10 block keyed by the frame
seed and addressed by ``(pixel_index, attempt, stream)``.  Nothing depends
on the order pixels are visited, so a frame is bit-identical whether it is
generated in one vectorized call, in tiles, or across processes.

The block function matches ``numpy.random.Philox`` (which increments its
counter before encrypting), and the tests use that generator as an oracle.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ROUNDS = 10

STREAM_SHOT = 0
STREAM_READ = 1


def _mulhilo(a: np.ndarray, m: np.uint64) -> tuple[np.ndarray, np.ndarray]:
    """64x64 -> 128-bit product of ``a`` and constant ``m`` as (hi, lo)."""
    m_lo = m & _LO32
    m_hi = m >> _S32
    a_lo = a & _LO32
    a_hi = a >> _S32
    ll = a_lo * m_lo
    hl = a_hi * m_lo
    lh = a_lo * m_hi
    hh = a_hi * m_hi
    cross = (ll >> _S32) + (hl & _LO32) + (lh & _LO32)
    hi = hh + (hl >> _S32) + (lh >> _S32) + (cross >> _S32)
    lo = a * m
    return hi, lo


def philox4x64(counter, key) -> np.ndarray:
    """Encrypt counter blocks with Philox4x64-10.

    Args:
        counter: sequence of four uint64 arrays (broadcastable), the words
            of the 256-bit counter.
        key: two uint64 scalars.

    Returns:
        Array of shape ``(4, *broadcast_shape)`` with the output words.
    """
    with np.errstate(over="ignore"):
        c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in counter))
        c0, c1, c2, c3 = (c.copy() for c in (c0, c1, c2, c3))
        k0 = np.uint64(key[0])
        k1 = np.uint64(key[1])
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(c0, _M0)
            hi1, lo1 = _mulhilo(c2, _M1)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3])


def _to_unit(words: np.ndarray) -> np.ndarray:
    # 53-bit mantissa at bin centres: strictly inside (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def uniforms(seed: int, index: np.ndarray, stream: int, attempt=0) -> np.ndarray:
    """Four uniforms in (0, 1) per index; result shape ``(4, *index.shape)``."""
    idx = np.asarray(index, dtype=np.uint64)
    words = philox4x64((idx, np.uint64(attempt), np.uint64(stream), np.uint64(0)),
                       (seed & 0xFFFFFFFFFFFFFFFF, 0))
    return _to_unit(words)


def standard_normal(seed: int, index: np.ndarray, stream: int = STREAM_READ) -> np.ndarray:
    """One N(0, 1) draw per index via the inverse normal CDF."""
    u = uniforms(seed, index, stream)[0]
    return special.ndtri(u)


_SMALL_LAM = 10.0


def _poisson_inversion(lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = np.zeros(lam.shape, dtype=np.float64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    # lam < 10: the cdf is within 1 ulp of 1 well before k = 80
    for step in range(1, 80):
        if not active.any():
            break
        p = np.where(active, p * lam / step, p)
        k = np.where(active, step, k)
        cdf = np.where(active, cdf + p, cdf)
        active &= u > cdf
    return k


def _poisson_ptrs(seed: int, index: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Hoermann's transformed rejection (PTRS), valid for lam >= 10."""
    out = np.empty(lam.shape, dtype=np.float64)
    pending = np.arange(lam.size)
    attempt = 0
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while pending.size:
        blk = uniforms(seed, index[pending], STREAM_SHOT, attempt)
        # two proposals per block
        for j in (0, 2):
            if not pending.size:
                break
            uu = blk[j] - 0.5
            vv = blk[j + 1]
            us = 0.5 - np.abs(uu)
            la, aa, bb = lam[pending], a[pending], b[pending]
            k = np.floor((2.0 * aa / us + bb) * uu + la + 0.43)
            quick = (us >= 0.07) & (vv <= vr[pending])
            bad = (k < 0) | ((us < 0.013) & (vv > us))
            with np.errstate(divide="ignore", invalid="ignore"):
                lhs = np.log(vv) + np.log(invalpha[pending]) - np.log(aa / (us * us) + bb)
                rhs = -la + k * loglam[pending] - special.gammaln(k + 1.0)
            accept = quick | (~bad & (lhs <= rhs))
            out[pending[accept]] = k[accept]
            keep = ~accept
            pending = pending[keep]
            blk = blk[:, keep]
        attempt += 1
    return out


def poisson(seed: int, index: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """One Poisson(lam) draw per index, exact in distribution.

    Small means use CDF inversion on a single uniform; means >= 10 use PTRS
    rejection, where rejected pixels retry on the next ``attempt`` counter.
    """
    lam = np.asarray(lam, dtype=np.float64)
    index = np.asarray(index, dtype=np.uint64)
    out = np.zeros(lam.shape, dtype=np.float64)
    small = (lam > 0) & (lam < _SMALL_LAM)
    if small.any():
        u = uniforms(seed, index[small], STREAM_SHOT)[0]
        out[small] = _poisson_inversion(lam[small], u)
    large = lam >= _SMALL_LAM
    if large.any():
        out[large] = _poisson_ptrs(seed, index[large], lam[large])
    return out
