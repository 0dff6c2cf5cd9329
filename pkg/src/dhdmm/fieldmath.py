"""Vectorized arithmetic mod p for secret sharing.

The default modulus 2**61 - 1 is Mersenne, so a 122-bit product folds back
with shifts and the whole Shamir pipeline stays in uint64 numpy. Other primes
fall back to exact Python integers (correct, slower, fine for small tests).
"""

from __future__ import annotations

import numpy as np

MERSENNE61 = (1 << 61) - 1
_M61 = np.uint64(MERSENNE61)
_MASK31 = np.uint64((1 << 31) - 1)
_MASK30 = np.uint64((1 << 30) - 1)
_MASK61 = np.uint64((1 << 61) - 1)


def _reduce61(x: np.ndarray) -> np.ndarray:
    # x < 2**64; fold twice since 2**61 == 1 (mod p)
    x = (x >> np.uint64(61)) + (x & _MASK61)
    x = (x >> np.uint64(61)) + (x & _MASK61)
    return np.where(x >= _M61, x - _M61, x)


def _mulmod61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # split into 31/30-bit halves; every partial product stays below 2**64,
    # and the shifted recombination stays below 2**63, so one final fold
    # suffices
    a_hi = a >> np.uint64(31)  # < 2**30
    a_lo = a & _MASK31
    b_hi = b >> np.uint64(31)
    b_lo = b & _MASK31
    hh = a_hi * b_hi  # < 2**60, carries 2**62 == 2 (mod p)
    mid = a_hi * b_lo + a_lo * b_hi  # < 2**62, carries 2**31
    ll = a_lo * b_lo  # < 2**62
    # mid * 2**31 == (mid >> 30) + (mid & MASK30) << 31 since 2**61 == 1
    high = (hh << np.uint64(1)) + (mid >> np.uint64(30)) + (ll >> np.uint64(61))
    low = ((mid & _MASK30) << np.uint64(31)) + (ll & _MASK61)
    return _reduce61(high + low)


def mulmod_vec(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    """Elementwise a * b mod p on uint64 arrays (broadcasting allowed)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if p == MERSENNE61:
        return _mulmod61(a, b)
    if p <= (1 << 31):
        return (a * b) % np.uint64(p)  # products < 2**62
    # exact fallback for unusual primes
    out = np.empty(np.broadcast(a, b).shape, dtype=np.uint64)
    flat = out.reshape(-1)
    aa = np.broadcast_to(a, out.shape).reshape(-1)
    bb = np.broadcast_to(b, out.shape).reshape(-1)
    for i in range(flat.size):
        flat[i] = int(aa[i]) * int(bb[i]) % p
    return out


def addmod_vec(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    s = np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)
    pp = np.uint64(p)
    return np.where(s >= pp, s - pp, s)


def submod_vec(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    pp = np.uint64(p)
    return np.where(a >= b, a - b, a + pp - b)


def inv_mod(x: int, p: int) -> int:
    """Multiplicative inverse by Fermat: x**(p-2) mod p."""
    x %= p
    if x == 0:
        raise ZeroDivisionError("no inverse of 0")
    return pow(x, p - 2, p)


def horner_batch(coeffs: np.ndarray, xs: np.ndarray, p: int) -> np.ndarray:
    """Evaluate many polynomials at many points.

    coeffs has shape (..., t) with coeffs[..., 0] the constant term; xs
    broadcasts against coeffs[..., 0]. Returns the evaluations mod p.
    """
    coeffs = np.asarray(coeffs, dtype=np.uint64)
    xs = np.asarray(xs, dtype=np.uint64)
    t = coeffs.shape[-1]
    acc = np.broadcast_to(coeffs[..., t - 1], np.broadcast(coeffs[..., 0], xs).shape).copy()
    for k in range(t - 2, -1, -1):
        acc = addmod_vec(mulmod_vec(acc, xs, p), coeffs[..., k], p)
    return acc


def lagrange_weights_at_zero(xs: tuple[int, ...], p: int) -> np.ndarray:
    """Interpolation weights w_j with f(0) = sum_j w_j f(x_j), x_j distinct."""
    k = len(xs)
    ws = np.empty(k, dtype=np.uint64)
    for j, xj in enumerate(xs):
        num, den = 1, 1
        for l, xl in enumerate(xs):
            if l == j:
                continue
            num = num * xl % p
            den = den * ((xl - xj) % p) % p
        ws[j] = num * inv_mod(den, p) % p
    return ws


def uniform_field_elements(stream, count: int, p: int) -> np.ndarray:
    """Rejection-sample count uniform elements of [0, p) from a byte stream.

    stream(nbytes) must return that many fresh pseudorandom bytes per call.
    """
    limit = (1 << 64) // p * p  # accept below this, no modulo bias
    out = np.empty(count, dtype=np.uint64)
    have = 0
    need = count
    while have < count:
        raw = np.frombuffer(stream(8 * (need + 8)), dtype="<u8")
        good = raw[raw < np.uint64(limit)] % np.uint64(p)
        take = min(good.size, count - have)
        out[have : have + take] = good[:take]
        have += take
        need = count - have
    return out
