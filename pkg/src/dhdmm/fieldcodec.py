"""Fixed-point encoding of real measurement vectors into a prime field.

Clients scale by gamma, floor to integers, add integer noise, and reduce
mod p; sums in the field equal sums of the signed integers as long as the
aggregate stays inside (-(p-1)/2, (p-1)/2], which decode maps back to the
reals. Wire format is a little-endian u32 length prefix followed by one
little-endian u64 per element.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .dpnoise import PrivacyParams, per_client_variance, sample_discrete_gaussian
from .errors import DimensionError, RangeOverflow

DEFAULT_PRIME = (1 << 61) - 1  # Mersenne, fits uint64 sums without overflow

_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    # deterministic Miller-Rabin for n < 3.3e24 with the fixed witness set
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % small == 0:
            return n == small
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Prime modulus for encoded vectors; must leave headroom in uint64."""

    p: int = DEFAULT_PRIME

    def __post_init__(self):
        if not (2 < self.p < (1 << 63)):
            raise ValueError("prime must satisfy 2 < p < 2**63")
        if not _is_prime(self.p):
            raise ValueError(f"{self.p} is not prime")

    @property
    def half(self) -> int:
        return (self.p - 1) // 2


@dataclass(frozen=True)
class EncodedVector:
    """Vector of field elements in [0, p)."""

    values: np.ndarray
    field: FieldParams

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.uint64))
        if v.ndim != 1:
            raise DimensionError("encoded vector must be one-dimensional")
        if v.size and int(v.max()) >= self.field.p:
            raise ValueError("encoded values must be < p")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.values.size) + self.values.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, field: FieldParams) -> "EncodedVector":
        if len(data) < 4:
            raise ValueError("truncated encoded vector")
        (count,) = struct.unpack_from("<I", data, 0)
        need = 4 + 8 * count
        if len(data) != need:
            raise ValueError(f"encoded vector length mismatch: {len(data)} != {need}")
        values = np.frombuffer(data, dtype="<u8", offset=4).astype(np.uint64)
        return cls(values, field)


def encode(
    v: np.ndarray,
    fp: FieldParams,
    priv: PrivacyParams,
    rng=None,
    noise_disabled: bool = False,
) -> EncodedVector:
    """Scale, floor, add discrete Gaussian noise, reduce mod p.

    Raises RangeOverflow if any noisy integer leaves [-(p-1)/2, (p-1)/2].
    """
    vec = np.asarray(v, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionError("encode expects a one-dimensional vector")
    scaled = np.floor(priv.gamma * vec)
    if not np.all(np.isfinite(scaled)):
        raise RangeOverflow("non-finite value after scaling")
    w = scaled.astype(np.int64)
    sigma2 = per_client_variance(priv) if not noise_disabled else 0.0
    if sigma2 > 0.0:
        w = w + sample_discrete_gaussian(sigma2, rng, size=vec.size)
    if w.size and int(np.abs(w).max()) > fp.half:
        raise RangeOverflow(
            f"encoded magnitude {int(np.abs(w).max())} exceeds (p-1)/2 = {fp.half}"
        )
    out = np.where(w < 0, w + fp.p, w).astype(np.uint64)
    return EncodedVector(out, fp)


def field_add(a: EncodedVector, b: EncodedVector) -> EncodedVector:
    """Componentwise sum mod p."""
    if a.field != b.field:
        raise ValueError("cannot add vectors over different fields")
    if len(a) != len(b):
        raise DimensionError("encoded vectors differ in length")
    p = np.uint64(a.field.p)
    s = a.values + b.values  # < 2p < 2**64 by the FieldParams bound
    return EncodedVector(np.where(s >= p, s - p, s), a.field)


def decode_ints(ev: EncodedVector) -> np.ndarray:
    """Centered representative of each element: x if x <= (p-1)/2 else x - p."""
    half = np.uint64(ev.field.half)
    p = np.int64(ev.field.p)
    signed = ev.values.astype(np.int64)
    return np.where(ev.values <= half, signed, signed - p)


def decode(ev: EncodedVector, gamma: float) -> np.ndarray:
    """Back to the reals: centered integers divided by gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return decode_ints(ev).astype(np.float64) / gamma


def check_field_capacity(
    fp: FieldParams,
    n: int,
    gamma: float,
    v_max: float,
    sigma2: float,
    k: int,
) -> None:
    """Preflight: p must exceed 2 n (gamma v_max + 12 sqrt(sigma2) sqrt(k)).

    The 12-sigma term covers the noise tails of all k aggregated coordinates
    with margin; raises RangeOverflow when the field is too small.
    """
    need = 2.0 * n * (gamma * v_max + 12.0 * math.sqrt(sigma2) * math.sqrt(max(k, 1)))
    if fp.p <= need:
        raise RangeOverflow(
            f"field too small: p = {fp.p} <= {need:.3e} required for n={n}, gamma={gamma}"
        )
