import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhdmm.dpnoise import PrivacyParams
from dhdmm.errors import DimensionError, RangeOverflow
from dhdmm.fieldcodec import (
    DEFAULT_PRIME,
    EncodedVector,
    FieldParams,
    check_field_capacity,
    decode,
    decode_ints,
    encode,
    field_add,
)

FP = FieldParams()
NOISELESS = PrivacyParams(rho=1.0, n=1, gamma=4.0, delta2=1.0)


def ev(values, fp=FP):
    return EncodedVector(np.asarray(values, dtype=np.uint64), fp)


class TestFieldParams:
    def test_default_is_mersenne(self):
        assert FP.p == 2**61 - 1
        assert DEFAULT_PRIME == 2**61 - 1

    @pytest.mark.parametrize("bad", [4, 9, 2**61, 1, 0, 2, 15, 2**63 + 11])
    def test_rejects_nonprime_or_oversized(self, bad):
        with pytest.raises(ValueError):
            FieldParams(bad)

    @pytest.mark.parametrize("good", [3, 97, 2**31 - 1, 2**61 - 1])
    def test_accepts_primes(self, good):
        assert FieldParams(good).p == good


class TestEncodeDecode:
    def test_reference_encoding(self):
        out = encode(np.array([1.5, -2.25]), FP, NOISELESS, noise_disabled=True)
        assert out.values.tolist() == [6, FP.p - 9]

    def test_reference_decoding(self):
        assert decode(ev([FP.p - 9]), gamma=4.0).tolist() == [-2.25]
        assert decode(ev([6]), gamma=4.0).tolist() == [1.5]

    def test_floor_is_mathematical(self):
        # floor toward -inf, not toward zero
        out = encode(np.array([-0.1]), FP, NOISELESS, noise_disabled=True)
        assert decode_ints(out).tolist() == [-1]

    def test_range_overflow(self):
        small = FieldParams(97)
        with pytest.raises(RangeOverflow):
            encode(np.array([100.0]), small, NOISELESS, noise_disabled=True)

    def test_noise_changes_values_and_is_seeded(self):
        priv = PrivacyParams(rho=0.5, n=1, gamma=10.0, delta2=1.0)
        a = encode(np.array([1.0, 2.0, 3.0]), FP, priv, rng=random.Random(8))
        b = encode(np.array([1.0, 2.0, 3.0]), FP, priv, rng=random.Random(8))
        assert (a.values == b.values).all()
        clean = encode(np.array([1.0, 2.0, 3.0]), FP, priv, noise_disabled=True)
        assert not (a.values == clean.values).all()

    @given(st.lists(st.integers(-48, 48), min_size=1, max_size=12))
    def test_centered_roundtrip_small_prime(self, ints):
        fp = FieldParams(97)
        vals = np.asarray([v % 97 for v in ints], dtype=np.uint64)
        centered = decode_ints(EncodedVector(vals, fp))
        assert ((centered - np.asarray(ints)) % 97 == 0).all()
        assert (np.abs(centered) <= 48).all()

    @given(
        st.lists(st.integers(-1000, 1000), min_size=1, max_size=8),
        st.lists(st.integers(-1000, 1000), min_size=1, max_size=8),
    )
    @settings(deadline=None)
    def test_field_add_is_integer_sum(self, xs, ys):
        n = min(len(xs), len(ys))
        xs, ys = xs[:n], ys[:n]
        a = ev([v % FP.p for v in xs])
        b = ev([v % FP.p for v in ys])
        total = decode_ints(field_add(a, b))
        assert total.tolist() == [x + y for x, y in zip(xs, ys)]

    def test_field_add_checks(self):
        with pytest.raises(DimensionError):
            field_add(ev([1, 2]), ev([1]))
        with pytest.raises(ValueError):
            field_add(ev([1]), ev([1], FieldParams(97)))

    def test_add_near_modulus_wraps(self):
        a = ev([FP.p - 1])
        b = ev([5])
        assert field_add(a, b).values.tolist() == [4]


class TestWireFormat:
    @given(st.lists(st.integers(0, FP.p - 1), max_size=20))
    @settings(deadline=None)
    def test_roundtrip(self, vals):
        v = ev(vals)
        back = EncodedVector.from_bytes(v.to_bytes(), FP)
        assert (back.values == v.values).all()

    def test_layout_is_le_u64_with_u32_prefix(self):
        blob = ev([1, 2**40]).to_bytes()
        assert blob[:4] == (2).to_bytes(4, "little")
        assert blob[4:12] == (1).to_bytes(8, "little")
        assert blob[12:20] == (2**40).to_bytes(8, "little")

    @pytest.mark.parametrize("blob", [b"", b"\x01\x00\x00", b"\x02\x00\x00\x00" + b"\x00" * 8])
    def test_malformed_rejected(self, blob):
        with pytest.raises(ValueError):
            EncodedVector.from_bytes(blob, FP)


class TestCapacityCheck:
    def test_default_prime_has_headroom(self):
        check_field_capacity(FP, n=5000, gamma=1000.0, v_max=1000.0, sigma2=1000.0, k=4096)

    def test_small_prime_rejected(self):
        with pytest.raises(RangeOverflow):
            check_field_capacity(FieldParams(2**31 - 1), n=5000, gamma=1000.0, v_max=1000.0, sigma2=1000.0, k=4096)
