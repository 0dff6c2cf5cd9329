import numpy as np
import pytest
from scipy import stats

from dhdmm.crypto import derive_seed, get_suite, prg_expand
from dhdmm.fieldcodec import DEFAULT_PRIME

SUITES = ["fast", "real"]


@pytest.mark.parametrize("name", SUITES)
class TestSuites:
    def test_agreement_is_symmetric(self, name):
        suite = get_suite(name)
        sk_a, pk_a = suite.keypair(b"a" * 32)
        sk_b, pk_b = suite.keypair(b"b" * 32)
        s_ab = suite.agree(sk_a, pk_a, pk_b)
        s_ba = suite.agree(sk_b, pk_b, pk_a)
        assert s_ab == s_ba
        assert len(s_ab) == 32
        sk_c, pk_c = suite.keypair(b"c" * 32)
        assert suite.agree(sk_a, pk_a, pk_c) != s_ab

    def test_sign_verify_roundtrip(self, name):
        suite = get_suite(name)
        sk, pk = suite.signing_keypair(b"s" * 32)
        msg = b"round 2 masked input"
        sig = suite.sign(sk, msg)
        assert len(sig) == 64
        assert suite.verify(pk, msg, sig)
        assert not suite.verify(pk, msg + b"!", sig)
        tampered = bytes([sig[0] ^ 1]) + sig[1:]
        assert not suite.verify(pk, msg, tampered)

    def test_seal_open_roundtrip_and_tamper(self, name):
        suite = get_suite(name)
        key = derive_seed(b"k")
        blob = suite.seal(key, b"share bundle payload", b"aad|1|2")
        assert suite.open(key, blob, b"aad|1|2") == b"share bundle payload"
        bad = bytes([blob[0] ^ 0xFF]) + blob[1:]
        with pytest.raises(ValueError):
            suite.open(key, bad, b"aad|1|2")
        with pytest.raises(ValueError):
            suite.open(key, blob, b"aad|1|3")

    def test_keypairs_deterministic_from_seed(self, name):
        suite = get_suite(name)
        assert suite.keypair(b"x" * 32)[1] == suite.keypair(b"x" * 32)[1]
        assert suite.signing_keypair(b"x" * 32)[1] == suite.signing_keypair(b"x" * 32)[1]


class TestPrg:
    def test_deterministic_and_seed_separated(self):
        a = prg_expand(b"\x01" * 32, 64, DEFAULT_PRIME)
        b = prg_expand(b"\x01" * 32, 64, DEFAULT_PRIME)
        c = prg_expand(b"\x02" * 32, 64, DEFAULT_PRIME)
        assert (a == b).all()
        assert not (a == c).all()
        assert int(a.max()) < DEFAULT_PRIME

    def test_prefix_stability(self):
        long = prg_expand(b"\x07" * 32, 128, DEFAULT_PRIME)
        short = prg_expand(b"\x07" * 32, 32, DEFAULT_PRIME)
        assert (long[:32] == short).all()

    def test_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            prg_expand(b"short", 4, DEFAULT_PRIME)

    def test_small_field_uniformity(self):
        # exact rejection sampling: all residues equally likely
        draws = prg_expand(b"\x09" * 32, 200_000, 17)
        counts = np.bincount(draws.astype(np.int64), minlength=17)
        _, pval = stats.chisquare(counts)
        assert pval > 0.001

    def test_large_field_uniformity(self):
        draws = prg_expand(b"\x0a" * 32, 50_000, DEFAULT_PRIME)
        u = draws.astype(np.float64) / DEFAULT_PRIME
        _, pval = stats.kstest(u, "uniform")
        assert pval > 0.001

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError):
            get_suite("nope")
