"""Pluggable cryptography for secure aggregation.

Two interchangeable suites sit behind the same interface: "real" uses X25519
key agreement, Ed25519 signatures, and ChaCha20-Poly1305 share encryption;
"fast" replaces them with hash and MAC constructions that are deterministic
and cheap, for large simulations and fault-injection tests. The mask PRG is
SHAKE256 in both suites. Neither suite changes any message flow or size:
signatures are 64 bytes and seeds 32 bytes everywhere.
"""

from __future__ import annotations

import hashlib
import hmac
import struct

import numpy as np

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .fieldmath import uniform_field_elements

SEED_BYTES = 32
SIGNATURE_BYTES = 64


def prg_expand(seed: bytes, count: int, p: int) -> np.ndarray:
    """Deterministic expansion of a 32-byte seed into count field elements."""
    if len(seed) != SEED_BYTES:
        raise ValueError("PRG seed must be 32 bytes")
    counter = [0]

    def stream(nbytes: int) -> bytes:
        block = hashlib.shake_256(seed + struct.pack("<Q", counter[0])).digest(nbytes)
        counter[0] += 1
        return block

    return uniform_field_elements(stream, count, p)


def derive_seed(*parts: bytes) -> bytes:
    """32-byte domain-separated derivation used for per-client randomness."""
    h = hashlib.sha256()
    for part in parts:
        h.update(struct.pack("<I", len(part)))
        h.update(part)
    return h.digest()


class FastSuite:
    """Hash-based stand-in: deterministic, unkeyed-PKI, not secure, same shapes."""

    name = "fast"

    def keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = derive_seed(b"fast-ka-sk", seed)
        pk = derive_seed(b"fast-ka-pk", sk)
        return sk, pk

    def agree(self, sk: bytes, pk_self: bytes, pk_other: bytes) -> bytes:
        lo, hi = sorted((pk_self, pk_other))
        return derive_seed(b"fast-ka-shared", lo, hi)

    def signing_keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = derive_seed(b"fast-sig-sk", seed)
        return sk, sk  # MAC key doubles as the public verification key

    def sign(self, sk: bytes, message: bytes) -> bytes:
        return hmac.new(sk, message, hashlib.sha512).digest()

    def verify(self, pk: bytes, message: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(self.sign(pk, message), sig)

    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> bytes:
        pad = hashlib.shake_256(key + b"fast-seal" + aad).digest(len(plaintext))
        ct = bytes(a ^ b for a, b in zip(plaintext, pad))
        tag = hmac.new(key, aad + ct, hashlib.sha256).digest()[:16]
        return ct + tag

    def open(self, key: bytes, blob: bytes, aad: bytes) -> bytes:
        if len(blob) < 16:
            raise ValueError("sealed blob too short")
        ct, tag = blob[:-16], blob[-16:]
        expect = hmac.new(key, aad + ct, hashlib.sha256).digest()[:16]
        if not hmac.compare_digest(expect, tag):
            raise ValueError("share bundle failed authentication")
        pad = hashlib.shake_256(key + b"fast-seal" + aad).digest(len(ct))
        return bytes(a ^ b for a, b in zip(ct, pad))


class RealSuite:
    """X25519 + Ed25519 + ChaCha20-Poly1305, keys derived from 32-byte seeds."""

    name = "real"

    def keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = X25519PrivateKey.from_private_bytes(derive_seed(b"real-ka", seed))
        pk = sk.public_key().public_bytes_raw()
        return sk.private_bytes_raw(), pk

    def agree(self, sk: bytes, pk_self: bytes, pk_other: bytes) -> bytes:
        raw = X25519PrivateKey.from_private_bytes(sk).exchange(
            X25519PublicKey.from_public_bytes(pk_other)
        )
        lo, hi = sorted((pk_self, pk_other))
        return derive_seed(b"real-ka-kdf", raw, lo, hi)

    def signing_keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = Ed25519PrivateKey.from_private_bytes(derive_seed(b"real-sig", seed))
        return sk.private_bytes_raw(), sk.public_key().public_bytes_raw()

    def sign(self, sk: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(sk).sign(message)

    def verify(self, pk: bytes, message: bytes, sig: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(pk).verify(sig, message)
            return True
        except InvalidSignature:
            return False

    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> bytes:
        nonce = derive_seed(b"real-nonce", key, aad)[:12]  # one bundle per (key, aad)
        return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)

    def open(self, key: bytes, blob: bytes, aad: bytes) -> bytes:
        nonce = derive_seed(b"real-nonce", key, aad)[:12]
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, blob, aad)
        except InvalidTag as exc:
            raise ValueError("share bundle failed authentication") from exc


_SUITES = {"fast": FastSuite(), "real": RealSuite()}


def get_suite(name: str):
    try:
        return _SUITES[name]
    except KeyError:
        raise ValueError(f"unknown crypto suite {name!r} (choose from {sorted(_SUITES)})")
