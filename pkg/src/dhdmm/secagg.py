"""Single-server secure aggregation with pairwise masks over a sparse graph.

Each client talks to a logarithmic set of neighbours. Round A establishes
pairwise seeds and threshold-shares every seed; round B submits the masked
input x_i + PRG(b_i) + sum_{j>i} PRG(s_ij) - sum_{j<i} PRG(s_ij); round C
recovers self-mask seeds of clients whose input arrived and pairwise seeds
of clients whose input did not, so the server learns exactly the sum over
the survivor set and nothing else.

This module holds the protocol math and a fast in-process driver
(run_aggregation / AggSession) whose round-A state can be reused across many
(input, dropout) scenarios. The message-level choreography over the network
simulator lives in the protocol module and derives identical per-client
randomness, so both drivers produce identical sums for the same seed.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .crypto import SEED_BYTES, derive_seed, get_suite, prg_expand
from .errors import (
    AbortBadSignature,
    AbortInconsistentView,
    AbortInsufficientShares,
    DimensionError,
    RecoveryFailure,
)
from .fieldcodec import EncodedVector, FieldParams
from .fieldmath import (
    addmod_vec,
    horner_batch,
    lagrange_weights_at_zero,
    mulmod_vec,
    submod_vec,
    uniform_field_elements,
)
from .simnet import (
    HEADER,
    SERVER_ID,
    SIGNATURE_BYTES,
    Envelope,
    EventLoop,
    NetConfig,
    Party,
)

# a client scheduled to drop at a phase completes everything before it and
# sends nothing from that phase on
PHASES = ("keys", "shares", "masked", "unmask")
_PHASE_RANK = {name: i for i, name in enumerate(PHASES)}
_ALIVE = len(PHASES)

MODES = ("semi-honest", "malicious")


@dataclass(frozen=True)
class AggConfig:
    """Roster shape and security knobs for one aggregation session."""

    n: int
    vector_len: int
    field: FieldParams = field(default_factory=FieldParams)
    mode: str = "semi-honest"
    k_neighbors: int | None = None  # None: ceil(c_neighbors * log2(n)), min 3
    c_neighbors: float = 4.0
    threshold: int | None = None  # None: floor(degree / 2) + 1
    max_dropout_fraction: float = 1 / 3
    seed: int = 0
    suite: str = "fast"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one client")
        if self.vector_len < 1:
            raise ValueError("vector_len must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.c_neighbors <= 0:
            raise ValueError("c_neighbors must be positive")
        if not 0.0 <= self.max_dropout_fraction < 1.0:
            raise ValueError("max_dropout_fraction must be in [0, 1)")
        if self.k_neighbors is not None and self.n > 1:
            if not 1 <= self.k_neighbors < self.n:
                raise ValueError("k_neighbors must satisfy 1 <= k < n")
        get_suite(self.suite)
        self.threshold_value()

    def degree(self) -> int:
        if self.n <= 1:
            return 0
        k = self.k_neighbors
        if k is None:
            k = min(max(3, math.ceil(self.c_neighbors * math.log2(self.n))), self.n - 1)
        if (self.n * k) % 2:
            # no k-regular graph on n vertices exists when n*k is odd
            k = k + 1 if k + 1 <= self.n - 1 else k - 1
        return k

    def threshold_value(self) -> int:
        k = self.degree()
        if k == 0:
            return 0
        t = self.threshold if self.threshold is not None else k // 2 + 1
        if not (k // 2 < t <= k):
            raise ValueError(f"threshold {t} outside ({k // 2}, {k}]")
        return t

    def max_dropouts(self) -> int:
        return int(self.max_dropout_fraction * self.n + 1e-9)


@dataclass
class AggTranscript:
    """What the server saw: survivor partition and recovery effort.

    Message-level runs also attach the RunMetrics with per-party byte counts;
    the in-process driver leaves metrics as None.
    """

    included: list[int]
    excluded: list[int]
    dropouts: dict[int, str]
    recovered_self: int
    recovered_pairwise: int
    mode: str
    metrics: "object | None" = None


def build_graph(n: int, k_neighbors: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Symmetric connected graph where every client has exactly k_neighbors.

    A circulant skeleton under a random vertex relabelling: chords at offsets
    1..floor(k/2), plus the antipodal matching when k is odd (which needs n
    even; no k-regular graph exists when n*k is odd, so such a degree is
    nudged by one and logged). The offset-1 cycle makes every draw connected,
    but the contract says retry on a disconnected draw, so the loop stays.
    """
    if n <= 1:
        return [np.array([], dtype=np.int64) for _ in range(max(n, 0))]
    k = k_neighbors
    if not 1 <= k < n:
        raise ValueError("need 1 <= k_neighbors < n")
    if (n * k) % 2:
        k = k + 1 if k + 1 <= n - 1 else k - 1
        logging.getLogger(__name__).warning(
            "no %d-regular graph on %d vertices exists; using degree %d",
            k_neighbors, n, k,
        )
    for _ in range(64):
        label = rng.permutation(n)
        adj: list[set[int]] = [set() for _ in range(n)]
        for s in range(1, k // 2 + 1):
            for i in range(n):
                a, b = int(label[i]), int(label[(i + s) % n])
                adj[a].add(b)
                adj[b].add(a)
        if k % 2:
            half = n // 2
            for i in range(half):
                a, b = int(label[i]), int(label[i + half])
                adj[a].add(b)
                adj[b].add(a)
        out = [np.array(sorted(s), dtype=np.int64) for s in adj]
        if graph_is_connected(out):
            return out
    raise RuntimeError("graph construction kept producing disconnected draws")


def graph_is_connected(adjacency: list[np.ndarray]) -> bool:
    n = len(adjacency)
    if n == 0:
        return True
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return bool(seen.all())


# ----------------------------------------------------------------------------
# Shamir sharing over F_p.
# ----------------------------------------------------------------------------


def share_secret(secret: int, t: int, xs, p: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Threshold-t shares of one field element at the given nonzero points."""
    xs = [int(x) for x in xs]
    if not (1 <= t <= len(xs)):
        raise ValueError("need 1 <= t <= number of share points")
    if len(set(xs)) != len(xs) or any(x % p == 0 for x in xs):
        raise ValueError("share points must be distinct and nonzero mod p")
    if not (0 <= secret < p):
        raise ValueError("secret must be a field element")
    coeffs = [secret] + [int(v) for v in rng.integers(0, p, size=t - 1, dtype=np.uint64)]
    out = []
    for x in xs:
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * x + c) % p
        out.append((x, acc))
    return out


def recover_secret(points, t: int, p: int) -> int:
    """Interpolate f(0) from at least t distinct shares; fewer cannot succeed."""
    pts = [(int(x), int(y)) for x, y in points]
    if len({x for x, _ in pts}) != len(pts):
        raise RecoveryFailure("duplicate share points")
    if len(pts) < t:
        raise RecoveryFailure(f"need {t} shares, got {len(pts)}")
    use = pts[:t]
    ws = lagrange_weights_at_zero(tuple(x for x, _ in use), p)
    return int(sum(int(w) * y for w, (_, y) in zip(ws, use)) % p)


def _limb_shape(p: int) -> tuple[int, int]:
    chunk_bits = p.bit_length() - 1
    limbs = -(-8 * SEED_BYTES // chunk_bits)
    return chunk_bits, limbs


def seed_to_limbs(seed: bytes, p: int) -> np.ndarray:
    """Split a 32-byte seed into little-endian limbs, each below p."""
    chunk_bits, limbs = _limb_shape(p)
    value = int.from_bytes(seed, "little")
    mask = (1 << chunk_bits) - 1
    out = np.empty(limbs, dtype=np.uint64)
    for i in range(limbs):
        out[i] = value & mask
        value >>= chunk_bits
    return out


def limbs_to_seed(limbs: np.ndarray, p: int) -> bytes:
    chunk_bits, expect = _limb_shape(p)
    if len(limbs) != expect:
        raise ValueError("wrong limb count for this field")
    value = 0
    for limb in reversed(np.asarray(limbs, dtype=np.uint64)):
        value = (value << chunk_bits) | int(limb)
    return value.to_bytes(SEED_BYTES, "little")


# ----------------------------------------------------------------------------
# Session state: round A precomputed once, rounds B and C replayable.
# ----------------------------------------------------------------------------


def client_seeds(config: AggConfig, cid: int) -> dict[str, bytes]:
    """Per-client deterministic randomness; shared by both protocol drivers."""
    master = derive_seed(b"agg-session", struct.pack("<q", config.seed))
    tag = struct.pack("<I", cid)
    return {
        "ka": derive_seed(b"key-agreement", master, tag),
        "mask": derive_seed(b"self-mask", master, tag),
        "sig": derive_seed(b"signing", master, tag),
        "coeff": derive_seed(b"share-coeffs", master, tag),
    }


def graph_rng(config: AggConfig) -> np.random.Generator:
    master = derive_seed(b"agg-session", struct.pack("<q", config.seed))
    word = int.from_bytes(derive_seed(b"graph", master), "little")
    return np.random.default_rng(word)


def _coeff_stream(seed: bytes):
    counter = [0]

    def stream(nbytes: int) -> bytes:
        import hashlib

        block = hashlib.shake_256(seed + struct.pack("<Q", counter[0])).digest(nbytes)
        counter[0] += 1
        return block

    return stream


class AggSession:
    """Round-A state for a fixed roster: graph, seeds, and distributed shares."""

    def __init__(self, config: AggConfig):
        self.config = config
        self.suite = get_suite(config.suite)
        p = config.field.p
        n = config.n
        self.p = p
        self.k = config.degree()
        self.t = config.threshold_value()
        self.adjacency = build_graph(n, self.k, graph_rng(config))
        self._chunk_bits, self._limbs = _limb_shape(p)

        seeds = [client_seeds(config, i) for i in range(n)]
        keys = [self.suite.keypair(s["ka"]) for s in seeds]
        self.pubkeys = [pk for _, pk in keys]
        self.mask_seed = [s["mask"] for s in seeds]
        self.pair_seed: dict[tuple[int, int], bytes] = {}
        for i in range(n):
            for j in self.adjacency[i]:
                if i < j:
                    self.pair_seed[(i, int(j))] = self.suite.agree(
                        keys[i][0], self.pubkeys[i], self.pubkeys[int(j)]
                    )

        # secret order per owner: self-mask first, then pairwise by neighbour id
        self.secret_index: list[dict] = []
        self.shares: list[np.ndarray] = []  # owner -> (num_secrets, degree, limbs)
        if self.k == 0:
            for i in range(n):
                self.secret_index.append({"self": 0})
                self.shares.append(np.zeros((1, 0, self._limbs), dtype=np.uint64))
        else:
            # the graph is exactly k-regular, so every client's polynomials
            # stack into one evaluation pass; coefficient draws stay
            # per-client so the message-level driver derives identical shares
            s_count = self.k + 1
            limbs = np.empty((n, s_count, self._limbs), dtype=np.uint64)
            coeffs = np.empty((n, s_count, self._limbs, self.t), dtype=np.uint64)
            for i in range(n):
                nbrs = self.adjacency[i]
                secrets = [self.mask_seed[i]] + [
                    self.pair_seed[(min(i, int(j)), max(i, int(j)))] for j in nbrs
                ]
                self.secret_index.append(
                    {"self": 0, **{int(j): 1 + a for a, j in enumerate(nbrs)}}
                )
                limbs[i] = np.stack([seed_to_limbs(s, p) for s in secrets])
                if self.t > 1:
                    rand = uniform_field_elements(
                        _coeff_stream(seeds[i]["coeff"]),
                        s_count * self._limbs * (self.t - 1),
                        p,
                    )
                    coeffs[i, :, :, 1:] = rand.reshape(s_count, self._limbs, self.t - 1)
            coeffs[:, :, :, 0] = limbs
            xs = (np.stack(self.adjacency) + 1).astype(np.uint64)  # holder j at point j + 1
            evals = horner_batch(coeffs[:, :, :, None, :], xs[:, None, None, :], p)
            self.shares = [np.transpose(evals[i], (0, 2, 1)) for i in range(n)]  # (S, deg, L)

        self._nbr_pos = [
            {int(j): a for a, j in enumerate(self.adjacency[i])} for i in range(n)
        ]
        edges = sorted(self.pair_seed)
        self._edge_a = np.array([a for a, _ in edges], dtype=np.int64)
        self._edge_b = np.array([b for _, b in edges], dtype=np.int64)
        self._edge_seeds = [self.pair_seed[e] for e in edges]
        self._prg_cache: dict[bytes, np.ndarray] = {}
        self._weight_cache: dict[tuple[int, ...], np.ndarray] = {}
        # a recovered seed is a pure function of round-A state, so it can be
        # cached across dropout scenarios; the per-scenario threshold check
        # still runs every time
        self._seed_cache: dict[tuple[int, int], bytes] = {}

    # -- mask material ------------------------------------------------------

    def _prg(self, seed: bytes) -> np.ndarray:
        out = self._prg_cache.get(seed)
        if out is None:
            out = prg_expand(seed, self.config.vector_len, self.p)
            if len(self._prg_cache) > 200_000:
                self._prg_cache.clear()
            self._prg_cache[seed] = out
        return out

    def masked_vector(self, cid: int, x: np.ndarray, mask_set) -> np.ndarray:
        """Round-B payload for one client masking against the given neighbours."""
        y = addmod_vec(np.asarray(x, dtype=np.uint64), self._prg(self.mask_seed[cid]), self.p)
        for j in mask_set:
            j = int(j)
            if j == cid:
                continue
            mask = self._prg(self.pair_seed[(min(cid, j), max(cid, j))])
            if j > cid:
                y = addmod_vec(y, mask, self.p)
            else:
                y = submod_vec(y, mask, self.p)
        return y

    # -- rounds B and C for a dropout scenario ------------------------------

    def aggregate(
        self,
        inputs,
        dropouts: dict[int, str] | None = None,
        enforce_budget: bool = True,
    ) -> tuple[EncodedVector, AggTranscript]:
        """Run masking and unmasking; returns the survivor sum and transcript.

        inputs is a (n, vector_len) uint64 array or a list of EncodedVector.
        dropouts maps client id to the phase before which it goes silent.
        enforce_budget=False lets a caller that already validated its schedule
        add unscheduled faults past the bound, as real clients would.
        """
        config = self.config
        n = config.n
        p = self.p
        x = self._as_matrix(inputs)
        dropouts = dict(dropouts or {})
        for cid, phase in dropouts.items():
            if not (0 <= cid < n):
                raise ValueError(f"dropout for unknown client {cid}")
            if phase not in _PHASE_RANK:
                raise ValueError(f"unknown dropout phase {phase!r}")
        if enforce_budget and len(dropouts) > config.max_dropouts():
            raise ValueError(
                f"{len(dropouts)} dropouts exceed the configured bound of "
                f"{config.max_dropouts()} (max_dropout_fraction={config.max_dropout_fraction})"
            )
        rank = np.full(n, _ALIVE, dtype=np.int64)
        for cid, phase in dropouts.items():
            rank[cid] = _PHASE_RANK[phase]

        announced = rank >= 2  # completed sharing, so others mask against them
        included = rank >= 3  # masked input arrived
        responders = rank >= 4  # alive to release shares

        if n == 1:
            vec = x[0] if included[0] else np.zeros(config.vector_len, dtype=np.uint64)
            return (
                EncodedVector(vec, config.field),
                AggTranscript(
                    included=[0] if included[0] else [],
                    excluded=[] if included[0] else [0],
                    dropouts=dropouts,
                    recovered_self=0,
                    recovered_pairwise=0,
                    mode=config.mode,
                ),
            )

        inc_ids = np.flatnonzero(included)
        # sum of masked inputs: per-client mask terms collapse to the edges
        # crossing the included/announced boundary
        total = _sum_mod(x[inc_ids], p)
        if inc_ids.size:
            self_rows = np.stack([self._prg(self.mask_seed[int(i)]) for i in inc_ids])
            total = addmod_vec(total, _sum_mod(self_rows, p), p)

        if self._edge_a.size:
            ea, eb = self._edge_a, self._edge_b
            plus_sel = np.flatnonzero(included[ea] & announced[eb] & ~included[eb])
            minus_sel = np.flatnonzero(included[eb] & announced[ea] & ~included[ea])
            if plus_sel.size:
                rows = np.stack([self._prg(self._edge_seeds[i]) for i in plus_sel])
                total = addmod_vec(total, _sum_mod(rows, p), p)
            if minus_sel.size:
                rows = np.stack([self._prg(self._edge_seeds[i]) for i in minus_sel])
                total = submod_vec(total, _sum_mod(rows, p), p)

        # round C: collect the recovery jobs the server must run
        jobs: list[tuple[int, int, int]] = []  # (owner, secret row, sign)
        for i in inc_ids:
            jobs.append((int(i), 0, +1))
        recovered_pairwise = 0
        for i in np.flatnonzero(announced & ~included):
            i = int(i)
            for j in self.adjacency[i]:
                j = int(j)
                if included[j]:
                    sign = +1 if i > j else -1  # sign of s_ij inside y_j
                    jobs.append((i, self.secret_index[i][j], sign))
                    recovered_pairwise += 1

        if jobs:
            unmask = self._recover_masks(jobs, responders)
            total = submod_vec(total, unmask["plus"], p)
            total = addmod_vec(total, unmask["minus"], p)

        transcript = AggTranscript(
            included=[int(i) for i in inc_ids],
            excluded=[int(i) for i in np.flatnonzero(~included)],
            dropouts=dropouts,
            recovered_self=int(included.sum()),
            recovered_pairwise=recovered_pairwise,
            mode=config.mode,
        )
        return EncodedVector(total, config.field), transcript

    def _as_matrix(self, inputs) -> np.ndarray:
        return _inputs_matrix(self.config, inputs)

    def _recover_masks(self, jobs, responders) -> dict[str, np.ndarray]:
        """Check share availability, recover seeds, and re-expand their masks."""
        t = self.t
        # threshold check per owner, in job order so abort attribution is stable
        live_count: dict[int, int] = {}
        for owner, _row, _sign in jobs:
            c = live_count.get(owner)
            if c is None:
                c = int(responders[self.adjacency[owner]].sum())
                live_count[owner] = c
            if c < t:
                raise AbortInsufficientShares(owner, t, c)

        plus_rows, minus_rows = [], []
        missing = []
        for job in jobs:
            seed = self._seed_cache.get(job[:2])
            if seed is None:
                missing.append(job)
            else:
                (plus_rows if job[2] > 0 else minus_rows).append(self._prg(seed))
        if missing:
            for job, seed in zip(missing, self._interpolate(missing, responders)):
                self._seed_cache[job[:2]] = seed
                (plus_rows if job[2] > 0 else minus_rows).append(self._prg(seed))

        L = self.config.vector_len
        p = self.p
        zero = np.zeros(L, dtype=np.uint64)
        plus = _sum_mod(np.stack(plus_rows), p) if plus_rows else zero
        minus = _sum_mod(np.stack(minus_rows), p) if minus_rows else zero
        return {"plus": plus, "minus": minus}

    def _interpolate(self, jobs, responders) -> list[bytes]:
        """Batched Shamir reconstruction of seeds from live neighbours' shares."""
        p = self.p
        t = self.t
        share_mats, weight_rows = [], []
        for owner, row, _sign in jobs:
            nbrs = self.adjacency[owner]
            use = nbrs[responders[nbrs]][:t]  # ids sorted, so the pick is deterministic
            pos = [self._nbr_pos[owner][int(j)] for j in use]
            share_mats.append(self.shares[owner][row][pos])  # (t, limbs)
            xs = tuple(int(j) + 1 for j in use)
            w = self._weight_cache.get(xs)
            if w is None:
                w = lagrange_weights_at_zero(xs, p)
                if len(self._weight_cache) > 100_000:
                    self._weight_cache.clear()
                self._weight_cache[xs] = w
            weight_rows.append(w)

        y = np.stack(share_mats)  # (R, t, limbs)
        w = np.stack(weight_rows)  # (R, t)
        prods = mulmod_vec(y, w[:, :, None], p)
        limbs = prods[:, 0, :]
        for idx in range(1, t):
            limbs = addmod_vec(limbs, prods[:, idx, :], p)
        return [limbs_to_seed(limbs[r], p) for r in range(len(jobs))]


def _inputs_matrix(config: AggConfig, inputs) -> np.ndarray:
    n, L = config.n, config.vector_len
    if isinstance(inputs, np.ndarray):
        x = np.asarray(inputs, dtype=np.uint64)
    else:
        rows = []
        for v in inputs:
            if isinstance(v, EncodedVector):
                if v.field != config.field:
                    raise ValueError("input field mismatch")
                rows.append(v.values)
            else:
                rows.append(np.asarray(v, dtype=np.uint64))
        x = np.stack(rows) if rows else np.zeros((0, L), dtype=np.uint64)
    if x.shape != (n, L):
        raise DimensionError(f"inputs must have shape ({n}, {L}), got {x.shape}")
    if x.size and int(x.max()) >= config.field.p:
        raise ValueError("inputs must be reduced mod p")
    return x


def _sum_mod(rows: np.ndarray, p: int) -> np.ndarray:
    """Sum over axis 0 mod p without uint64 overflow (p < 2**63)."""
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1:], dtype=np.uint64)
    acc = rows
    while acc.shape[0] > 1:
        m = acc.shape[0] // 2
        paired = addmod_vec(acc[:m], acc[m : 2 * m], p)
        if acc.shape[0] % 2:
            paired = np.concatenate([paired, acc[-1:]])
        acc = paired
    return acc[0]


# ----------------------------------------------------------------------------
# Message-level choreography over the network simulator.
#
# Same math as AggSession, but every step travels through envelopes relayed by
# the server, with per-message byte accounting and signatures in malicious
# mode. Client randomness comes from the same client_seeds derivation, so both
# drivers compute the identical survivor sum for the same config.
# ----------------------------------------------------------------------------

TAG_NEIGHBORS = 0x01
TAG_PUBKEY = 0x02
TAG_PUBKEYS = 0x03
TAG_SHARES = 0x04
TAG_SHARES_RELAY = 0x05
TAG_MASKED = 0x06
TAG_SURVIVORS = 0x07
TAG_ECHO = 0x08
TAG_ECHO_RELAY = 0x09
TAG_SHARE_RESPONSE = 0x0A

_U32 = struct.Struct("<I")


def _pack_ids(ids) -> bytes:
    ids = [int(i) for i in ids]
    return _U32.pack(len(ids)) + b"".join(_U32.pack(i) for i in ids)


def _unpack_ids(buf: bytes, off: int) -> tuple[list[int], int]:
    (count,) = _U32.unpack_from(buf, off)
    off += 4
    ids = [_U32.unpack_from(buf, off + 4 * i)[0] for i in range(count)]
    return ids, off + 4 * count


def _pack_limbs(limbs: np.ndarray) -> bytes:
    return np.ascontiguousarray(limbs, dtype="<u8").tobytes()


def _unpack_limbs(buf: bytes, off: int, count: int) -> tuple[np.ndarray, int]:
    arr = np.frombuffer(buf, dtype="<u8", count=count, offset=off).astype(np.uint64)
    return arr, off + 8 * count


def verify_key_roster(config: AggConfig) -> tuple[list[bytes], bytes]:
    """Signature verification keys for all parties, modeling a public PKI.

    Signing keys derive from each party's private seed; the corresponding
    verification keys are assumed to be distributed out of band, so every
    machine gets this roster at construction time rather than over the wire.
    """
    suite = get_suite(config.suite)
    client_vks = [
        suite.signing_keypair(client_seeds(config, i)["sig"])[1] for i in range(config.n)
    ]
    server_master = derive_seed(b"agg-session", struct.pack("<q", config.seed))
    server_vk = suite.signing_keypair(derive_seed(b"server-signing", server_master))[1]
    return client_vks, server_vk


def _server_signing_key(config: AggConfig) -> bytes:
    master = derive_seed(b"agg-session", struct.pack("<q", config.seed))
    return derive_seed(b"server-signing", master)


class AggClientMachine(Party):
    """One client's state machine for the masked-aggregation rounds."""

    def __init__(
        self,
        cid: int,
        config: AggConfig,
        x_input: np.ndarray | None = None,
        drop_phase: str | None = None,
    ):
        super().__init__()
        self.id = cid
        self.config = config
        self.suite = get_suite(config.suite)
        self.signed = config.mode == "malicious"
        if drop_phase is not None and drop_phase not in _PHASE_RANK:
            raise ValueError(f"unknown dropout phase {drop_phase!r}")
        self.drop_phase = drop_phase
        self.x = None if x_input is None else np.asarray(x_input, dtype=np.uint64)
        self.p = config.field.p
        self.t = config.threshold_value()
        self._chunk_bits, self._limbs = _limb_shape(self.p)

        seeds = client_seeds(config, cid)
        self.sk, self.pk = self.suite.keypair(seeds["ka"])
        self.sign_sk, _ = self.suite.signing_keypair(seeds["sig"])
        self.mask_seed = seeds["mask"]
        self._coeff_seed = seeds["coeff"]
        self.client_vks, self.server_vk = verify_key_roster(config)

        self.neighbors: list[int] = []
        self.nbr_pk: dict[int, bytes] = {}
        self.pair_seed_by_nbr: dict[int, bytes] = {}
        self.bundles: dict[int, dict] = {}  # owner -> {"self": limbs, pairs: {l: limbs}}
        self.survivor_payload: bytes | None = None
        self.announced: list[int] = []
        self.included: list[int] = []
        self.faults: list[str] = []

    # -- plumbing ------------------------------------------------------------

    def _die(self, reason: str | None = None) -> list[Envelope]:
        self.dead = True
        if reason:
            self.faults.append(reason)
        return []

    def _send(self, tag: int, payload: bytes) -> Envelope:
        env = Envelope(tag, self.id, SERVER_ID, payload)
        if self.signed:
            self.charge("signature_op", 1)
            env = Envelope(tag, self.id, SERVER_ID, payload, self.suite.sign(self.sign_sk, env.signed_part()))
        return env

    def on_malformed(self, raw: bytes, now: float, err) -> list[Envelope]:
        if self.signed:
            claimed = HEADER.unpack_from(raw)[1] if len(raw) >= HEADER.size else SERVER_ID
            tag = raw[0] if raw else 0
            raise AbortBadSignature(claimed, self.id, tag)
        raise err

    def _verify(self, env: Envelope) -> None:
        if not self.signed:
            return
        self.charge("signature_op", 1)
        if (
            env.receiver != self.id
            or env.sender != SERVER_ID
            or env.signature is None
            or not self.suite.verify(self.server_vk, env.signed_part(), env.signature)
        ):
            raise AbortBadSignature(env.sender, self.id, env.tag)

    def _channel_key(self, other: int) -> bytes:
        return derive_seed(b"share-channel", self.pair_seed_by_nbr[other])

    # -- round handlers --------------------------------------------------------

    def on_message(self, env: Envelope, now: float) -> list[Envelope]:
        self._verify(env)
        if env.tag == TAG_NEIGHBORS:
            return self._on_neighbors(env.payload)
        if env.tag == TAG_PUBKEYS:
            return self._on_pubkeys(env.payload)
        if env.tag == TAG_SHARES_RELAY:
            return self._on_shares_relay(env.payload)
        if env.tag == TAG_SURVIVORS:
            return self._on_survivors(env.payload)
        if env.tag == TAG_ECHO_RELAY:
            return self._on_echo_relay(env.payload)
        raise ValueError(f"client {self.id}: unexpected tag 0x{env.tag:02x}")

    def _on_neighbors(self, payload: bytes) -> list[Envelope]:
        if self.drop_phase == "keys":
            return self._die()
        ids, _ = _unpack_ids(payload, 0)
        self.neighbors = ids
        self.charge("pubkey_op", 1)
        return [self._send(TAG_PUBKEY, self.pk)]

    def _on_pubkeys(self, payload: bytes) -> list[Envelope]:
        off = 0
        (count,) = _U32.unpack_from(payload, off)
        off += 4
        for _ in range(count):
            (j,) = _U32.unpack_from(payload, off)
            off += 4
            pk = payload[off : off + 32]
            off += 32
            self.nbr_pk[j] = pk
            self.charge("pubkey_op", 1)
            self.pair_seed_by_nbr[j] = self.suite.agree(self.sk, self.pk, pk)
        if self.drop_phase == "shares":
            return self._die()
        if not self.neighbors:
            # lone client: no masks to share, nothing to protect against
            return [self._send(TAG_SHARES, _U32.pack(0))]
        alive = sorted(self.nbr_pk)
        if len(alive) < self.t:
            # too few key-holding neighbours to share safely; sit the round out
            return self._die(f"client {self.id}: only {len(alive)} neighbours for threshold {self.t}")
        return [self._send(TAG_SHARES, self._build_share_bundles(alive))]

    def _build_share_bundles(self, holders: list[int]) -> bytes:
        p = self.p
        secrets = [self.mask_seed] + [self.pair_seed_by_nbr[j] for j in holders]
        limb_mat = np.stack([seed_to_limbs(s, p) for s in secrets])  # (S, L)
        s_count, limbs = limb_mat.shape
        coeffs = np.empty((s_count, limbs, self.t), dtype=np.uint64)
        coeffs[:, :, 0] = limb_mat
        if self.t > 1:
            rand = uniform_field_elements(
                _coeff_stream(self._coeff_seed), s_count * limbs * (self.t - 1), p
            )
            coeffs[:, :, 1:] = rand.reshape(s_count, limbs, self.t - 1)
        xs = np.array([j + 1 for j in holders], dtype=np.uint64)
        evals = horner_batch(coeffs[:, :, None, :], xs[None, None, :], p)  # (S, L, H)
        self.charge("field_op", s_count * limbs * len(holders) * self.t)

        parts = [_U32.pack(len(holders))]
        for h_idx, j in enumerate(holders):
            blob = _pack_limbs(evals[0, :, h_idx])
            blob += _U32.pack(len(holders))
            for s_idx, l in enumerate(holders):
                blob += _U32.pack(l) + _pack_limbs(evals[1 + s_idx, :, h_idx])
            aad = b"agg-shares" + _U32.pack(self.id) + _U32.pack(j)
            sealed = self.suite.seal(self._channel_key(j), blob, aad)
            self.charge("cipher_byte", len(blob))
            parts.append(_U32.pack(j) + _U32.pack(len(sealed)) + sealed)
        return b"".join(parts)

    def _on_shares_relay(self, payload: bytes) -> list[Envelope]:
        off = 0
        (count,) = _U32.unpack_from(payload, off)
        off += 4
        for _ in range(count):
            (owner,) = _U32.unpack_from(payload, off)
            (blen,) = _U32.unpack_from(payload, off + 4)
            off += 8
            sealed = payload[off : off + blen]
            off += blen
            aad = b"agg-shares" + _U32.pack(owner) + _U32.pack(self.id)
            try:
                blob = self.suite.open(self._channel_key(owner), sealed, aad)
            except Exception:
                if self.signed:
                    raise AbortBadSignature(owner, self.id, TAG_SHARES_RELAY)
                self.faults.append(f"client {self.id}: undecryptable bundle from {owner}")
                continue
            self.charge("cipher_byte", len(blob))
            self.bundles[owner] = self._parse_bundle(blob)
        if self.drop_phase == "masked":
            return self._die()
        assert self.x is not None, "input vector must be set before the masked round"
        y = np.asarray(self.x, dtype=np.uint64)
        if self.neighbors:
            y = addmod_vec(y, prg_expand(self.mask_seed, self.config.vector_len, self.p), self.p)
            for j in sorted(self.bundles):
                mask = prg_expand(self.pair_seed_by_nbr[j], self.config.vector_len, self.p)
                if j > self.id:
                    y = addmod_vec(y, mask, self.p)
                else:
                    y = submod_vec(y, mask, self.p)
        self.charge("prg_byte", 8 * self.config.vector_len * (1 + len(self.bundles)))
        self.charge("field_op", self.config.vector_len * (1 + len(self.bundles)))
        return [self._send(TAG_MASKED, EncodedVector(y, self.config.field).to_bytes())]

    def _parse_bundle(self, blob: bytes) -> dict:
        limbs = self._limbs
        self_share, off = _unpack_limbs(blob, 0, limbs)
        (count,) = _U32.unpack_from(blob, off)
        off += 4
        pairs: dict[int, np.ndarray] = {}
        for _ in range(count):
            (l,) = _U32.unpack_from(blob, off)
            share, off = _unpack_limbs(blob, off + 4, limbs)
            pairs[l] = share
        return {"self": self_share, "pairs": pairs}

    def _on_survivors(self, payload: bytes) -> list[Envelope]:
        if self.drop_phase == "unmask":
            return self._die()
        self.survivor_payload = payload
        self.announced, off = _unpack_ids(payload, 0)
        self.included, _ = _unpack_ids(payload, off)
        if self.config.mode == "malicious":
            self.charge("signature_op", 1)
            echo = self.suite.sign(self.sign_sk, b"survivor-echo" + payload)
            return [self._send(TAG_ECHO, echo)]
        return [self._send(TAG_SHARE_RESPONSE, self._build_response())]

    def _on_echo_relay(self, payload: bytes) -> list[Envelope]:
        off = 0
        (count,) = _U32.unpack_from(payload, off)
        off += 4
        message = b"survivor-echo" + (self.survivor_payload or b"")
        for _ in range(count):
            (j,) = _U32.unpack_from(payload, off)
            off += 4
            sig = payload[off : off + SIGNATURE_BYTES]
            off += SIGNATURE_BYTES
            self.charge("signature_op", 1)
            if not self.suite.verify(self.client_vks[j], message, sig):
                raise AbortInconsistentView(
                    f"client {self.id}: neighbour {j} echoed a different survivor set"
                )
        return [self._send(TAG_SHARE_RESPONSE, self._build_response())]

    def _build_response(self) -> bytes:
        announced = set(self.announced)
        included = set(self.included)
        parts = []
        entries = 0
        for j in sorted(self.bundles):
            bundle = self.bundles[j]
            if j in included:
                parts.append(_U32.pack(j) + b"\x01" + _pack_limbs(bundle["self"]))
                entries += 1
            elif j in announced:
                pairs = [(l, s) for l, s in sorted(bundle["pairs"].items()) if l in included]
                body = _U32.pack(len(pairs)) + b"".join(
                    _U32.pack(l) + _pack_limbs(s) for l, s in pairs
                )
                parts.append(_U32.pack(j) + b"\x02" + body)
                entries += 1
        return _U32.pack(entries) + b"".join(parts)


class AggServerMachine(Party):
    """Server side: relays, tracks the survivor partition, unmasks the sum."""

    PHASE_NAMES = ("keys", "shares", "masked", "echo", "unmask")

    def __init__(self, config: AggConfig):
        super().__init__()
        self.id = SERVER_ID
        self.config = config
        self.suite = get_suite(config.suite)
        self.signed = config.mode == "malicious"
        self.p = config.field.p
        self.t = config.threshold_value()
        self.adjacency = build_graph(config.n, config.degree(), graph_rng(config))
        self._chunk_bits, self._limbs = _limb_shape(self.p)
        self.client_vks, _ = verify_key_roster(config)
        self.sign_sk, _ = self.suite.signing_keypair(_server_signing_key(config))

        self.phase = "keys"
        self.pubkeys: dict[int, bytes] = {}
        self.share_blobs: dict[int, dict[int, bytes]] = {}  # holder -> owner -> sealed
        self.masked: dict[int, np.ndarray] = {}
        self.echoes: dict[int, bytes] = {}
        self.responses: dict[int, dict] = {}
        self.survivor_payload = b""
        self.output: EncodedVector | None = None
        self.transcript: AggTranscript | None = None
        self._done = False

    def finished(self) -> bool:
        return self._done

    # -- plumbing ------------------------------------------------------------

    def _send(self, tag: int, receiver: int, payload: bytes) -> Envelope:
        env = Envelope(tag, self.id, receiver, payload)
        if self.signed:
            self.charge("signature_op", 1)
            env = Envelope(tag, self.id, receiver, payload, self.suite.sign(self.sign_sk, env.signed_part()))
        return env

    def on_malformed(self, raw: bytes, now: float, err) -> list[Envelope]:
        if self.signed:
            claimed = HEADER.unpack_from(raw)[1] if len(raw) >= HEADER.size else 0
            tag = raw[0] if raw else 0
            raise AbortBadSignature(claimed, self.id, tag)
        raise err

    def _verify(self, env: Envelope) -> None:
        if not self.signed:
            return
        self.charge("signature_op", 1)
        if (
            env.receiver != self.id
            or not 0 <= env.sender < self.config.n
            or env.signature is None
            or not self.suite.verify(self.client_vks[env.sender], env.signed_part(), env.signature)
        ):
            raise AbortBadSignature(env.sender, self.id, env.tag)

    def _mark(self, name: str, now: float) -> None:
        if self.metrics is not None:
            self.metrics.round_timestamps.setdefault(f"agg.{name}", now)

    # -- choreography ----------------------------------------------------------

    def on_start(self, now: float) -> list[Envelope]:
        self._mark("keys", now)
        return [
            self._send(TAG_NEIGHBORS, i, _pack_ids(self.adjacency[i]))
            for i in range(self.config.n)
        ]

    def on_message(self, env: Envelope, now: float) -> list[Envelope]:
        self._verify(env)
        cid = env.sender
        if env.tag == TAG_PUBKEY:
            self.pubkeys[cid] = env.payload
        elif env.tag == TAG_SHARES:
            blobs = {}
            off = 0
            (count,) = _U32.unpack_from(env.payload, off)
            off += 4
            for _ in range(count):
                (holder,) = _U32.unpack_from(env.payload, off)
                (blen,) = _U32.unpack_from(env.payload, off + 4)
                off += 8
                blobs[holder] = env.payload[off : off + blen]
                off += blen
            for holder, sealed in blobs.items():
                self.share_blobs.setdefault(holder, {})[cid] = sealed
        elif env.tag == TAG_MASKED:
            vec = EncodedVector.from_bytes(env.payload, self.config.field)
            self.masked[cid] = vec.values
        elif env.tag == TAG_ECHO:
            self.echoes[cid] = env.payload
        elif env.tag == TAG_SHARE_RESPONSE:
            self.responses[cid] = self._parse_response(env.payload)
        else:
            raise ValueError(f"server: unexpected tag 0x{env.tag:02x}")
        return []

    def on_quiescence(self, now: float) -> list[Envelope]:
        if self.phase == "keys":
            self.phase = "shares"
            self._mark("shares", now)
            out = []
            for i in sorted(self.pubkeys):
                listed = [j for j in self.adjacency[i] if int(j) in self.pubkeys]
                payload = _U32.pack(len(listed)) + b"".join(
                    _U32.pack(int(j)) + self.pubkeys[int(j)] for j in listed
                )
                out.append(self._send(TAG_PUBKEYS, i, payload))
            return out
        if self.phase == "shares":
            self.phase = "masked"
            self._mark("masked", now)
            out = []
            for i in sorted(self.share_blobs.keys() | set(self.pubkeys)):
                inbound = self.share_blobs.get(i, {})
                payload = _U32.pack(len(inbound)) + b"".join(
                    _U32.pack(owner) + _U32.pack(len(sealed)) + sealed
                    for owner, sealed in sorted(inbound.items())
                )
                out.append(self._send(TAG_SHARES_RELAY, i, payload))
            return out
        if self.phase == "masked":
            announced = sorted({cid for blobs in self.share_blobs.values() for cid in blobs})
            included = sorted(self.masked)
            self.survivor_payload = _pack_ids(announced) + _pack_ids(included)
            self.phase = "echo" if self.config.mode == "malicious" else "unmask"
            self._mark("unmask", now)
            return [
                self._send(TAG_SURVIVORS, i, self.survivor_payload) for i in sorted(self.pubkeys)
            ]
        if self.phase == "echo":
            self.phase = "unmask"
            out = []
            for i in sorted(self.pubkeys):
                present = [
                    (int(j), self.echoes[int(j)])
                    for j in self.adjacency[i]
                    if int(j) in self.echoes
                ]
                payload = _U32.pack(len(present)) + b"".join(
                    _U32.pack(j) + sig for j, sig in present
                )
                out.append(self._send(TAG_ECHO_RELAY, i, payload))
            return out
        if self.phase == "unmask":
            self._finish(now)
            return []
        return []

    def _parse_response(self, payload: bytes) -> dict:
        limbs = self._limbs
        out: dict[int, tuple] = {}
        off = 0
        (entries,) = _U32.unpack_from(payload, off)
        off += 4
        for _ in range(entries):
            (owner,) = _U32.unpack_from(payload, off)
            kind = payload[off + 4]
            off += 5
            if kind == 1:
                share, off = _unpack_limbs(payload, off, limbs)
                out[owner] = ("self", share)
            else:
                (count,) = _U32.unpack_from(payload, off)
                off += 4
                pairs = {}
                for _ in range(count):
                    (l,) = _U32.unpack_from(payload, off)
                    share, off = _unpack_limbs(payload, off + 4, limbs)
                    pairs[l] = share
                out[owner] = ("pairs", pairs)
        return out

    def _recover(self, owner: int, collect) -> bytes:
        """Interpolate one seed from responders' shares; collect picks them."""
        points = []
        for holder in sorted(self.responses):
            share = collect(self.responses[holder].get(owner))
            if share is not None:
                points.append((holder + 1, share))
        if len(points) < self.t:
            raise AbortInsufficientShares(owner, self.t, len(points))
        use = points[: self.t]
        ws = lagrange_weights_at_zero(tuple(x for x, _ in use), self.p)
        y = np.stack([s for _, s in use])  # (t, limbs)
        prods = mulmod_vec(y, ws[:, None], self.p)
        acc = prods[0]
        for r in range(1, self.t):
            acc = addmod_vec(acc, prods[r], self.p)
        self.charge("field_op", self.t * self._limbs)
        return limbs_to_seed(acc, self.p)

    def _finish(self, now: float) -> None:
        p = self.p
        L = self.config.vector_len
        announced = sorted({cid for blobs in self.share_blobs.values() for cid in blobs})
        included = sorted(self.masked)
        total = np.zeros(L, dtype=np.uint64)
        for i in included:
            total = addmod_vec(total, self.masked[i], p)
        recovered_pairwise = 0
        for i in included:
            if len(self.adjacency[i]) == 0:
                continue  # a lone client cannot mask; it sent x in the clear
            seed = self._recover(i, lambda e: e[1] if e and e[0] == "self" else None)
            total = submod_vec(total, prg_expand(seed, L, p), p)
        inc_set = set(included)
        for i in announced:
            if i in inc_set:
                continue
            for j in sorted(inc_set):
                seed_share = self._recover(
                    i, lambda e, j=j: e[1].get(j) if e and e[0] == "pairs" else None
                )
                mask = prg_expand(seed_share, L, p)
                recovered_pairwise += 1
                # s_ij appears in y_j with sign +1 when i > j
                if i > j:
                    total = submod_vec(total, mask, p)
                else:
                    total = addmod_vec(total, mask, p)
        self.charge("prg_byte", 8 * L * (len(included) + recovered_pairwise))
        self.charge("field_op", L * (2 * len(included) + recovered_pairwise))
        self.output = EncodedVector(total, self.config.field)
        self.transcript = AggTranscript(
            included=included,
            excluded=[i for i in range(self.config.n) if i not in inc_set],
            dropouts={},
            recovered_self=len(included),
            recovered_pairwise=recovered_pairwise,
            mode=self.config.mode,
        )
        self._done = True


def run_aggregation(
    inputs,
    config: AggConfig,
    net: "NetConfig | None" = None,
    dropout_schedule: dict[int, str] | None = None,
    tamper=None,
) -> tuple[EncodedVector, AggTranscript]:
    """One-shot secure aggregation.

    Without a net, runs the fast in-process driver. With a NetConfig, runs the
    full message-level choreography over the event simulator; the transcript
    then carries the run's byte and timing metrics. `tamper(index, raw)` may
    corrupt frames in flight for robustness experiments.
    """
    if net is None:
        if tamper is not None:
            raise ValueError("tampering needs the message-level path; pass a NetConfig")
        return AggSession(config).aggregate(inputs, dropout_schedule)

    drops = dict(dropout_schedule) if dropout_schedule is not None else net.dropout_phases()
    if len(drops) > config.max_dropouts():
        raise ValueError(
            f"{len(drops)} dropouts exceed the configured bound of {config.max_dropouts()}"
        )
    matrix = _inputs_matrix(config, inputs)

    parties: dict[int, Party] = {}
    server = AggServerMachine(config)
    parties[SERVER_ID] = server
    for i in range(config.n):
        parties[i] = AggClientMachine(i, config, matrix[i], drops.get(i))
    loop = EventLoop(net, parties, coordinator=SERVER_ID, tamper=tamper)
    metrics = loop.run()
    assert server.output is not None and server.transcript is not None
    server.transcript.dropouts = drops
    server.transcript.metrics = metrics
    return server.output, server.transcript
