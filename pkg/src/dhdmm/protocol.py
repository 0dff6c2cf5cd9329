"""Three-round distributed answering of a linear query workload.

Round 1: the server optimizes a measurement strategy for the workload and
broadcasts its matrix to every client. Round 2: each client recomputes the
strategy's sensitivity locally from the received bytes (the server is never
trusted for it), vectorizes its records, measures them, adds its own share of
discrete Gaussian noise, encodes the result into the prime field, and enters
secure aggregation. Round 3: the server decodes the aggregated measurement
vector and answers the workload by least squares. The answer is pure
post-processing of the aggregate, so rerunning round 3 on a recorded
aggregate reproduces it bit for bit.

`run_protocol` either composes the rounds in process (net=None) or drives the
full message choreography over the event simulator; both produce identical
answers for identical parameters because every random draw is derived from
`params.seed`, never from transport order.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .crypto import derive_seed
from .dpnoise import PrivacyParams, PrivacyReport, account, per_client_variance
from .errors import DimensionError, ProtocolAborted, RangeOverflow
from .fieldcodec import EncodedVector, FieldParams, decode, encode
from .matmech import (
    DomainSpec,
    OptimizerConfig,
    Strategy,
    Workload,
    optimize_strategy,
    reconstruct,
    sensitivity,
    vectorize,
)
from .secagg import (
    AggClientMachine,
    AggConfig,
    AggServerMachine,
    AggSession,
    AggTranscript,
)
from .simnet import SERVER_ID, Envelope, EventLoop, NetConfig, Party, RunMetrics

TAG_STRATEGY = 0x10

_SHAPE = struct.Struct("<II")

# crude deterministic flop estimates for the cost table; they only have to
# scale correctly with problem size, not match any particular machine
_OPT_FLOPS_PER_ITER_D3 = 1.0
_RECON_FLOPS_D2 = 2.0


@dataclass(frozen=True)
class ProtocolParams:
    """Global run parameters; seed fixes every random draw end to end."""

    n: int
    workload: Workload
    rho: float
    gamma: float = 1.0e6
    theta: float = 0.0
    field: FieldParams = FieldParams()
    mode: str = "semi-honest"
    delta: float = 1.0e-6
    noise_disabled: bool = False
    seed: int = 0
    agg: AggConfig | None = None  # template for graph and threshold knobs
    optimizer: OptimizerConfig | None = None  # None: defaults seeded from `seed`

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not isinstance(self.workload, Workload):
            raise TypeError("workload must be a Workload")
        # PrivacyParams owns the numeric constraints on rho, gamma, theta
        PrivacyParams(rho=self.rho, n=self.n, gamma=self.gamma, delta2=1.0, theta=self.theta)
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.mode not in ("semi-honest", "malicious"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def domain(self) -> DomainSpec:
        return self.workload.domain

    def optimizer_config(self) -> OptimizerConfig:
        return self.optimizer if self.optimizer is not None else OptimizerConfig(seed=self.seed)


@dataclass(frozen=True)
class ClientInput:
    """One client's private multiset of records."""

    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(tuple(r) for r in self.records))


def as_client_input(value) -> ClientInput:
    return value if isinstance(value, ClientInput) else ClientInput(tuple(value))


@dataclass
class ClientState:
    """Per-client round-2 state, kept inspectable for experiments."""

    params: ProtocolParams
    client_id: int
    delta2: float | None = None
    sigma2: float | None = None
    encoded: EncodedVector | None = None
    fault: str | None = None


@dataclass
class ProtocolResult:
    """Workload answers plus the accounting and run evidence behind them."""

    answer: np.ndarray
    privacy: PrivacyReport
    aggregate: EncodedVector
    transcript: AggTranscript | None = None
    metrics: RunMetrics | None = None
    faults: list[str] = field(default_factory=list)
    noise_disabled: bool = False

    def to_json(self, include_wall_times: bool = False) -> str:
        """Canonical JSON: deterministic for a fixed seed.

        Wall-clock compute is host noise, so it is stripped unless asked for;
        every other field is a pure function of (params, inputs, net, seed).
        """
        metrics_doc = None
        if self.metrics is not None:
            metrics_doc = self.metrics.to_dict()
            if not include_wall_times:
                metrics_doc = _strip_wall(metrics_doc)
        doc = {
            "answer": [float(v) for v in self.answer],
            "privacy": self.privacy.to_dict(),
            "aggregate": [int(v) for v in self.aggregate.values],
            "included": None if self.transcript is None else list(self.transcript.included),
            "dropouts": None if self.transcript is None else dict(self.transcript.dropouts),
            "faults": list(self.faults),
            "noise_disabled": self.noise_disabled,
            "metrics": metrics_doc,
        }
        return json.dumps(doc, sort_keys=True)


def _strip_wall(doc: dict) -> dict:
    return {
        k: (_strip_wall(v) if isinstance(v, dict) else v)
        for k, v in doc.items()
        if "wall" not in k
    }


def strategy_payload(matrix: np.ndarray) -> bytes:
    """Broadcast wire format: row/column header plus float64 entries."""
    m = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2:
        raise DimensionError("strategy broadcast expects a matrix")
    return _SHAPE.pack(m.shape[0], m.shape[1]) + m.astype("<f8").tobytes()


def parse_strategy_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < _SHAPE.size:
        raise ValueError("truncated strategy broadcast")
    rows, cols = _SHAPE.unpack_from(payload)
    data = np.frombuffer(payload, dtype="<f8", offset=_SHAPE.size)
    if data.size != rows * cols or rows < 1 or cols < 1:
        raise ValueError("strategy broadcast length mismatch")
    return data.reshape(rows, cols)


def _noise_rng(params: ProtocolParams, cid: int) -> random.Random:
    # the exact sampler needs arbitrary-precision randrange, not numpy draws
    seed = derive_seed(b"dp-noise", struct.pack("<q", params.seed), struct.pack("<I", cid))
    return random.Random(int.from_bytes(seed, "little"))


def _agg_config(params: ProtocolParams, vector_len: int) -> AggConfig:
    fixed = dict(
        n=params.n,
        vector_len=vector_len,
        field=params.field,
        mode=params.mode,
        seed=params.seed,
    )
    if params.agg is None:
        return AggConfig(**fixed)
    return replace(params.agg, **fixed)


# ----------------------------------------------------------------------------
# The three rounds as plain functions.
# ----------------------------------------------------------------------------


def server_round1(params: ProtocolParams, workload: Workload | None = None) -> Strategy:
    """Optimize the measurement strategy the server will broadcast."""
    return optimize_strategy(workload or params.workload, params.optimizer_config())


def client_round2(state: ClientState, strategy, client_input) -> EncodedVector:
    """Measure, privatize, and field-encode one client's records.

    `strategy` may be a Strategy, a raw broadcast payload, or a bare matrix;
    in every case the sensitivity is recomputed here from the matrix itself,
    so a server lying about delta2 cannot reduce the noise this client adds.
    """
    params = state.params
    if isinstance(strategy, Strategy):
        matrix = strategy.matrix
    elif isinstance(strategy, (bytes, bytearray, memoryview)):
        matrix = parse_strategy_matrix(bytes(strategy))
    else:
        matrix = np.asarray(strategy, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != params.domain.total_size:
        raise DimensionError("broadcast strategy does not match the domain")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("broadcast strategy contains non-finite entries")
    if not np.any(matrix):
        raise ValueError("broadcast strategy is all zero")

    delta2 = sensitivity(matrix)
    hist = vectorize(as_client_input(client_input).records, params.domain)
    measurement = matrix @ hist.counts.astype(np.float64)
    priv = PrivacyParams(
        rho=params.rho, n=params.n, gamma=params.gamma, delta2=delta2, theta=params.theta
    )
    state.delta2 = delta2
    state.sigma2 = 0.0 if params.noise_disabled else per_client_variance(priv)
    state.encoded = encode(
        measurement,
        params.field,
        priv,
        rng=_noise_rng(params, state.client_id),
        noise_disabled=params.noise_disabled,
    )
    return state.encoded


def server_round3(
    params: ProtocolParams,
    aggregate: EncodedVector,
    strategy: Strategy,
    workload: Workload | None = None,
    survivors: int | None = None,
    transcript: AggTranscript | None = None,
) -> ProtocolResult:
    """Decode the aggregate and answer the workload; pure post-processing."""
    w = workload or params.workload
    measurements = decode(aggregate, params.gamma)
    answer = reconstruct(w, strategy, measurements)
    priv = PrivacyParams(
        rho=params.rho,
        n=params.n,
        gamma=params.gamma,
        delta2=strategy.delta2,
        theta=params.theta,
    )
    report = account(priv, params.delta, survivors=survivors)
    return ProtocolResult(
        answer=answer,
        privacy=report,
        aggregate=aggregate,
        transcript=transcript,
        noise_disabled=params.noise_disabled,
    )


# ----------------------------------------------------------------------------
# Message-level machines.
# ----------------------------------------------------------------------------


class ProtocolClientMachine(AggClientMachine):
    """Client machine: round 2 on top of the aggregation choreography."""

    def __init__(
        self,
        cid: int,
        params: ProtocolParams,
        agg_cfg: AggConfig,
        client_input: ClientInput,
        drop_phase: str | None = None,
        vector_tamper=None,
    ):
        super().__init__(cid, agg_cfg, None, drop_phase)
        self.params = params
        self.client_input = client_input
        self.state = ClientState(params, cid)
        self.vector_tamper = vector_tamper

    def on_message(self, env: Envelope, now: float):
        if env.tag == TAG_STRATEGY:
            self._verify(env)
            return self._on_strategy(env.payload)
        return super().on_message(env, now)

    def _on_strategy(self, payload: bytes):
        try:
            encoded = client_round2(self.state, payload, self.client_input)
        except (RangeOverflow, ValueError, DimensionError) as err:
            self.state.fault = f"client {self.id}: cannot encode measurement: {err}"
            return self._die(self.state.fault)
        if len(encoded) != self.config.vector_len:
            self.state.fault = f"client {self.id}: strategy shape disagrees with session"
            return self._die(self.state.fault)
        rows, cols = encoded.values.size, self.params.domain.total_size
        self.charge("flop", 2 * rows * cols)
        if not self.params.noise_disabled:
            self.charge("gauss_sample", rows)
        y = encoded.values
        if self.vector_tamper is not None:
            y = np.asarray(self.vector_tamper(y.copy()), dtype=np.uint64)
            if y.shape != encoded.values.shape or (y.size and int(y.max()) >= self.p):
                raise ValueError("vector tamper must keep shape and field range")
        self.x = y
        return []


class ProtocolServerMachine(AggServerMachine):
    """Server machine: strategy broadcast, then aggregation, then round 3."""

    def __init__(self, params: ProtocolParams, strategy: Strategy, agg_cfg: AggConfig,
                 broadcast: bytes):
        super().__init__(agg_cfg)
        self.params = params
        self.strategy = strategy
        self.broadcast = broadcast
        self.result: ProtocolResult | None = None

    def on_start(self, now: float):
        if self.metrics is not None:
            self.metrics.round_timestamps.setdefault("protocol.strategy", now)
        d = self.params.domain.total_size
        iters = self.params.optimizer_config().iterations
        self.charge("flop", _OPT_FLOPS_PER_ITER_D3 * max(iters, 1) * d**3)
        out = [self._send(TAG_STRATEGY, i, self.broadcast) for i in range(self.config.n)]
        return out + super().on_start(now)

    def _finish(self, now: float) -> None:
        super()._finish(now)
        assert self.output is not None and self.transcript is not None
        d = self.params.domain.total_size
        rows = self.config.vector_len
        q = self.params.workload.num_queries
        self.charge("flop", _RECON_FLOPS_D2 * rows * d * d + 2 * q * d + rows)
        self.result = server_round3(
            self.params,
            self.output,
            self.strategy,
            survivors=len(self.transcript.included),
            transcript=self.transcript,
        )
        if self.metrics is not None:
            self.metrics.round_timestamps.setdefault("protocol.answer", now)


# ----------------------------------------------------------------------------
# Orchestration.
# ----------------------------------------------------------------------------


def run_protocol(
    params: ProtocolParams,
    inputs,
    net: NetConfig | None = None,
    dropout_schedule: dict[int, str] | None = None,
    tamper=None,
    strategy_tamper=None,
    client_tamper: dict | None = None,
) -> ProtocolResult:
    """One full protocol run.

    Without a net the three rounds are composed in process; with a NetConfig
    every message crosses the simulated network and the result carries the
    run's metrics. `strategy_tamper(matrix) -> matrix` corrupts the broadcast
    (a malicious server); `client_tamper[cid](values) -> values` corrupts one
    client's encoded vector (a garbage client); `tamper(index, raw) -> raw`
    corrupts frames in flight.
    """
    inputs = [as_client_input(x) for x in inputs]
    if len(inputs) != params.n:
        raise ValueError(f"expected {params.n} client inputs, got {len(inputs)}")
    client_tamper = client_tamper or {}

    strategy = server_round1(params)
    matrix = strategy.matrix
    if strategy_tamper is not None:
        matrix = np.asarray(strategy_tamper(matrix.copy()), dtype=np.float64)
    broadcast = strategy_payload(matrix)
    agg_cfg = _agg_config(params, strategy.num_measurements)

    drops = dict(dropout_schedule) if dropout_schedule is not None else (
        net.dropout_phases() if net is not None else {}
    )
    if len(drops) > agg_cfg.max_dropouts():
        raise ValueError(
            f"{len(drops)} dropouts exceed the configured bound of {agg_cfg.max_dropouts()}"
        )
    for cid in list(drops) + list(client_tamper):
        if not 0 <= cid < params.n:
            raise ValueError(f"client id {cid} out of range")

    if net is None:
        return _run_composed(params, inputs, strategy, broadcast, agg_cfg, drops, client_tamper)

    parties: dict[int, Party] = {}
    server = ProtocolServerMachine(params, strategy, agg_cfg, broadcast)
    parties[SERVER_ID] = server
    machines = []
    for i in range(params.n):
        m = ProtocolClientMachine(
            i, params, agg_cfg, inputs[i], drops.get(i), client_tamper.get(i)
        )
        parties[i] = m
        machines.append(m)
    loop = EventLoop(net, parties, coordinator=SERVER_ID, tamper=tamper)
    try:
        metrics = loop.run()
    except ProtocolAborted as err:
        err.metrics = loop.metrics  # accounting up to the failure point
        raise
    assert server.result is not None
    result = server.result
    result.metrics = metrics
    result.transcript.dropouts = drops
    result.transcript.metrics = metrics
    result.faults = [f for m in machines for f in m.faults]
    return result


def _run_composed(
    params: ProtocolParams,
    inputs: list[ClientInput],
    strategy: Strategy,
    broadcast: bytes,
    agg_cfg: AggConfig,
    drops: dict[int, str],
    client_tamper: dict,
) -> ProtocolResult:
    """In-process composition of the three rounds; no transport, no metrics."""
    states = [ClientState(params, i) for i in range(params.n)]
    rows = np.zeros((params.n, agg_cfg.vector_len), dtype=np.uint64)
    faults: list[str] = []
    for i, state in enumerate(states):
        try:
            encoded = client_round2(state, broadcast, inputs[i])
        except (RangeOverflow, ValueError, DimensionError) as err:
            state.fault = f"client {i}: cannot encode measurement: {err}"
            faults.append(state.fault)
            drops[i] = "keys"  # the client goes silent before saying anything
            continue
        if len(encoded) != agg_cfg.vector_len:
            state.fault = f"client {i}: strategy shape disagrees with session"
            faults.append(state.fault)
            drops[i] = "keys"
            continue
        y = encoded.values
        if i in client_tamper:
            y = np.asarray(client_tamper[i](y.copy()), dtype=np.uint64)
            if y.shape != encoded.values.shape or (y.size and int(y.max()) >= params.field.p):
                raise ValueError("vector tamper must keep shape and field range")
        rows[i] = y

    # scheduled drops were budget-checked upstream; faults land on top of them
    # exactly as silent clients would on the wire, so no second check here
    session = AggSession(agg_cfg)
    aggregate, transcript = session.aggregate(rows, drops, enforce_budget=False)
    result = server_round3(
        params,
        aggregate,
        strategy,
        survivors=len(transcript.included),
        transcript=transcript,
    )
    result.faults = faults
    return result
