"""Deterministic discrete-event network simulator for the protocol parties.

All parties run in one process. Messages are framed in a fixed envelope,
charged against per-party bandwidth limits as a serialization delay, and
delivered in (timestamp, sender, sequence) order so runs are reproducible.
Rounds have no timeouts: when the event queue drains, the loop hands control
to the coordinating party, which either closes the current round from the
messages that did arrive or declares the run finished. Scheduled dropouts are
realized by the party machines going silent; traffic addressed to a dead
party is discarded and logged, never delivered.

Compute is metered two ways per party: wall-clock seconds of the actual
handler, and simulated seconds from a fixed cost table, which is what the
event clock advances by. The cost table makes simulated timings independent
of the host machine.
"""

from __future__ import annotations

import heapq
import json
import struct
import time
from dataclasses import dataclass, field

SERVER_ID = 0xFFFFFFFF  # reserved party id for the single server

HEADER = struct.Struct("<BIII")  # round tag, sender, receiver, payload length
SIGNATURE_BYTES = 64


@dataclass(frozen=True)
class Envelope:
    """One framed message: header fields, payload, optional signature."""

    tag: int
    sender: int
    receiver: int
    payload: bytes
    signature: bytes | None = None

    def signed_part(self) -> bytes:
        return HEADER.pack(self.tag, self.sender, self.receiver, len(self.payload)) + self.payload

    def to_bytes(self) -> bytes:
        raw = self.signed_part()
        if self.signature is not None:
            if len(self.signature) != SIGNATURE_BYTES:
                raise ValueError("signature must be 64 bytes")
            raw += self.signature
        return raw

    @classmethod
    def from_bytes(cls, raw: bytes, signed: bool) -> "Envelope":
        if len(raw) < HEADER.size:
            raise ValueError("short envelope")
        tag, sender, receiver, plen = HEADER.unpack_from(raw)
        want = HEADER.size + plen + (SIGNATURE_BYTES if signed else 0)
        if len(raw) != want:
            raise ValueError("envelope length mismatch")
        payload = raw[HEADER.size : HEADER.size + plen]
        sig = raw[HEADER.size + plen :] if signed else None
        return cls(tag, sender, receiver, payload, sig)


@dataclass(frozen=True)
class DropEvent:
    """A scheduled crash: the client sends nothing from this phase on."""

    client: int
    round: int
    phase: str


@dataclass(frozen=True)
class NetConfig:
    """Link model: bandwidths in bytes/sec (None = unlimited), latency in sec."""

    client_up_bw: float | None = None
    client_down_bw: float | None = None
    server_bw: float | None = None
    latency: float = 0.0
    dropout_schedule: tuple[DropEvent, ...] = ()

    def __post_init__(self):
        for name in ("client_up_bw", "client_down_bw", "server_bw"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive or None")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")

    def transfer_seconds(self, sender: int, receiver: int, nbytes: int) -> float:
        up = self.server_bw if sender == SERVER_ID else self.client_up_bw
        down = self.server_bw if receiver == SERVER_ID else self.client_down_bw
        caps = [b for b in (up, down) if b is not None]
        if not caps or nbytes == 0:
            return 0.0
        return nbytes / min(caps)

    def dropout_phases(self) -> dict[int, str]:
        return {ev.client: ev.phase for ev in self.dropout_schedule}


def net_config_from_dict(data: dict) -> NetConfig:
    drops = tuple(
        DropEvent(int(d["client"]), int(d.get("round", 2)), str(d["phase"]))
        for d in data.get("dropout_schedule", ())
    )
    return NetConfig(
        client_up_bw=data.get("client_up_bw"),
        client_down_bw=data.get("client_down_bw"),
        server_bw=data.get("server_bw"),
        latency=float(data.get("latency", 0.0)),
        dropout_schedule=drops,
    )


def load_net_config(path: str) -> NetConfig:
    """Read a NetConfig from a .toml or .json file."""
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    return net_config_from_dict(data.get("net", data))


@dataclass(frozen=True)
class CostTable:
    """Simulated seconds per unit of work, fixed across host machines."""

    flop: float = 1e-9
    field_op: float = 4e-9
    prg_byte: float = 1e-9
    cipher_byte: float = 2e-9
    hash_op: float = 2e-7
    gauss_sample: float = 8e-6  # exact integer sampler, measured scale
    pubkey_op: float = 5e-5
    signature_op: float = 5e-5

    def cost(self, kind: str, units: float) -> float:
        return getattr(self, kind) * units


class RunMetrics:
    """Per-party byte and compute accounting for one simulated run."""

    def __init__(self, party_ids):
        ids = list(party_ids)
        self.bytes_sent = {i: 0 for i in ids}
        self.bytes_received = {i: 0 for i in ids}
        self.bytes_discarded = 0
        self.messages_sent = {i: 0 for i in ids}
        self.sim_compute = {i: 0.0 for i in ids}
        self.wall_compute = {i: 0.0 for i in ids}
        self.total_sim_time = 0.0
        self.round_timestamps: dict[str, float] = {}

    def check_conservation(self) -> None:
        sent = sum(self.bytes_sent.values())
        received = sum(self.bytes_received.values())
        if sent != received + self.bytes_discarded:
            raise AssertionError(
                f"byte conservation violated: sent {sent}, "
                f"received {received}, discarded {self.bytes_discarded}"
            )

    def _party_label(self, pid: int) -> str:
        return "server" if pid == SERVER_ID else str(pid)

    def client_ids(self) -> list[int]:
        return sorted(i for i in self.bytes_sent if i != SERVER_ID)

    def to_dict(self) -> dict:
        clients = self.client_ids()

        def stats(per_party: dict, ids) -> dict:
            vals = [per_party[i] for i in ids]
            if not vals:
                return {"total": 0, "mean": 0.0, "max": 0}
            return {
                "total": sum(vals),
                "mean": sum(vals) / len(vals),
                "max": max(vals),
            }

        return {
            "total_sim_time": self.total_sim_time,
            "round_timestamps": dict(sorted(self.round_timestamps.items())),
            "bytes_discarded": self.bytes_discarded,
            "server": {
                "bytes_sent": self.bytes_sent.get(SERVER_ID, 0),
                "bytes_received": self.bytes_received.get(SERVER_ID, 0),
                "sim_compute": self.sim_compute.get(SERVER_ID, 0.0),
                "wall_compute": self.wall_compute.get(SERVER_ID, 0.0),
            },
            "client_bytes_sent": stats(self.bytes_sent, clients),
            "client_bytes_received": stats(self.bytes_received, clients),
            "client_sim_compute": stats(self.sim_compute, clients),
            "client_wall_compute": stats(self.wall_compute, clients),
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for pid in sorted(self.bytes_sent, key=lambda i: (i == SERVER_ID, i)):
            rows.append(
                {
                    "party": self._party_label(pid),
                    "bytes_sent": self.bytes_sent[pid],
                    "bytes_received": self.bytes_received[pid],
                    "messages_sent": self.messages_sent[pid],
                    "sim_compute_s": self.sim_compute[pid],
                    "wall_compute_s": self.wall_compute[pid],
                }
            )
        return rows

    def write_csv(self, path: str) -> None:
        import csv

        rows = self.csv_rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


@dataclass(frozen=True)
class MessageRecord:
    """Metadata logged for every envelope that entered the network."""

    time_sent: float
    time_delivered: float | None  # None: discarded (receiver dead)
    tag: int
    sender: int
    receiver: int
    nbytes: int


class Party:
    """Interface every simulated party implements.

    Handlers return a list of Envelope to send. Simulated compute is charged
    through `charge`; the loop drains the accumulated amount after each
    activation and stamps outgoing messages after that much simulated time.
    Messages arrive as raw bytes so that in-flight corruption is visible to
    the receiver's parser and signature check.
    """

    id: int = -1
    dead: bool = False
    signed: bool = False

    def __init__(self):
        self._pending_cost = 0.0
        self.metrics: RunMetrics | None = None
        self.cost_table = CostTable()

    def charge(self, kind: str, units: float) -> None:
        self._pending_cost += self.cost_table.cost(kind, units)

    def drain_cost(self) -> float:
        c = self._pending_cost
        self._pending_cost = 0.0
        return c

    def on_start(self, now: float) -> list[Envelope]:
        return []

    def on_message_raw(self, raw: bytes, now: float) -> list[Envelope]:
        try:
            env = Envelope.from_bytes(raw, self.signed)
        except ValueError as err:
            return self.on_malformed(raw, now, err)
        return self.on_message(env, now)

    def on_malformed(self, raw: bytes, now: float, err: ValueError) -> list[Envelope]:
        raise err

    def on_message(self, env: Envelope, now: float) -> list[Envelope]:
        raise NotImplementedError

    def on_quiescence(self, now: float) -> list[Envelope]:
        return []

    def finished(self) -> bool:
        return False


class EventLoop:
    """Serial event queue with (timestamp, sender, sequence) ordering."""

    def __init__(
        self,
        net: NetConfig,
        parties: dict[int, Party],
        coordinator: int = SERVER_ID,
        cost_table: CostTable | None = None,
        tamper=None,
        record_messages: bool = False,
    ):
        self.net = net
        self.parties = parties
        self.coordinator = coordinator
        self.metrics = RunMetrics(parties.keys())
        self.tamper = tamper  # callable(index, raw bytes) -> raw bytes
        self.record_messages = record_messages
        self.message_log: list[MessageRecord] = []
        self._heap: list = []
        self._seq = 0
        self._sent = 0
        self.now = 0.0
        table = cost_table or CostTable()
        for party in parties.values():
            party.metrics = self.metrics
            party.cost_table = table

    def _post(self, env: Envelope, at: float) -> None:
        raw = env.to_bytes()
        if self.tamper is not None:
            mutated = self.tamper(self._sent, raw)
            if mutated is not None:
                raw = mutated
        self._sent += 1
        nbytes = len(raw)
        self.metrics.bytes_sent[env.sender] += nbytes
        self.metrics.messages_sent[env.sender] += 1
        arrival = at + self.net.latency + self.net.transfer_seconds(
            env.sender, env.receiver, nbytes
        )
        heapq.heappush(self._heap, (arrival, env.sender, self._seq, at, env, raw))
        self._seq += 1

    def _activate(self, party: Party, fn, *args) -> None:
        t0 = time.perf_counter()
        out = fn(*args)
        self.metrics.wall_compute[party.id] += time.perf_counter() - t0
        cost = party.drain_cost()
        self.metrics.sim_compute[party.id] += cost
        depart = self.now + cost
        self.metrics.total_sim_time = max(self.metrics.total_sim_time, depart)
        for env in out or []:
            if env.receiver not in self.parties:
                raise ValueError(f"message addressed to unknown party {env.receiver}")
            self._post(env, depart)

    def mark_round(self, name: str) -> None:
        self.metrics.round_timestamps.setdefault(name, self.now)

    def run(self) -> RunMetrics:
        server = self.parties[self.coordinator]
        self._activate(server, server.on_start, 0.0)
        for party in self.parties.values():
            if party.id != self.coordinator:
                self._activate(party, party.on_start, 0.0)
        while True:
            if not self._heap:
                if server.finished():
                    break
                before = self._seq
                self._activate(server, server.on_quiescence, self.now)
                if self._seq == before:
                    if not server.finished():
                        raise RuntimeError("deadlock: no messages and the coordinator is not done")
                    break
                continue
            arrival, _sender, _seq, sent_at, env, raw = heapq.heappop(self._heap)
            self.now = max(self.now, arrival)
            self.metrics.total_sim_time = max(self.metrics.total_sim_time, self.now)
            receiver = self.parties[env.receiver]
            if receiver.dead:
                self.metrics.bytes_discarded += len(raw)
                if self.record_messages:
                    self.message_log.append(
                        MessageRecord(sent_at, None, env.tag, env.sender, env.receiver, len(raw))
                    )
                continue
            self.metrics.bytes_received[env.receiver] += len(raw)
            if self.record_messages:
                self.message_log.append(
                    MessageRecord(sent_at, arrival, env.tag, env.sender, env.receiver, len(raw))
                )
            self._activate(receiver, receiver.on_message_raw, raw, self.now)
        self.metrics.check_conservation()
        return self.metrics


def run_simulation(params, inputs, net: NetConfig | None = None, **kwargs):
    """Full protocol run over the simulator; see the protocol module.

    Always message-level: net defaults to an unconstrained NetConfig so the
    returned metrics are real. Extra keyword arguments (dropout_schedule,
    tamper hooks) pass through to run_protocol.
    """
    from .protocol import run_protocol

    result = run_protocol(params, inputs, net=net or NetConfig(), **kwargs)
    return result, result.metrics
