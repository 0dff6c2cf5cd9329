"""Batch experiment runner: `run`, `sweep`, and `account` subcommands.

`run` executes the full message-level protocol and writes three artifacts
into the output directory: per-trial rows (trials.csv), per-party traffic
and compute rows (metrics.csv), and a JSON summary embedding the resolved
config, the privacy report, and aggregate error statistics. `sweep` scans
one experiment axis and emits a row per grid point. `account` prints the
privacy report for a parameter set without running anything.

Outputs are plain CSV and JSON (schema field versions the layout); plotting
is someone else's job. A run is reproducible from the config echoed into
its summary: the seed fixes the strategy, the noise, the masks, and the
simulated schedule, and summaries carry no wall-clock measurements.

Exit codes: 0 success, 1 protocol abort or failed oracle check, 2 bad
configuration. DHDMM_THREADS caps trial parallelism inside a sweep.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from .baselines import exact_workload_answer, rmse
from .dpnoise import PrivacyParams, account
from .errors import DhdmmError, ProtocolAborted
from .fieldcodec import FieldParams
from .matmech import DomainSpec, Workload
from .protocol import ProtocolParams, run_protocol, server_round1
from .secagg import PHASES, SERVER_ID
from .simnet import DropEvent, NetConfig, run_simulation
from .workloads import (
    WorkloadSpec,
    build_workload,
    load_records_csv,
    partition,
    synth_records,
)

SCHEMA_VERSION = 1
SWEEP_AXES = ("clients", "theta", "epsilon", "bandwidth", "latency")

# evaluation-matrix defaults per axis, overridable with --grid
DEFAULT_GRIDS = {
    "clients": "100,1000,3000",
    "theta": "0,0.05,0.1,0.2,0.3",
    "epsilon": "1,2,3,4,5",
    "bandwidth": "1,10,100",
    "latency": "0.01,0.05,0.1",
}

_MBIT = 125_000.0  # bytes per second at 1 Mbit/s


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: protocol parameters, data source, network, outputs.

    Field values come from three layers, later wins: dataclass defaults,
    the --config file, explicit command-line flags.
    """

    clients: int = 100
    theta: float = 0.0
    rho: float | None = None
    epsilon: float | None = None
    delta: float = 1.0e-5
    gamma: float = 1.0e6
    prime: int | None = None
    mode: str = "semi-honest"
    workload: str = "marginals:2"
    domain: str = "4x4x2"
    records: str | None = None
    records_per_client: int = 50
    client_bw: float | None = None  # Mbit/s, both directions
    server_bw: float | None = None  # Mbit/s
    latency: float = 0.0
    dropouts: str | None = None
    trials: int = 1
    seed: int = 0
    noise_disabled: bool = False
    oracle_check: bool = False
    out: str = "dhdmm-out"

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("semi-honest", "malicious"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rho is not None and self.epsilon is not None:
            raise ValueError("give --rho or --epsilon, not both")

    def resolved_rho(self) -> float:
        if self.epsilon is not None:
            return rho_for_epsilon(self.epsilon, self.delta)
        return self.rho if self.rho is not None else 0.1


def rho_for_epsilon(epsilon: float, delta: float) -> float:
    """Largest zCDP rho whose (epsilon, delta) conversion meets the target.

    Inverts rho + 2*sqrt(rho*ln(1/delta)) = epsilon, a quadratic in
    sqrt(rho).
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    root = math.sqrt(math.log(1.0 / delta))
    u = math.sqrt(root * root + epsilon) - root
    return u * u


def parse_domain(text: str) -> DomainSpec:
    """Turn "4x4x2" into a three-attribute domain with those cardinalities."""
    try:
        sizes = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad domain {text!r}, expected sizes like 4x4x2") from None
    return DomainSpec(tuple((f"a{i}", size) for i, size in enumerate(sizes)))


def parse_workload_arg(text: str, domain_text: str) -> WorkloadSpec:
    """Map a --workload string to a spec.

    Forms: "marginals:K", "identity", "total", "sf1:SCALE", or a path to a
    workload JSON file (recognized by extension or a path separator).
    """
    if text.endswith(".json") or os.sep in text:
        return WorkloadSpec(kind="custom", source=text)
    kind, _, arg = text.partition(":")
    if kind == "sf1":
        return WorkloadSpec(kind="sf1", scale=int(arg) if arg else 1)
    if kind == "marginals":
        return WorkloadSpec(
            kind="marginals", domain=parse_domain(domain_text), k=int(arg) if arg else 2
        )
    if kind in ("identity", "total"):
        if arg:
            raise ValueError(f"workload {kind!r} takes no argument")
        return WorkloadSpec(kind=kind, domain=parse_domain(domain_text))
    raise ValueError(f"unknown workload {text!r}")


def parse_dropout_spec(text: str | None, n: int, seed: int) -> dict[int, str]:
    """Parse "--dropouts" into a client-to-phase schedule.

    Entries are comma-separated, each either "PHASE:COUNT" (that many
    clients drop at the phase, ids drawn deterministically from the seed)
    or "ID@PHASE" (pin an explicit client). Phases: keys, shares, masked,
    unmask.
    """
    if not text:
        return {}
    drops: dict[int, str] = {}
    counted: list[tuple[str, int]] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "@" in part:
            cid_text, _, phase = part.partition("@")
            cid = int(cid_text)
            if not 0 <= cid < n:
                raise ValueError(f"dropout id {cid} out of range for n={n}")
            drops[cid] = phase
        else:
            phase, _, count_text = part.partition(":")
            counted.append((phase, int(count_text) if count_text else 1))
    for phase, _ in counted:
        if phase not in PHASES:
            raise ValueError(f"unknown dropout phase {phase!r}")
    for phase in drops.values():
        if phase not in PHASES:
            raise ValueError(f"unknown dropout phase {phase!r}")
    pool = [int(i) for i in np.random.default_rng(seed).permutation(n) if i not in drops]
    for phase, count in counted:
        if count > len(pool):
            raise ValueError("dropout schedule names more clients than exist")
        for cid in pool[:count]:
            drops[cid] = phase
        del pool[:count]
    return drops


def build_net(cfg: ExperimentConfig, drops: dict[int, str]) -> NetConfig:
    def bps(mbit: float | None) -> float | None:
        return None if mbit is None else mbit * _MBIT

    schedule = tuple(DropEvent(cid, 2, phase) for cid, phase in sorted(drops.items()))
    return NetConfig(
        client_up_bw=bps(cfg.client_bw),
        client_down_bw=bps(cfg.client_bw),
        server_bw=bps(cfg.server_bw),
        latency=cfg.latency,
        dropout_schedule=schedule,
    )


def load_config_file(path: str) -> dict:
    """Read experiment settings from a TOML or JSON file."""
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
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a table of settings")
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    extra = set(data) - known
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    return data


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    layers: dict = {}
    if getattr(args, "config", None):
        layers.update(load_config_file(args.config))
    skip = {"command", "config", "axis", "grid"}
    layers.update({k: v for k, v in vars(args).items() if k not in skip})
    return ExperimentConfig(**layers)


def _prepare_instance(cfg: ExperimentConfig):
    """Resolve workload, data, and dropout schedule shared by all trials."""
    spec = parse_workload_arg(cfg.workload, cfg.domain)
    domain, workload = build_workload(spec)
    if cfg.records is not None:
        records = load_records_csv(cfg.records, domain)
    else:
        # data is fixed by the base seed; trials vary only the protocol seed
        records = synth_records(domain, cfg.records_per_client * cfg.clients, seed=cfg.seed)
    inputs = partition(records, cfg.clients, seed=cfg.seed)
    drops = parse_dropout_spec(cfg.dropouts, cfg.clients, cfg.seed)
    return domain, workload, inputs, drops


def _params_for_trial(cfg: ExperimentConfig, workload: Workload, trial_seed: int) -> ProtocolParams:
    field = FieldParams(cfg.prime) if cfg.prime is not None else FieldParams()
    return ProtocolParams(
        n=cfg.clients,
        workload=workload,
        rho=cfg.resolved_rho(),
        gamma=cfg.gamma,
        theta=cfg.theta,
        field=field,
        mode=cfg.mode,
        delta=cfg.delta,
        noise_disabled=cfg.noise_disabled,
        seed=trial_seed,
    )


def _trial_row(trial: int, params: ProtocolParams, result, exact: np.ndarray) -> dict:
    row = {
        "trial": trial,
        "seed": params.seed,
        "rmse": rmse(result.answer, exact),
        "rho_prime": result.privacy.rho_prime,
        "epsilon": result.privacy.epsilon,
        "included": len(result.transcript.included),
        "degraded": result.privacy.degraded,
    }
    m = result.metrics
    if m is not None:
        client_ids = [i for i in m.bytes_sent if i != SERVER_ID]
        row.update(
            {
                "sim_seconds": m.total_sim_time,
                "server_bytes_sent": m.bytes_sent[SERVER_ID],
                "server_bytes_received": m.bytes_received[SERVER_ID],
                "client_bytes_sent_max": max(m.bytes_sent[i] for i in client_ids),
                "client_bytes_received_max": max(m.bytes_received[i] for i in client_ids),
                "messages_total": sum(m.messages_sent.values()),
            }
        )
    return row


def _aggregate_rows(rows: list[dict]) -> dict:
    errs = np.array([r["rmse"] for r in rows], dtype=float)
    agg = {"rmse_mean": float(errs.mean()), "rmse_std": float(errs.std())}
    if "sim_seconds" in rows[0]:
        agg["sim_seconds_mean"] = float(np.mean([r["sim_seconds"] for r in rows]))
    return agg


def _echoed_config(cfg: ExperimentConfig) -> dict:
    # the output path is plumbing, not an experiment parameter; dropping it
    # keeps summaries byte-identical across re-runs into different dirs
    echo = asdict(cfg)
    echo.pop("out")
    return echo


def _write_csv(path: str, rows: list[dict]) -> None:
    import csv

    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _oracle_check(cfg, params, workload, inputs, result) -> tuple[bool, float, float]:
    """Compare the answer against the exact survivor-set oracle.

    The bound propagates per-client floor truncation (at most 1/gamma per
    measurement coordinate per included client) through the reconstruction.
    """
    included = sorted(result.transcript.included)
    records = [rec for cid in included for rec in inputs[cid].records]
    exact = exact_workload_answer(workload, records)
    strategy = server_round1(params)  # same seed as the run, same matrix
    pinv = np.linalg.pinv(strategy.matrix)
    bound = np.abs(workload.matrix @ pinv).sum(axis=1) * (len(included) / cfg.gamma)
    gap = np.abs(np.asarray(result.answer) - exact) - bound
    return bool(np.all(gap <= 1e-9)), float(gap.max()), float(bound.max())


def cmd_run(cfg: ExperimentConfig) -> int:
    if cfg.oracle_check and not cfg.noise_disabled:
        raise ValueError("--oracle-check needs --noise-disabled")
    domain, workload, inputs, drops = _prepare_instance(cfg)
    exact = exact_workload_answer(workload, [r for ci in inputs for r in ci.records])
    net = build_net(cfg, drops)

    rows: list[dict] = []
    metrics_rows: list[dict] = []
    oracle_failures: list[str] = []
    result = None
    for trial in range(cfg.trials):
        params = _params_for_trial(cfg, workload, cfg.seed + trial)
        result, metrics = run_simulation(params, inputs, net=net)
        row = _trial_row(trial, params, result, exact)
        if cfg.oracle_check:
            ok, worst_gap, bound = _oracle_check(cfg, params, workload, inputs, result)
            row["oracle_ok"] = ok
            if not ok:
                oracle_failures.append(
                    f"trial {trial}: answer exceeds truncation bound "
                    f"(worst gap {worst_gap:.3e}, bound {bound:.3e})"
                )
        rows.append(row)
        for mrow in metrics.csv_rows():
            metrics_rows.append({"trial": trial, **mrow})

    summary = {
        "schema": SCHEMA_VERSION,
        "command": "run",
        "config": _echoed_config(cfg),
        "privacy": result.privacy.to_dict(),
        "trials": rows,
        "aggregate": _aggregate_rows(rows),
    }
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "trials.csv"), rows)
    _write_csv(os.path.join(cfg.out, "metrics.csv"), metrics_rows)
    with open(os.path.join(cfg.out, "privacy.json"), "w") as fh:
        json.dump(result.privacy.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if oracle_failures:
        for line in oracle_failures:
            print(f"oracle check failed: {line}", file=sys.stderr)
        return 1
    return 0


def _parse_grid(axis: str, text: str | None) -> list[float]:
    raw = DEFAULT_GRIDS[axis] if text is None else text
    values = [float(v) for v in filter(None, (p.strip() for p in raw.split(",")))]
    if not values:
        raise ValueError("sweep grid is empty")
    return values


def _sweep_point_config(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "clients":
        return replace(cfg, clients=int(value))
    if axis == "theta":
        return replace(cfg, theta=value)
    if axis == "epsilon":
        return replace(cfg, epsilon=value, rho=None)
    if axis == "bandwidth":
        return replace(cfg, client_bw=value)
    return replace(cfg, latency=value)


def _thread_count() -> int:
    return max(1, int(os.environ.get("DHDMM_THREADS", "1")))


def cmd_sweep(cfg: ExperimentConfig, axis: str, grid_text: str | None) -> int:
    values = _parse_grid(axis, grid_text)
    # network axes need the message-level simulator for traffic and timing;
    # pure utility axes run the composed fast path unless the config already
    # pins network behavior
    needs_net = axis in ("clients", "bandwidth", "latency") or any(
        (cfg.client_bw, cfg.server_bw, cfg.latency, cfg.dropouts)
    )
    threads = _thread_count()

    rows: list[dict] = []
    for gi, value in enumerate(values):
        point = _sweep_point_config(cfg, axis, value)
        domain, workload, inputs, drops = _prepare_instance(point)
        exact = exact_workload_answer(workload, [r for ci in inputs for r in ci.records])
        net = build_net(point, drops) if needs_net else None

        def one_trial(trial: int, gi=gi, point=point, workload=workload, inputs=inputs, net=net):
            params = _params_for_trial(point, workload, point.seed + gi * point.trials + trial)
            if net is not None:
                result, _ = run_simulation(params, inputs, net=net)
            else:
                result = run_protocol(params, inputs)
            return params, result

        trial_ids = range(point.trials)
        if threads > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(one_trial, trial_ids))
        else:
            outcomes = [one_trial(t) for t in trial_ids]

        trial_rows = [_trial_row(t, params, result, exact) for t, (params, result) in enumerate(outcomes)]
        row = {
            "axis": axis,
            "value": int(value) if axis == "clients" else value,
            "rho": outcomes[0][0].rho,
            "epsilon": outcomes[0][1].privacy.epsilon,
            "clients": point.clients,
            "trials": point.trials,
        }
        row.update(_aggregate_rows(trial_rows))
        if "sim_seconds" in trial_rows[0]:
            row["server_bytes_sent"] = trial_rows[0]["server_bytes_sent"]
            row["server_bytes_received"] = trial_rows[0]["server_bytes_received"]
            row["client_bytes_sent_max"] = trial_rows[0]["client_bytes_sent_max"]
        rows.append(row)

    summary = {
        "schema": SCHEMA_VERSION,
        "command": "sweep",
        "axis": axis,
        "config": _echoed_config(cfg),
        "points": rows,
    }
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "sweep.csv"), rows)
    with open(os.path.join(cfg.out, "sweep.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_account(args: argparse.Namespace) -> int:
    if args.rho is not None and args.epsilon is not None:
        raise ValueError("give --rho or --epsilon, not both")
    if args.epsilon is not None:
        rho = rho_for_epsilon(args.epsilon, args.delta)
    else:
        rho = args.rho if args.rho is not None else 0.1
    params = PrivacyParams(
        rho=rho, theta=args.theta, n=args.clients, gamma=args.gamma, delta2=args.delta2
    )
    report = account(params, args.delta)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps unset flags out of the namespace so config-file values
    # survive the merge
    S = argparse.SUPPRESS
    p.add_argument("--config", default=None, help="TOML or JSON settings file")
    p.add_argument("--clients", type=int, default=S, help="number of clients")
    p.add_argument("--theta", type=float, default=S, help="assumed corrupted fraction")
    p.add_argument("--rho", type=float, default=S, help="zCDP budget")
    p.add_argument("--epsilon", type=float, default=S, help="DP budget, converted via --delta")
    p.add_argument("--delta", type=float, default=S, help="DP delta for conversion")
    p.add_argument("--gamma", type=float, default=S, help="fixed-point scaling factor")
    p.add_argument("--prime", type=int, default=S, help="field modulus override")
    p.add_argument("--mode", choices=("semi-honest", "malicious"), default=S)
    p.add_argument("--workload", default=S, help="marginals:K | identity | total | sf1:S | file.json")
    p.add_argument("--domain", default=S, help="attribute sizes, e.g. 4x4x2")
    p.add_argument("--records", default=S, help="records CSV (default: synthetic)")
    p.add_argument("--records-per-client", type=int, default=S, dest="records_per_client")
    p.add_argument("--client-bw", type=float, default=S, dest="client_bw", help="Mbit/s")
    p.add_argument("--server-bw", type=float, default=S, dest="server_bw", help="Mbit/s")
    p.add_argument("--latency", type=float, default=S, help="one-way link latency, seconds")
    p.add_argument("--dropouts", default=S, help='schedule, e.g. "shares:2,7@unmask"')
    p.add_argument("--trials", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--noise-disabled", action="store_true", default=S, dest="noise_disabled")
    p.add_argument("--oracle-check", action="store_true", default=S, dest="oracle_check")
    p.add_argument("--out", default=S, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="dhdmm", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute trials and write metrics")
    _add_experiment_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="scan one axis, one summary row per point")
    _add_experiment_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_p.add_argument("--grid", default=None, help="comma-separated axis values")

    acc_p = sub.add_parser("account", help="print the privacy report, no protocol run")
    acc_p.add_argument("--rho", type=float, default=None)
    acc_p.add_argument("--epsilon", type=float, default=None)
    acc_p.add_argument("--delta", type=float, default=1.0e-5)
    acc_p.add_argument("--clients", type=int, default=1000)
    acc_p.add_argument("--theta", type=float, default=0.0)
    acc_p.add_argument("--gamma", type=float, default=1.0e6)
    acc_p.add_argument("--delta2", type=float, default=1.0)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "account":
            return cmd_account(args)
        cfg = resolve_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_sweep(cfg, args.axis, args.grid)
    except ProtocolAborted as err:
        print(f"protocol abort: {err}", file=sys.stderr)
        return 1
    except (DhdmmError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
