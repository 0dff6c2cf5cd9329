"""Acceptance gates: the headline guarantees this package must deliver.

Each test checks one end-to-end requirement at a fixed tolerance and prints a
single ``ACCEPTANCE NN PASS|FAIL`` line with the measured numbers, so a full
run doubles as a sign-off report (use ``pytest tests/test_acceptance.py -v -s``
to see the lines for passing gates too). These are deliberately the slowest
tests in the repository; the fast unit and property tests live in the sibling
modules.
"""

from __future__ import annotations

import itertools
import math
import random
import time

import numpy as np
from scipy import stats

from dhdmm.baselines import (
    central_hdmm,
    distributed,
    exact_workload_answer,
    local_gaussian,
    rmse,
)
from dhdmm.dpnoise import (
    PrivacyParams,
    discrete_gaussian_pmf,
    kappa,
    sample_discrete_gaussian,
    zcdp_to_dp,
)
from dhdmm.errors import AbortBadSignature, ProtocolAborted, RecoveryFailure
from dhdmm.fieldcodec import FieldParams
from dhdmm.matmech import DomainSpec, OptimizerConfig, Workload, optimize_strategy
from dhdmm.protocol import ProtocolParams, run_protocol, server_round1
from dhdmm.secagg import PHASES, AggConfig, AggSession, recover_secret, share_secret
from dhdmm.simnet import HEADER, SERVER_ID, NetConfig
from dhdmm.workloads import build_marginals, partition, synth_records


def _gate(num: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num:02d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


def test_01_discreteness_penalty_value():
    params = PrivacyParams(rho=0.1, n=5000, gamma=100.0, delta2=1.0, theta=0.0)
    t0 = time.perf_counter()
    value = kappa(params)
    elapsed = time.perf_counter() - t0
    rel = abs(value - 9.39e-86) / 9.39e-86
    _gate(
        1,
        rel < 0.01 and elapsed < 1.0,
        f"kappa={value:.6e} vs 9.39e-86 (rel err {rel:.2e}) in {elapsed * 1e3:.2f} ms",
    )


def test_02_noise_free_runs_hit_truncation_bound():
    # with noise disabled the only error is the floor in encode: each client
    # contributes at most 1/gamma per measurement, so the answer error is
    # bounded by rowsum(|W A+|) * n/gamma
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    gamma = 1000.0
    passed = 0
    worst = 0.0
    for case in range(100):
        while True:
            num_attrs = int(rng.integers(1, 4))
            sizes = rng.integers(2, 7, size=num_attrs)
            if int(np.prod(sizes)) <= 64:
                break
        domain = DomainSpec(tuple((f"a{j}", int(s)) for j, s in enumerate(sizes)))
        d = domain.total_size
        n = int(rng.integers(1, 201))
        per_client = int(rng.integers(0, 8))
        records = synth_records(domain, n * per_client, seed=case)
        inputs = partition(records, n, seed=case)
        kind = case % 4
        if kind == 0:
            workload = build_marginals(domain, int(rng.integers(1, num_attrs + 1)))
        elif kind == 1:
            workload = Workload(np.eye(d), domain)
        elif kind == 2:
            workload = Workload(np.ones((1, d)), domain)
        else:
            q = int(rng.integers(1, 2 * d + 1))
            workload = Workload(rng.standard_normal((q, d)), domain)
        params = ProtocolParams(
            n=n,
            workload=workload,
            rho=1.0,
            gamma=gamma,
            noise_disabled=True,
            seed=10_000 + case,
        )
        result = run_protocol(params, inputs)
        exact = exact_workload_answer(workload, records)
        strategy = server_round1(params)
        bound = np.abs(workload.matrix @ np.linalg.pinv(strategy.matrix)).sum(axis=1) * (
            n / gamma
        )
        err = np.abs(result.answer - exact)
        if np.all(err <= bound + 1e-9):
            passed += 1
            with np.errstate(divide="ignore", invalid="ignore"):
                util = np.max(np.where(bound > 0, err / bound, 0.0), initial=0.0)
            worst = max(worst, float(util))
    _gate(
        2,
        passed == 100,
        f"{passed}/100 noise-free instances inside rowsum(|W A+|) * n/gamma "
        f"(worst bound utilization {worst:.3f}); {time.perf_counter() - t0:.0f} s",
    )


def test_03_distributed_matches_central_at_theta_zero():
    t0 = time.perf_counter()
    domain = DomainSpec((("a", 2), ("b", 2), ("c", 2)))
    workload = build_marginals(domain, 2)
    n, rho, trials = 1000, 0.5, 200
    records = synth_records(domain, 20 * n, seed=7)
    inputs = partition(records, n, seed=7)
    exact = exact_workload_answer(workload, records)
    opt = OptimizerConfig(seed=11)
    strategy = optimize_strategy(workload, opt)
    agg = AggConfig(n=1, vector_len=1, k_neighbors=12, seed=0)
    dist = np.empty(trials)
    for s in range(trials):
        params = ProtocolParams(
            n=n, workload=workload, rho=rho, theta=0.0, seed=300 + s, agg=agg, optimizer=opt
        )
        dist[s] = rmse(run_protocol(params, inputs).answer, exact)
    cent = np.empty(trials)
    for s in range(trials):
        cent[s] = central_hdmm(workload, records, rho, seed=9000 + s, strategy=strategy).rmse
    pvalue = stats.ks_2samp(dist, cent).pvalue
    elapsed = time.perf_counter() - t0
    _gate(
        3,
        pvalue > 0.01 and elapsed < 300.0,
        f"KS 2-sample p={pvalue:.3f} over {trials}+{trials} trials at n={n} "
        f"(distributed mean rmse {dist.mean():.4f}, central {cent.mean():.4f}); "
        f"{elapsed:.0f} s (cap 300)",
    )


_ID8 = DomainSpec((("a", 8),))


def _identity_setup(n: int, seed: int):
    workload = Workload(np.eye(_ID8.total_size), _ID8)
    records = synth_records(_ID8, 10 * n, seed=seed)
    return workload, partition(records, n, seed=seed)


def test_04_theta_reserve_scales_rmse():
    t0 = time.perf_counter()
    workload, inputs = _identity_setup(100, 4)
    agg = AggConfig(n=1, vector_len=1, k_neighbors=8, seed=0)
    opt = OptimizerConfig(seed=42)
    trials = 500
    means = {}
    for theta in (0.0, 0.3):
        vals = np.empty(trials)
        for s in range(trials):
            vals[s] = distributed(
                workload, inputs, rho=1.0, seed=5000 + s, theta=theta, agg=agg, optimizer=opt
            ).rmse
        means[theta] = vals.mean()
    ratio = means[0.3] / means[0.0]
    target = math.sqrt(1.0 / 0.7)
    rel = abs(ratio / target - 1.0)
    _gate(
        4,
        rel <= 0.10,
        f"rmse ratio theta=0.3 / theta=0 is {ratio:.4f} vs sqrt(1/0.7)={target:.4f} "
        f"(rel dev {rel:.3f}, {trials} trials per arm); {time.perf_counter() - t0:.0f} s",
    )


def test_05_local_noise_pays_sqrt_n():
    n = 100
    workload, inputs = _identity_setup(n, 5)
    opt = OptimizerConfig(seed=42)
    strategy = optimize_strategy(workload, opt)
    agg = AggConfig(n=1, vector_len=1, k_neighbors=8, seed=0)
    loc = np.array(
        [
            local_gaussian(workload, inputs, 1.0, seed=100 + s, strategy=strategy).rmse
            for s in range(200)
        ]
    )
    dst = np.array(
        [
            distributed(workload, inputs, 1.0, seed=700 + s, agg=agg, optimizer=opt).rmse
            for s in range(60)
        ]
    )
    ratio = loc.mean() / dst.mean()
    _gate(5, ratio >= 5.0, f"local/distributed rmse ratio {ratio:.2f} at n={n} (needs >= 5)")


def _survivor_oracle(values: np.ndarray, drops: dict[int, str], p: int) -> tuple[list, list]:
    n = values.shape[0]
    included = [i for i in range(n) if i not in drops or drops[i] == "unmask"]
    # plain-int accumulation: n * (p-1) overflows uint64
    sums = [
        int(sum(int(v) for v in values[included, j]) % p) for j in range(values.shape[1])
    ]
    return included, sums


def test_06_dropout_sums_match_survivor_oracle():
    t0 = time.perf_counter()
    p = FieldParams().p
    rng = np.random.default_rng(66)

    # exhaustive: every dropout pattern within budget, complete graphs, n <= 8
    small_cases = 0
    small_bad = 0
    for n in range(2, 9):
        cfg = AggConfig(
            n=n, vector_len=3, k_neighbors=n - 1, max_dropout_fraction=0.45, seed=n
        )
        session = AggSession(cfg)
        # every secret needs threshold-many live shareholders among its k
        # neighbors, so r <= k - t is the recoverable envelope
        budget = min(cfg.max_dropouts(), cfg.degree() - cfg.threshold_value())
        values = rng.integers(0, p, size=(n, 3), dtype=np.uint64)
        for r in range(budget + 1):
            for ids in itertools.combinations(range(n), r):
                for phases in itertools.product(PHASES, repeat=r):
                    drops = dict(zip(ids, phases))
                    out, tr = session.aggregate(values, drops)
                    included, sums = _survivor_oracle(values, drops, p)
                    small_cases += 1
                    if list(tr.included) != included or [int(v) for v in out.values] != sums:
                        small_bad += 1

    # randomized: n=100, up to 10% dropouts, fresh inputs per case
    n = 100
    rand_cases = 0
    rand_bad = 0
    for si in range(100):
        session = AggSession(AggConfig(n=n, vector_len=2, seed=si))
        for _ in range(1000):
            values = rng.integers(0, p, size=(n, 2), dtype=np.uint64)
            m = int(rng.integers(0, 11))
            ids = rng.choice(n, size=m, replace=False)
            picks = rng.integers(0, len(PHASES), size=m)
            drops = {int(i): PHASES[int(k)] for i, k in zip(ids, picks)}
            out, tr = session.aggregate(values, drops)
            included, sums = _survivor_oracle(values, drops, p)
            rand_cases += 1
            if list(tr.included) != included or [int(v) for v in out.values] != sums:
                rand_bad += 1

    _gate(
        6,
        small_bad == 0 and rand_bad == 0 and rand_cases == 100_000,
        f"exhaustive n<=8: {small_cases} patterns, {small_bad} mismatches; "
        f"randomized n=100: {rand_cases} cases, {rand_bad} mismatches; "
        f"{time.perf_counter() - t0:.0f} s",
    )


def test_07_share_threshold_is_exact():
    p = FieldParams().p
    rng = np.random.default_rng(77)
    xs = [1, 2, 3, 4, 5]
    recovered = failed = 0
    ok = True
    for _ in range(5):
        secret = int(rng.integers(0, p, dtype=np.uint64))
        shares = share_secret(secret, 3, xs, p, rng)
        for sub in itertools.combinations(shares, 3):
            recovered += recover_secret(sub, 3, p) == secret
        for sub in itertools.combinations(shares, 2):
            try:
                recover_secret(sub, 3, p)
                ok = False  # must refuse below-threshold recovery
            except RecoveryFailure:
                failed += 1
            # forcing an interpolation through 2 points must not hit the secret
            ok = ok and recover_secret(sub, 2, p) != secret
    _gate(
        7,
        ok and recovered == 50 and failed == 50,
        f"5 secrets: {recovered}/50 3-of-5 subsets recover, {failed}/50 2-of-5 refuse",
    )


def test_08_discrete_gaussian_sampler_distribution():
    t0 = time.perf_counter()
    details = []
    ok = True
    for sigma2 in (1.0, 10.0, 100.0):
        rng = random.Random(8000 + int(sigma2))
        draws = sample_discrete_gaussian(sigma2, rng, size=10**6)
        halfwidth = int(math.ceil(8.0 * math.sqrt(sigma2))) + 2
        ok = ok and int(np.abs(draws).max()) <= halfwidth
        support = np.arange(-halfwidth, halfwidth + 1)
        obs = np.bincount(
            (draws + halfwidth).astype(np.int64), minlength=support.size
        ).astype(np.float64)
        exp = discrete_gaussian_pmf(support, sigma2)
        exp = exp / exp.sum() * draws.size
        keep = np.where(exp >= 5.0)[0]
        lo, hi = keep[0], keep[-1]
        obs_b = np.concatenate(([obs[:lo].sum()], obs[lo : hi + 1], [obs[hi + 1 :].sum()]))
        exp_b = np.concatenate(([exp[:lo].sum()], exp[lo : hi + 1], [exp[hi + 1 :].sum()]))
        while exp_b[0] < 5.0:  # fold a thin tail bin into its neighbor
            exp_b[1] += exp_b[0]
            obs_b[1] += obs_b[0]
            exp_b, obs_b = exp_b[1:], obs_b[1:]
        while exp_b[-1] < 5.0:
            exp_b[-2] += exp_b[-1]
            obs_b[-2] += obs_b[-1]
            exp_b, obs_b = exp_b[:-1], obs_b[:-1]
        pvalue = stats.chisquare(obs_b, exp_b).pvalue
        sums = draws.reshape(-1, 100).sum(axis=1)
        var_ratio = float(sums.var()) / (100.0 * sigma2)
        ok = ok and pvalue >= 0.001 and abs(var_ratio - 1.0) <= 0.05
        details.append(f"sigma2={sigma2:g}: GOF p={pvalue:.3f}, sum-var/(n sigma2)={var_ratio:.3f}")
    _gate(8, ok, "; ".join(details) + f"; {time.perf_counter() - t0:.0f} s")


def test_09_bytes_scale_with_clients_not_per_client():
    t0 = time.perf_counter()
    domain = DomainSpec((("a", 4), ("b", 4)))
    workload = build_marginals(domain, 1)
    agg = AggConfig(n=1, vector_len=1, k_neighbors=27, seed=0)  # same k at both sizes
    measured = {}
    for n in (100, 3000):
        records = synth_records(domain, 5 * n, seed=9)
        inputs = partition(records, n, seed=9)
        params = ProtocolParams(n=n, workload=workload, rho=0.5, seed=99, agg=agg)
        metrics = run_protocol(params, inputs, net=NetConfig()).metrics
        clients = [i for i in metrics.bytes_sent if i != SERVER_ID]
        per_client = float(
            np.mean([metrics.bytes_sent[i] + metrics.bytes_received[i] for i in clients])
        )
        server = metrics.bytes_sent[SERVER_ID] + metrics.bytes_received[SERVER_ID]
        measured[n] = (per_client, server, metrics.total_sim_time)
    c_ratio = measured[3000][0] / measured[100][0]
    s_ratio = measured[3000][1] / measured[100][1]
    t_ratio = measured[3000][2] / measured[100][2]
    _gate(
        9,
        c_ratio < 2.0 and s_ratio >= 20.0 and t_ratio <= 10.0,
        f"n=100 -> n=3000 at fixed k=27: per-client bytes x{c_ratio:.2f} (< 2), "
        f"server bytes x{s_ratio:.1f} (>= 20), sim time x{t_ratio:.2f} (<= 10); "
        f"{time.perf_counter() - t0:.0f} s wall",
    )


def test_10_tampered_frames_abort_with_offender():
    t0 = time.perf_counter()
    domain = DomainSpec((("a", 4),))
    workload = Workload(np.eye(domain.total_size), domain)
    n = 12
    records = synth_records(domain, 3 * n, seed=10)
    inputs = partition(records, n, seed=10)
    params = ProtocolParams(n=n, workload=workload, rho=1.0, mode="malicious", seed=1234)

    lengths: list[int] = []

    def record(index, raw):
        lengths.append(len(raw))
        return raw

    clean = run_protocol(params, inputs, net=NetConfig(), tamper=record)
    assert clean.faults == []
    total = len(lengths)

    rng = np.random.default_rng(1010)
    trials = 1000
    detected = attributed = 0
    for _ in range(trials):
        target = int(rng.integers(0, total))
        offset = int(rng.integers(0, lengths[target]))
        mask = int(rng.integers(1, 256))
        seen: dict[str, bytes] = {}

        def flip(index, raw, target=target, offset=offset, mask=mask, seen=seen):
            if index != target:
                return raw
            mutated = bytearray(raw)
            mutated[offset] ^= mask
            seen["raw"] = bytes(mutated)
            return bytes(mutated)

        try:
            run_protocol(params, inputs, net=NetConfig(), tamper=flip)
        except ProtocolAborted as err:
            detected += 1
            claimed = HEADER.unpack_from(seen["raw"])[1]
            if isinstance(err, AbortBadSignature) and err.sender == claimed:
                attributed += 1
    _gate(
        10,
        detected == trials and attributed == trials,
        f"{detected}/{trials} single-byte tampers aborted, {attributed} named the "
        f"claimed sender of the bad frame ({total} messages per run); "
        f"{time.perf_counter() - t0:.0f} s",
    )


def test_11_zcdp_epsilon_conversion():
    eps = zcdp_to_dp(0.1, 1e-5)
    _gate(
        11,
        abs(eps - 2.2460) <= 1e-3,
        f"epsilon(rho=0.1, delta=1e-5) = {eps:.6f} vs 2.2460 +/- 1e-3",
    )
