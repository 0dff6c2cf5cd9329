"""Distributed matrix-mechanism query answering under zCDP.

Clients vectorize their records, measure them under an optimized strategy
matrix, add exact discrete Gaussian noise scaled for the honest-client
count, encode into a prime field, and securely aggregate; the server
decodes the sum and reconstructs workload answers by least squares. The
aggregate is the only thing the server learns, and every answer is plain
post-processing of it.

Typical entry points: `run_protocol` for one full execution (optionally on
the message-level network simulator via a `NetConfig`), `account` for
privacy bookkeeping without running anything, and the `dhdmm` command line
for batch experiments.
"""

from .baselines import (
    UtilityResult,
    central_hdmm,
    distributed,
    exact_workload_answer,
    local_gaussian,
    rmse,
)
from .dpnoise import (
    PrivacyParams,
    PrivacyReport,
    account,
    kappa,
    log_kappa,
    per_client_variance,
    sample_discrete_gaussian,
    zcdp_to_dp,
)
from .errors import (
    AbortBadSignature,
    AbortInconsistentView,
    AbortInsufficientShares,
    DhdmmError,
    DimensionError,
    InvalidRecord,
    NotSupported,
    OptimizationFailed,
    ProtocolAborted,
    RangeOverflow,
    RecoveryFailure,
)
from .fieldcodec import EncodedVector, FieldParams, decode, encode
from .matmech import (
    DomainSpec,
    OptimizerConfig,
    Strategy,
    Workload,
    HistogramVector,
    load_workload_json,
    measure,
    marginal_matrix,
    optimize_strategy,
    reconstruct,
    sensitivity,
    vectorize,
)
from .protocol import (
    ClientInput,
    ProtocolParams,
    ProtocolResult,
    client_round2,
    run_protocol,
    server_round1,
    server_round3,
)
from .secagg import AggConfig, AggSession, run_aggregation
from .simnet import (
    CostTable,
    DropEvent,
    NetConfig,
    RunMetrics,
    load_net_config,
    run_simulation,
)
from .workloads import (
    WorkloadSpec,
    build_marginals,
    build_sf1_shaped,
    build_workload,
    load_records_csv,
    partition,
    save_workload_json,
    synth_records,
    write_records_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AbortBadSignature",
    "AbortInconsistentView",
    "AbortInsufficientShares",
    "AggConfig",
    "AggSession",
    "ClientInput",
    "CostTable",
    "DhdmmError",
    "DimensionError",
    "DomainSpec",
    "DropEvent",
    "EncodedVector",
    "FieldParams",
    "HistogramVector",
    "InvalidRecord",
    "NetConfig",
    "NotSupported",
    "OptimizationFailed",
    "OptimizerConfig",
    "PrivacyParams",
    "PrivacyReport",
    "ProtocolAborted",
    "ProtocolParams",
    "ProtocolResult",
    "RangeOverflow",
    "RecoveryFailure",
    "RunMetrics",
    "Strategy",
    "UtilityResult",
    "Workload",
    "WorkloadSpec",
    "account",
    "build_marginals",
    "build_sf1_shaped",
    "build_workload",
    "central_hdmm",
    "client_round2",
    "decode",
    "distributed",
    "encode",
    "exact_workload_answer",
    "kappa",
    "load_net_config",
    "load_records_csv",
    "load_workload_json",
    "local_gaussian",
    "log_kappa",
    "marginal_matrix",
    "measure",
    "optimize_strategy",
    "partition",
    "per_client_variance",
    "reconstruct",
    "rmse",
    "run_aggregation",
    "run_protocol",
    "run_simulation",
    "save_workload_json",
    "sensitivity",
    "server_round1",
    "server_round3",
    "synth_records",
    "vectorize",
    "write_records_csv",
    "zcdp_to_dp",
]
