"""florasim: federated fine-tuning with low-rank adapters, at desk scale.

Clients train thin adapter factors on local shards; the server combines the
uploads by stacking (exact, any rank mix), independent averaging (biased,
equal ranks only) or zero-padding, and the package measures exactly what each
choice does to the global update, the loss, and the bytes on the wire.
"""

from .aggregation import (
    NoiseReport,
    WeightedUpdate,
    aggregate_fedit,
    aggregate_flora,
    aggregate_zero_padding,
    fedit_noise,
    oracle_delta,
    padded_updates,
    shuffled_stack,
)
from .comm import (
    CommEvent,
    CommLedger,
    CommSummary,
    ReportRow,
    charge_round,
    emit_report,
    read_report,
    summarize,
)
from .config import ExperimentConfig, PRESETS, config_to_text, parse_config
from .data import (
    ClientShard,
    EvalSet,
    GlobalTask,
    SkewSpec,
    export_shards,
    gen_task,
    holdout_split,
    import_shards,
    partition,
    scaling_factors,
)
from .errors import ConfigError, HeterogeneousRankError
from .lora import (
    BaseWeights,
    Dim,
    InitPolicy,
    LoraAdapter,
    adapter_delta,
    init_adapter,
    merge_into_base,
    scale_adapter,
    split_rank1,
    stack_adapters,
    trainable_fraction,
)
from .simulation import (
    ClientRuntime,
    ComparisonReport,
    ExperimentReport,
    RoundMetrics,
    ServerState,
    apply_updates,
    compare_strategies,
    run_experiment,
    run_round,
)
from .training import Batch, ToyModel, TrainConfig, evaluate, forward, local_train, loss_and_grads

__version__ = "0.1.0"

__all__ = [
    "BaseWeights",
    "Batch",
    "ClientRuntime",
    "ClientShard",
    "CommEvent",
    "CommLedger",
    "CommSummary",
    "ComparisonReport",
    "ConfigError",
    "Dim",
    "EvalSet",
    "ExperimentConfig",
    "ExperimentReport",
    "GlobalTask",
    "HeterogeneousRankError",
    "InitPolicy",
    "LoraAdapter",
    "NoiseReport",
    "PRESETS",
    "ReportRow",
    "RoundMetrics",
    "ServerState",
    "SkewSpec",
    "ToyModel",
    "TrainConfig",
    "WeightedUpdate",
    "adapter_delta",
    "aggregate_fedit",
    "aggregate_flora",
    "aggregate_zero_padding",
    "apply_updates",
    "charge_round",
    "compare_strategies",
    "config_to_text",
    "emit_report",
    "evaluate",
    "export_shards",
    "fedit_noise",
    "forward",
    "gen_task",
    "holdout_split",
    "import_shards",
    "init_adapter",
    "local_train",
    "loss_and_grads",
    "merge_into_base",
    "oracle_delta",
    "padded_updates",
    "parse_config",
    "partition",
    "read_report",
    "run_experiment",
    "run_round",
    "scale_adapter",
    "scaling_factors",
    "shuffled_stack",
    "split_rank1",
    "stack_adapters",
    "summarize",
    "trainable_fraction",
]
