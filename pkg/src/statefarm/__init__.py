"""Stateful task-farm engine with pluggable state access patterns."""

from .adaptivity import (
    AdaptivityError,
    MigrationPlan,
    Move,
    PartitionMap,
    grow,
    merge_workers,
    plan_migration,
    shrink,
)
from .engine import (
    ErrorResult,
    FarmConfig,
    FarmConfigError,
    FarmHandle,
    FarmRuntimeError,
    FarmStateError,
    OwnershipError,
    RunMetrics,
    Scheduling,
    StreamEnvelope,
    build_farm,
    farm_config_for,
    feedback_broadcast,
    run_to_completion,
    schedule_next,
)
from .patterns import (
    AccumulatorSpec,
    ApproxSpec,
    PartitionedSpec,
    PatternSpec,
    PatternSpecError,
    SeparateSpec,
    SerialSpec,
    Variant,
    accumulator_process,
    approx_process,
    partitioned_process,
    separate_process,
    serial_process,
)
from .perfmodel import (
    CompletionTime,
    CostParams,
    completion_time,
    min_flush_frequency,
    predicted_speedup_separate,
    service_time,
    speedup_bound_separate,
)
from .workload import (
    CalibrationError,
    CalibrationTable,
    Constant,
    Skewed,
    SyntheticTask,
    Uniform,
    calibrate,
    make_stream,
    sequential_oracle,
    spin_us,
    synthetic_spec,
)

__version__ = "0.1.0"
