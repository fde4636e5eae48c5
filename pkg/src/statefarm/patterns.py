"""The five state access pattern specs and their one-call process helpers.

Each spec is a plain dataclass bundling the user callbacks that define the
pattern's semantics:

  SerialSpec       f(x, s) -> y and s(x, s) -> s', threaded in input order
                   under a single mutually exclusive state cell.
  PartitionedSpec  state vector of N entries, tasks routed by h(x), each
                   entry owned by exactly one worker.
  AccumulatorSpec  s' = g(x) (+) s with (+) associative and commutative;
                   workers fold locally and flush to the collector every
                   flush_frequency tasks.
  ApproxSpec       monotone refinement of a global best value; improving
                   candidates are accepted by the collector and broadcast
                   back to the workers.
  SeparateSpec     state-independent f(x) followed by an atomic
                   read-modify-write state update with the result.

Callbacks must be safe to call concurrently on distinct arguments and must
not retain references to state values between calls.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Union


class Variant(Enum):
    SERIAL = "serial"
    PARTITIONED = "partitioned"
    ACCUMULATOR = "accumulator"
    APPROX = "approx"
    SEPARATE = "separate"


class PatternSpecError(ValueError):
    """Raised when a pattern spec is internally inconsistent."""


@dataclass(frozen=True)
class SerialSpec:
    f: Callable[[Any, Any], Any]
    s: Callable[[Any, Any], Any]
    s0: Any

    variant = Variant.SERIAL


@dataclass(frozen=True)
class PartitionedSpec:
    f: Callable[[Any, Any], Any]
    s: Callable[[Any, Any], Any]
    h: Callable[[Any], int]
    n_partitions: int
    s_init: Any

    variant = Variant.PARTITIONED

    def __post_init__(self) -> None:
        if self.n_partitions < 1:
            raise PatternSpecError("partition count must be >= 1")


@dataclass(frozen=True)
class AccumulatorSpec:
    f: Callable[[Any, Any], Any]
    g: Callable[[Any], Any]
    oplus: Callable[[Any, Any], Any]
    s_zero: Any
    flush_frequency: int = 1

    variant = Variant.ACCUMULATOR

    def __post_init__(self) -> None:
        if self.flush_frequency < 1:
            raise PatternSpecError("flush frequency must be >= 1")


@dataclass(frozen=True)
class ApproxSpec:
    c: Callable[[Any, Any], bool]
    s_prime: Callable[[Any, Any], Any]
    s_init: Any
    less_than: Callable[[Any, Any], bool] = operator.lt
    # On grow, seed new workers from the collector's current global value;
    # when False they start from s_init and catch up via feedback.
    grow_seed_from_global: bool = True

    variant = Variant.APPROX


@dataclass(frozen=True)
class SeparateSpec:
    f: Callable[[Any], Any]
    s: Callable[[Any, Any], Any]
    s0: Any
    emit_cond: Optional[Callable[[Any], bool]] = None

    variant = Variant.SEPARATE


PatternSpec = Union[SerialSpec, PartitionedSpec, AccumulatorSpec, ApproxSpec, SeparateSpec]


def _run(spec: PatternSpec, tasks, n_workers: int, **config_kwargs):
    from . import engine

    config = engine.farm_config_for(spec, n_workers, **config_kwargs)
    farm = engine.build_farm(config, spec)
    return engine.run_to_completion(farm, tasks), farm


def serial_process(spec: SerialSpec, tasks, n_workers: int):
    """Run the serial pattern; returns the in-order result sequence."""
    (outputs, _metrics), _farm = _run(spec, tasks, n_workers)
    return outputs


def partitioned_process(spec: PartitionedSpec, tasks, n_workers: int):
    """Run the partitioned pattern; returns (results, final state vector)."""
    (outputs, _metrics), farm = _run(spec, tasks, n_workers)
    return outputs, farm.final_state


def accumulator_process(spec: AccumulatorSpec, tasks, n_workers: int):
    """Run the accumulator pattern; returns (results, final folded state)."""
    (outputs, _metrics), farm = _run(spec, tasks, n_workers)
    return outputs, farm.final_state


def approx_process(spec: ApproxSpec, tasks, n_workers: int):
    """Run the successive approximation pattern; returns the accepted values."""
    (outputs, _metrics), _farm = _run(spec, tasks, n_workers)
    return outputs


def separate_process(spec: SeparateSpec, tasks, n_workers: int):
    """Run the separate task/state pattern; returns the emitted state values."""
    (outputs, _metrics), _farm = _run(spec, tasks, n_workers)
    return outputs
