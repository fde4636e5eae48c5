"""Analytical performance model for stateful task farms.

All functions are pure and operate in microseconds.  They produce the ideal
curves and asymptotic bounds that the benchmark harness writes next to
measured values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


@dataclass(frozen=True)
class CostParams:
    """Timing parameters of one synthetic experiment cell.

    t_a: inter-arrival time (us); t_f: per-task compute time (us);
    t_s: per-task state-update time (us); m: task count; n_w: worker count.
    """

    t_a: float = 0.0
    t_f: float = 0.0
    t_s: float = 0.0
    m: int = 0
    n_w: int = 1

    def __post_init__(self) -> None:
        if self.t_a < 0 or self.t_f < 0 or self.t_s < 0:
            raise ValueError("times must be >= 0")
        if self.m < 0:
            raise ValueError("task count must be >= 0")
        if self.n_w < 1:
            raise ValueError("worker count must be >= 1")


class CompletionTime(NamedTuple):
    ideal_us: float  # stateful ideal: m * (t_f + t_s) / n_w
    stateless_us: float  # m * max(t_a, t_f / n_w)


def service_time(p: CostParams) -> float:
    """Steady-state interval between result deliveries: max(t_a, t_f/n_w)."""
    return max(p.t_a, p.t_f / p.n_w)


def completion_time(p: CostParams) -> CompletionTime:
    """Time to process m tasks, in both the stateful-ideal and stateless forms."""
    return CompletionTime(
        ideal_us=p.m * (p.t_f + p.t_s) / p.n_w,
        stateless_us=p.m * service_time(p),
    )


def speedup_bound_separate(t_f: float, t_s: float) -> float:
    """Asymptotic speedup limit t_f/t_s + 1 when state updates serialize.

    Returns +inf when t_s is zero (no serialized fraction, unbounded).
    """
    if t_f < 0 or t_s < 0:
        raise ValueError("times must be >= 0")
    if t_s == 0:
        return math.inf
    return t_f / t_s + 1.0


def predicted_speedup_separate(t_f: float, t_s: float, n_w: int) -> float:
    """Speedup n_w(t_f+t_s) / (n_w*t_s + t_f) at finite parallelism degree.

    Equals 1 at n_w=1 and converges to speedup_bound_separate as n_w grows.
    """
    if t_f < 0 or t_s < 0:
        raise ValueError("times must be >= 0")
    if t_f == 0 and t_s == 0:
        raise ValueError("t_f and t_s cannot both be zero")
    if n_w < 1:
        raise ValueError("worker count must be >= 1")
    return n_w * (t_f + t_s) / (n_w * t_s + t_f)


def min_flush_frequency(t_f: float, t_s: float, n_w: int) -> float:
    """Accumulator flush frequency above which the collector keeps up: t_f*n_w/t_s.

    Returns 0 when t_s is zero (folding is free, any frequency works).
    """
    if t_f < 0 or t_s < 0:
        raise ValueError("times must be >= 0")
    if n_w < 1:
        raise ValueError("worker count must be >= 1")
    if t_s == 0:
        return 0.0
    return t_f * n_w / t_s
