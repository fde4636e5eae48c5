"""Partition ownership and state migration planning for elastic farms.

Partition indices [0, N) are owned in contiguous balanced blocks:
owner(i) = floor(i * n_workers / N).  Changing the worker count moves exactly
the partitions whose owner differs between the old and the new map; the plan
is computed as that ownership set-difference.

The runtime side (grow/shrink/merge on a live farm) is coordinated by the
farm's emitter; the module-level helpers here just forward to the handle so
callers can keep all adaptivity imports in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .engine import FarmHandle


class AdaptivityError(RuntimeError):
    """Raised on invalid resize/merge requests."""


@dataclass(frozen=True)
class PartitionMap:
    """Contiguous balanced assignment of N partition indices to workers."""

    n_partitions: int
    n_workers: int

    def __post_init__(self) -> None:
        if self.n_partitions < 1:
            raise ValueError("partition count must be >= 1")
        if not 1 <= self.n_workers <= self.n_partitions:
            raise AdaptivityError(
                f"worker count must be in [1, {self.n_partitions}], got {self.n_workers}"
            )

    def owner(self, index: int) -> int:
        if not 0 <= index < self.n_partitions:
            raise IndexError(f"partition index {index} out of [0, {self.n_partitions})")
        return index * self.n_workers // self.n_partitions

    def owned_by(self, worker: int) -> list[int]:
        return [i for i in range(self.n_partitions) if self.owner(i) == worker]


@dataclass(frozen=True)
class Move:
    partition: int
    from_worker: int
    to_worker: int
    value: Any = None


@dataclass(frozen=True)
class MigrationPlan:
    old_map: PartitionMap
    new_map: PartitionMap
    moves: tuple[Move, ...] = field(default=())

    def moves_from(self, worker: int) -> list[Move]:
        return [m for m in self.moves if m.from_worker == worker]

    def moves_to(self, worker: int) -> list[Move]:
        return [m for m in self.moves if m.to_worker == worker]


def plan_migration(old: PartitionMap, new_n_workers: int) -> MigrationPlan:
    """Plan the partition transfers for a worker-count change.

    The plan contains one move per partition whose owner changes between the
    old map and the new contiguous map over new_n_workers.
    """
    if new_n_workers < 1:
        raise AdaptivityError("worker count must be >= 1")
    if new_n_workers > old.n_partitions:
        raise AdaptivityError(
            f"cannot run {new_n_workers} workers over {old.n_partitions} partitions"
        )
    new = PartitionMap(old.n_partitions, new_n_workers)
    moves = tuple(
        Move(partition=i, from_worker=old.owner(i), to_worker=new.owner(i))
        for i in range(old.n_partitions)
        if old.owner(i) != new.owner(i)
    )
    return MigrationPlan(old_map=old, new_map=new, moves=moves)


def grow(farm: "FarmHandle", delta: int) -> None:
    """Add delta workers to a running farm, migrating state as the pattern requires."""
    if delta < 0:
        raise AdaptivityError("grow delta must be >= 0")
    if delta:
        farm.resize(delta)


def shrink(farm: "FarmHandle", delta: int) -> None:
    """Remove delta workers from a running farm after draining and flushing them."""
    if delta < 0:
        raise AdaptivityError("shrink delta must be >= 0")
    if delta:
        farm.resize(-delta)


def merge_workers(farm: "FarmHandle", i: int, j: int) -> None:
    """Fold worker j's local accumulator into worker i and retire j silently."""
    farm.merge_workers(i, j)
