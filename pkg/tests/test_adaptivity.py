"""Partition ownership maps, migration planning, and live resize/merge."""

import time

import pytest
from hypothesis import given, strategies as st

from statefarm import engine
from statefarm.adaptivity import (
    AdaptivityError,
    PartitionMap,
    grow,
    merge_workers,
    plan_migration,
    shrink,
)
from statefarm.workload import Uniform, make_stream, sequential_oracle, synthetic_spec


# ---------------------------------------------------------------------------
# PartitionMap


def test_owner_contiguous_block_example():
    pmap = PartitionMap(n_partitions=16, n_workers=4)
    assert pmap.owner(7) == 1


def test_owned_by_lists_contiguous_block():
    pmap = PartitionMap(n_partitions=16, n_workers=4)
    assert pmap.owned_by(0) == [0, 1, 2, 3]
    assert pmap.owned_by(3) == [12, 13, 14, 15]


def test_partition_map_rejects_bad_counts():
    with pytest.raises(ValueError):
        PartitionMap(0, 1)
    with pytest.raises(AdaptivityError):
        PartitionMap(4, 5)
    with pytest.raises(AdaptivityError):
        PartitionMap(4, 0)


def test_owner_index_bounds():
    pmap = PartitionMap(4, 2)
    with pytest.raises(IndexError):
        pmap.owner(4)
    with pytest.raises(IndexError):
        pmap.owner(-1)


@given(
    n_partitions=st.integers(1, 256),
    n_workers=st.integers(1, 256),
)
def test_partition_map_blocks_are_balanced(n_partitions, n_workers):
    if n_workers > n_partitions:
        with pytest.raises(AdaptivityError):
            PartitionMap(n_partitions, n_workers)
        return
    pmap = PartitionMap(n_partitions, n_workers)
    owners = [pmap.owner(i) for i in range(n_partitions)]
    # every partition has exactly one owner in range
    assert all(0 <= o < n_workers for o in owners)
    # contiguous: owner sequence is nondecreasing
    assert owners == sorted(owners)
    # every worker owns something, block sizes differ by at most one
    sizes = [owners.count(w) for w in range(n_workers)]
    assert min(sizes) >= 1
    assert max(sizes) - min(sizes) <= 1


# ---------------------------------------------------------------------------
# plan_migration


def test_plan_migration_same_count_is_empty():
    plan = plan_migration(PartitionMap(4, 2), 2)
    assert plan.moves == ()


def test_plan_migration_one_to_two():
    plan = plan_migration(PartitionMap(4, 1), 2)
    moved = {(m.partition, m.from_worker, m.to_worker) for m in plan.moves}
    assert moved == {(2, 0, 1), (3, 0, 1)}


def test_plan_migration_three_to_two():
    old = PartitionMap(6, 3)
    plan = plan_migration(old, 2)
    new = plan.new_map
    expected = sum(1 for i in range(6) if old.owner(i) != new.owner(i))
    assert len(plan.moves) == expected
    # everything the retired worker held moves to its new owner
    for i in old.owned_by(2):
        (move,) = [m for m in plan.moves if m.partition == i]
        assert move.from_worker == 2
        assert move.to_worker == new.owner(i)


def test_plan_migration_rejects_bad_target():
    with pytest.raises(AdaptivityError):
        plan_migration(PartitionMap(4, 2), 0)
    with pytest.raises(AdaptivityError):
        plan_migration(PartitionMap(4, 2), 5)


def test_plan_move_filters():
    plan = plan_migration(PartitionMap(8, 2), 4)
    for worker in range(4):
        assert all(m.from_worker == worker for m in plan.moves_from(worker))
        assert all(m.to_worker == worker for m in plan.moves_to(worker))


@given(
    n_partitions=st.integers(1, 128),
    old_workers=st.integers(1, 64),
    new_workers=st.integers(1, 64),
)
def test_plan_migration_is_exact_ownership_diff(n_partitions, old_workers, new_workers):
    if old_workers > n_partitions or new_workers > n_partitions:
        return
    old = PartitionMap(n_partitions, old_workers)
    plan = plan_migration(old, new_workers)
    seen = set()
    for move in plan.moves:
        assert move.partition not in seen
        seen.add(move.partition)
        assert old.owner(move.partition) == move.from_worker
        assert plan.new_map.owner(move.partition) == move.to_worker
    # applying the plan reproduces the new map with nothing lost or duplicated
    ownership = {i: old.owner(i) for i in range(n_partitions)}
    for move in plan.moves:
        ownership[move.partition] = move.to_worker
    assert ownership == {i: plan.new_map.owner(i) for i in range(n_partitions)}


# ---------------------------------------------------------------------------
# Live resize and merge

N_PARTS = 16


def _run_with_events(variant, n_workers, events, m=4000, **spec_kwargs):
    spec = synthetic_spec(variant, spin=False, **spec_kwargs)
    dist = Uniform(N_PARTS) if variant == "partitioned" else None
    tasks = make_stream(m, key_dist=dist) if dist else make_stream(m)
    farm = engine.build_farm(engine.farm_config_for(spec, n_workers), spec)
    for at, delta in events:
        farm.schedule_resize(at, delta)
    outputs, metrics = engine.run_to_completion(farm, tasks)
    _oracle_out, oracle_state = sequential_oracle(spec, tasks)
    return farm, metrics, oracle_state


def test_accumulator_grow_conserves_state():
    farm, metrics, want = _run_with_events("accumulator", 2, [(1000, +2)])
    assert farm.final_state == want
    assert metrics.tasks_processed == metrics.tasks_fed


def test_accumulator_shrink_conserves_state():
    farm, metrics, want = _run_with_events("accumulator", 4, [(1000, -2)])
    assert farm.final_state == want
    assert metrics.tasks_processed == metrics.tasks_fed


def test_partitioned_grow_matches_oracle():
    farm, metrics, want = _run_with_events(
        "partitioned", 2, [(1000, +1)], n_partitions=N_PARTS
    )
    assert farm.final_state == want
    assert metrics.migrated_partitions > 0


def test_partitioned_shrink_migrates_ownership_diff():
    old = PartitionMap(N_PARTS, 3)
    expected_moves = len(plan_migration(old, 2).moves)
    farm, metrics, want = _run_with_events(
        "partitioned", 3, [(2000, -1)], n_partitions=N_PARTS
    )
    assert farm.final_state == want
    assert metrics.migrated_partitions == expected_moves


def test_approx_grow_still_finds_minimum():
    spec = synthetic_spec("approx", spin=False)
    tasks = make_stream(4000)
    values = [t.value for t in tasks]
    values.reverse()  # strictly decreasing stream: every task improves
    for task, value in zip(tasks, values):
        task.value = value
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.schedule_resize(1000, +1)
    outputs, _metrics = engine.run_to_completion(farm, tasks)
    assert farm.final_state == 1
    assert outputs[-1] == 1


def test_grow_shrink_helpers_validate_delta():
    spec = synthetic_spec("accumulator", spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    with pytest.raises(AdaptivityError):
        grow(farm, -1)
    with pytest.raises(AdaptivityError):
        shrink(farm, -1)


def test_shrink_by_zero_is_noop():
    spec = synthetic_spec("accumulator", spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    shrink(farm, 0)
    grow(farm, 0)
    assert farm.worker_count == 2
    farm.finish()


def test_shrink_below_one_worker_rejected():
    spec = synthetic_spec("accumulator", spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    with pytest.raises(AdaptivityError):
        shrink(farm, 2)
    farm.finish()


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise AssertionError("timed out waiting for farm progress")
        time.sleep(0.005)


def test_merge_folds_locals_into_survivor():
    # Large flush frequency keeps both locals unflushed; round-robin dispatch
    # sends value 3 to worker 0 and value 4 to worker 1.
    spec = synthetic_spec("accumulator", flush_frequency=10**6, spin=False)
    tasks = make_stream(2)
    tasks[0].value, tasks[1].value = 3, 4
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    for task in tasks:
        farm.feed(task)
    _wait_for(lambda: sum(w.task_count for w in farm.workers) == 2)
    w0, w1 = farm.workers
    merge_workers(farm, w0.worker_id, w1.worker_id)
    assert w0.local == 7
    assert farm.worker_count == 1
    farm.finish()
    assert farm.final_state == 7


def test_merge_with_identity_local_keeps_survivor_unchanged():
    spec = synthetic_spec("accumulator", flush_frequency=10**6, spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    task = make_stream(1)[0]
    task.value = 5
    farm.feed(task)
    _wait_for(lambda: farm.workers[0].task_count == 1)
    merge_workers(farm, farm.workers[0].worker_id, farm.workers[1].worker_id)
    assert farm.workers[0].local == 5
    farm.finish()
    assert farm.final_state == 5


def test_merge_then_completion_matches_oracle():
    spec = synthetic_spec("accumulator", flush_frequency=8, spin=False)
    tasks = make_stream(3000)
    farm = engine.build_farm(engine.farm_config_for(spec, 3), spec)
    farm.start()
    for task in tasks[:1000]:
        farm.feed(task)
    _wait_for(lambda: sum(w.task_count for w in farm.workers) == 1000)
    merge_workers(farm, farm.workers[0].worker_id, farm.workers[1].worker_id)
    for task in tasks[1000:]:
        farm.feed(task)
    farm.finish()
    _out, want = sequential_oracle(spec, tasks)
    assert farm.final_state == want


def test_merge_rejected_for_other_patterns():
    spec = synthetic_spec("separate", spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    with pytest.raises(engine.FarmStateError):
        merge_workers(farm, 0, 1)
    farm.finish()


def test_merge_operand_validation():
    spec = synthetic_spec("accumulator", spin=False)
    farm = engine.build_farm(engine.farm_config_for(spec, 2), spec)
    farm.start()
    with pytest.raises(AdaptivityError):
        merge_workers(farm, 0, 0)
    with pytest.raises(AdaptivityError):
        merge_workers(farm, 0, 99)
    farm.finish()
