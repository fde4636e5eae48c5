"""Benchmark harness CLI.

Subcommands:

  run <spec-file>   sweep parallelism degree / flush frequency / t_f:t_s
                    ratio per the experiment spec and write a CSV with
                    measured and model columns
  model             print the analytical model values for given timings
  calibrate         run busy-wait calibration and print the table
  verify            oracle-equivalence check for one or all patterns

Experiment spec files are flat ``key = value`` text, lists comma-separated.
Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import math
import os
import random
import statistics
import sys
from dataclasses import dataclass, field, fields

from . import engine, perfmodel, workload
from .workload import Constant, Skewed, SyntheticTask, Uniform

CSV_HEADER = "pattern,n_w,flush_freq,t_f_us,t_s_us,measured_us,ideal_us,speedup,predicted_speedup,bound"

PATTERNS = ("serial", "partitioned", "accumulator", "approx", "separate")

ENV_SEED = "STATEFARM_SEED"


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


# ---------------------------------------------------------------------------
# Experiment spec file


@dataclass
class ExperimentSpec:
    pattern: str = "accumulator"
    tasks: int = 10000
    t_f: float = 100.0
    t_s: float = 1.0
    t_a: float = 0.0
    ratios: list[float] = field(default_factory=list)  # empty: use t_f/t_s as-is
    degrees: list[int] = field(default_factory=lambda: [1])
    flush_freqs: list[int] = field(default_factory=lambda: [1])
    repetitions: int = 3
    seed: int = workload.DEFAULT_SEED
    n_partitions: int = 64
    key_dist: str = "uniform"  # uniform | skewed | constant
    theta: float = 1.2
    adaptivity_events: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if self.pattern not in PATTERNS:
            raise UsageError(f"unknown pattern {self.pattern!r}")
        if not self.degrees or not self.flush_freqs:
            raise UsageError("degrees and flush_freqs must be non-empty")
        if self.repetitions < 1:
            raise UsageError("repetitions must be >= 1")
        if self.tasks < 0:
            raise UsageError("tasks must be >= 0")
        if self.key_dist not in ("uniform", "skewed", "constant"):
            raise UsageError(f"unknown key distribution {self.key_dist!r}")


_LIST_KEYS = {"ratios", "degrees", "flush_freqs"}
_INT_KEYS = {"tasks", "repetitions", "seed", "n_partitions"}
_FLOAT_KEYS = {"t_f", "t_s", "t_a", "theta"}


def parse_experiment_spec(text: str) -> ExperimentSpec:
    spec = ExperimentSpec()
    known = {f.name for f in fields(ExperimentSpec)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        if key == "adaptivity_events":
            events = []
            for part in filter(None, (p.strip() for p in value.split(","))):
                at, _, delta = part.partition(":")
                events.append((int(at), int(delta)))
            setattr(spec, key, events)
        elif key in _LIST_KEYS:
            items = [p.strip() for p in value.split(",") if p.strip()]
            conv = int if key in ("degrees", "flush_freqs") else float
            setattr(spec, key, [conv(p) for p in items])
        elif key in _INT_KEYS:
            setattr(spec, key, int(value))
        elif key in _FLOAT_KEYS:
            setattr(spec, key, float(value))
        else:
            setattr(spec, key, value)
    spec.validate()
    return spec


def serialize_experiment_spec(spec: ExperimentSpec) -> str:
    lines = []
    for f in fields(ExperimentSpec):
        value = getattr(spec, f.name)
        if f.name == "adaptivity_events":
            value = ",".join(f"{at}:{delta:+d}" for at, delta in value)
        elif isinstance(value, list):
            value = ",".join(_plain(v) for v in value)
        else:
            value = _plain(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _plain(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# Records and CSV


@dataclass(frozen=True)
class MetricsRecord:
    pattern: str
    n_w: int
    flush_freq: int
    t_f_us: float
    t_s_us: float
    measured_us: float
    ideal_us: float
    speedup: float
    predicted_speedup: float
    bound: float


def emit_csv(records: list[MetricsRecord], path: str) -> None:
    if not records:
        raise ValueError("no records to emit")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            row = [
                r.pattern,
                str(r.n_w),
                str(r.flush_freq),
                _plain(r.t_f_us),
                _plain(r.t_s_us),
                _plain(r.measured_us),
                _plain(r.ideal_us),
                _plain(r.speedup),
                _plain(r.predicted_speedup),
                _plain(r.bound),
            ]
            fh.write(",".join(row) + "\n")


def parse_csv(path: str) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header in {path}")
    records = []
    for line in lines[1:]:
        cols = line.split(",")
        records.append(
            MetricsRecord(
                pattern=cols[0],
                n_w=int(cols[1]),
                flush_freq=int(cols[2]),
                t_f_us=float(cols[3]),
                t_s_us=float(cols[4]),
                measured_us=float(cols[5]),
                ideal_us=float(cols[6]),
                speedup=float(cols[7]),
                predicted_speedup=float(cols[8]),
                bound=float(cols[9]),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Operator law checking


def check_oplus_laws(oplus, zero, *, trials: int = 10000, seed: int = 0) -> list[str]:
    """Probe associativity, commutativity and identity on random triples."""
    rng = random.Random(seed)
    violations = []
    for _ in range(trials):
        a, b, c = (rng.randint(-10**6, 10**6) for _ in range(3))
        if oplus(oplus(a, b), c) != oplus(a, oplus(b, c)):
            violations.append(f"associativity: ({a},{b},{c})")
        if oplus(a, b) != oplus(b, a):
            violations.append(f"commutativity: ({a},{b})")
        if oplus(a, zero) != a:
            violations.append(f"identity: {a}")
        if violations:
            break
    return violations


# ---------------------------------------------------------------------------
# Experiment runner


def _build_tasks(spec: ExperimentSpec, t_f: float, t_s: float) -> list[SyntheticTask]:
    if spec.pattern == "partitioned":
        dist = {
            "uniform": Uniform(spec.n_partitions),
            "skewed": Skewed(spec.theta, spec.n_partitions),
            "constant": Constant(0),
        }[spec.key_dist]
    else:
        dist = Constant(0)
    tasks = workload.make_stream(
        spec.tasks, t_a=spec.t_a, t_f=t_f, t_s=t_s, key_dist=dist, seed=spec.seed
    )
    if spec.pattern == "approx":
        values = [t.value for t in tasks]
        random.Random(spec.seed).shuffle(values)
        for task, value in zip(tasks, values):
            task.value = value
    return tasks


def _spec_kwargs(spec: ExperimentSpec, t_s: float, freq: int) -> dict:
    kwargs: dict = {"variant": spec.pattern, "t_s": t_s}
    if spec.pattern == "partitioned":
        kwargs["n_partitions"] = spec.n_partitions
    if spec.pattern == "accumulator":
        kwargs["flush_frequency"] = freq
    return kwargs


def _run_once(
    pattern_spec, tasks, degree: int, adaptivity_events=()
) -> tuple[engine.RunMetrics, object]:
    config = engine.farm_config_for(pattern_spec, degree)
    farm = engine.build_farm(config, pattern_spec)
    for at, delta in adaptivity_events:
        farm.schedule_resize(at, delta)
    _outputs, metrics = engine.run_to_completion(farm, tasks)
    return metrics, farm.final_state


def _oracle_state(spec: ExperimentSpec, t_s: float, freq: int, tasks):
    twin = workload.synthetic_spec(**_spec_kwargs(spec, t_s, freq), spin=False)
    _outputs, state = workload.sequential_oracle(twin, tasks)
    return state


def run_experiment(spec: ExperimentSpec, log=lambda msg: None) -> list[MetricsRecord]:
    spec.validate()
    if spec.pattern == "accumulator":
        twin = workload.synthetic_spec(variant="accumulator", spin=False)
        violations = check_oplus_laws(twin.oplus, twin.s_zero, seed=spec.seed)
        if violations:
            raise VerificationError(f"oplus law violation: {violations[0]}")
    if spec.t_f > 0 or spec.t_s > 0 or spec.ratios:
        workload.calibrate()

    ratios = spec.ratios or [spec.t_f / spec.t_s if spec.t_s else math.inf]
    freqs = spec.flush_freqs if spec.pattern == "accumulator" else [spec.flush_freqs[0]]
    degrees = sorted(set(spec.degrees) | {1})

    # Fail fast: a short no-spin prefix must match the oracle exactly.
    prefix_kwargs = _spec_kwargs(spec, 0.0, freqs[0])
    prefix_tasks = _build_tasks(spec, 0.0, 0.0)[: min(spec.tasks, 200)]
    twin = workload.synthetic_spec(**prefix_kwargs, spin=False)
    _m, got = _run_once(twin, prefix_tasks, degree=2)
    _o, want = workload.sequential_oracle(twin, prefix_tasks)
    if got != want:
        raise VerificationError(f"prefix oracle mismatch: farm={got!r} oracle={want!r}")

    records = []
    for ratio in ratios:
        t_s = spec.t_s
        t_f = ratio * t_s if spec.ratios else spec.t_f
        for freq in freqs:
            pattern_spec = workload.synthetic_spec(**_spec_kwargs(spec, t_s, freq))
            tasks = _build_tasks(spec, t_f, t_s)
            oracle_state = _oracle_state(spec, 0.0, freq, tasks)
            base_us = None
            for degree in degrees:
                runs = []
                for _rep in range(spec.repetitions):
                    metrics, state = _run_once(
                        pattern_spec, tasks, degree, spec.adaptivity_events
                    )
                    if state != oracle_state:
                        raise VerificationError(
                            f"state mismatch at n_w={degree}: {state!r} != {oracle_state!r}"
                        )
                    runs.append(metrics.completion_us)
                measured = statistics.median(runs)
                if degree == 1:
                    base_us = measured
                params = perfmodel.CostParams(
                    t_a=spec.t_a, t_f=t_f, t_s=t_s, m=spec.tasks, n_w=degree
                )
                records.append(
                    MetricsRecord(
                        pattern=spec.pattern,
                        n_w=degree,
                        flush_freq=freq,
                        t_f_us=t_f,
                        t_s_us=t_s,
                        measured_us=measured,
                        ideal_us=perfmodel.completion_time(params).ideal_us,
                        speedup=base_us / measured if measured else math.nan,
                        predicted_speedup=perfmodel.predicted_speedup_separate(
                            t_f, t_s, degree
                        )
                        if (t_f or t_s)
                        else math.nan,
                        bound=perfmodel.speedup_bound_separate(t_f, t_s),
                    )
                )
                log(
                    f"{spec.pattern} n_w={degree} freq={freq} t_f={t_f} t_s={t_s} "
                    f"measured={measured / 1000.0:.2f} ms"
                )
    return records


# ---------------------------------------------------------------------------
# Verify


def verify_pattern(pattern: str, degrees: list[int], m: int, seed: int, out=None) -> None:
    """Check farm results against the sequential oracle; raise on mismatch."""
    if out is None:
        out = sys.stdout
    n_partitions = 16
    kwargs: dict = {"variant": pattern, "spin": False}
    if pattern == "partitioned":
        kwargs["n_partitions"] = n_partitions
    twin = workload.synthetic_spec(**kwargs)
    dist = Uniform(n_partitions) if pattern == "partitioned" else Constant(0)
    tasks = workload.make_stream(m, key_dist=dist, seed=seed)
    oracle_outputs, oracle_state = workload.sequential_oracle(twin, tasks)
    for degree in degrees:
        config = engine.farm_config_for(twin, degree)
        farm = engine.build_farm(config, twin)
        outputs, _metrics = engine.run_to_completion(farm, tasks)
        state = farm.final_state
        if pattern == "serial" and outputs != oracle_outputs:
            raise VerificationError(f"serial outputs differ at n_w={degree}")
        if state != oracle_state:
            raise VerificationError(
                f"state mismatch at n_w={degree}: {state!r} != {oracle_state!r}"
            )
        shown = state if pattern != "partitioned" else sum(state)
        print(f"pattern={pattern} n_w={degree} state={shown} OK", file=out)


# ---------------------------------------------------------------------------
# Argument parsing and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _default_seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get(ENV_SEED, workload.DEFAULT_SEED))


def _build_parser() -> _Parser:
    parser = _Parser(prog="statefarm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment spec and emit CSV")
    run_p.add_argument("spec_file")
    run_p.add_argument("--out", default=None, help="CSV output path")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--reps", type=int, default=None)
    run_p.add_argument("--pin", action="store_true", help="best-effort core pinning")

    model_p = sub.add_parser("model", help="print analytical model values")
    model_p.add_argument("--tf", type=float, required=True)
    model_p.add_argument("--ts", type=float, required=True)
    model_p.add_argument("--ta", type=float, default=0.0)
    model_p.add_argument("--tasks", type=int, default=10000)
    model_p.add_argument("--workers", type=_int_list, default=[1, 2, 4, 8, 16])

    sub.add_parser("calibrate", help="calibrate the busy-wait kernel")

    verify_p = sub.add_parser("verify", help="oracle-equivalence suite")
    verify_p.add_argument("--pattern", choices=PATTERNS + ("all",), default="all")
    verify_p.add_argument("--workers", type=_int_list, default=[1, 2, 4])
    verify_p.add_argument("--tasks", type=int, default=10000)
    verify_p.add_argument("--seed", type=int, default=None)
    return parser


def _cmd_run(args) -> int:
    if not os.path.isfile(args.spec_file):
        raise UsageError(f"spec file not found: {args.spec_file}")
    with open(args.spec_file, encoding="utf-8") as fh:
        spec = parse_experiment_spec(fh.read())
    if args.seed is not None:
        spec.seed = args.seed
    elif ENV_SEED in os.environ:
        spec.seed = int(os.environ[ENV_SEED])
    if args.reps is not None:
        spec.repetitions = args.reps
    if args.pin:
        try:
            os.sched_setaffinity(0, range(os.cpu_count() or 1))
        except (AttributeError, OSError):
            pass
    records = run_experiment(spec, log=lambda msg: print(msg, file=sys.stderr))
    out = args.out or os.path.splitext(args.spec_file)[0] + ".csv"
    emit_csv(records, out)
    print(f"wrote {len(records)} records to {out}")
    return 0


def _cmd_model(args) -> int:
    bound = perfmodel.speedup_bound_separate(args.tf, args.ts)
    print(f"speedup bound: {_plain(bound)}")
    for n_w in args.workers:
        params = perfmodel.CostParams(
            t_a=args.ta, t_f=args.tf, t_s=args.ts, m=args.tasks, n_w=n_w
        )
        predicted = perfmodel.predicted_speedup_separate(args.tf, args.ts, n_w)
        ct = perfmodel.completion_time(params)
        min_freq = perfmodel.min_flush_frequency(args.tf, args.ts, n_w)
        print(
            f"n_w={n_w} service_us={_plain(perfmodel.service_time(params))} "
            f"ideal_us={_plain(ct.ideal_us)} predicted_speedup={predicted:.4f} "
            f"min_flush_frequency={_plain(min_freq)}"
        )
    return 0


def _cmd_calibrate(_args) -> int:
    table = workload.calibrate(force=True)
    print(
        f"iterations_per_us={table.iterations_per_us:.2f} "
        f"call_overhead_us={table.call_overhead_us:.3f} "
        f"timer_resolution_us={table.timer_resolution_us:.4f}"
    )
    return 0


def _cmd_verify(args) -> int:
    seed = _default_seed(args.seed)
    names = PATTERNS if args.pattern == "all" else (args.pattern,)
    for name in names:
        degrees = [d for d in args.workers if name != "partitioned" or d <= 16]
        verify_pattern(name, degrees, args.tasks, seed)
    print("verification passed")
    return 0


def cli_main(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "model":
            return _cmd_model(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        return _cmd_verify(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 3
    except (engine.FarmRuntimeError, workload.CalibrationError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
