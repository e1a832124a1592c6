"""Trace-replay simulation: buffer accumulation, scheme decisions, virtual
transmissions, and the parameter-sweep harness.

A replay walks a recorded context trace at the scheme's evaluation rate. Each
tick accrues source data into the buffer and asks the scheme for a decision;
a transmit empties the buffer as one transmission whose data rate is a virtual
measurement sampled from the derivation model around the forest prediction.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .connmap import ConnectivityMap
from .derivation import DerivationModel, sample_virtual
from .errors import ConfigError, DataError, ModelError
from .metrics import mean_ci
from .regression import RegressionForest
from .schemes import SchemeConfig, SchemeState, decide, is_ml, is_predictive, metric_source
from .seeding import stable_seed
from .trace import Trace

DEFAULT_SOURCE_RATE_KBYTE_S = 50.0


@dataclass(frozen=True)
class RunConfig:
    """Everything one replay needs besides the trace itself."""

    scheme: SchemeConfig
    source_rate_kbyte_s: float = DEFAULT_SOURCE_RATE_KBYTE_S
    seed: int = 0
    rate_aggregation: str = "per_transmission"  # or "byte_weighted"
    delay_definition: str = "half"  # mean buffered-data age; "full" uses the whole interval
    forest: RegressionForest | None = None
    derivation: DerivationModel | None = None
    cmap: ConnectivityMap | None = None

    def __post_init__(self):
        if self.source_rate_kbyte_s <= 0:
            raise ConfigError(f"source rate must be > 0, got {self.source_rate_kbyte_s}")
        if self.rate_aggregation not in ("per_transmission", "byte_weighted"):
            raise ConfigError(f"unknown rate aggregation {self.rate_aggregation!r}")
        if self.delay_definition not in ("half", "full"):
            raise ConfigError(f"unknown delay definition {self.delay_definition!r}")


@dataclass(frozen=True)
class TransmissionEvent:
    """One buffered transmission emitted during replay."""

    time: float  # trace time of the transmit decision, seconds
    payload_mb: float
    predicted: float  # deterministic forest prediction, MBit/s
    virtual: float  # clipped virtual measurement, MBit/s
    duration: float  # payload * 8 / virtual, seconds
    accumulation_s: float  # buffer accumulation interval before this transmit


@dataclass
class RunResult:
    """Replay outcome: the event list plus aggregate statistics."""

    trace_id: str
    scheme_kind: str
    events: list[TransmissionEvent]
    mean_rate: float | None
    mean_delay: float | None
    total_mb: float
    n_transmissions: int
    runtime_s: float = field(compare=False)

    def to_dict(self) -> dict:
        # runtime_s stays out: artifacts must be byte-identical across runs.
        return {
            "trace_id": self.trace_id,
            "scheme_kind": self.scheme_kind,
            "n_transmissions": self.n_transmissions,
            "total_mb": self.total_mb,
            "mean_rate": self.mean_rate,
            "mean_delay": self.mean_delay,
            "events": [
                {
                    "time": e.time,
                    "payload_mb": e.payload_mb,
                    "predicted": e.predicted,
                    "virtual": e.virtual,
                    "duration": e.duration,
                    "accumulation_s": e.accumulation_s,
                }
                for e in self.events
            ],
        }


def buffering_delay(
    events: Sequence[TransmissionEvent], definition: str = "half"
) -> float:
    """Payload-weighted mean buffering delay over a run's events.

    Under constant-rate accumulation the mean age of the buffered data at
    transmit time is half the accumulation interval ("half"); "full" charges
    the whole interval instead.
    """
    if not events:
        raise DataError("no transmission events; buffering delay undefined")
    if definition not in ("half", "full"):
        raise ConfigError(f"unknown delay definition {definition!r}")
    factor = 0.5 if definition == "half" else 1.0
    weights = np.array([e.payload_mb for e in events])
    delays = np.array([e.accumulation_s * factor for e in events])
    return float(np.average(delays, weights=weights))


def replay(config: RunConfig, trace: Trace) -> RunResult:
    """Replay one trace under one scheme configuration. Deterministic per seed."""
    scheme = config.scheme
    forest, derivation, cmap = config.forest, config.derivation, config.cmap
    if forest is None or derivation is None:
        raise ModelError("replay requires a trained forest and derivation model")
    if forest.mno and trace.mno and forest.mno != trace.mno:
        raise DataError(f"trace operator {trace.mno!r} does not match model {forest.mno!r}")
    if forest.direction and trace.direction and forest.direction != trace.direction:
        raise DataError(
            f"trace direction {trace.direction!r} does not match model {forest.direction!r}"
        )
    if is_predictive(scheme.kind):
        if cmap is None:
            raise ModelError(f"{scheme.kind} requires a connectivity map")
        if scheme.kind == "ML-pCAT" and not cmap.has_layer(forest.mno, forest.direction):
            raise ModelError(
                f"connectivity map has no prediction layer for "
                f"({forest.mno!r}, {forest.direction!r})"
            )

    started = time.perf_counter()
    samples = trace.samples
    timestamps = np.array([s.timestamp for s in samples])
    t0 = timestamps[0]
    tick = 1.0 / scheme.evaluation_rate
    n_ticks = int(np.floor((timestamps[-1] - t0) * scheme.evaluation_rate))
    tick_times = t0 + tick * np.arange(1, n_ticks + 1)
    # Context between ticks: last observation carried forward.
    sample_idx = np.searchsorted(timestamps, tick_times, side="right") - 1
    predictive = is_predictive(scheme.kind)
    if predictive:
        future_idx = np.searchsorted(timestamps, tick_times + scheme.tau, side="right") - 1
        future_idx = np.clip(future_idx, 0, len(samples) - 1)

    source_mb_per_tick = config.source_rate_kbyte_s * tick / 1000.0
    rng = np.random.default_rng(config.seed)
    state = SchemeState()
    last_tx_time = float(t0)
    buffer = 0.0
    events: list[TransmissionEvent] = []
    ml = is_ml(scheme.kind)

    for k in range(n_ticks):
        t = float(tick_times[k])
        buffer += source_mb_per_tick
        state.buffer_mb = buffer
        state.dt = t - last_tx_time
        state.last_decision_time = t
        sample = samples[sample_idx[k]]
        future_pos = samples[future_idx[k]].position if predictive else None
        metric = metric_source(
            scheme, sample, forest=forest, cmap=cmap,
            buffer_mb=buffer, future_position=future_pos,
        )
        if not decide(scheme, state, metric, rng):
            continue
        if ml:
            predicted = metric.phi  # same computation: payload = clamped buffer
        else:
            lo, hi = forest.feature_ranges[0]
            features = sample.features()
            features[0] = min(max(buffer, lo), hi)
            predicted = float(forest.predict(features))
        vm = sample_virtual(derivation, predicted, rng)
        events.append(
            TransmissionEvent(
                time=t,
                payload_mb=buffer,
                predicted=predicted,
                virtual=vm.clipped,
                duration=buffer * 8.0 / vm.clipped,
                accumulation_s=state.dt,
            )
        )
        buffer = 0.0
        last_tx_time = t

    if events:
        rates = np.array([e.virtual for e in events])
        payloads = np.array([e.payload_mb for e in events])
        if config.rate_aggregation == "byte_weighted":
            mean_rate = float(np.average(rates, weights=payloads))
        else:
            mean_rate = float(rates.mean())
        mean_delay = buffering_delay(events, config.delay_definition)
        total_mb = float(payloads.sum())
    else:
        mean_rate = None
        mean_delay = None
        total_mb = 0.0

    return RunResult(
        trace_id=trace.id,
        scheme_kind=scheme.kind,
        events=events,
        mean_rate=mean_rate,
        mean_delay=mean_delay,
        total_mb=total_mb,
        n_transmissions=len(events),
        runtime_s=time.perf_counter() - started,
    )


# --- Phi_max sweep harness ----------------------------------------------------


@dataclass(frozen=True)
class SweepRun:
    """One replay inside a sweep, keyed by its grid point."""

    phi_max: float
    trace_id: str
    repetition: int
    seed: int
    n_transmissions: int
    mean_rate: float | None
    mean_delay: float | None
    total_mb: float


@dataclass(frozen=True)
class SweepPoint:
    """Aggregate over all runs sharing one phi_max value."""

    phi_max: float
    n_runs: int
    mean_rate: float
    rate_ci: float
    mean_delay: float
    delay_ci: float


@dataclass
class SweepTable:
    runs: list[SweepRun]
    points: list[SweepPoint]


_SWEEP_CTX: dict = {}


def _sweep_task(task: tuple[int, int, int]) -> SweepRun:
    phi_idx, trace_idx, rep = task
    ctx = _SWEEP_CTX
    base: RunConfig = ctx["base"]
    trace: Trace = ctx["traces"][trace_idx]
    phi_max = ctx["phi_values"][phi_idx]
    seed = stable_seed(base.seed, trace.id, phi_idx, rep)
    config = replace(
        base,
        scheme=replace(base.scheme, phi_max=phi_max),
        seed=seed,
    )
    result = replay(config, trace)
    return SweepRun(
        phi_max=phi_max,
        trace_id=trace.id,
        repetition=rep,
        seed=seed,
        n_transmissions=result.n_transmissions,
        mean_rate=result.mean_rate,
        mean_delay=result.mean_delay,
        total_mb=result.total_mb,
    )


def sweep(
    base: RunConfig,
    phi_max_values: Sequence[float],
    traces: Sequence[Trace],
    seeds_per_point: int,
    jobs: int = 1,
) -> SweepTable:
    """Replay the full (phi_max x trace x repetition) cross product.

    Per-run seeds are a stable mix of the base seed, trace id, phi_max index,
    and repetition, so any subset of points reproduces identically and the
    result is independent of execution order.
    """
    if not phi_max_values or not traces or seeds_per_point < 1:
        raise ConfigError("sweep needs phi_max values, traces, and seeds_per_point >= 1")
    tasks = [
        (pi, ti, rep)
        for pi in range(len(phi_max_values))
        for ti in range(len(traces))
        for rep in range(seeds_per_point)
    ]
    ctx = {"base": base, "traces": list(traces), "phi_values": list(phi_max_values)}
    global _SWEEP_CTX
    previous = _SWEEP_CTX
    _SWEEP_CTX = ctx
    try:
        if jobs > 1:
            # Children inherit _SWEEP_CTX through fork; tasks stay tiny.
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                chunk = max(1, len(tasks) // (jobs * 8))
                runs = list(pool.map(_sweep_task, tasks, chunksize=chunk))
        else:
            runs = [_sweep_task(t) for t in tasks]
    finally:
        _SWEEP_CTX = previous

    runs.sort(key=lambda r: (r.phi_max, r.trace_id, r.repetition))
    points = []
    for pi, phi in enumerate(phi_max_values):
        group = [r for r in runs if r.phi_max == phi]
        rates = [r.mean_rate for r in group if r.mean_rate is not None]
        delays = [r.mean_delay for r in group if r.mean_delay is not None]
        if not rates:
            raise DataError(f"no transmissions at phi_max={phi}; traces too short")
        r_mean, r_ci = mean_ci(rates) if len(rates) > 1 else (rates[0], 0.0)
        d_mean, d_ci = mean_ci(delays) if len(delays) > 1 else (delays[0], 0.0)
        points.append(
            SweepPoint(
                phi_max=phi,
                n_runs=len(group),
                mean_rate=r_mean,
                rate_ci=r_ci,
                mean_delay=d_mean,
                delay_ci=d_ci,
            )
        )
    return SweepTable(runs=runs, points=points)


def benchmark(config: RunConfig, trace: Trace, repetitions: int = 1) -> dict:
    """Wall-clock statistics of repeated replays of one configuration."""
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    times = []
    for _ in range(repetitions):
        started = time.perf_counter()
        replay(config, trace)
        times.append(time.perf_counter() - started)
    arr = np.array(times)
    return {
        "repetitions": repetitions,
        "mean_s": float(arr.mean()),
        "std_s": float(arr.std(ddof=1)) if repetitions > 1 else 0.0,
        "min_s": float(arr.min()),
        "max_s": float(arr.max()),
    }


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
