"""Measurement data model: trace ingestion, position projection, synthetic scenarios.

A trace is an ordered sequence of context samples recorded by a vehicle on one
drive. Rows that carry a measured end-to-end data rate additionally become
labeled transmission records for supervised training; unlabeled rows still
drive replay.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, TraceParseError

EARTH_RADIUS_M = 6371000.0

# Model feature order; every feature matrix and connectivity-map layer uses it.
FEATURE_NAMES = (
    "payload_mb",
    "rsrp",
    "rsrq",
    "sinr",
    "cqi",
    "ta",
    "freq_mhz",
    "velocity_kmh",
    "cell_id",
)

# Canonical trace CSV header, in exact column order.
CANONICAL_COLUMNS = (
    "t",
    "payload_mb",
    "rsrp",
    "rsrq",
    "sinr",
    "cqi",
    "ta",
    "freq_mhz",
    "velocity_kmh",
    "cell_id",
    "enb_id",
    "lat",
    "lon",
    "mno",
    "scenario",
    "direction",
    "rate_mbits",
)

DIRECTIONS = ("uplink", "downlink")


@dataclass(frozen=True)
class ContextSample:
    """One timestamped observation of application, channel, and mobility context."""

    timestamp: float  # seconds since trace start
    payload_mb: float
    rsrp: float  # dBm
    rsrq: float  # dB
    sinr: float  # dB
    cqi: float
    ta: float
    freq_mhz: float
    velocity_kmh: float
    cell_id: int
    enb_id: int
    lat: float
    lon: float
    position: tuple[float, float]  # planar meters relative to the trace origin
    mno: str
    scenario: str
    direction: str

    def features(self) -> np.ndarray:
        """Nine-feature vector in FEATURE_NAMES order."""
        return np.array(
            [
                self.payload_mb,
                self.rsrp,
                self.rsrq,
                self.sinr,
                self.cqi,
                self.ta,
                self.freq_mhz,
                self.velocity_kmh,
                float(self.cell_id),
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class TransmissionRecord:
    """A context sample labeled with the measured end-to-end data rate."""

    context: ContextSample
    data_rate: float  # MBit/s


@dataclass(frozen=True)
class Trace:
    """Ordered, immutable sample sequence from a single operator and direction."""

    id: str
    samples: tuple[ContextSample, ...]
    mno: str
    direction: str
    origin: tuple[float, float]  # (lat, lon) used for the planar projection

    def __post_init__(self):
        if not self.samples:
            raise DataError(f"trace {self.id!r} is empty")
        prev = None
        for i, s in enumerate(self.samples):
            if prev is not None and s.timestamp <= prev:
                raise DataError(
                    f"trace {self.id!r}: timestamps not strictly increasing at "
                    f"sample index {i}"
                )
            prev = s.timestamp
            if s.mno != self.mno or s.direction != self.direction:
                raise DataError(
                    f"trace {self.id!r}: sample {i} has ({s.mno!r}, {s.direction!r}), "
                    f"trace is ({self.mno!r}, {self.direction!r})"
                )

    @property
    def duration(self) -> float:
        return self.samples[-1].timestamp - self.samples[0].timestamp


def project_position(
    lat: float, lon: float, origin: tuple[float, float]
) -> tuple[float, float]:
    """Project geodetic coordinates onto a local tangent plane at `origin`.

    Equirectangular projection on a spherical earth; the origin maps to (0, 0).
    Adequate for drive-test extents (distance distortion stays well below 0.1%
    within 20 km of the origin at mid latitudes).
    """
    _check_latlon(lat, lon)
    _check_latlon(*origin)
    lat0, lon0 = origin
    x = EARTH_RADIUS_M * math.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return (x, y)


def unproject_position(
    x: float, y: float, origin: tuple[float, float]
) -> tuple[float, float]:
    """Inverse of project_position for the same origin."""
    lat0, lon0 = origin
    lat = lat0 + math.degrees(y / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return (lat, lon)


def _check_latlon(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise DataError(f"coordinates out of range: lat={lat}, lon={lon}")


def ingest_trace(
    path: str | Path,
    schema: dict[str, str] | None = None,
    origin: tuple[float, float] | None = None,
    trace_id: str | None = None,
) -> tuple[Trace, list[TransmissionRecord]]:
    """Parse a trace CSV into a Trace plus the labeled transmission records.

    `schema` maps canonical column names to the file's column names; None means
    the file uses the canonical header verbatim (order enforced). Rows with an
    empty rate column become unlabeled context samples. Positions are projected
    to planar meters at ingest; `origin` defaults to the first row's (lat, lon).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"trace file not found: {path}")
    mapping = {c: c for c in CANONICAL_COLUMNS}
    if schema is not None:
        unknown = set(schema) - set(CANONICAL_COLUMNS)
        if unknown:
            raise ConfigError(f"schema maps unknown columns: {sorted(unknown)}")
        mapping.update(schema)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if schema is None and tuple(header) != CANONICAL_COLUMNS:
            raise TraceParseError(1, f"header does not match canonical schema: {header}")
        col_index = {}
        for canonical, name in mapping.items():
            if name not in header:
                raise TraceParseError(1, f"missing column {name!r} (for {canonical!r})")
            col_index[canonical] = header.index(name)

        samples: list[ContextSample] = []
        records: list[TransmissionRecord] = []
        mno = direction = None
        prev_t = None
        for line_no, row in enumerate(reader, start=2):
            if not row or all(cell == "" for cell in row):
                continue
            try:
                raw = {c: row[i] for c, i in col_index.items()}
            except IndexError:
                raise TraceParseError(line_no, f"row has {len(row)} columns") from None
            sample, rate = _parse_row(raw, line_no, origin)
            if origin is None:
                origin = (sample.lat, sample.lon)
                sample = replace(
                    sample, position=project_position(sample.lat, sample.lon, origin)
                )
            if prev_t is not None and sample.timestamp <= prev_t:
                raise TraceParseError(
                    line_no,
                    f"timestamps not strictly increasing at sample index "
                    f"{len(samples)} (t={sample.timestamp} after {prev_t})",
                )
            prev_t = sample.timestamp
            if mno is None:
                mno, direction = sample.mno, sample.direction
            elif (sample.mno, sample.direction) != (mno, direction):
                raise TraceParseError(
                    line_no, "trace mixes operators or link directions"
                )
            samples.append(sample)
            if rate is not None:
                records.append(TransmissionRecord(sample, rate))
        if not samples:
            raise DataError(f"{path}: no data rows")

    trace = Trace(
        id=trace_id or path.stem,
        samples=tuple(samples),
        mno=mno,
        direction=direction,
        origin=origin,
    )
    return trace, records


def _parse_row(
    raw: dict[str, str], line_no: int, origin: tuple[float, float] | None
) -> tuple[ContextSample, float | None]:
    def num(col: str) -> float:
        try:
            v = float(raw[col])
        except ValueError:
            raise TraceParseError(line_no, f"column {col!r}: not a number: {raw[col]!r}")
        if not math.isfinite(v):
            raise TraceParseError(line_no, f"column {col!r}: non-finite value")
        return v

    def integer(col: str) -> int:
        try:
            return int(raw[col])
        except ValueError:
            raise TraceParseError(line_no, f"column {col!r}: not an integer: {raw[col]!r}")

    payload = num("payload_mb")
    if payload <= 0:
        raise TraceParseError(line_no, f"payload_mb must be > 0, got {payload}")
    velocity = num("velocity_kmh")
    if velocity < 0:
        raise TraceParseError(line_no, f"velocity_kmh must be >= 0, got {velocity}")
    freq = num("freq_mhz")
    if freq <= 0:
        raise TraceParseError(line_no, f"freq_mhz must be > 0, got {freq}")
    direction = raw["direction"]
    if direction not in DIRECTIONS:
        raise TraceParseError(line_no, f"unknown direction {direction!r}")
    lat, lon = num("lat"), num("lon")
    try:
        _check_latlon(lat, lon)
    except DataError as exc:
        raise TraceParseError(line_no, str(exc)) from None
    rate: float | None = None
    if raw["rate_mbits"] != "":
        rate = num("rate_mbits")
        if rate <= 0:
            raise TraceParseError(line_no, f"rate_mbits must be > 0, got {rate}")

    position = (0.0, 0.0) if origin is None else project_position(lat, lon, origin)
    sample = ContextSample(
        timestamp=num("t"),
        payload_mb=payload,
        rsrp=num("rsrp"),
        rsrq=num("rsrq"),
        sinr=num("sinr"),
        cqi=num("cqi"),
        ta=num("ta"),
        freq_mhz=freq,
        velocity_kmh=velocity,
        cell_id=integer("cell_id"),
        enb_id=integer("enb_id"),
        lat=lat,
        lon=lon,
        position=position,
        mno=raw["mno"],
        scenario=raw["scenario"],
        direction=direction,
    )
    return sample, rate


def emit_trace(
    trace: Trace,
    records: Sequence[TransmissionRecord] = (),
    path: str | Path | None = None,
) -> str:
    """Serialize a trace (plus optional labels) to the canonical CSV format.

    Floats are written with repr so that re-ingesting reproduces them exactly.
    Returns the CSV text; also writes it to `path` when given.
    """
    rate_by_ts = {r.context.timestamp: r.data_rate for r in records}
    lines = [",".join(CANONICAL_COLUMNS)]
    for s in trace.samples:
        rate = rate_by_ts.get(s.timestamp)
        lines.append(
            ",".join(
                [
                    repr(s.timestamp),
                    repr(s.payload_mb),
                    repr(s.rsrp),
                    repr(s.rsrq),
                    repr(s.sinr),
                    repr(s.cqi),
                    repr(s.ta),
                    repr(s.freq_mhz),
                    repr(s.velocity_kmh),
                    str(s.cell_id),
                    str(s.enb_id),
                    repr(s.lat),
                    repr(s.lon),
                    s.mno,
                    s.scenario,
                    s.direction,
                    "" if rate is None else repr(rate),
                ]
            )
        )
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text


def samples_to_matrix(samples: Iterable[ContextSample]) -> np.ndarray:
    """Stack sample feature vectors into an (n, 9) float matrix."""
    return np.array([s.features() for s in samples], dtype=np.float64).reshape(-1, 9)


def records_to_arrays(
    records: Sequence[TransmissionRecord],
) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and label vector for a list of transmission records."""
    X = samples_to_matrix(r.context for r in records)
    y = np.array([r.data_rate for r in records], dtype=np.float64)
    return X, y


# --- Synthetic scenarios -----------------------------------------------------

# Ground-truth rate models, vectorized over an (n, 9) feature matrix.
_SINR_COL = FEATURE_NAMES.index("sinr")

_STEP_EDGES = (5.0, 10.0, 15.0, 20.0, 25.0)
_STEP_RATES = (5.0, 9.0, 14.0, 20.0, 26.0, 32.0)


def _rate_sinr_steps(X: np.ndarray) -> np.ndarray:
    sinr = X[:, _SINR_COL]
    idx = np.searchsorted(_STEP_EDGES, sinr, side="right")
    return np.asarray(_STEP_RATES, dtype=np.float64)[idx]


def _rate_sinr_steps_inverse(X: np.ndarray) -> np.ndarray:
    sinr = X[:, _SINR_COL]
    idx = np.searchsorted(_STEP_EDGES, sinr, side="right")
    return np.asarray(_STEP_RATES[::-1], dtype=np.float64)[idx]


def _rate_sinr_linear(X: np.ndarray) -> np.ndarray:
    return 5.0 + 0.9 * X[:, _SINR_COL]


RATE_MODELS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sinr_steps": _rate_sinr_steps,
    "sinr_steps_inverse": _rate_sinr_steps_inverse,
    "sinr_linear": _rate_sinr_linear,
}

_PAYLOAD_CHOICES = np.array([0.1, 0.5] + list(range(1, 11)), dtype=np.float64)
_FREQ_CHOICES = np.array([900.0, 1800.0, 2100.0, 2600.0])


@dataclass(frozen=True)
class SyntheticSpec:
    """Configuration of the synthetic labeled-scenario generator."""

    n_samples: int = 1000
    tick: float = 1.0  # seconds between samples
    noise_sigma: float = 0.0  # MBit/s, gaussian label noise
    rate_model: str = "sinr_steps"
    label_every: int = 1  # label every k-th sample
    speed_kmh: float = 50.0
    mno: str = "A"
    scenario: str = "synthetic"
    direction: str = "uplink"
    origin: tuple[float, float] = (51.0, 7.0)
    trace_id: str | None = None


def _folded_walk(
    rng: np.random.Generator, n: int, start: float, step: float, lo: float, hi: float
) -> np.ndarray:
    """Random walk reflected into [lo, hi] via triangle-wave folding."""
    raw = start + np.cumsum(rng.normal(0.0, step, n))
    span = hi - lo
    m = np.mod(raw - lo, 2.0 * span)
    return lo + np.where(m <= span, m, 2.0 * span - m)


def generate_synthetic_scenario(
    spec: SyntheticSpec,
    seed: int,
    rate_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[Trace, list[TransmissionRecord]]:
    """Generate a trace along a synthetic trajectory with known ground truth.

    Labels are `g(features) + N(0, noise_sigma)`, floored at a small positive
    value so the data-rate invariant holds. Reproducible for a fixed seed.
    """
    if spec.n_samples <= 0:
        raise ConfigError(f"n_samples must be positive, got {spec.n_samples}")
    if spec.noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {spec.noise_sigma}")
    if spec.label_every < 1:
        raise ConfigError(f"label_every must be >= 1, got {spec.label_every}")
    if rate_fn is None:
        if spec.rate_model not in RATE_MODELS:
            raise ConfigError(f"unknown rate model {spec.rate_model!r}")
        rate_fn = RATE_MODELS[spec.rate_model]
    if spec.direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {spec.direction!r}")

    n = spec.n_samples
    rng = np.random.default_rng(seed)

    t = np.arange(n, dtype=np.float64) * spec.tick
    velocity = np.clip(spec.speed_kmh + rng.normal(0.0, 3.0, n), 0.0, None)
    heading = np.cumsum(rng.normal(0.0, 0.08, n))
    step_m = velocity / 3.6 * spec.tick
    x = np.concatenate([[0.0], np.cumsum(step_m * np.cos(heading))[:-1]])
    y = np.concatenate([[0.0], np.cumsum(step_m * np.sin(heading))[:-1]])

    sinr = _folded_walk(rng, n, 15.0, 1.2, 0.0, 30.0)
    rsrp = _folded_walk(rng, n, -95.0, 1.0, -120.0, -70.0)
    rsrq = _folded_walk(rng, n, -9.0, 0.4, -16.0, -3.0)
    cqi = np.clip(np.rint(1.0 + 14.0 * sinr / 30.0 + rng.normal(0.0, 0.7, n)), 1, 15)
    ta = rng.integers(0, 64, n).astype(np.float64)
    payload = rng.choice(_PAYLOAD_CHOICES, n)

    # Cell handovers roughly every 90 s of driving.
    n_cells = max(1, int(n * spec.tick / 90.0) + 1)
    boundaries = np.sort(rng.choice(np.arange(1, n), max(0, n_cells - 1), replace=False))
    cell_of_sample = np.searchsorted(boundaries, np.arange(n), side="right")
    freq_of_cell = rng.choice(_FREQ_CHOICES, n_cells)

    X = np.column_stack(
        [
            payload,
            rsrp,
            rsrq,
            sinr,
            cqi,
            ta,
            freq_of_cell[cell_of_sample],
            velocity,
            (100 + cell_of_sample).astype(np.float64),
        ]
    )
    labels = rate_fn(X)
    if spec.noise_sigma > 0:
        labels = labels + rng.normal(0.0, spec.noise_sigma, n)
    labels = np.maximum(labels, 1e-3)

    samples = []
    records = []
    for i in range(n):
        lat, lon = unproject_position(x[i], y[i], spec.origin)
        # Canonical position = projection of the emitted lat/lon, so a trace
        # written to CSV and re-ingested reproduces positions exactly.
        position = project_position(lat, lon, spec.origin)
        sample = ContextSample(
            timestamp=float(t[i]),
            payload_mb=float(payload[i]),
            rsrp=float(rsrp[i]),
            rsrq=float(rsrq[i]),
            sinr=float(sinr[i]),
            cqi=float(cqi[i]),
            ta=float(ta[i]),
            freq_mhz=float(X[i, 6]),
            velocity_kmh=float(velocity[i]),
            cell_id=int(100 + cell_of_sample[i]),
            enb_id=int(10 + cell_of_sample[i] // 3),
            lat=lat,
            lon=lon,
            position=position,
            mno=spec.mno,
            scenario=spec.scenario,
            direction=spec.direction,
        )
        samples.append(sample)
        if i % spec.label_every == 0:
            records.append(TransmissionRecord(sample, float(labels[i])))

    trace = Trace(
        id=spec.trace_id or f"synth-{spec.scenario}-{seed}",
        samples=tuple(samples),
        mno=spec.mno,
        direction=spec.direction,
        origin=spec.origin,
    )
    return trace, records
