"""Transmission-decision policies: periodic baseline and the CAT family.

CAT and pCAT decide on measured SINR; ML-CAT and ML-pCAT decide on the
machine-learned predicted data rate. The predictive variants additionally
weigh the anticipated metric at the position expected after the prediction
horizon, queried from a connectivity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelError
from .trace import ContextSample

SCHEME_KINDS = ("periodic", "CAT", "pCAT", "ML-CAT", "ML-pCAT")

# Per-operator metric upper bounds: (mno, direction) -> phi_max.
# SINR-metric schemes use 30 dB everywhere; rate-metric bounds differ per
# operator and link direction.
PHI_MAX_SINR = 30.0
PHI_MAX_RATE = {
    ("A", "uplink"): 30.0,
    ("A", "downlink"): 30.0,
    ("B", "uplink"): 20.0,
    ("B", "downlink"): 50.0,
    ("C", "uplink"): 20.0,
    ("C", "downlink"): 15.0,
}


def is_ml(kind: str) -> bool:
    return kind in ("ML-CAT", "ML-pCAT")


def is_predictive(kind: str) -> bool:
    return kind in ("pCAT", "ML-pCAT")


@dataclass(frozen=True)
class SchemeConfig:
    """Parameters of one transmission scheme instance."""

    kind: str
    phi_min: float = 0.0
    phi_max: float = PHI_MAX_SINR
    alpha: float = 6.0
    gamma: float = 1.0
    tau: float = 30.0  # prediction horizon, seconds
    t_min: float = 10.0
    t_max: float = 120.0
    evaluation_rate: float = 1.0  # decision ticks per second
    period: float = 10.0  # periodic kind only

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if not self.phi_max > self.phi_min:
            raise ConfigError(f"phi_max must exceed phi_min ({self.phi_max} <= {self.phi_min})")
        if not 0 < self.t_min < self.t_max:
            raise ConfigError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.alpha <= 0 or self.gamma <= 0:
            raise ConfigError("alpha and gamma must be > 0")
        if self.evaluation_rate <= 0:
            raise ConfigError("evaluation_rate must be > 0")
        if self.kind == "periodic" and self.period <= 0:
            raise ConfigError("period must be > 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "tau": self.tau,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "evaluation_rate": self.evaluation_rate,
            "period": self.period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        return cls(**d)


def default_config(kind: str, mno: str = "A", direction: str = "uplink") -> SchemeConfig:
    """Scheme defaults: 1 Hz evaluation, t_min 10 s, t_max 120 s, alpha 6,
    gamma 2 (pCAT) / 0.5 (ML-pCAT), 10 s period, per-operator phi_max."""
    if kind not in SCHEME_KINDS:
        raise ConfigError(f"unknown scheme kind {kind!r}")
    gamma = {"pCAT": 2.0, "ML-pCAT": 0.5}.get(kind, 1.0)
    if is_ml(kind):
        try:
            phi_max = PHI_MAX_RATE[(mno, direction)]
        except KeyError:
            raise ConfigError(f"no default phi_max for ({mno!r}, {direction!r})") from None
    else:
        phi_max = PHI_MAX_SINR
    return SchemeConfig(kind=kind, phi_min=0.0, phi_max=phi_max, gamma=gamma)


@dataclass
class SchemeState:
    """Mutable per-run state of a scheme."""

    buffer_mb: float = 0.0
    dt: float = 0.0  # seconds since the last transmission
    last_decision_time: float = 0.0


@dataclass(frozen=True)
class MetricSample:
    """Decision metric at one tick: current value, optional forecast, normed value."""

    phi: float
    phi_future: float | None
    theta: float


def normalize_metric(phi: float, phi_min: float, phi_max: float) -> float:
    """Rescale a metric value into [0, 1] over [phi_min, phi_max], clamped.

    The clamp keeps the transmission probability a probability when measured
    values fall outside the configured range.
    """
    if not phi_max > phi_min:
        raise ConfigError(f"phi_max must exceed phi_min ({phi_max} <= {phi_min})")
    theta = (phi - phi_min) / (phi_max - phi_min)
    return min(1.0, max(0.0, theta))


def z_factor(phi: float, phi_future: float, theta: float, gamma: float) -> float:
    """Predictive exponent modifier from the metric change over the horizon.

    An improving metric (delta > 0) raises the exponent and suppresses early
    transmission; a degrading one lowers it and favors transmitting now.
    """
    delta = phi_future - phi
    if delta > 0:
        return max(abs(delta * (1.0 - theta) * gamma), 1.0)
    return 1.0 / max(abs(delta * theta * gamma), 1.0)


def tx_probability(
    theta: float, alpha: float, z: float, dt: float, t_min: float, t_max: float
) -> float:
    """Probability of transmitting now: 0 before t_min, 1 after t_max,
    theta^(alpha*z) in between."""
    if dt < t_min:
        return 0.0
    if dt > t_max:
        return 1.0
    return theta ** (alpha * z)


def decide(
    config: SchemeConfig,
    state: SchemeState,
    metric: MetricSample,
    rng: np.random.Generator,
) -> bool:
    """One transmission decision. Probabilistic kinds always consume one draw."""
    if config.kind == "periodic":
        return state.dt >= config.period
    if is_predictive(config.kind) and metric.phi_future is not None:
        z = z_factor(metric.phi, metric.phi_future, metric.theta, config.gamma)
    else:
        z = 1.0  # non-predictive kinds, or no map data at the future position
    p = tx_probability(metric.theta, config.alpha, z, state.dt, config.t_min, config.t_max)
    return rng.random() < p


def metric_source(
    config: SchemeConfig,
    context: ContextSample,
    forest=None,
    cmap=None,
    buffer_mb: float = 0.0,
    future_position: tuple[float, float] | None = None,
) -> MetricSample:
    """Assemble the decision metric for the configured scheme kind.

    SINR kinds read the measured SINR; ML kinds predict the data rate with the
    payload feature set to the current buffer size (clamped to the trained
    payload range). Predictive kinds forecast from the connectivity map; an
    unobserved future cell leaves the forecast empty (graceful CAT fallback).
    """
    kind = config.kind
    if kind == "periodic":
        return MetricSample(phi=0.0, phi_future=None, theta=0.0)

    if is_ml(kind):
        if forest is None:
            raise ModelError(f"{kind} requires a trained forest")
        lo, hi = forest.feature_ranges[0]  # payload_mb is feature 0
        features = context.features()
        features[0] = min(max(buffer_mb, lo), hi)
        phi = float(forest.predict(features))
    else:
        phi = context.sinr

    phi_future: float | None = None
    if is_predictive(kind):
        if cmap is None:
            raise ModelError(f"{kind} requires a connectivity map")
        if future_position is not None:
            if kind == "pCAT":
                phi_future = cmap.query_sinr(future_position)
            else:
                phi_future = cmap.query_rate(future_position, forest.mno, forest.direction)

    theta = normalize_metric(phi, config.phi_min, config.phi_max)
    return MetricSample(phi=phi, phi_future=phi_future, theta=theta)
