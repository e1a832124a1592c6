"""Probabilistic derivation modeling on top of the deterministic predictor.

A 1-D Gaussian-process regression maps predicted data rate to the distribution
of measured data rate. Replay then draws "virtual measurements": a gaussian
sample around the GPR posterior mean, clipped into the observed label range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import DataError, ModelError
from .trace import TransmissionRecord, records_to_arrays

MAX_INDUCING = 512
_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel hyperparameters; None selects a data-driven heuristic.

    Heuristics: length_scale = std of the inputs, signal_var = variance of the
    targets, noise_var = variance of the (measurement - prediction) residuals.
    """

    length_scale: float | None = None
    signal_var: float | None = None
    noise_var: float | None = None


@dataclass(frozen=True)
class VirtualMeasurement:
    """One sampled stand-in for a real measurement."""

    predicted: float  # deterministic forest output
    raw_sample: float  # gaussian draw around the posterior mean
    clipped: float  # raw sample clipped into the observed label range


@dataclass
class DerivationModel:
    """Fitted 1-D GPR with posterior mean/std functions and a clip range."""

    inducing_inputs: np.ndarray
    inducing_targets: np.ndarray
    inducing_noise: np.ndarray  # per-point noise variance (base + bin inflation)
    length_scale: float
    signal_var: float
    noise_var: float
    clip_lo: float
    clip_hi: float
    target_mean: float
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)
    _alpha: np.ndarray | None = field(default=None, repr=False, compare=False)

    def _solve_state(self) -> tuple[np.ndarray, np.ndarray]:
        if self._chol is None:
            K = _rbf(self.inducing_inputs, self.inducing_inputs,
                     self.length_scale, self.signal_var)
            K[np.diag_indices_from(K)] += self.inducing_noise + 1e-8 * self.signal_var
            try:
                L = linalg.cholesky(K, lower=True)
            except linalg.LinAlgError as exc:
                raise ModelError(f"kernel matrix singular after jitter: {exc}") from exc
            resid = self.inducing_targets - self.target_mean
            self._chol = L
            self._alpha = linalg.cho_solve((L, True), resid)
        return self._chol, self._alpha

    def mean(self, v: np.ndarray | float) -> np.ndarray | float:
        """Posterior mean of measured rate given predicted rate."""
        _, alpha = self._solve_state()
        q = np.atleast_1d(np.asarray(v, dtype=np.float64))
        kv = _rbf(q, self.inducing_inputs, self.length_scale, self.signal_var)
        out = self.target_mean + kv @ alpha
        return float(out[0]) if np.isscalar(v) else out

    def std(self, v: np.ndarray | float) -> np.ndarray | float:
        """Posterior predictive standard deviation (includes the noise term)."""
        L, _ = self._solve_state()
        q = np.atleast_1d(np.asarray(v, dtype=np.float64))
        kv = _rbf(q, self.inducing_inputs, self.length_scale, self.signal_var)
        w = linalg.solve_triangular(L, kv.T, lower=True)
        var = self.signal_var + self.noise_var - np.sum(w * w, axis=0)
        out = np.sqrt(np.maximum(var, 0.0))
        return float(out[0]) if np.isscalar(v) else out

    def log_marginal_likelihood(self) -> float:
        L, alpha = self._solve_state()
        resid = self.inducing_targets - self.target_mean
        n = resid.shape[0]
        return float(
            -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
        )

    def to_dict(self) -> dict:
        return {
            "inducing_inputs": self.inducing_inputs.tolist(),
            "inducing_targets": self.inducing_targets.tolist(),
            "inducing_noise": self.inducing_noise.tolist(),
            "length_scale": self.length_scale,
            "signal_var": self.signal_var,
            "noise_var": self.noise_var,
            "clip": [self.clip_lo, self.clip_hi],
            "target_mean": self.target_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DerivationModel":
        return cls(
            inducing_inputs=np.asarray(d["inducing_inputs"], dtype=np.float64),
            inducing_targets=np.asarray(d["inducing_targets"], dtype=np.float64),
            inducing_noise=np.asarray(d["inducing_noise"], dtype=np.float64),
            length_scale=d["length_scale"],
            signal_var=d["signal_var"],
            noise_var=d["noise_var"],
            clip_lo=d["clip"][0],
            clip_hi=d["clip"][1],
            target_mean=d["target_mean"],
        )


def _rbf(a: np.ndarray, b: np.ndarray, length_scale: float, signal_var: float) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def _compress(
    pred: np.ndarray, meas: np.ndarray, max_inducing: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equal-frequency binning to at most max_inducing abscissae.

    Each bin contributes its mean input, mean target, and the within-bin target
    variance as extra noise, so the compressed fit stays honest about the
    spread it removed. With n <= max_inducing this is exact (singleton bins).
    """
    n = pred.shape[0]
    order = np.argsort(pred, kind="stable")
    p, m = pred[order], meas[order]
    bins = min(max_inducing, n)
    edges = np.linspace(0, n, bins + 1).astype(np.int64)
    u = np.empty(bins)
    t = np.empty(bins)
    extra = np.empty(bins)
    for i in range(bins):
        seg = slice(edges[i], edges[i + 1])
        u[i] = p[seg].mean()
        t[i] = m[seg].mean()
        extra[i] = m[seg].var()
    return u, t, extra


def fit_derivation(
    predictions: np.ndarray,
    measurements: np.ndarray,
    kernel: KernelConfig = KernelConfig(),
    max_inducing: int = MAX_INDUCING,
    refine: bool = False,
) -> DerivationModel:
    """Fit the rate-error GPR on (predicted, measured) pairs.

    With refine=True a 5x5x5 multiplicative grid around the heuristic
    hyperparameters is scored by log marginal likelihood.
    """
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    meas = np.asarray(measurements, dtype=np.float64).ravel()
    if pred.shape != meas.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {meas.shape}")
    if pred.shape[0] < 10:
        raise DataError(f"need at least 10 training pairs, got {pred.shape[0]}")
    if not (np.isfinite(pred).all() and np.isfinite(meas).all()):
        raise DataError("training pairs contain non-finite values")

    ls = kernel.length_scale if kernel.length_scale is not None else float(pred.std())
    if ls <= 0:
        ls = 1.0
    sf = kernel.signal_var if kernel.signal_var is not None else float(meas.var())
    if sf <= 0:
        sf = 1.0
    sn = kernel.noise_var if kernel.noise_var is not None else float((meas - pred).var())
    if sn < 0:
        raise DataError(f"noise_var must be >= 0, got {sn}")

    u, t, extra = _compress(pred, meas, max_inducing)
    clip_lo, clip_hi = float(meas.min()), float(meas.max())
    t_mean = float(t.mean())

    def build(ls_i: float, sf_i: float, sn_i: float) -> DerivationModel:
        return DerivationModel(
            inducing_inputs=u,
            inducing_targets=t,
            inducing_noise=sn_i + extra,
            length_scale=ls_i,
            signal_var=sf_i,
            noise_var=sn_i,
            clip_lo=clip_lo,
            clip_hi=clip_hi,
            target_mean=t_mean,
        )

    model = build(ls, sf, sn)
    model._solve_state()  # fail fast on a singular kernel matrix
    if refine:
        best = (model.log_marginal_likelihood(), model)
        for f_ls in _GRID:
            for f_sf in _GRID:
                for f_sn in _GRID:
                    if (f_ls, f_sf, f_sn) == (1.0, 1.0, 1.0):
                        continue
                    try:
                        cand = build(ls * f_ls, sf * f_sf, sn * f_sn)
                        lml = cand.log_marginal_likelihood()
                    except ModelError:
                        continue
                    if lml > best[0]:
                        best = (lml, cand)
        model = best[1]
    return model


def clip_sample(model: DerivationModel, raw: float) -> float:
    """Clip a raw gaussian sample into the observed measurement range."""
    if raw < model.clip_lo:
        return model.clip_lo
    if raw > model.clip_hi:
        return model.clip_hi
    return raw


def sample_virtual(
    model: DerivationModel, prediction: float, rng: np.random.Generator
) -> VirtualMeasurement:
    """Draw one virtual measurement around the posterior at `prediction`."""
    mu = model.mean(prediction)
    sigma = model.std(prediction)
    raw = float(rng.normal(mu, sigma))
    return VirtualMeasurement(predicted=float(prediction), raw_sample=raw,
                              clipped=clip_sample(model, raw))


def synthesize_profile(
    forest,
    model: DerivationModel,
    records: Sequence[TransmissionRecord],
    rng: np.random.Generator,
) -> list[tuple[object, float]]:
    """Replay labeled transmissions through predict -> sample -> clip.

    Returns (context, virtual rate) per record, preserving input order.
    """
    if not records:
        raise DataError("no records to synthesize")
    X, _ = records_to_arrays(records)
    preds = np.atleast_1d(forest.predict(X))
    means = np.atleast_1d(model.mean(preds))
    stds = np.atleast_1d(model.std(preds))
    raws = rng.normal(means, stds)
    clipped = np.clip(raws, model.clip_lo, model.clip_hi)
    return [(r.context, float(v)) for r, v in zip(records, clipped)]
