"""Mixture-of-logistics densities used as the per-pixel output law of the
trajectory simulator.

Each pixel of a 4-quadrant trajectory image carries four independent mixtures
(one per quadrant) over the logit-transformed temperature z.  A mixture with
K components has weights pi (simplex), locations mu and scales s > 0, giving
3K - 1 free parameters per quadrant and 4*(3K - 1) per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# Positive-scale floor applied by the constraint mapping.  Keeps densities
# finite and sampling well conditioned regardless of raw network outputs.
SCALE_FLOOR = 1e-3


@dataclass
class MixtureParams:
    """Logistic-mixture parameters for an array of pixels.

    All three arrays share the shape (..., 4, K): leading dimensions index
    pixels, then quadrant, then mixture component.  ``log_weights`` is
    normalized (logsumexp over the last axis is 0).
    """

    log_weights: np.ndarray
    locations: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if not (self.log_weights.shape == self.locations.shape == self.scales.shape):
            raise ValueError("mixture parameter arrays must share one shape")
        if np.any(self.scales <= 0):
            raise ValueError("mixture scales must be positive")

    @property
    def n_components(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def free_parameter_count(n_components: int, n_quadrants: int = 4) -> int:
    """Free parameters per pixel: location, scale and weight per component and
    quadrant, minus one weight per quadrant for the simplex constraint."""
    return n_quadrants * (3 * n_components - 1)


def constrain_raw_params(raw: np.ndarray) -> MixtureParams:
    """Map unconstrained network outputs to valid mixture parameters.

    ``raw`` has shape (..., 4, 3K): per quadrant, K weight logits followed by
    K locations and K raw scales.  Weights go through a normalized exponential
    (softmax); scales through softplus with a floor of ``SCALE_FLOOR``.
    """
    if raw.shape[-1] % 3 != 0:
        raise ValueError(f"last axis must be 3K, got {raw.shape[-1]}")
    k = raw.shape[-1] // 3
    logits = raw[..., :k]
    locations = raw[..., k : 2 * k]
    raw_scales = raw[..., 2 * k :]
    log_weights = logits - _logsumexp(logits, axis=-1, keepdims=True)
    scales = _softplus(raw_scales) + SCALE_FLOOR
    return MixtureParams(log_weights=log_weights, locations=locations, scales=scales)


def logistic_logpdf(z, locations, scales):
    """Elementwise log-density of the logistic distribution.

    log f(z; mu, s) = -a - log s - 2*softplus(-a) with a = (z - mu)/s, which
    is stable for |a| well beyond 50.
    """
    a = (np.asarray(z) - locations) / scales
    return -a - np.log(scales) - 2.0 * _softplus(-a)


def mol_logpdf(z, params: MixtureParams) -> np.ndarray:
    """Log-density of the logistic mixture, evaluated per quadrant.

    ``z`` broadcasts against the pixel/quadrant axes of ``params`` (without
    the component axis); the result drops the component axis.
    """
    z = np.asarray(z, dtype=float)
    comp = logistic_logpdf(z[..., None], params.locations, params.scales)
    return _logsumexp(params.log_weights + comp, axis=-1)


def mol_cdf(z, params: MixtureParams) -> np.ndarray:
    """Mixture CDF; the logistic CDF is the standard sigmoid of (z - mu)/s."""
    z = np.asarray(z, dtype=float)
    a = (z[..., None] - params.locations) / params.scales
    comp = _sigmoid(a)
    return np.sum(np.exp(params.log_weights) * comp, axis=-1)


def mol_sample(params: MixtureParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one value per quadrant-pixel.

    Component k is drawn from Categorical(pi), then z = mu_k + s_k *
    ln(u/(1-u)) with u ~ Uniform(0,1).  Exactly two rng calls are consumed
    per draw (component selector, then u), so streams line up across shapes.
    """
    weights = np.exp(params.log_weights)
    cum = np.cumsum(weights, axis=-1)
    shape = params.log_weights.shape[:-1]
    sel = rng.random(size=shape)
    # First component whose cumulative weight exceeds the selector.
    idx = np.sum(sel[..., None] >= cum, axis=-1)
    idx = np.minimum(idx, params.n_components - 1)
    mu = np.take_along_axis(params.locations, idx[..., None], axis=-1)[..., 0]
    s = np.take_along_axis(params.scales, idx[..., None], axis=-1)[..., 0]
    u = rng.random(size=shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return mu + s * np.log(u / (1.0 - u))


def _softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)
