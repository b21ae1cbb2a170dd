"""Quality distribution encoder: pooled GT feature -> per-instance GMM parameters.

Two fully-connected ReLU layers feed three linear heads.  Head activations
map each raw output into the valid parameter range::

    mu    = tanh(raw)                 in (-1, 1)
    sigma = softplus(raw) + floor     >= floor
    pi    = sigmoid(raw)              in (0, 1)

A head whose learnability flag is off emits its configured fixed value and
receives no gradient.  One weight set is shared by every pyramid level.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import Box, DomainError
from .gridops import FeatureGrid, roialign, roialign_backward, roipool
from .qdist import SIGMA_FLOOR, QualityGMM

EXTRACTORS = ("roialign", "roialign_pool", "roipool")


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 32
    pool: int = 7
    hidden: int = 256
    n_components: int = 2
    learn_mu: bool = True
    learn_sigma: bool = True
    learn_pi: bool = True
    fixed_mu: float = 0.0
    fixed_sigma: float = 1.0
    fixed_pi: float = 1.0
    samples_per_bin: int = 2
    extractor: str = "roialign"

    def __post_init__(self):
        if self.hidden < 1 or self.pool < 1 or self.in_channels < 1 or self.n_components < 1:
            raise DomainError("encoder sizes must be >= 1")
        if self.extractor not in EXTRACTORS:
            raise DomainError(f"unknown extractor {self.extractor!r}")
        # fixed values must form a valid QualityGMM
        QualityGMM.fixed(self.n_components, self.fixed_mu, self.fixed_sigma, self.fixed_pi)

    @property
    def input_dim(self) -> int:
        if self.extractor == "roialign_pool":
            return self.in_channels
        return self.in_channels * self.pool * self.pool

    @property
    def all_fixed(self) -> bool:
        return not (self.learn_mu or self.learn_sigma or self.learn_pi)


@dataclass
class EncoderWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_sigma: np.ndarray
    b_sigma: np.ndarray
    w_pi: np.ndarray
    b_pi: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderWeights":
        return cls(**{f.name: np.asarray(d[f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(**{k: v.copy() for k, v in self.as_dict().items()})


def init_weights(rng_seed, config: EncoderConfig) -> EncoderWeights:
    """Glorot-uniform matrices, zero biases; deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    k = config.n_components

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    d, h = config.input_dim, config.hidden
    return EncoderWeights(
        w1=glorot(d, h), b1=np.zeros(h),
        w2=glorot(h, h), b2=np.zeros(h),
        w_mu=glorot(h, 2 * k), b_mu=np.zeros(2 * k),
        w_sigma=glorot(h, 2 * k), b_sigma=np.zeros(2 * k),
        w_pi=glorot(h, k), b_pi=np.zeros(k),
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def encode_batch(weights: EncoderWeights, features: np.ndarray, config: EncoderConfig):
    """Forward pass over ``(N, input_dim)`` features.

    Returns ``(mu (N,K,2), sigma (N,K,2), pi (N,K), cache)``.
    """
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if x.shape[1] != weights.w1.shape[0]:
        raise DomainError(f"feature size {x.shape[1]} does not match encoder input {weights.w1.shape[0]}")
    n, k = len(x), config.n_components
    h1 = x @ weights.w1 + weights.b1
    a1 = np.maximum(h1, 0.0)
    h2 = a1 @ weights.w2 + weights.b2
    a2 = np.maximum(h2, 0.0)
    raw_mu = a2 @ weights.w_mu + weights.b_mu
    raw_sigma = a2 @ weights.w_sigma + weights.b_sigma
    raw_pi = a2 @ weights.w_pi + weights.b_pi

    if config.learn_mu:
        mu = np.tanh(raw_mu).reshape(n, k, 2)
    else:
        mu = np.full((n, k, 2), float(config.fixed_mu))
    if config.learn_sigma:
        sigma = (_softplus(raw_sigma) + SIGMA_FLOOR).reshape(n, k, 2)
    else:
        sigma = np.full((n, k, 2), float(config.fixed_sigma))
    if config.learn_pi:
        pi = _sigmoid(raw_pi)
    else:
        pi = np.full((n, k), float(config.fixed_pi) / k)
    cache = dict(x=x, h1=h1, a1=a1, h2=h2, a2=a2, raw_mu=raw_mu, raw_sigma=raw_sigma, mu=mu, pi=pi)
    return mu, sigma, pi, cache


def encode_backward(weights: EncoderWeights, cache: dict, dmu, dsigma, dpi, config: EncoderConfig):
    """Backprop upstream d/d(mu, sigma, pi) to weights and input features.

    Returns ``(grads: EncoderWeights, dfeatures (N, input_dim))``.
    """
    n = len(cache["x"])
    a2 = cache["a2"]
    zeros = {name: np.zeros_like(v) for name, v in weights.as_dict().items()}
    da2 = np.zeros_like(a2)
    if config.learn_mu:
        g = np.asarray(dmu).reshape(n, -1) * (1.0 - cache["mu"].reshape(n, -1) ** 2)
        zeros["w_mu"] = a2.T @ g
        zeros["b_mu"] = g.sum(axis=0)
        da2 += g @ weights.w_mu.T
    if config.learn_sigma:
        g = np.asarray(dsigma).reshape(n, -1) * _sigmoid(cache["raw_sigma"])
        zeros["w_sigma"] = a2.T @ g
        zeros["b_sigma"] = g.sum(axis=0)
        da2 += g @ weights.w_sigma.T
    if config.learn_pi:
        p = cache["pi"]
        g = np.asarray(dpi).reshape(n, -1) * p * (1.0 - p)
        zeros["w_pi"] = a2.T @ g
        zeros["b_pi"] = g.sum(axis=0)
        da2 += g @ weights.w_pi.T
    dh2 = da2 * (cache["h2"] > 0)
    zeros["w2"] = cache["a1"].T @ dh2
    zeros["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ weights.w2.T) * (cache["h1"] > 0)
    zeros["w1"] = cache["x"].T @ dh1
    zeros["b1"] = dh1.sum(axis=0)
    dx = dh1 @ weights.w1.T
    return EncoderWeights(**zeros), dx


def encode(weights: EncoderWeights, pooled_feature: np.ndarray, config: EncoderConfig) -> QualityGMM:
    """Encode one pooled GT feature into a :class:`QualityGMM`."""
    feat = np.asarray(pooled_feature, dtype=np.float64).reshape(1, -1)
    if feat.shape[1] != config.input_dim:
        raise DomainError(f"pooled feature has {feat.shape[1]} values, expected {config.input_dim}")
    mu, sigma, pi, _ = encode_batch(weights, feat, config)
    return QualityGMM(mu[0], sigma[0], pi[0])


def encode_grad(weights: EncoderWeights, pooled_feature: np.ndarray, upstream: dict, config: EncoderConfig):
    """Gradients for one instance given ``upstream = {"mu", "sigma", "pi"}``."""
    feat = np.asarray(pooled_feature, dtype=np.float64).reshape(1, -1)
    _, _, _, cache = encode_batch(weights, feat, config)
    k = config.n_components
    dmu = np.asarray(upstream.get("mu", np.zeros((k, 2)))).reshape(1, k, 2)
    dsigma = np.asarray(upstream.get("sigma", np.zeros((k, 2)))).reshape(1, k, 2)
    dpi = np.asarray(upstream.get("pi", np.zeros(k))).reshape(1, k)
    grads, dx = encode_backward(weights, cache, dmu, dsigma, dpi, config)
    return grads, dx.reshape(np.shape(pooled_feature))


def extract_feature(grid: FeatureGrid, gt: Box, config: EncoderConfig) -> np.ndarray:
    """GT-region feature fed to the encoder, flattened to ``input_dim``."""
    if config.extractor == "roipool":
        return roipool(grid, gt, config.pool).ravel()
    pooled = roialign(grid, gt, config.pool, config.samples_per_bin)
    if config.extractor == "roialign_pool":
        return pooled.mean(axis=(1, 2))
    return pooled.ravel()


def extract_feature_backward(grid_shape, stride, gt: Box, dfeature: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Adjoint of :func:`extract_feature` for the RoIAlign extractors."""
    c = grid_shape[0]
    p = config.pool
    if config.extractor == "roipool":
        raise DomainError("roipool extractor is not differentiable here")
    if config.extractor == "roialign_pool":
        up = np.broadcast_to(dfeature.reshape(c, 1, 1) / (p * p), (c, p, p))
    else:
        up = dfeature.reshape(c, p, p)
    return roialign_backward(grid_shape, stride, gt, up, config.samples_per_bin)
