"""Per-instance quality surface: a diagonal Gaussian mixture over normalized offsets.

The surface is ``p(d) = sum_k pi_k * prod_axis exp(-(d - mu_k)^2 / (2 sigma_k^2))``.
It is *unnormalized*: each component peaks at exactly 1, so ``p`` lies in
``(0, sum(pi)]``.  Where ``p`` is used as a probability-like target it is
clamped to ``[0, 1]`` by :func:`quality_target`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import DomainError

SIGMA_FLOOR = 1e-3
_MAX_REJECTIONS = 100
_EDGE_EPS = 1e-6


@dataclass(frozen=True)
class QualityGMM:
    mu: np.ndarray  # (K, 2)
    sigma: np.ndarray  # (K, 2)
    pi: np.ndarray  # (K,)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 2)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1, 2)
        pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
        if not (len(mu) == len(sigma) == len(pi) >= 1):
            raise DomainError(f"inconsistent component counts {len(mu)}, {len(sigma)}, {len(pi)}")
        if not all(np.all(np.isfinite(a)) for a in (mu, sigma, pi)):
            raise DomainError("GMM parameters must be finite")
        if np.any(np.abs(mu) > 1.0):
            raise DomainError("mu must lie in [-1, 1]")
        # tolerate round-off at the floor
        if np.any(sigma < SIGMA_FLOOR * (1 - 1e-12)):
            raise DomainError(f"sigma below floor {SIGMA_FLOOR}")
        if np.any(pi <= 0.0) or np.any(pi > 1.0):
            raise DomainError("pi must lie in (0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "pi", pi)

    @property
    def n_components(self) -> int:
        return len(self.pi)

    @classmethod
    def fixed(cls, n_components: int = 1, mu: float = 0.0, sigma: float = 1.0, pi: float = 1.0) -> "QualityGMM":
        """Identical centred components whose mixing weights sum to ``pi``.

        With any component count the surface equals a single Gaussian of peak ``pi``.
        """
        k = int(n_components)
        return cls(np.full((k, 2), mu), np.full((k, 2), sigma), np.full(k, pi / k))

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "pi": self.pi.tolist()}

    @classmethod
    def from_json(cls, obj) -> "QualityGMM":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        try:
            return cls(np.array(obj["mu"], dtype=np.float64), np.array(obj["sigma"], dtype=np.float64),
                       np.array(obj["pi"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"malformed GMM json: {exc}") from exc


def _components(mu, sigma, d):
    """``Phi`` of shape (N, K) for params (K, 2) and offsets (N, 2)."""
    z = (d[:, None, :] - mu[None]) / sigma[None]
    return np.exp(-0.5 * (z**2).sum(axis=-1))


def component_value(gmm: QualityGMM, k: int, d) -> float:
    if not 0 <= k < gmm.n_components:
        raise DomainError(f"component {k} out of range")
    diff = (np.asarray(d, dtype=np.float64) - gmm.mu[k]) / gmm.sigma[k]
    return float(np.exp(-0.5 * np.dot(diff, diff)))


def density_many(mu: np.ndarray, sigma: np.ndarray, pi: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Raw surface at offsets ``d (N, 2)`` for a single parameter set."""
    d = np.asarray(d, dtype=np.float64).reshape(-1, 2)
    phi = _components(np.asarray(mu), np.asarray(sigma), d)
    return phi @ np.asarray(pi)


def density(gmm: QualityGMM, d) -> float:
    return float(density_many(gmm.mu, gmm.sigma, gmm.pi, np.asarray(d, dtype=np.float64))[0])


def quality_target(gmm: QualityGMM, d) -> float:
    return min(density(gmm, d), 1.0)


def quality_targets(gmm: QualityGMM, d: np.ndarray) -> np.ndarray:
    return np.minimum(density_many(gmm.mu, gmm.sigma, gmm.pi, d), 1.0)


def density_grad_many(mu, sigma, pi, d):
    """Partials of the raw surface at each offset.

    Returns ``(p (N,), dmu (N,K,2), dsigma (N,K,2), dpi (N,K), dd (N,2))``.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1, 2)
    diff = d[:, None, :] - mu[None]  # (N, K, 2)
    phi = np.exp(-0.5 * ((diff / sigma[None]) ** 2).sum(axis=-1))  # (N, K)
    p = phi @ pi
    wphi = (phi * pi[None])[..., None]
    dmu = wphi * diff / sigma[None] ** 2
    dsigma = wphi * diff**2 / sigma[None] ** 3
    dd = -dmu.sum(axis=1)
    return p, dmu, dsigma, phi, dd


def density_grad(gmm: QualityGMM, d) -> dict:
    p, dmu, dsigma, dpi, dd = density_grad_many(gmm.mu, gmm.sigma, gmm.pi, np.asarray(d, dtype=np.float64))
    return {"value": float(p[0]), "mu": dmu[0], "sigma": dsigma[0], "pi": dpi[0], "d": dd[0]}


def _truncated_axis(rng: np.random.Generator, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    out = mu + sigma * rng.standard_normal(mu.shape)
    bad = ~((out > -1.0) & (out < 1.0))
    tries = 0
    while bad.any() and tries < _MAX_REJECTIONS:
        out[bad] = mu[bad] + sigma[bad] * rng.standard_normal(int(bad.sum()))
        bad = ~((out > -1.0) & (out < 1.0))
        tries += 1
    if bad.any():
        out[bad] = np.clip(out[bad], -1.0 + _EDGE_EPS, 1.0 - _EDGE_EPS)
    return out


def sample_offsets_arrays(mu, sigma, pi, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` offsets from the mixture truncated to the open square ``(-1, 1)^2``.

    A component is picked with probability ``pi_k / sum(pi)``; each axis is then
    drawn from its 1-D Gaussian by rejection.  Draws still outside after 100
    rounds are clamped just inside the square.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    pi = np.asarray(pi, dtype=np.float64)
    comp = rng.choice(len(pi), size=count, p=pi / pi.sum())
    m = np.asarray(mu)[comp]
    s = np.asarray(sigma)[comp]
    return _truncated_axis(rng, m.copy(), s.copy())


def sample_offsets(gmm: QualityGMM, count: int, rng_seed=None, rng: np.random.Generator | None = None):
    """Seeded truncated-mixture draws and their clamped quality values.

    Returns ``(offsets (count, 2), quality (count,))``.
    """
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    d = sample_offsets_arrays(gmm.mu, gmm.sigma, gmm.pi, count, rng)
    return d, quality_targets(gmm, d)
