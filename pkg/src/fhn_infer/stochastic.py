"""Reproducible random sampling: parameter priors and AR(1) noise.

Every random draw comes from an :class:`RngStream`, a Philox counter-based
generator keyed by ``(seed, stream_id)``. Uniform doubles are built from the
raw 64-bit words and mapped to Gaussians through the inverse normal CDF, so a
given ``(seed, stream_id)`` yields the same numbers on every platform and
independently of how many other streams were consumed before it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtri

from .errors import RejectionExhausted
from .fhn import ThetaPair

MAX_REJECTIONS = 10_000
_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Not thread-safe: a single stream must stay on one thread. Distinct
    stream ids may be consumed concurrently.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform doubles on the open interval (0, 1), 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bitgen.random_raw(n) >> np.uint64(11)
        u = (raw.astype(np.float64) + 0.5) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        z = ndtri(self.uniform(size))
        return loc + scale * z

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def substream_id(index: int, attempt: int = 0, tag: int = 0) -> int:
    """Pack a (tag, attempt, index) triple into a 64-bit stream id."""
    if not (0 <= index < 1 << 40 and 0 <= attempt < 1 << 16 and 0 <= tag < 1 << 8):
        raise ValueError("substream component out of range")
    return (tag << 56) | (attempt << 40) | index


@dataclass(frozen=True)
class PriorSpec:
    mean0: float = 0.4
    sd0: float = 0.3
    lo0: float = -0.2
    hi0: float = 1.0
    mean1: float = 0.4
    sd1: float = 0.4
    lo1: float = -0.4
    hi1: float = 1.2

    def __post_init__(self):
        if not (self.sd0 > 0 and self.sd1 > 0):
            raise ValueError("prior standard deviations must be positive")
        if not (self.lo0 < self.hi0 and self.lo1 < self.hi1):
            raise ValueError("prior bounds must satisfy lo < hi")

    @property
    def mean(self):
        return np.array([self.mean0, self.mean1])

    @property
    def sd(self):
        return np.array([self.sd0, self.sd1])


@dataclass(frozen=True)
class NoisePrior:
    mean_sigma: float = 0.07
    sd_sigma: float = 0.01
    mean_rho: float = 0.8
    sd_rho: float = 0.05


class NoiseParams(NamedTuple):
    sigma: float
    rho: float


def sample_theta(rng: RngStream, prior: PriorSpec = PriorSpec()) -> ThetaPair:
    """Draw theta from the Gaussian prior, rejecting pairs outside the bounds."""
    for _ in range(MAX_REJECTIONS):
        z = rng.normal(2)
        t0 = prior.mean0 + prior.sd0 * z[0]
        t1 = prior.mean1 + prior.sd1 * z[1]
        if prior.lo0 <= t0 <= prior.hi0 and prior.lo1 <= t1 <= prior.hi1:
            return ThetaPair(float(t0), float(t1))
    raise RejectionExhausted(f"{MAX_REJECTIONS} consecutive rejections from {prior}")


def sample_noise_params(rng: RngStream, prior: NoisePrior = NoisePrior()) -> NoiseParams:
    sigma = rho = None
    for _ in range(MAX_REJECTIONS):
        z = rng.normal(2)
        if sigma is None:
            s = prior.mean_sigma + prior.sd_sigma * z[0]
            if s > 0:
                sigma = float(s)
        if rho is None:
            r = prior.mean_rho + prior.sd_rho * z[1]
            if abs(r) < 1:
                rho = float(r)
        if sigma is not None and rho is not None:
            return NoiseParams(sigma, rho)
    raise RejectionExhausted(f"{MAX_REJECTIONS} consecutive rejections from {prior}")


def noise_pool(seed: int, prior: NoisePrior = NoisePrior(), size: int = 100) -> list[NoiseParams]:
    """The fixed pool of (sigma, rho) pairs shared by all noisy datasets."""
    rng = RngStream(seed, substream_id(0, tag=1))
    return [sample_noise_params(rng, prior) for _ in range(size)]


def ar1_path(rng: RngStream, params: NoiseParams, dt: float, n: int) -> np.ndarray:
    """Stationary AR(1) path with marginal variance ``sigma**2 / dt**2``."""
    if n < 1 or dt <= 0:
        raise ValueError("need n >= 1 and dt > 0")
    sigma, rho = params
    if abs(rho) >= 1:
        raise ValueError("|rho| must be < 1")
    sd = sigma / dt
    z = rng.normal(n)
    innov = z * (sd * np.sqrt(1.0 - rho * rho))
    innov[0] = z[0] * sd
    return lfilter([1.0], [1.0, -rho], innov)
