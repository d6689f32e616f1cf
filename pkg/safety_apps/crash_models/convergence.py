"""
Convergence diagnostics: Brooks-Gelman-Rubin potential scale reduction and
batch-means Monte Carlo error.

Both accept either a list of ``ChainDraws`` plus a parameter name (post-burn-in
segments are used) or a raw array shaped (chains, draws).
"""

import math
from dataclasses import dataclass

import numpy as np

BGR_THRESHOLD = 1.1
MC_ERROR_RATIO = 0.03
MIN_BATCHES = 20


def _as_matrix(draws, param=None) -> np.ndarray:
    if param is not None:
        segments = [chain.post(param) for chain in draws]
        length = min(len(s) for s in segments)
        return np.vstack([s[len(s) - length:] for s in segments])
    matrix = np.asarray(draws, dtype=float)
    return matrix[np.newaxis, :] if matrix.ndim == 1 else matrix


def bgr(chains, param=None) -> float:
    """
    sqrt(V/W) with W the mean within-chain variance, B the between-chain
    variance of chain means and V = (n−1)/n·W + (m+1)/(m·n)·B.
    """
    x = _as_matrix(chains, param)
    m, n = x.shape
    if m < 2:
        raise ValueError("BGR needs at least two chains")
    if n < 2:
        raise ValueError("BGR needs at least two post-burn-in draws per chain")
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0.0:
        return 1.0 if B == 0.0 else math.inf
    V = (n - 1) / n * W + (m + 1) / (m * n) * B
    return float(math.sqrt(V / W))


@dataclass(frozen=True)
class McError:
    value: float
    posterior_sd: float
    n_batches: int
    threshold: float = MC_ERROR_RATIO

    @property
    def ratio(self) -> float:
        if self.posterior_sd == 0.0:
            return 0.0
        return self.value / self.posterior_sd

    @property
    def passes(self) -> bool:
        return self.value <= self.threshold * self.posterior_sd


def mc_error(draws, param=None, threshold: float = MC_ERROR_RATIO) -> McError:
    """
    Batch-means standard error of the posterior mean: each chain is cut into
    floor(sqrt(n)) batches and the spread of batch means is pooled.
    """
    x = _as_matrix(draws, param)
    m, n = x.shape
    per_chain = int(math.isqrt(n))
    n_batches = m * per_chain
    if n_batches < MIN_BATCHES:
        raise ValueError(f"too few batches for MC error ({n_batches} < {MIN_BATCHES}); run longer chains")
    size = n // per_chain
    trimmed = x[:, n - size * per_chain:]
    batch_means = trimmed.reshape(m, per_chain, size).mean(axis=2).ravel()
    value = float(np.std(batch_means, ddof=1) / math.sqrt(n_batches))
    return McError(value=value, posterior_sd=float(x.std(ddof=1)), n_batches=n_batches, threshold=threshold)
