"""
Predictive accuracy and cumulative-residual (CURE) checks.

Predictions for MAE/RMSE and CURE are covariates-only: the posterior mean of
exp(X·b)·E(λ) from ``crash_models.inference.population_predictions``, so the
same numbers are available for held-out sites.
"""

import io
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from safety_apps.run_manifest import atomic_write_bytes, write_frame  # noqa: E402

logger = logging.getLogger(__name__)

BAND_Z = 1.96
BAND_TOLERANCE = 1e-9
_DIGIT_RUNS = re.compile(r'(\d+)')


def _paired(observed, predicted):
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    if obs.shape != pred.shape:
        raise ValueError(f"length mismatch: {obs.shape[0] if obs.ndim else 0} observed vs "
                         f"{pred.shape[0] if pred.ndim else 0} predicted")
    if obs.size == 0:
        raise ValueError("metrics need at least one observation")
    return obs, pred


def mae(observed, predicted) -> float:
    obs, pred = _paired(observed, predicted)
    return float(np.mean(np.abs(obs - pred)))


def rmse(observed, predicted) -> float:
    obs, pred = _paired(observed, predicted)
    return float(math.sqrt(np.mean((obs - pred) ** 2)))


def train_test_split(records: Sequence, fraction: float = 0.8, seed: int = 0):
    """
    Seeded partition; the training set gets floor(fraction·n) sites. Both
    halves keep the input order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    n = len(records)
    n_train = int(math.floor(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"fraction {fraction} leaves an empty split for {n} sites")
    order = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


# ── CURE ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CureCurve:
    covariate: str
    site_ids: tuple
    values: np.ndarray
    residuals: np.ndarray
    cumulative: np.ndarray
    band: np.ndarray

    @property
    def upper(self) -> np.ndarray:
        return self.band

    @property
    def lower(self) -> np.ndarray:
        return -self.band

    def outside(self) -> np.ndarray:
        return np.abs(self.cumulative) > self.band + BAND_TOLERANCE

    def fraction_outside(self) -> float:
        return float(self.outside().mean())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'site_id': list(self.site_ids),
            self.covariate: self.values,
            'residual': self.residuals,
            'cumulative_residual': self.cumulative,
            'upper_band': self.upper,
            'lower_band': self.lower,
        })


def natural_key(site_id: str) -> tuple:
    """Digit runs compare as numbers: ('S', 2, '') < ('S', 10, '')."""
    parts = _DIGIT_RUNS.split(site_id)
    return tuple(int(p) if i % 2 else p for i, p in enumerate(parts)) + (site_id,)


def cure(observed, predicted, covariate, site_ids: Optional[Sequence[str]] = None,
         name: str = 'covariate') -> CureCurve:
    """
    Residuals accumulated in ascending covariate order (ties by site id in
    natural order, so S2 precedes S10), with
    band ±1.96·√(S_k·(1 − S_k/S_n)), S_k the running sum of squared residuals.
    """
    obs, pred = _paired(observed, predicted)
    x = np.asarray(covariate, dtype=float)
    if x.shape != obs.shape:
        raise ValueError("covariate length does not match the observations")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"covariate {name!r} has non-finite values")
    ids = np.asarray([str(s) for s in site_ids] if site_ids is not None
                     else [f'{i:08d}' for i in range(obs.size)])
    if ids.shape != obs.shape:
        raise ValueError("site_ids length does not match the observations")

    keys = [natural_key(s) for s in ids]
    order = np.array(sorted(range(obs.size), key=lambda i: (x[i], keys[i])), dtype=np.int64)
    residuals = (obs - pred)[order]
    squares = np.cumsum(residuals ** 2)
    total = squares[-1]
    if total > 0:
        band = BAND_Z * np.sqrt(np.clip(squares * (1.0 - squares / total), 0.0, None))
    else:
        logger.warning("CURE over %s: residual variance is zero; bands have zero width", name)
        band = np.zeros_like(squares)
    return CureCurve(
        covariate=name,
        site_ids=tuple(ids[order]),
        values=x[order],
        residuals=residuals,
        cumulative=np.cumsum(residuals),
        band=band,
    )


def render_cure_svg(curve: CureCurve) -> bytes:
    plt.rcParams['svg.hashsalt'] = 'crashsafe-cure'
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        ax.plot(curve.values, curve.cumulative, color='black', linewidth=1.0, label='Cumulative residuals')
        ax.plot(curve.values, curve.upper, color='tab:red', linestyle='--', linewidth=0.8, label='95% band')
        ax.plot(curve.values, curve.lower, color='tab:red', linestyle='--', linewidth=0.8)
        ax.axhline(0.0, color='grey', linewidth=0.5)
        ax.set_xlabel(curve.covariate)
        ax.set_ylabel('Cumulative residuals')
        ax.legend(loc='best', frameon=False)
        buffer = io.BytesIO()
        fig.savefig(buffer, format='svg', bbox_inches='tight', metadata={'Date': None})
    finally:
        plt.close(fig)
    return buffer.getvalue()


def write_cure_files(curve: CureCurve, out_dir, stem: Optional[str] = None) -> list:
    """``cure_<covariate>.csv`` with the points and ``cure_<covariate>.svg``."""
    out_dir = Path(out_dir)
    stem = stem or f'cure_{curve.covariate}'
    csv_path = write_frame(out_dir / f'{stem}.csv', curve.to_frame(), float_format='%.10g')
    svg_path = atomic_write_bytes(out_dir / f'{stem}.svg', render_cure_svg(curve))
    return [csv_path, svg_path]
