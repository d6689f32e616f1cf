"""
Full-Bayes site screening and stratified odds ratios.

PSI per site is the gap between two posterior means taken over the stored
site-draw iterations:

    expected  = E[ exp(X_i·b_i) · λ_i       | y ]   (the site's own latent)
    predicted = E[ exp(X_i·b)   · E(λ|θ)    | y ]   (covariates only)

Hotspots are positive-PSI sites at or above the 90th percentile of the
positive PSI values; negative PSI is cold; everything else is normal.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from statsmodels.stats.contingency_tables import StratifiedTable

from safety_apps.crash_models.inference import site_draws
from safety_apps.crash_models.model_spec import DesignMatrix, counts_from_predictor

logger = logging.getLogger(__name__)

HOTSPOT, NORMAL, COLD = 'hotspot', 'normal', 'cold'
HOTSPOT_PERCENTILE = 90
UNASSIGNED = 'unassigned'


@dataclass(frozen=True)
class PsiResult:
    site_id: str
    expected: float
    predicted: float
    psi: float
    zone: str = NORMAL

    def to_dict(self) -> dict:
        return {
            'site_id': self.site_id, 'expected': self.expected,
            'predicted': self.predicted, 'psi': self.psi, 'zone': self.zone,
        }


def psi_table(chains: Sequence, design: DesignMatrix) -> list:
    """Unclassified PSI for every fitted site, in fit order."""
    draws = site_draws(chains, design)
    expected = counts_from_predictor(draws.eta_site, draws.lam).mean(axis=0)
    predicted = counts_from_predictor(draws.eta_population, draws.mix_mean[:, None]).mean(axis=0)
    return [
        PsiResult(site_id=sid, expected=float(e), predicted=float(p), psi=float(e) - float(p))
        for sid, e, p in zip(design.site_ids, expected, predicted)
    ]


def psi(chains: Sequence, design: DesignMatrix, site_id: str) -> PsiResult:
    if site_id not in design.site_ids:
        raise ValueError(f"site {site_id!r} is not part of the fit")
    return psi_table(chains, design)[design.site_ids.index(site_id)]


def hotspot_threshold(values) -> Optional[float]:
    """
    Smallest positive PSI at or above the (type 7) 90th percentile of the
    positive values. Taken on ranks, so ``psi >= threshold`` selects the same
    sites as comparing against the interpolated percentile.
    """
    positive = np.sort(np.asarray([v for v in values if v > 0], dtype=float))
    if positive.size == 0:
        return None
    index = -(-HOTSPOT_PERCENTILE * (positive.size - 1) // 100)  # ceil
    return float(positive[index])


def classify(results: Sequence[PsiResult]) -> list:
    if not results:
        raise ValueError("classify needs at least one PSI result")
    threshold = hotspot_threshold([r.psi for r in results])

    def zone(value):
        if value < 0:
            return COLD
        if value > 0 and threshold is not None and value >= threshold:
            return HOTSPOT
        return NORMAL

    classified = [replace(r, zone=zone(r.psi)) for r in results]
    counts = pd.Series([r.zone for r in classified]).value_counts()
    logger.info("PSI zones: %d hotspot, %d normal, %d cold",
                counts.get(HOTSPOT, 0), counts.get(NORMAL, 0), counts.get(COLD, 0))
    return classified


def results_frame(results: Sequence[PsiResult]) -> pd.DataFrame:
    """Ranked by PSI (descending), ties by site id."""
    frame = pd.DataFrame([r.to_dict() for r in results],
                         columns=['site_id', 'expected', 'predicted', 'psi', 'zone'])
    frame = frame.sort_values(['psi', 'site_id'], ascending=[False, True], kind='mergesort')
    frame.insert(0, 'rank', np.arange(1, len(frame) + 1))
    return frame.reset_index(drop=True)


# ── Corridors ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CorridorReport:
    table: pd.DataFrame
    unassigned: tuple


def corridor_aggregate(results: Sequence[PsiResult], corridor_map: Mapping) -> CorridorReport:
    """
    Per corridor: site count, summed PSI, summed positive PSI and hotspots;
    ranked by summed positive PSI, ties by corridor id.
    """
    rows, unassigned = [], []
    for r in results:
        corridor = corridor_map.get(r.site_id)
        if corridor is None or str(corridor).strip() == '':
            unassigned.append(r.site_id)
            continue
        rows.append({'corridor': str(corridor), 'psi': r.psi, 'zone': r.zone})
    if unassigned:
        logger.warning("%d site(s) have no corridor assignment", len(unassigned))

    columns = ['rank', 'corridor', 'n_sites', 'psi_sum', 'positive_psi_sum', 'hotspots']
    if not rows:
        return CorridorReport(table=pd.DataFrame(columns=columns), unassigned=tuple(unassigned))
    frame = pd.DataFrame(rows)
    table = frame.groupby('corridor', sort=True).agg(
        n_sites=('psi', 'size'),
        psi_sum=('psi', 'sum'),
        positive_psi_sum=('psi', lambda s: float(s[s > 0].sum())),
        hotspots=('zone', lambda s: int((s == HOTSPOT).sum())),
    ).reset_index()
    table = table.sort_values(['positive_psi_sum', 'corridor'], ascending=[False, True], kind='mergesort')
    table.insert(0, 'rank', np.arange(1, len(table) + 1))
    return CorridorReport(table=table.reset_index(drop=True)[columns], unassigned=tuple(unassigned))


def load_corridors(path) -> dict:
    """CSV with ``site_id`` and ``corridor`` columns."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"corridor file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {'site_id', 'corridor'} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
    return dict(zip(frame['site_id'].str.strip(), frame['corridor'].str.strip()))


# ── Mantel–Haenszel ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class StratumTable:
    """
    One 2×2 stratum: a, b in the exposed row (crash / no crash), c, d in the
    unexposed row.
    """

    a: int
    b: int
    c: int
    d: int
    label: str = ''

    def __post_init__(self):
        for name in ('a', 'b', 'c', 'd'):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"stratum {self.label or '?'}: cell {name} must be a non-negative integer")
            object.__setattr__(self, name, int(value))
        if self.n == 0:
            raise ValueError(f"stratum {self.label or '?'} is empty")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d

    def as_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]], dtype=float)


def crude_odds_ratio(table: StratumTable) -> Optional[float]:
    if table.b * table.c == 0:
        return None
    return (table.a * table.d) / (table.b * table.c)


def mh_odds_ratio(tables: Sequence[StratumTable]) -> Optional[float]:
    """Σ a·d/n ÷ Σ b·c/n; None when the denominator is zero."""
    if not tables:
        raise ValueError("mh_odds_ratio needs at least one stratum")
    numerator = sum(t.a * t.d / t.n for t in tables)
    denominator = sum(t.b * t.c / t.n for t in tables)
    if denominator == 0:
        logger.warning("Mantel-Haenszel odds ratio undefined: Σ b·c/n is zero")
        return None
    return numerator / denominator


def mh_risk_ratio(tables: Sequence[StratumTable]) -> Optional[float]:
    """Σ a·(c+d)/n ÷ Σ c·(a+b)/n; None when the denominator is zero."""
    if not tables:
        raise ValueError("mh_risk_ratio needs at least one stratum")
    numerator = sum(t.a * (t.c + t.d) / t.n for t in tables)
    denominator = sum(t.c * (t.a + t.b) / t.n for t in tables)
    if denominator == 0:
        return None
    return numerator / denominator


@dataclass(frozen=True)
class MhResult:
    odds_ratio: Optional[float]
    risk_ratio: Optional[float]
    ci_lower: Optional[float]
    ci_upper: Optional[float]
    p_value: Optional[float]
    n_strata: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'statistic': name, 'value': value,
        } for name, value in (
            ('mh_odds_ratio', self.odds_ratio),
            ('mh_risk_ratio', self.risk_ratio),
            ('or_ci_lower', self.ci_lower),
            ('or_ci_upper', self.ci_upper),
            ('cmh_p_value', self.p_value),
            ('n_strata', self.n_strata),
        )])


def mh_analysis(tables: Sequence[StratumTable]) -> MhResult:
    """Pooled OR and RR, plus the confidence interval and CMH test from statsmodels."""
    odds = mh_odds_ratio(tables)
    risk = mh_risk_ratio(tables)
    lower = upper = p_value = None
    if odds is not None and odds > 0:
        stratified = StratifiedTable([t.as_array() for t in tables])
        with np.errstate(divide='ignore', invalid='ignore'):
            lo, hi = stratified.oddsratio_pooled_confint(alpha=0.05)
            test = stratified.test_null_odds(correction=False)
        if np.isfinite(lo) and np.isfinite(hi):
            lower, upper = float(lo), float(hi)
        if np.isfinite(test.pvalue):
            p_value = float(test.pvalue)
    return MhResult(
        odds_ratio=odds, risk_ratio=risk, ci_lower=lower, ci_upper=upper,
        p_value=p_value, n_strata=len(tables),
    )


def load_strata(path) -> list:
    """CSV with columns a, b, c, d and an optional ``stratum`` label."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"strata file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {'a', 'b', 'c', 'd'} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
    tables = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        values = row._asdict()
        try:
            cells = {k: float(values[k]) for k in ('a', 'b', 'c', 'd')}
        except ValueError:
            raise ValueError(f"{path} line {line}: cell counts must be numbers") from None
        label = values.get('stratum') or str(offset + 1)
        try:
            tables.append(StratumTable(label=label, **cells))
        except ValueError as exc:
            raise ValueError(f"{path} line {line}: {exc}") from None
    if not tables:
        raise ValueError(f"{path}: no strata")
    return tables
