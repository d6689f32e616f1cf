"""
Posterior summaries, DIC and marginal effects from saved chains.

Reported coefficients are on the original covariate scale: standardized
draws are back-transformed per draw before any summary is taken. DIC uses
the conditional NB likelihood given the site latents λ_i, with the
posterior means of b, b_ij, λ_i and φ as the plug-in point.
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import gammaln

from .convergence import BGR_THRESHOLD, MC_ERROR_RATIO, bgr, mc_error
from .distributions import ge_mean, lindley_mean
from .draws_store import ChainDraws
from .model_spec import (
    ETA_CLAMP,
    INTERCEPT,
    DesignMatrix,
    counts_from_predictor,
    destandardize_coefficients,
    expected_counts,
)
from .sampler import nb_log_likelihood

logger = logging.getLogger(__name__)

QUANTILE_METHOD = 'linear'  # type 7


# ── Summaries ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ParameterSummary:
    name: str
    mean: float
    sd: float
    lower: float
    upper: float
    bgr: float
    mc_error: float
    mc_ok: bool

    @property
    def significant(self) -> bool:
        return not (self.lower <= 0.0 <= self.upper)

    def converged(self, bgr_max: float = BGR_THRESHOLD) -> bool:
        return bool(np.isfinite(self.bgr) and self.bgr < bgr_max)


@dataclass(frozen=True)
class PosteriorSummary:
    rows: tuple

    def get(self, name: str) -> ParameterSummary:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    @property
    def names(self) -> list:
        return [row.name for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                'parameter': r.name, 'mean': r.mean, 'sd': r.sd,
                'ci_lower': r.lower, 'ci_upper': r.upper,
                'bgr': r.bgr, 'mc_error': r.mc_error,
                'mc_ok': r.mc_ok, 'significant': r.significant,
            }
            for r in self.rows
        ])

    def convergence_flags(self, bgr_max: float = BGR_THRESHOLD) -> dict:
        return {
            r.name: {'bgr': r.converged(bgr_max), 'mc_error': r.mc_ok}
            for r in self.rows
        }

    def gate_failures(self, bgr_max: float = BGR_THRESHOLD) -> list:
        return [r.name for r in self.rows if not (r.converged(bgr_max) and r.mc_ok)]


def summarize_arrays(draws: Mapping[str, np.ndarray], mc_ratio: float = MC_ERROR_RATIO) -> PosteriorSummary:
    """``draws`` maps a parameter name to a (chains, n) array of post-burn-in draws."""
    rows = []
    for name, values in draws.items():
        matrix = np.atleast_2d(np.asarray(values, dtype=float))
        pooled = matrix.ravel()
        if pooled.size == 0:
            raise ValueError(f"no draws for parameter {name!r}")
        lower, upper = np.quantile(pooled, [0.025, 0.975], method=QUANTILE_METHOD)
        sd = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
        stat = bgr(matrix) if matrix.shape[0] >= 2 and matrix.shape[1] >= 2 else float('nan')
        try:
            err = mc_error(matrix, threshold=mc_ratio)
            mc_value, mc_ok = err.value, err.passes
        except ValueError:
            mc_value, mc_ok = float('nan'), False
        rows.append(ParameterSummary(
            name=name, mean=float(pooled.mean()), sd=sd,
            lower=float(lower), upper=float(upper),
            bgr=stat, mc_error=mc_value, mc_ok=bool(mc_ok),
        ))
    return PosteriorSummary(rows=tuple(rows))


def parameter_draws(chains: Sequence[ChainDraws]) -> dict:
    """Reporting-scale draws per parameter, each (chains, n)."""
    if not chains:
        raise ValueError("empty draw set")
    meta = chains[0].meta
    stats = meta.stats()
    length = min(chain.n_records - chain.burn_in for chain in chains)
    if length <= 0:
        raise ValueError("no post-burn-in draws")

    coef = np.stack([
        destandardize_coefficients(chain.coefficient_draws()[-length:], meta.columns, stats)
        for chain in chains
    ])
    out = {label: coef[:, :, j] for j, label in enumerate(meta.columns)}
    for label in meta.random_columns:
        scale = stats[label].sd if label in stats else 1.0
        out[f'sd:{label}'] = np.stack([c.post(f'sigma:{label}')[-length:] for c in chains]) / scale
    phi = np.stack([c.post('phi')[-length:] for c in chains])
    out['phi'] = phi
    out['alpha'] = 1.0 / phi
    names = ['theta'] if meta.mixing == 'lindley' else ['ge_a', 'ge_b']
    for name in names:
        out[name] = np.stack([c.post(name)[-length:] for c in chains])
    return out


def summarize(chains: Sequence[ChainDraws], mc_ratio: float = MC_ERROR_RATIO) -> PosteriorSummary:
    return summarize_arrays(parameter_draws(chains), mc_ratio=mc_ratio)


def retention_candidates(summary: PosteriorSummary, columns: Sequence[str]) -> list:
    """Terms whose 95% CI covers zero, for refitting a reduced formula."""
    return [
        c for c in columns
        if c != INTERCEPT and c in summary.names and not summary.get(c).significant
    ]


# ── Posterior predictions ────────────────────────────────────────────────────

def check_design(chains: Sequence[ChainDraws], design: DesignMatrix, same_sites: bool = True):
    meta = chains[0].meta
    if tuple(design.columns) != tuple(meta.columns):
        raise ValueError(f"design columns {design.columns} do not match the fit {meta.columns}")
    if same_sites and tuple(design.site_ids) != tuple(meta.site_ids):
        raise ValueError("design sites do not match the sites the model was fitted on")


def mixing_mean(chain: ChainDraws, rows) -> np.ndarray:
    """E(λ) per stored record: Lindley (θ+2)/(θ(θ+1)) or the GE mean."""
    if chain.meta.mixing == 'lindley':
        return np.asarray(lindley_mean(chain.scalars['theta'][rows]))
    return np.asarray(ge_mean(chain.scalars['ge_a'][rows], chain.scalars['ge_b'][rows]))


@dataclass
class SiteDrawSet:
    """Posterior draws at the stored site-draw records, pooled over chains."""

    eta_site: np.ndarray        # (S, n) with site-specific coefficients
    eta_population: np.ndarray  # (S, n) with population coefficients
    lam: np.ndarray             # (S, n)
    mix_mean: np.ndarray        # (S,)
    beta: np.ndarray            # (S, p) standardized scale
    site_coef: dict = field(default_factory=dict)  # label -> (S, n)


def site_draws(chains: Sequence[ChainDraws], design: DesignMatrix) -> SiteDrawSet:
    check_design(chains, design)
    meta = chains[0].meta
    X = design.values
    random_idx = [meta.columns.index(label) for label in meta.random_columns]
    fixed_idx = [j for j in range(len(meta.columns)) if j not in random_idx]

    etas, pops, lams, mixes, betas = [], [], [], [], []
    coefs = {label: [] for label in meta.random_columns}
    for chain in chains:
        rows = chain.site_records
        if rows.size == 0:
            continue
        beta = chain.coefficient_draws(records=rows)
        pop = beta @ X.T
        eta = beta[:, fixed_idx] @ X[:, fixed_idx].T
        for label, j in zip(meta.random_columns, random_idx):
            site = chain.site_draws[f'coef:{label}']
            eta = eta + site * X[:, j]
            coefs[label].append(site)
        etas.append(eta)
        pops.append(pop)
        lams.append(chain.site_draws['lambda'])
        mixes.append(mixing_mean(chain, rows))
        betas.append(beta)
    if not etas:
        raise ValueError("fit holds no site-level draws")
    return SiteDrawSet(
        eta_site=np.vstack(etas),
        eta_population=np.vstack(pops),
        lam=np.vstack(lams),
        mix_mean=np.concatenate(mixes),
        beta=np.vstack(betas),
        site_coef={label: np.vstack(v) for label, v in coefs.items()},
    )


def population_predictions(chains: Sequence[ChainDraws], design: DesignMatrix, chunk: int = 2000) -> np.ndarray:
    """
    Covariates-only prediction per row of ``design``: posterior mean of
    exp(X·b)·E(λ) over every post-burn-in draw, population coefficients only.
    Works for sites outside the fit (test sets).
    """
    check_design(chains, design, same_sites=False)
    X = design.values
    total = np.zeros(design.n_sites)
    count = 0
    for chain in chains:
        beta = chain.coefficient_draws()
        mix = mixing_mean(chain, slice(chain.burn_in, None))
        for start in range(0, beta.shape[0], chunk):
            block = beta[start:start + chunk]
            total += expected_counts(block, X, mix[start:start + chunk, None]).sum(axis=0)
            count += block.shape[0]
    if count == 0:
        raise ValueError("no post-burn-in draws")
    return total / count


# ── DIC ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DicReport:
    dbar: float
    d_at_mean: float
    pd: float
    dic: float

    @classmethod
    def from_components(cls, dbar: float, pd: float) -> 'DicReport':
        return cls(dbar=dbar, d_at_mean=dbar - pd, pd=pd, dic=dbar + pd)

    def to_dict(self) -> dict:
        return {'dbar': self.dbar, 'd_at_mean': self.d_at_mean, 'pd': self.pd, 'dic': self.dic}


def plug_in_log_likelihood(chains: Sequence[ChainDraws], design: DesignMatrix, y) -> float:
    """Conditional NB log-likelihood at the posterior means of b, b_ij, λ_i and φ."""
    check_design(chains, design)
    meta = chains[0].meta
    X = design.values
    y = np.asarray(y, dtype=float)
    beta = np.vstack([c.coefficient_draws() for c in chains]).mean(axis=0)
    phi = float(np.concatenate([c.post('phi') for c in chains]).mean())
    lam = np.mean([c.latent_means['lambda'] for c in chains], axis=0)

    random_idx = [meta.columns.index(label) for label in meta.random_columns]
    fixed_idx = [j for j in range(len(meta.columns)) if j not in random_idx]
    eta = X[:, fixed_idx] @ beta[fixed_idx]
    for label, j in zip(meta.random_columns, random_idx):
        eta = eta + X[:, j] * np.mean([c.latent_means[f'coef:{label}'] for c in chains], axis=0)
    log_m = np.clip(eta, -ETA_CLAMP, ETA_CLAMP) + np.log(lam)
    return float(np.sum(nb_log_likelihood(y, log_m, phi, gammaln(y + 1.0))))


def dic(chains: Sequence[ChainDraws], design: DesignMatrix, y) -> DicReport:
    traces = [c.post('loglik') for c in chains if 'loglik' in c.scalars]
    if len(traces) != len(chains) or not traces:
        raise ValueError("draws carry no log-likelihood trace")
    loglik = np.concatenate(traces)
    if loglik.size == 0:
        raise ValueError("log-likelihood trace is empty after burn-in")
    dbar = float(np.mean(-2.0 * loglik))
    d_at_mean = -2.0 * plug_in_log_likelihood(chains, design, y)
    pd_ = dbar - d_at_mean
    return DicReport(dbar=dbar, d_at_mean=d_at_mean, pd=pd_, dic=dbar + pd_)


def recompute_log_likelihood(chain: ChainDraws, design: DesignMatrix, y) -> np.ndarray:
    """Conditional log-likelihood at each stored site-draw record, rebuilt from draws."""
    check_design([chain], design)
    meta = chain.meta
    X = design.values
    y = np.asarray(y, dtype=float)
    rows = chain.site_records
    beta = chain.coefficient_draws(records=rows)
    random_idx = [meta.columns.index(label) for label in meta.random_columns]
    fixed_idx = [j for j in range(len(meta.columns)) if j not in random_idx]
    eta = beta[:, fixed_idx] @ X[:, fixed_idx].T
    for label, j in zip(meta.random_columns, random_idx):
        eta = eta + chain.site_draws[f'coef:{label}'] * X[:, j]
    log_m = np.clip(eta, -ETA_CLAMP, ETA_CLAMP) + np.log(chain.site_draws['lambda'])
    log_fact = gammaln(y + 1.0)
    phi = chain.scalars['phi'][rows]
    return np.array([
        np.sum(nb_log_likelihood(y, log_m[s], float(phi[s]), log_fact))
        for s in range(rows.size)
    ])


def compare_models(reports: Mapping[str, DicReport]) -> pd.DataFrame:
    """Rank by DIC; gaps from the best model above 10 are strong, 5–10 substantial."""
    if not reports:
        raise ValueError("no DIC reports to compare")
    frame = pd.DataFrame([
        {'model': name, **report.to_dict()} for name, report in reports.items()
    ]).sort_values(['dic', 'model'], kind='mergesort').reset_index(drop=True)
    frame['delta_dic'] = frame['dic'] - frame['dic'].iloc[0]

    def verdict(delta):
        if delta == 0.0:
            return 'best'
        if delta > 10.0:
            return 'strongly worse'
        if delta >= 5.0:
            return 'substantially worse'
        return 'competitive'

    frame['verdict'] = frame['delta_dic'].map(verdict)
    return frame


# ── Marginal effects ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class MarginalEffect:
    term: str
    kind: str            # 'continuous' | 'binary'
    effect: float        # average over sites of the chain-averaged per-site effect
    lower: float
    upper: float
    per_site: np.ndarray

    def to_dict(self) -> dict:
        return {
            'term': self.term, 'kind': self.kind, 'effect': self.effect,
            'ci_lower': self.lower, 'ci_upper': self.upper,
        }


def marginal_effects(chains: Sequence[ChainDraws], design: DesignMatrix,
                     terms: Optional[Sequence[str]] = None) -> list:
    """
    Continuous and log terms: b_j·E(y_i) per draw and site, with b_j on the
    original (transformed-covariate) scale. Indicator terms: E(y_i | x_j = 1)
    − E(y_i | x_j = 0), other levels of the same categorical held at 0.
    E(y_i) uses site-specific coefficients and the population E(λ).
    """
    draws = site_draws(chains, design)
    meta = chains[0].meta
    stats = meta.stats()
    terms = [c for c in meta.columns if c != INTERCEPT] if terms is None else list(terms)
    unknown = [t for t in terms if t not in meta.columns or t == INTERCEPT]
    if unknown:
        raise ValueError(f"variables {unknown} are not formula terms")

    X = design.values
    base = counts_from_predictor(draws.eta_site, draws.mix_mean[:, None])
    effects = []
    for label in terms:
        j = meta.columns.index(label)
        if design.continuous[j]:
            scale = stats[label].sd if label in stats else 1.0
            if label in draws.site_coef:
                slope = draws.site_coef[label] / scale
            else:
                slope = draws.beta[:, j][:, None] / scale
            per_draw = slope * base
            kind = 'continuous'
        else:
            coef = draws.site_coef[label] if label in draws.site_coef else draws.beta[:, j][:, None]
            siblings = [i for i in design.siblings(label) if i != j]
            eta_zero = draws.eta_site - coef * X[:, j]
            for i in siblings:
                sib = meta.columns[i]
                sib_coef = draws.site_coef[sib] if sib in draws.site_coef else draws.beta[:, i][:, None]
                eta_zero = eta_zero - sib_coef * X[:, i]
            mix = draws.mix_mean[:, None]
            per_draw = counts_from_predictor(eta_zero + coef, mix) - counts_from_predictor(eta_zero, mix)
            kind = 'binary'
        per_site = per_draw.mean(axis=0)
        average = per_draw.mean(axis=1)
        lower, upper = np.quantile(average, [0.025, 0.975], method=QUANTILE_METHOD)
        effects.append(MarginalEffect(
            term=label, kind=kind, effect=float(per_site.mean()),
            lower=float(lower), upper=float(upper), per_site=per_site,
        ))
    return effects


COVERAGE_COLUMNS = [
    'parameter', 'scale', 'truth', 'truth_standardized', 'mean', 'ci_lower', 'ci_upper', 'covered',
]


def truth_coverage(summary: PosteriorSummary, truth: Mapping,
                   standardized: Optional[Mapping] = None) -> pd.DataFrame:
    """
    One row per parameter with a known truth value: inside its 95% CI or not.

    Summaries are on the original covariate scale, so ``truth`` must be too;
    every row is labelled ``scale='original'``. ``standardized`` optionally
    carries the same truth on the standardized scale, shown alongside but
    never used for coverage.
    """
    standardized = standardized or {}
    rows = []
    for name, value in truth.items():
        if name not in summary.names:
            continue
        row = summary.get(name)
        rows.append({
            'parameter': name, 'scale': 'original', 'truth': float(value),
            'truth_standardized': float(standardized.get(name, np.nan)),
            'mean': row.mean, 'ci_lower': row.lower, 'ci_upper': row.upper,
            'covered': bool(row.lower <= value <= row.upper),
        })
    return pd.DataFrame(rows, columns=COVERAGE_COLUMNS)
