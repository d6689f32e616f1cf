"""
Synthetic bus-stop inventories with known truth.

Covariates are drawn from marginals calibrated to the inventory descriptives
(range-clipped lognormals for volumes, boardings and distances; discrete
distributions for speed limits, lane and amenity counts; category shares from
the stop counts of each label). Counts follow the hierarchical model:

    b_ij = b_j + σ_j·ε_ij                    (random terms)
    μ_i  = exp(X_i·b_i)                      (standardized design by default)
    λ_i  ~ Lindley(θ) or GE(a, b)
    y_i  ~ NB(φ, λ_i·μ_i)

KABC and KAB are binomial thinnings of KABCO, so kab ≤ kabc ≤ kabco holds
by construction. Each stage draws from its own Philox stream spawned from
the config seed.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from safety_apps.crash_models.distributions import GeParam, ge_mean, ge_sample, lindley_mean, lindley_sample
from safety_apps.crash_models.model_spec import (
    INTERCEPT,
    Formula,
    Term,
    build_design,
    counts_from_predictor,
    destandardize_coefficients,
    standardize,
)
from safety_apps.run_manifest import read_json, write_json

from .records import CATEGORY_LEVELS, SiteRecord

logger = logging.getLogger(__name__)

TRUTH_SUFFIX = '.truth.json'
STREAMS = ('covariates', 'coefficients', 'latents', 'counts')

# Stop counts per label, in CATEGORY_LEVELS order.
CATEGORY_COUNTS = {
    'int_type':     (214, 382),
    'marked_xwalk': (362, 234),
    'median_type':  (297, 311),
    'lighting':     (257, 339),
    'area':         (307, 118, 171),
    'sidewalk':     (550, 46),
    'curve':        (558, 38),
    'design':       (89, 507),
    'proximity':    (226, 301, 69),
    'cover':        (302, 294),
}

# (mean, sd, low, high) of the lognormal before clipping; median width is
# drawn for divided medians only.
LOGNORMAL_MARGINALS = {
    'aadt':         (13540.6, 8827.85, 166.0, 42056.0),
    'avg_on':       (53.20, 66.78, 0.0, 769.0),
    'avg_off':      (56.63, 60.64, 0.0, 831.0),
    'dist_to_int':  (198.94, 241.04, 0.4, 2106.0),
    'median_width': (14.5, 14.0, 0.0, 131.9),
}

SPEED_LIMIT_WEIGHTS = {
    20: .02, 25: .05, 30: .25, 35: .30, 40: .20,
    45: .10, 50: .05, 55: .02, 60: .005, 65: .005,
}
LANE_COUNT_WEIGHTS = {1: .03, 2: .17, 3: .05, 4: .35, 5: .12, 6: .22, 7: .03, 8: .03}
# Poisson mean and upper clip
AMENITY_COUNTS = {
    'school_count': (0.82, 6),
    'park_count':   (0.64, 6),
    'stop_count':   (3.45, 11),
}


def rpnbl_formula() -> Formula:
    """Terms of the published random-parameters NB-Lindley KABCO model."""
    return Formula(
        response='kabco',
        terms=(
            Term('aadt', 'log'),
            Term('avg_on'),
            Term('speed_limit', 'indicator', threshold=35.0, op='ge'),
            Term('median_type', 'categorical', level='undivided'),
            Term('int_type', 'categorical', level='signalized'),
            Term('sidewalk', 'categorical', level='yes'),
            Term('marked_xwalk', 'categorical', level='no'),
            Term('lighting', 'categorical', level='no'),
            Term('area', 'categorical', level='mix'),
            Term('school_count', 'indicator', threshold=1.0, op='gt'),
            Term('proximity', 'categorical', level='far'),
        ),
        random_terms=('ln_aadt', 'avg_on'),
    )


RPNBL_COEFFICIENTS = {
    INTERCEPT: -0.488,
    'ln_aadt': 0.345,
    'avg_on': 0.010,
    'speed_limit_ge_35': 0.448,
    'median_type_undivided': 0.326,
    'int_type_signalized': -0.329,
    'sidewalk_yes': -0.379,
    'marked_xwalk_no': 0.098,
    'lighting_no': 0.100,
    'area_mix': -0.367,
    'school_count_gt_1': 0.556,
    'proximity_far': -0.251,
}
RPNBL_RANDOM_SD = {'ln_aadt': 0.042, 'avg_on': 0.008}
RPNBL_THETA = 1.378
RPNBL_ALPHA = 0.137


@dataclass(frozen=True)
class GeneratorConfig:
    """
    Truth for one synthetic inventory. Coefficients of continuous terms are on
    the standardized scale when ``standardize`` is true.
    """

    n_sites: int = 596
    seed: int = 0
    formula: Formula = field(default_factory=rpnbl_formula)
    coefficients: Mapping = field(default_factory=lambda: dict(RPNBL_COEFFICIENTS))
    random_sd: Mapping = field(default_factory=lambda: dict(RPNBL_RANDOM_SD))
    mixing: str = 'lindley'
    theta: float = RPNBL_THETA
    ge_a: float = 2.022
    ge_b: float = 1.442
    phi: float = 1.0 / RPNBL_ALPHA
    standardize: bool = True
    kabc_share: float = 0.699
    kab_share: float = 0.418
    site_prefix: str = 'BS'

    def __post_init__(self):
        object.__setattr__(self, 'coefficients', {k: float(v) for k, v in self.coefficients.items()})
        object.__setattr__(self, 'random_sd', {k: float(v) for k, v in self.random_sd.items()})
        if self.n_sites < 10:
            raise ValueError(f"n_sites must be >= 10, got {self.n_sites}")
        if self.mixing not in ('lindley', 'ge'):
            raise ValueError(f"mixing must be 'lindley' or 'ge', got {self.mixing!r}")
        for name in ('theta', 'ge_a', 'ge_b', 'phi'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be > 0, got {value!r}")
        expected = [INTERCEPT] + self.formula.labels()
        missing = [c for c in expected if c not in self.coefficients]
        extra = [c for c in self.coefficients if c not in expected]
        if missing or extra:
            raise ValueError(f"truth coefficients must cover exactly {expected}; missing {missing}, unknown {extra}")
        if set(self.random_sd) != set(self.formula.random_terms):
            raise ValueError(
                f"random_sd keys {sorted(self.random_sd)} must match random terms {list(self.formula.random_terms)}"
            )
        if any(s < 0 for s in self.random_sd.values()):
            raise ValueError("random_sd values must be >= 0")
        if not 0.0 <= self.kab_share <= self.kabc_share <= 1.0:
            raise ValueError("severity shares must satisfy 0 <= kab_share <= kabc_share <= 1")

    @property
    def mixing_mean(self) -> float:
        if self.mixing == 'lindley':
            return float(lindley_mean(self.theta))
        return float(ge_mean(self.ge_a, self.ge_b))

    def to_dict(self) -> dict:
        return {
            'n_sites': self.n_sites,
            'seed': self.seed,
            'model': self.formula.to_dict(),
            'standardize': self.standardize,
            'truth': {
                'coefficients': dict(self.coefficients),
                'random_sd': dict(self.random_sd),
                'mixing': self.mixing,
                'theta': self.theta,
                'ge_a': self.ge_a,
                'ge_b': self.ge_b,
                'phi': self.phi,
            },
            'severity': {'kabc_share': self.kabc_share, 'kab_share': self.kab_share},
            'site_prefix': self.site_prefix,
        }

    @classmethod
    def from_dict(cls, data: Mapping, seed: Optional[int] = None) -> 'GeneratorConfig':
        from safety_apps.crash_models.schemas import parse_formula

        allowed = {'n_sites', 'seed', 'model', 'standardize', 'truth', 'severity', 'site_prefix'}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ValueError(f"generator config: unknown key(s) {unknown}")
        values = {}
        for key in ('n_sites', 'seed'):
            if key in data:
                values[key] = int(data[key])
        if seed is not None:
            values['seed'] = int(seed)
        if 'model' in data:
            values['formula'] = parse_formula(data['model'])
        if 'standardize' in data:
            values['standardize'] = bool(data['standardize'])
        if 'site_prefix' in data:
            values['site_prefix'] = str(data['site_prefix'])
        truth = dict(data.get('truth') or {})
        if 'alpha' in truth:
            if 'phi' in truth:
                raise ValueError("truth: give either phi or alpha, not both")
            alpha = float(truth.pop('alpha'))
            if not alpha > 0:
                raise ValueError("truth: alpha must be > 0")
            truth['phi'] = 1.0 / alpha
        truth_keys = {'coefficients', 'random_sd', 'mixing', 'theta', 'ge_a', 'ge_b', 'phi'}
        unknown = sorted(set(truth) - truth_keys)
        if unknown:
            raise ValueError(f"truth: unknown key(s) {unknown}")
        values.update(truth)
        if 'formula' in values and 'random_sd' not in truth:
            values['random_sd'] = {}
        severity = data.get('severity') or {}
        for key in ('kabc_share', 'kab_share'):
            if key in severity:
                values[key] = float(severity[key])
        return cls(**values)


@dataclass(frozen=True)
class GeneratorTruth:
    """What the data were generated from, on both coefficient scales."""

    config: Mapping
    columns: tuple
    coefficients: Mapping
    coefficients_standardized: Mapping
    random_sd: Mapping
    random_sd_standardized: Mapping
    column_stats: Mapping
    phi: float
    mixing: str
    mixing_params: Mapping
    expected_mean: float
    observed_mean: float

    def reporting_values(self) -> dict:
        """Truth keyed like the posterior summary rows."""
        values = dict(self.coefficients)
        values.update({f'sd:{k}': v for k, v in self.random_sd.items()})
        values['phi'] = self.phi
        values['alpha'] = 1.0 / self.phi
        values.update(self.mixing_params)
        return values

    def standardized_values(self) -> dict:
        """Coefficient and random-SD truth on the standardized design scale."""
        values = dict(self.coefficients_standardized)
        values.update({f'sd:{k}': v for k, v in self.random_sd_standardized.items()})
        return values

    def to_dict(self) -> dict:
        return {
            'config': dict(self.config),
            'columns': list(self.columns),
            'coefficients': dict(self.coefficients),
            'coefficients_standardized': dict(self.coefficients_standardized),
            'random_sd': dict(self.random_sd),
            'random_sd_standardized': dict(self.random_sd_standardized),
            'column_stats': {k: list(v) for k, v in self.column_stats.items()},
            'phi': self.phi,
            'mixing': self.mixing,
            'mixing_params': dict(self.mixing_params),
            'expected_mean': self.expected_mean,
            'observed_mean': self.observed_mean,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'GeneratorTruth':
        return cls(
            config=data['config'],
            columns=tuple(data['columns']),
            coefficients=data['coefficients'],
            coefficients_standardized=data['coefficients_standardized'],
            random_sd=data['random_sd'],
            random_sd_standardized=data['random_sd_standardized'],
            column_stats={k: tuple(v) for k, v in data['column_stats'].items()},
            phi=float(data['phi']),
            mixing=data['mixing'],
            mixing_params=data['mixing_params'],
            expected_mean=float(data['expected_mean']),
            observed_mean=float(data['observed_mean']),
        )


def truth_path(data_path) -> Path:
    data_path = Path(data_path)
    return data_path.with_name(data_path.stem + TRUTH_SUFFIX)


def write_truth(truth: GeneratorTruth, data_path) -> Path:
    return write_json(truth_path(data_path), truth.to_dict())


def read_truth(path) -> GeneratorTruth:
    return GeneratorTruth.from_dict(read_json(path))


# ── Generation ───────────────────────────────────────────────────────────────

def _streams(seed: int) -> dict:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(STREAMS, children)}


def _lognormal(rng, n, mean, sd, low, high) -> np.ndarray:
    sigma2 = math.log1p(sd ** 2 / mean ** 2)
    mu = math.log(mean) - 0.5 * sigma2
    return np.clip(rng.lognormal(mu, math.sqrt(sigma2), size=n), low, high)


def _weighted(rng, n, weights: Mapping) -> np.ndarray:
    values = np.array(list(weights), dtype=np.int64)
    probs = np.array(list(weights.values()), dtype=float)
    return rng.choice(values, size=n, p=probs / probs.sum())


def draw_covariates(n: int, rng: np.random.Generator) -> dict:
    """Site covariates as column arrays; marginals only, no joint dependence."""
    columns = {}
    for name, counts in CATEGORY_COUNTS.items():
        shares = np.asarray(counts, dtype=float)
        columns[name] = rng.choice(np.asarray(CATEGORY_LEVELS[name]), size=n, p=shares / shares.sum())
    for name, (mean, sd, low, high) in LOGNORMAL_MARGINALS.items():
        columns[name] = _lognormal(rng, n, mean, sd, low, high)
    columns['aadt'] = np.round(columns['aadt'])
    for name in ('avg_on', 'avg_off', 'dist_to_int', 'median_width'):
        columns[name] = np.round(columns[name], 1)
    columns['dist_to_int'] = np.maximum(columns['dist_to_int'], LOGNORMAL_MARGINALS['dist_to_int'][2])
    columns['median_width'] = np.where(columns['median_type'] == 'divided', columns['median_width'], 0.0)
    columns['speed_limit'] = _weighted(rng, n, SPEED_LIMIT_WEIGHTS)
    columns['lane_count'] = _weighted(rng, n, LANE_COUNT_WEIGHTS)
    for name, (mean, cap) in AMENITY_COUNTS.items():
        columns[name] = np.minimum(rng.poisson(mean, size=n), cap)
    return columns


def _records(columns: Mapping, site_ids, counts) -> list:
    kabco, kabc, kab = counts
    records = []
    for i, site_id in enumerate(site_ids):
        records.append(SiteRecord(
            site_id=site_id,
            kabco=int(kabco[i]), kabc=int(kabc[i]), kab=int(kab[i]),
            aadt=float(columns['aadt'][i]),
            avg_on=float(columns['avg_on'][i]),
            avg_off=float(columns['avg_off'][i]),
            dist_to_int=float(columns['dist_to_int'][i]),
            median_width=float(columns['median_width'][i]),
            speed_limit=int(columns['speed_limit'][i]),
            lane_count=int(columns['lane_count'][i]),
            school_count=int(columns['school_count'][i]),
            park_count=int(columns['park_count'][i]),
            stop_count=int(columns['stop_count'][i]),
            **{name: str(columns[name][i]) for name in CATEGORY_LEVELS},
        ))
    return records


def synthesize(cfg: GeneratorConfig):
    """Returns (records, GeneratorTruth). Same config and seed, same dataset."""
    n = cfg.n_sites
    rng = _streams(cfg.seed)
    columns = draw_covariates(n, rng['covariates'])
    site_ids = [f'{cfg.site_prefix}{i + 1:04d}' for i in range(n)]
    zeros = np.zeros(n, dtype=np.int64)
    skeleton = _records(columns, site_ids, (zeros, zeros, zeros))

    design = build_design(skeleton, cfg.formula)
    if cfg.standardize:
        design = standardize(design)
    X = design.values
    b = np.array([cfg.coefficients[c] for c in design.columns])

    eta = X @ b
    variance_term = np.zeros(n)
    for label in cfg.formula.random_terms:
        j = design.column_index(label)
        sd = cfg.random_sd[label]
        eta = eta + sd * rng['coefficients'].standard_normal(n) * X[:, j]
        variance_term += 0.5 * sd ** 2 * X[:, j] ** 2
    mu = counts_from_predictor(eta, 1.0)

    if cfg.mixing == 'lindley':
        lam = lindley_sample(cfg.theta, rng['latents'], size=n)
        mixing_params = {'theta': cfg.theta}
    else:
        lam = ge_sample(GeParam(cfg.ge_a, cfg.ge_b), rng['latents'], size=n)
        mixing_params = {'ge_a': cfg.ge_a, 'ge_b': cfg.ge_b}

    counts_rng = rng['counts']
    rate = counts_rng.gamma(cfg.phi, lam * mu / cfg.phi)
    kabco = counts_rng.poisson(rate)
    kabc = counts_rng.binomial(kabco, cfg.kabc_share)
    kab_given_kabc = cfg.kab_share / cfg.kabc_share if cfg.kabc_share > 0 else 0.0
    kab = counts_rng.binomial(kabc, kab_given_kabc)
    records = _records(columns, site_ids, (kabco, kabc, kab))

    stats = design.column_stats
    original = destandardize_coefficients(b, design.columns, stats) if stats else b
    sd_original = {
        label: sd / stats[label].sd if label in stats else sd
        for label, sd in cfg.random_sd.items()
    }
    expected = float(np.mean(counts_from_predictor(X @ b + variance_term, cfg.mixing_mean)))
    truth = GeneratorTruth(
        config=cfg.to_dict(),
        columns=tuple(design.columns),
        coefficients=dict(zip(design.columns, map(float, original))),
        coefficients_standardized=dict(zip(design.columns, map(float, b))),
        random_sd=sd_original,
        random_sd_standardized=dict(cfg.random_sd),
        column_stats={k: (s.mean, s.sd) for k, s in stats.items()},
        phi=cfg.phi,
        mixing=cfg.mixing,
        mixing_params=mixing_params,
        expected_mean=expected,
        observed_mean=float(kabco.mean()),
    )
    logger.info("Synthesized %d sites (seed %d): mean KABCO %.3f, analytic %.3f",
                n, cfg.seed, truth.observed_mean, truth.expected_mean)
    return records, truth
