"""
Model declaration and design-matrix machinery.

A ``ModelSpec`` names the family, the ``Formula`` (response, terms and which
terms carry random coefficients) and the ``PriorConfig``. ``build_design``
turns site records into a ``DesignMatrix`` with the intercept first;
``standardize`` rescales the continuous columns and remembers (μ_j, σ_j) so
coefficients can be returned to the original scale afterwards.

Term transforms
  identity     x
  log          ln(x), x must be > 0
  indicator    1 if x >= threshold (op 'ge') or x > threshold (op 'gt')
  categorical  one indicator per non-reference label, or a single indicator
               for ``level`` against every other label
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from safety_apps.site_data.records import (
    CATEGORY_LEVELS,
    CONTINUOUS_FIELDS,
    INTEGER_FIELDS,
    SEVERITY_COLUMNS,
)

from .distributions import lindley_mean

INTERCEPT = 'intercept'
ETA_CLAMP = 30.0

# family -> (mixing distribution, random parameters)
FAMILIES = {
    'NB-L': ('lindley', False),
    'RPNB-L': ('lindley', True),
    'NB-GE': ('ge', False),
    'RPNB-GE': ('ge', True),
}

TRANSFORMS = ('identity', 'log', 'indicator', 'categorical')
NUMERIC_FIELDS = CONTINUOUS_FIELDS + INTEGER_FIELDS


# ── Formula ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Term:
    name: str
    transform: str = 'identity'
    threshold: Optional[float] = None
    op: str = 'ge'
    level: Optional[str] = None
    reference: Optional[str] = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"term {self.name!r}: unknown transform {self.transform!r}")
        if self.transform == 'categorical':
            if self.name not in CATEGORY_LEVELS:
                raise ValueError(f"term {self.name!r} is not a categorical column")
            levels = CATEGORY_LEVELS[self.name]
            for label in (self.level, self.reference):
                if label is not None and label not in levels:
                    raise ValueError(
                        f"unknown category label {label!r} for {self.name}; expected one of {levels}"
                    )
            if self.reference is not None and self.reference == self.level:
                raise ValueError(f"term {self.name!r}: level equals the reference level")
        else:
            if self.name not in NUMERIC_FIELDS:
                raise ValueError(f"term {self.name!r} is not a numeric site column")
        if self.transform == 'indicator':
            if self.threshold is None:
                raise ValueError(f"indicator term {self.name!r} needs a threshold")
            if self.op not in ('ge', 'gt'):
                raise ValueError(f"indicator term {self.name!r}: op must be 'ge' or 'gt'")

    @property
    def continuous(self) -> bool:
        return self.transform in ('identity', 'log')

    @property
    def reference_level(self) -> Optional[str]:
        if self.transform != 'categorical':
            return None
        return self.reference or CATEGORY_LEVELS[self.name][0]

    def column_levels(self) -> list:
        """(label, level) pairs for the design columns this term produces."""
        if self.transform == 'identity':
            return [(self.name, None)]
        if self.transform == 'log':
            return [(f'ln_{self.name}', None)]
        if self.transform == 'indicator':
            return [(f'{self.name}_{self.op}_{self.threshold:g}', None)]
        if self.level is not None:
            return [(f'{self.name}_{self.level}', self.level)]
        reference = self.reference_level
        return [
            (f'{self.name}_{lvl}', lvl)
            for lvl in CATEGORY_LEVELS[self.name] if lvl != reference
        ]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Term':
        return cls(**dict(data))


@dataclass(frozen=True)
class Formula:
    response: str
    terms: tuple
    random_terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'terms', tuple(self.terms))
        object.__setattr__(self, 'random_terms', tuple(self.random_terms))
        if self.response not in SEVERITY_COLUMNS:
            raise ValueError(f"response must be one of {SEVERITY_COLUMNS}, got {self.response!r}")
        labels = self.labels()
        if len(set(labels)) != len(labels):
            raise ValueError(f"formula produces duplicate columns: {labels}")
        unknown = [r for r in self.random_terms if r not in labels]
        if unknown:
            raise ValueError(f"random terms {unknown} are not formula columns {labels}")

    def labels(self) -> list:
        return [label for term in self.terms for label, _ in term.column_levels()]

    def to_dict(self) -> dict:
        return {
            'response': self.response,
            'terms': [t.to_dict() for t in self.terms],
            'random_terms': list(self.random_terms),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Formula':
        return cls(
            response=data['response'],
            terms=tuple(Term.from_dict(t) for t in data['terms']),
            random_terms=tuple(data.get('random_terms', ())),
        )


# ── Priors / spec ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PriorConfig:
    coef_mean: float = 0.0
    coef_variance: float = 1e4
    rp_precision_shape: float = 0.01
    rp_precision_rate: float = 0.01
    lindley_a: float = 1.0
    lindley_b: float = 1.0
    dispersion_shape: float = 0.01
    dispersion_rate: float = 0.01
    ge_a_shape: float = 0.01
    ge_a_rate: float = 0.01
    ge_b_shape: float = 0.01
    ge_b_rate: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == 'coef_mean':
                if not math.isfinite(value):
                    raise ValueError("coef_mean must be finite")
            elif not (math.isfinite(value) and value > 0):
                raise ValueError(f"prior hyperparameter {name} must be > 0, got {value!r}")

    @classmethod
    def for_dataset(cls, n_obs: int, **overrides) -> 'PriorConfig':
        """Lindley prior on 1/(1+θ) is always Beta(n/3, n/2)."""
        if n_obs < 1:
            raise ValueError("n_obs must be positive")
        fixed = {'lindley_a', 'lindley_b'} & set(overrides)
        if fixed:
            raise ValueError(f"{sorted(fixed)} are derived from the observation count")
        unknown = set(overrides) - set(f.name for f in cls.__dataclass_fields__.values())
        if unknown:
            raise ValueError(f"unknown prior settings: {sorted(unknown)}")
        return cls(lindley_a=n_obs / 3.0, lindley_b=n_obs / 2.0, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    formula: Formula
    priors: PriorConfig = field(default_factory=PriorConfig)
    standardize: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {tuple(FAMILIES)}, got {self.family!r}")
        if self.random and not self.formula.random_terms:
            raise ValueError(f"{self.family} needs at least one random term")
        if not self.random and self.formula.random_terms:
            raise ValueError(f"{self.family} does not take random terms")

    @property
    def mixing(self) -> str:
        return FAMILIES[self.family][0]

    @property
    def random(self) -> bool:
        return FAMILIES[self.family][1]


# ── Design matrix ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ColumnStat:
    mean: float
    sd: float


@dataclass(frozen=True)
class DesignMatrix:
    columns: tuple
    values: np.ndarray
    site_ids: tuple
    continuous: tuple
    groups: tuple
    column_stats: Mapping = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape != (len(self.site_ids), len(self.columns)):
            raise ValueError("design values do not match site ids and columns")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix has missing or non-finite cells")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'column_stats', dict(self.column_stats))

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]

    @property
    def standardized(self) -> bool:
        return bool(self.column_stats)

    def column_index(self, label: str) -> int:
        try:
            return self.columns.index(label)
        except ValueError:
            raise ValueError(f"column {label!r} not in design {self.columns}") from None

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.column_index(label)]

    def siblings(self, label: str) -> list:
        """Indices of the one-hot columns sharing ``label``'s categorical group."""
        group = self.groups[self.column_index(label)]
        return [i for i, g in enumerate(self.groups) if g == group]

    def subset(self, site_ids: Sequence[str]) -> 'DesignMatrix':
        index = {sid: i for i, sid in enumerate(self.site_ids)}
        rows = [index[sid] for sid in site_ids]
        return replace(self, values=self.values[rows], site_ids=tuple(site_ids))


def build_design(records, formula: Formula) -> DesignMatrix:
    if not records:
        raise ValueError("build_design needs at least one record")
    columns, continuous, groups, data = [INTERCEPT], [False], [INTERCEPT], [np.ones(len(records))]

    for term in formula.terms:
        raw = [_field(record, term.name) for record in records]
        for label, level in term.column_levels():
            columns.append(label)
            continuous.append(term.continuous)
            groups.append(term.name if term.transform == 'categorical' and term.level is None else label)
            data.append(_encode(term, raw, level, records))

    return DesignMatrix(
        columns=tuple(columns),
        values=np.column_stack(data),
        site_ids=tuple(r.site_id for r in records),
        continuous=tuple(continuous),
        groups=tuple(groups),
    )


def _field(record, name):
    try:
        return getattr(record, name)
    except AttributeError:
        raise ValueError(f"missing column {name!r} in site data") from None


def _encode(term: Term, raw: list, level, records) -> np.ndarray:
    if term.transform == 'categorical':
        levels = CATEGORY_LEVELS[term.name]
        bad = sorted({v for v in raw if v not in levels})
        if bad:
            raise ValueError(f"unknown category label(s) {bad} in column {term.name!r}")
        return np.array([1.0 if v == level else 0.0 for v in raw])

    values = np.asarray(raw, dtype=float)
    if term.transform == 'identity':
        return values
    if term.transform == 'log':
        bad = [r.site_id for r, v in zip(records, values) if not v > 0]
        if bad:
            raise ValueError(
                f"nonpositive value under log transform in {term.name!r} at sites {bad[:5]}"
            )
        return np.log(values)
    if term.op == 'ge':
        return (values >= term.threshold).astype(float)
    return (values > term.threshold).astype(float)


def standardize(m: DesignMatrix) -> DesignMatrix:
    """x* = (x − μ)/σ on continuous columns; σ is the population SD."""
    values = np.array(m.values)
    stats = {}
    for j, label in enumerate(m.columns):
        if not m.continuous[j]:
            continue
        column = values[:, j]
        mu = float(column.mean())
        sd = float(column.std(ddof=0))
        if sd <= 1e-12 * max(1.0, abs(mu)):
            raise ValueError(f"zero-variance column {label!r} cannot be standardized")
        values[:, j] = (column - mu) / sd
        stats[label] = ColumnStat(mu, sd)
    return replace(m, values=values, column_stats=stats)


def apply_standardization(m: DesignMatrix, stats: Mapping) -> DesignMatrix:
    """Standardize with externally supplied (training) statistics."""
    values = np.array(m.values)
    for label, stat in stats.items():
        j = m.column_index(label)
        values[:, j] = (values[:, j] - stat.mean) / stat.sd
    return replace(m, values=values, column_stats=dict(stats))


def destandardize_coefficients(b_star, columns: Sequence[str], stats: Mapping) -> np.ndarray:
    """
    Back to the original scale: b_j = b*_j/σ_j and b_0 = b*_0 − Σ b_j μ_j.
    ``b_star`` may be a single vector or a (draws, p) matrix.
    """
    b_star = np.asarray(b_star, dtype=float)
    columns = list(columns)
    if b_star.shape[-1] != len(columns):
        raise ValueError(
            f"coefficient dimension {b_star.shape[-1]} does not match {len(columns)} columns"
        )
    b = np.array(b_star)
    intercept = columns.index(INTERCEPT) if INTERCEPT in columns else None
    for label, stat in stats.items():
        if label not in columns:
            raise ValueError(f"standardized column {label!r} missing from coefficients")
        j = columns.index(label)
        b[..., j] = b_star[..., j] / stat.sd
        if intercept is not None:
            b[..., intercept] -= b[..., j] * stat.mean
    return b


def linear_predictor(b, X) -> np.ndarray:
    """X·b clamped to ±30; ``b`` may be (p,) or (draws, p) giving (draws, n)."""
    b = np.asarray(b, dtype=float)
    X = np.asarray(X, dtype=float)
    eta = X @ b if b.ndim == 1 else b @ X.T
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def counts_from_predictor(eta, lambda_component) -> np.ndarray:
    """exp(η)·λ with η clamped to ±30; ``lambda_component`` broadcasts against η."""
    return np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP)) * lambda_component


def expected_counts(b, X, lambda_component) -> np.ndarray:
    """Vectorized ``mean_response``; (draws, p) coefficients give (draws, n)."""
    return counts_from_predictor(linear_predictor(b, X), lambda_component)


def mean_response(b, row, lambda_component) -> float:
    """
    Expected count of one design row. Pass E(λ|θ) as ``lambda_component``
    for the population mean, or a site's λ_i for its own mean.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise ValueError("mean_response takes a single coefficient vector")
    return float(expected_counts(b, np.atleast_2d(row), lambda_component)[0])


def absorb_intercept(b0: float, theta: float) -> float:
    """b′₀ with exp(b′₀) = exp(b₀)·E(λ|θ)."""
    return b0 + math.log(lindley_mean(theta))


def response_vector(records, response: str) -> np.ndarray:
    return np.array([r.count(response) for r in records], dtype=np.int64)


def check_full_rank(m: DesignMatrix):
    rank = np.linalg.matrix_rank(m.values)
    if rank < len(m.columns):
        raise ValueError(
            f"design matrix is rank deficient ({rank} < {len(m.columns)} columns); "
            "check for constant or collinear terms"
        )
