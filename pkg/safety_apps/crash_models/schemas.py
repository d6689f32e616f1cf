"""
Validation of the YAML model and generator configs.

Model config:

    model:
      family: RPNB-L
      response: kabco
      standardize: true
      terms:
        - {name: aadt, transform: log}
        - {name: speed_limit, transform: indicator, threshold: 35, op: ge}
        - {name: area, transform: categorical, level: mix}
      random_terms: [ln_aadt]
    priors:
      coef_variance: 10000
    mcmc:
      n_chains: 3
      n_iter: 80000
      burn_in: 30000

Every problem raises ``ValueError`` naming the offending key.
"""

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .model_spec import Formula, ModelSpec, PriorConfig, Term
from .sampler import McmcConfig

logger = logging.getLogger(__name__)

MODEL_SECTIONS = {'model', 'priors', 'mcmc'}
MODEL_KEYS = {'family', 'response', 'standardize', 'terms', 'random_terms'}
TERM_KEYS = {'name', 'transform', 'threshold', 'op', 'level', 'reference'}


def _require(data, key, expected_type, where):
    if key not in data:
        raise ValueError(f"{where}: missing required key {key!r}")
    if not isinstance(data[key], expected_type):
        names = expected_type.__name__ if isinstance(expected_type, type) else \
            ' or '.join(t.__name__ for t in expected_type)
        raise ValueError(f"{where}: key {key!r} must be {names}")
    return data[key]


def _reject_unknown(data, allowed, where):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {unknown}; allowed {sorted(allowed)}")


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file not found: {path}")
    try:
        with path.open(encoding='utf-8') as handle:
            data = yaml.safe_load(handle)
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def parse_term(raw, where='model.terms') -> Term:
    if isinstance(raw, str):
        return Term(name=raw)
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: each term must be a name or a mapping")
    _reject_unknown(raw, TERM_KEYS, where)
    _require(raw, 'name', str, where)
    values = dict(raw)
    if 'threshold' in values:
        if not isinstance(values['threshold'], (int, float)):
            raise ValueError(f"{where}: threshold of {raw['name']!r} must be numeric")
        values['threshold'] = float(values['threshold'])
    for key in ('level', 'reference'):
        if key in values and values[key] is not None:
            values[key] = str(values[key]).lower()
    return Term(**values)


def parse_formula(section: Mapping, where='model') -> Formula:
    response = _require(section, 'response', str, where)
    terms = _require(section, 'terms', list, where)
    random_terms = section.get('random_terms') or []
    if not isinstance(random_terms, list):
        raise ValueError(f"{where}: key 'random_terms' must be list")
    return Formula(
        response=response.lower(),
        terms=tuple(parse_term(t, f'{where}.terms[{i}]') for i, t in enumerate(terms)),
        random_terms=tuple(str(r) for r in random_terms),
    )


def _section(data, name) -> dict:
    section = data.get(name) or {}
    if not isinstance(section, dict):
        raise ValueError(f"section {name!r} must be a mapping")
    return section


def parse_mcmc(section: Mapping, **overrides) -> McmcConfig:
    allowed = {f.name for f in fields(McmcConfig)}
    _reject_unknown(section, allowed, 'mcmc')
    values = dict(section)
    if 'frozen' in values:
        values['frozen'] = tuple(values['frozen'] or ())
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return McmcConfig(**values)
    except TypeError as exc:
        raise ValueError(f"mcmc: {exc}") from exc


@dataclass(frozen=True)
class ModelConfig:
    """A parsed model config. Priors need the row count, so they resolve late."""

    family: str
    formula: Formula
    standardize: bool
    prior_overrides: Mapping
    mcmc: McmcConfig
    path: str = ''

    def model_spec(self, n_obs: int) -> ModelSpec:
        priors = PriorConfig.for_dataset(n_obs, **dict(self.prior_overrides))
        return ModelSpec(
            family=self.family, formula=self.formula,
            priors=priors, standardize=self.standardize,
        )

    def with_mcmc(self, **overrides) -> 'ModelConfig':
        values = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, mcmc=replace(self.mcmc, **values)) if values else self


def parse_model_config(data: Mapping, path: str = '') -> ModelConfig:
    _reject_unknown(data, MODEL_SECTIONS, 'config')
    model = _section(data, 'model')
    if not model:
        raise ValueError("config: missing required section 'model'")
    _reject_unknown(model, MODEL_KEYS, 'model')
    family = _require(model, 'family', str, 'model')
    standardize = model.get('standardize', True)
    if not isinstance(standardize, bool):
        raise ValueError("model: key 'standardize' must be bool")

    priors = _section(data, 'priors')
    allowed = {f.name for f in fields(PriorConfig)} - {'lindley_a', 'lindley_b'}
    _reject_unknown(priors, allowed, 'priors')
    for key, value in priors.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValueError(f"priors: key {key!r} must be numeric")

    config = ModelConfig(
        family=family,
        formula=parse_formula(model),
        standardize=standardize,
        prior_overrides={k: float(v) for k, v in priors.items()},
        mcmc=parse_mcmc(_section(data, 'mcmc')),
        path=str(path),
    )
    # fail on family/random-term mismatches before any data is read
    config.model_spec(n_obs=1)
    return config


def load_model_config(path) -> ModelConfig:
    config = parse_model_config(read_yaml(path), path=str(path))
    logger.info("Loaded %s config from %s (%d terms, random: %s)",
                config.family, path, len(config.formula.terms),
                ', '.join(config.formula.random_terms) or 'none')
    return config


def load_generator_config(path, seed: Optional[int] = None):
    from safety_apps.site_data.generator import GeneratorConfig

    data = read_yaml(path)
    return GeneratorConfig.from_dict(data, seed=seed)
