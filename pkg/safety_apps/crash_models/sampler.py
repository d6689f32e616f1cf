"""
Multi-chain Metropolis-within-Gibbs sampler for the NB-L / NB-GE families
and their random-parameters variants.

Hierarchy (standardized design X, site i, random column j):

    y_i   ~ NB(φ, λ_i·μ_i)             μ_i = exp(Σ_fixed X_ij b_j + Σ_random X_ij b_ij)
    b_ij  ~ Normal(b_j, σ_j²)           1/σ_j² ~ Gamma(0.01, 0.01)
    λ_i   ~ Gamma(1 + z_i, θ)           z_i ~ Bernoulli(1/(1+θ))      (Lindley)
    λ_i   ~ GE(a, b)                                                 (GE)

One sweep:
  1. fixed coefficients      adaptive random-walk Metropolis, one column at a time
  2. random terms            per-site b_ij Metropolis, Gibbs b_j, joint shift of
                             b_j with its b_ij, Gibbs σ_j, non-centred σ_j rescale
  3. intercept shift         b_0 + δ with log λ_i − δ
  4. latents                 log-scale Metropolis on λ_i, exact Bernoulli z_i
  5. θ (logit of 1/(1+θ)) or GE (a, b)
  6. φ                       log-scale random walk

Proposal scales adapt by Robbins-Monro towards the target acceptance in
batches of ``adapt_window`` iterations and are frozen at the end of burn-in.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import special, stats

from .draws_store import ChainDraws, FitMetadata
from .model_spec import ETA_CLAMP, INTERCEPT, DesignMatrix, ModelSpec, check_full_rank

logger = logging.getLogger(__name__)

FREEZABLE_BLOCKS = ('coefficients', 'latents', 'theta', 'phi', 'ge')
LOG_PHI_BOUND = 30.0
ACCEPTANCE_RANGE = (0.2, 0.5)


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_iter: int = 80_000
    burn_in: int = 30_000
    thin: int = 1
    latent_thin: int = 10
    seed: int = 0
    adapt_window: int = 50
    target_acceptance: float = 0.35
    init_theta: float = 1.5
    init_phi: float = 1.0
    init_lambda: float = 1.0
    init_sigma: float = 0.1
    init_ge_a: float = 1.0
    init_ge_b: float = 1.0
    use_likelihood: bool = True
    frozen: tuple = ()
    check_domain: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'frozen', tuple(self.frozen))
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2; BGR is undefined for a single chain")
        if self.n_iter < 1 or self.burn_in < 0:
            raise ValueError("n_iter must be positive and burn_in non-negative")
        if self.burn_in >= self.n_iter:
            raise ValueError(f"burn_in ({self.burn_in}) must be < n_iter ({self.n_iter})")
        if self.thin < 1 or self.latent_thin < 1 or self.adapt_window < 1:
            raise ValueError("thin, latent_thin and adapt_window must be >= 1")
        if self.latent_thin % self.thin:
            raise ValueError("latent_thin must be a multiple of thin")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        for name in ('init_theta', 'init_phi', 'init_lambda', 'init_sigma', 'init_ge_a', 'init_ge_b'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        unknown = set(self.frozen) - set(FREEZABLE_BLOCKS)
        if unknown:
            raise ValueError(f"unknown frozen blocks {sorted(unknown)}; choose from {FREEZABLE_BLOCKS}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data['frozen'] = list(self.frozen)
        return data


@dataclass(frozen=True)
class ModelData:
    X: np.ndarray
    y: np.ndarray
    fixed_idx: tuple
    random_idx: tuple
    intercept_idx: Optional[int]
    log_fact_y: np.ndarray

    @classmethod
    def from_design(cls, design: DesignMatrix, y, spec: ModelSpec) -> 'ModelData':
        y = np.asarray(y)
        if y.shape != (design.n_sites,):
            raise ValueError(f"response length {y.shape} does not match {design.n_sites} sites")
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise ValueError("response must be non-negative integers")
        random_idx = tuple(design.column_index(label) for label in spec.formula.random_terms)
        fixed_idx = tuple(j for j in range(len(design.columns)) if j not in random_idx)
        intercept = design.column_index(INTERCEPT) if INTERCEPT in design.columns else None
        y = y.astype(float)
        return cls(
            X=design.values,
            y=y,
            fixed_idx=fixed_idx,
            random_idx=random_idx,
            intercept_idx=intercept,
            log_fact_y=special.gammaln(y + 1.0),
        )


# ── Likelihood pieces ────────────────────────────────────────────────────────

def nb_kernel(y, log_m, phi):
    """Mean-dependent part of the NB log pmf."""
    return y * log_m - (y + phi) * np.logaddexp(math.log(phi), log_m)


def nb_log_likelihood(y, log_m, phi, log_fact_y) -> np.ndarray:
    """Per-site NB(y; φ, m) log pmf given log m."""
    return (
        special.gammaln(y + phi) - special.gammaln(phi) - log_fact_y
        + phi * math.log(phi) + nb_kernel(y, log_m, phi)
    )


def z_probability(lam) -> np.ndarray:
    """P(z_i = 1 | λ_i); θ cancels between the two mixture components."""
    lam = np.asarray(lam, dtype=float)
    return lam / (1.0 + lam)


def sample_z(lam, rng: np.random.Generator) -> np.ndarray:
    prob = z_probability(lam)
    return (rng.random(prob.shape) < prob).astype(np.int8)


# ── Adaptation ───────────────────────────────────────────────────────────────

class ProposalScale:
    """
    Per-coordinate random-walk scales with batch Robbins-Monro updates of
    log scale towards the target acceptance; frozen after burn-in.
    """

    def __init__(self, shape, initial: float, target: float, window: int):
        self.log_scale = np.full(shape, math.log(initial))
        self.target = target
        self.window = window
        self.frozen = False
        self._batch_accepts = np.zeros(shape)
        self._batch_count = 0
        self._batches = 0
        self._accepts = np.zeros(shape)
        self._proposals = 0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def record(self, accepted):
        accepted = np.asarray(accepted, dtype=float)
        if self.frozen:
            self._accepts += accepted
            self._proposals += 1
            return
        self._batch_accepts += accepted
        self._batch_count += 1
        if self._batch_count == self.window:
            self._batches += 1
            rate = self._batch_accepts / self.window
            self.log_scale += (rate - self.target) / math.sqrt(self._batches)
            self._batch_accepts[...] = 0.0
            self._batch_count = 0

    def freeze(self):
        self.frozen = True

    def acceptance_rate(self) -> float:
        if self._proposals == 0:
            return float('nan')
        return float(np.mean(self._accepts / self._proposals))


# ── Sampler ──────────────────────────────────────────────────────────────────

class GibbsSampler:

    def __init__(self, spec: ModelSpec, data: ModelData, cfg: McmcConfig,
                 chain_id: int = 0, meta: Optional[FitMetadata] = None):
        self.spec = spec
        self.data = data
        self.cfg = cfg
        self.chain_id = chain_id
        self.meta = meta
        self.seed = cfg.seed + chain_id
        self.rng = np.random.default_rng(self.seed)
        self.priors = spec.priors
        self.lindley = spec.mixing == 'lindley'
        self.like_weight = 1.0 if cfg.use_likelihood else 0.0

        n, p = data.X.shape
        r = len(data.random_idx)
        self.beta = np.zeros(p)
        self.site_coef = np.zeros((n, r))
        self.sigma = np.full(r, cfg.init_sigma)
        self.phi = cfg.init_phi
        self.theta = cfg.init_theta
        self.ge_a = cfg.init_ge_a
        self.ge_b = cfg.init_ge_b
        self.log_lam = np.full(n, math.log(cfg.init_lambda))
        self.z = sample_z(np.exp(self.log_lam), self.rng) if self.lindley else np.zeros(n, np.int8)
        self.eta = self._linear_predictor()
        self._pending = {}

        target, window = cfg.target_acceptance, cfg.adapt_window
        self.scales = {
            'coefficients': ProposalScale(len(data.fixed_idx), 0.1, target, window),
            'site_coefficients': ProposalScale((n, r), 0.1, target, window),
            'rp_shift': ProposalScale(r, 0.05, target, window),
            'rp_rescale': ProposalScale(r, 0.1, target, window),
            'intercept_shift': ProposalScale(1, 0.1, target, window),
            'latents': ProposalScale(n, 0.5, target, window),
            'theta': ProposalScale(1, 0.1, target, window),
            'phi': ProposalScale(1, 0.2, target, window),
            'ge_a': ProposalScale(1, 0.1, target, window),
            'ge_b': ProposalScale(1, 0.1, target, window),
        }

    # ── Helpers ──────────────────────────────────────────────────────────────

    def _linear_predictor(self) -> np.ndarray:
        X, fixed = self.data.X, list(self.data.fixed_idx)
        eta = X[:, fixed] @ self.beta[fixed]
        for k, j in enumerate(self.data.random_idx):
            eta = eta + X[:, j] * self.site_coef[:, k]
        return eta

    def _kernel(self, eta, log_lam=None) -> np.ndarray:
        log_lam = self.log_lam if log_lam is None else log_lam
        log_m = np.clip(eta, -ETA_CLAMP, ETA_CLAMP) + log_lam
        return self.like_weight * nb_kernel(self.data.y, log_m, self.phi)

    def _latent_log_prior(self, log_lam) -> np.ndarray:
        """Latent prior density on the log λ scale (Jacobian included)."""
        lam = np.exp(log_lam)
        if self.lindley:
            return (1.0 + self.z) * log_lam - self.theta * lam
        with np.errstate(divide='ignore'):
            return (self.ge_a - 1.0) * np.log(-np.expm1(-self.ge_b * lam)) - self.ge_b * lam + log_lam

    def _coef_log_prior(self, value) -> float:
        pr = self.priors
        return -0.5 * (value - pr.coef_mean) ** 2 / pr.coef_variance

    def _accept(self, log_ratio) -> np.ndarray:
        log_ratio = np.nan_to_num(np.asarray(log_ratio, dtype=float), nan=-np.inf)
        return np.log(self.rng.random(log_ratio.shape)) < log_ratio

    def _frozen(self, block) -> bool:
        return block in self.cfg.frozen

    def log_likelihood(self) -> float:
        log_m = np.clip(self.eta, -ETA_CLAMP, ETA_CLAMP) + self.log_lam
        return float(np.sum(nb_log_likelihood(self.data.y, log_m, self.phi, self.data.log_fact_y)))

    # ── Public API: block updates ────────────────────────────────────────────

    def update_latents(self):
        if self._frozen('latents'):
            return
        scales = self.scales['latents']
        current = self.log_lam
        proposal = current + scales.scale * self.rng.standard_normal(current.shape)
        log_ratio = (
            self._kernel(self.eta, proposal) - self._kernel(self.eta, current)
            + self._latent_log_prior(proposal) - self._latent_log_prior(current)
        )
        accepted = self._accept(log_ratio)
        self.log_lam = np.where(accepted, proposal, current)
        scales.record(accepted)
        if self.lindley:
            self.z = sample_z(np.exp(self.log_lam), self.rng)

    def update_coefficients(self):
        if self._frozen('coefficients'):
            return
        self._update_fixed_coefficients()
        for k, j in enumerate(self.data.random_idx):
            self._update_site_coefficients(k, j)
            self._update_random_mean(k, j)
            self._shift_random_term(k, j)
            self._update_random_sd(k, j)
            self._rescale_random_term(k, j)

    def update_intercept_shift(self):
        idx = self.data.intercept_idx
        if idx is None or self._frozen('coefficients') or self._frozen('latents'):
            return
        scales = self.scales['intercept_shift']
        delta = float(scales.scale[0] * self.rng.standard_normal())
        X0 = self.data.X[:, idx]
        new_eta = self.eta + delta * X0
        new_log_lam = self.log_lam - delta
        log_ratio = (
            np.sum(self._kernel(new_eta, new_log_lam)) - np.sum(self._kernel(self.eta))
            + self._coef_log_prior(self.beta[idx] + delta) - self._coef_log_prior(self.beta[idx])
            + np.sum(self._latent_log_prior(new_log_lam)) - np.sum(self._latent_log_prior(self.log_lam))
        )
        accepted = bool(self._accept(log_ratio))
        if accepted:
            self.beta[idx] += delta
            self.eta = new_eta
            self.log_lam = new_log_lam
        scales.record([accepted])

    def update_theta(self):
        if not self.lindley or self._frozen('theta'):
            return
        pr = self.priors
        scales = self.scales['theta']
        lam = np.exp(self.log_lam)
        n, lam_sum = lam.size, float(lam.sum())

        def log_target(w):
            theta = (1.0 - w) / w
            # collapsed Lindley density of λ; Σ log(1+λ) is constant in θ
            lindley = n * (2.0 * math.log(theta) - math.log1p(theta)) - theta * lam_sum
            prior = stats.beta.logpdf(w, pr.lindley_a, pr.lindley_b)
            return prior + lindley + math.log(w) + math.log1p(-w)

        w = 1.0 / (1.0 + self.theta)
        u = math.log(w) - math.log1p(-w) + float(scales.scale[0]) * self.rng.standard_normal()
        w_new = float(special.expit(u))
        if 0.0 < w_new < 1.0:
            accepted = bool(self._accept(log_target(w_new) - log_target(w)))
        else:
            accepted = False
        if accepted:
            self.theta = (1.0 - w_new) / w_new
        scales.record([accepted])

    def update_phi(self):
        if self._frozen('phi'):
            return
        pr = self.priors
        scales = self.scales['phi']
        log_m = np.clip(self.eta, -ETA_CLAMP, ETA_CLAMP) + self.log_lam
        y, log_fact = self.data.y, self.data.log_fact_y

        def log_target(phi):
            like = self.like_weight * float(np.sum(nb_log_likelihood(y, log_m, phi, log_fact)))
            prior = stats.gamma.logpdf(phi, pr.dispersion_shape, scale=1.0 / pr.dispersion_rate)
            return like + prior + math.log(phi)

        log_new = math.log(self.phi) + float(scales.scale[0]) * self.rng.standard_normal()
        accepted = False
        if abs(log_new) <= LOG_PHI_BOUND:
            phi_new = math.exp(log_new)
            accepted = bool(self._accept(log_target(phi_new) - log_target(self.phi)))
            if accepted:
                self.phi = phi_new
        scales.record([accepted])

    def update_ge_params(self):
        if self.lindley or self._frozen('ge'):
            return
        pr = self.priors
        lam = np.exp(self.log_lam)
        n, lam_sum = lam.size, float(lam.sum())

        def log_target(a, b):
            with np.errstate(divide='ignore'):
                log_cdf = float(np.sum(np.log(-np.expm1(-b * lam))))
            return n * (math.log(a) + math.log(b)) + (a - 1.0) * log_cdf - b * lam_sum

        for name, shape, rate in (('ge_a', pr.ge_a_shape, pr.ge_a_rate), ('ge_b', pr.ge_b_shape, pr.ge_b_rate)):
            scales = self.scales[name]
            current = getattr(self, name)
            proposal = current * math.exp(float(scales.scale[0]) * self.rng.standard_normal())
            a_cur, b_cur = self.ge_a, self.ge_b
            a_new, b_new = (proposal, b_cur) if name == 'ge_a' else (a_cur, proposal)
            log_ratio = (
                log_target(a_new, b_new) - log_target(a_cur, b_cur)
                + stats.gamma.logpdf(proposal, shape, scale=1.0 / rate)
                - stats.gamma.logpdf(current, shape, scale=1.0 / rate)
                + math.log(proposal) - math.log(current)
            )
            accepted = bool(self._accept(log_ratio))
            if accepted:
                setattr(self, name, proposal)
            scales.record([accepted])

    def sweep(self):
        self.update_coefficients()
        self.update_intercept_shift()
        self.update_latents()
        self.update_theta()
        self.update_ge_params()
        self.update_phi()
        if self.cfg.check_domain:
            self.assert_domain()

    def assert_domain(self):
        assert self.phi > 0, f"phi={self.phi}"
        assert self.theta > 0 and self.ge_a > 0 and self.ge_b > 0
        assert np.all(self.sigma > 0), f"sigma={self.sigma}"
        assert np.all(np.isfinite(self.log_lam)), "non-finite latent"
        assert np.all(np.isin(self.z, (0, 1)))
        assert np.all(np.isfinite(self.eta)), "non-finite linear predictor"

    # ── Random-term steps ────────────────────────────────────────────────────

    def _update_fixed_coefficients(self):
        X = self.data.X
        scales = self.scales['coefficients']
        steps = scales.scale * self.rng.standard_normal(len(self.data.fixed_idx))
        accepted = np.zeros(len(steps), dtype=bool)
        kernel_sum = float(np.sum(self._kernel(self.eta)))
        for k, j in enumerate(self.data.fixed_idx):
            new_eta = self.eta + steps[k] * X[:, j]
            new_kernel = float(np.sum(self._kernel(new_eta)))
            log_ratio = (
                new_kernel - kernel_sum
                + self._coef_log_prior(self.beta[j] + steps[k]) - self._coef_log_prior(self.beta[j])
            )
            if self._accept(log_ratio):
                accepted[k] = True
                self.beta[j] += steps[k]
                self.eta = new_eta
                kernel_sum = new_kernel
        scales.record(accepted)

    def _update_site_coefficients(self, k, j):
        scales = self.scales['site_coefficients']
        x = self.data.X[:, j]
        current = self.site_coef[:, k]
        step = scales.scale[:, k] * self.rng.standard_normal(current.shape)
        proposal = current + step
        new_eta = self.eta + step * x
        var = self.sigma[k] ** 2
        mean = self.beta[j]
        log_ratio = (
            self._kernel(new_eta) - self._kernel(self.eta)
            - 0.5 * ((proposal - mean) ** 2 - (current - mean) ** 2) / var
        )
        accepted = self._accept(log_ratio)
        self.site_coef[:, k] = np.where(accepted, proposal, current)
        self.eta = np.where(accepted, new_eta, self.eta)
        self._record_vector('site_coefficients', k, accepted)

    def _update_random_mean(self, k, j):
        pr = self.priors
        n = self.site_coef.shape[0]
        precision = n / self.sigma[k] ** 2 + 1.0 / pr.coef_variance
        mean = (self.site_coef[:, k].sum() / self.sigma[k] ** 2 + pr.coef_mean / pr.coef_variance) / precision
        self.beta[j] = mean + self.rng.standard_normal() / math.sqrt(precision)

    def _shift_random_term(self, k, j):
        scales = self.scales['rp_shift']
        delta = float(scales.scale[k] * self.rng.standard_normal())
        new_eta = self.eta + delta * self.data.X[:, j]
        log_ratio = (
            np.sum(self._kernel(new_eta)) - np.sum(self._kernel(self.eta))
            + self._coef_log_prior(self.beta[j] + delta) - self._coef_log_prior(self.beta[j])
        )
        accepted = bool(self._accept(log_ratio))
        if accepted:
            self.beta[j] += delta
            self.site_coef[:, k] += delta
            self.eta = new_eta
        self._record_vector('rp_shift', k, accepted)

    def _update_random_sd(self, k, j):
        pr = self.priors
        n = self.site_coef.shape[0]
        resid = self.site_coef[:, k] - self.beta[j]
        shape = pr.rp_precision_shape + 0.5 * n
        rate = pr.rp_precision_rate + 0.5 * float(resid @ resid)
        precision = self.rng.gamma(shape, 1.0 / rate)
        self.sigma[k] = 1.0 / math.sqrt(precision)

    def _rescale_random_term(self, k, j):
        """Non-centred move: σ_j → σ_j·e^ε with standardized deviations held fixed."""
        pr = self.priors
        scales = self.scales['rp_rescale']
        sigma = self.sigma[k]
        sigma_new = sigma * math.exp(float(scales.scale[k]) * self.rng.standard_normal())
        deviations = (self.site_coef[:, k] - self.beta[j]) / sigma
        new_coef = self.beta[j] + sigma_new * deviations
        new_eta = self.eta + (new_coef - self.site_coef[:, k]) * self.data.X[:, j]

        def log_prior(s):
            # Gamma(shape, rate) on 1/σ², expressed on log σ
            return -2.0 * pr.rp_precision_shape * math.log(s) - pr.rp_precision_rate / s ** 2

        log_ratio = (
            np.sum(self._kernel(new_eta)) - np.sum(self._kernel(self.eta))
            + log_prior(sigma_new) - log_prior(sigma)
        )
        accepted = bool(self._accept(log_ratio)) and sigma_new > 0
        if accepted:
            self.sigma[k] = sigma_new
            self.site_coef[:, k] = new_coef
            self.eta = new_eta
        self._record_vector('rp_rescale', k, accepted)

    def _record_vector(self, name, k, accepted):
        """Collect per-term outcomes and record once all random terms have moved."""
        pending = self._pending.setdefault(name, np.zeros(self.scales[name].log_scale.shape, bool))
        pending[..., k] = accepted
        if k == len(self.data.random_idx) - 1:
            self.scales[name].record(pending.copy())
            pending[...] = False

    # ── Chain driver ─────────────────────────────────────────────────────────

    def scalar_names(self) -> list:
        columns = self.meta.columns
        names = [f'b:{c}' for c in columns]
        names += [f'sigma:{columns[j]}' for j in self.data.random_idx]
        names.append('phi')
        names += ['theta'] if self.lindley else ['ge_a', 'ge_b']
        names.append('loglik')
        return names

    def _scalar_row(self) -> list:
        row = list(self.beta) + list(self.sigma) + [self.phi]
        row += [self.theta] if self.lindley else [self.ge_a, self.ge_b]
        row.append(self.log_likelihood())
        return row

    def run(self) -> ChainDraws:
        cfg = self.cfg
        columns = self.meta.columns
        names = self.scalar_names()
        n_records = -(-cfg.n_iter // cfg.thin)
        burn_records = -(-cfg.burn_in // cfg.thin)
        site_iters = [t for t in range(cfg.burn_in, cfg.n_iter) if t % cfg.latent_thin == 0]
        n_sites = self.data.X.shape[0]

        scalar_block = np.empty((n_records, len(names)))
        site_names = ['lambda'] + (['z'] if self.lindley else [])
        site_names += [f'coef:{columns[j]}' for j in self.data.random_idx]
        site_block = {name: np.empty((len(site_iters), n_sites)) for name in site_names}
        lam_sum = np.zeros(n_sites)
        coef_sum = np.zeros_like(self.site_coef)
        n_post = 0

        logger.info("Chain %d (seed %d): %s, %d iterations, burn-in %d",
                    self.chain_id, self.seed, self.spec.family, cfg.n_iter, cfg.burn_in)
        progress_every = max(1, cfg.n_iter // 10)
        site_pos = 0
        if cfg.burn_in == 0:
            self._freeze_adaptation()

        for t in range(cfg.n_iter):
            if t == cfg.burn_in and t > 0:
                self._freeze_adaptation()
            self.sweep()

            if t % cfg.thin == 0:
                scalar_block[t // cfg.thin] = self._scalar_row()
            if t >= cfg.burn_in:
                lam = np.exp(self.log_lam)
                lam_sum += lam
                coef_sum += self.site_coef
                n_post += 1
                if t % cfg.latent_thin == 0:
                    site_block['lambda'][site_pos] = lam
                    if self.lindley:
                        site_block['z'][site_pos] = self.z
                    for k, j in enumerate(self.data.random_idx):
                        site_block[f'coef:{columns[j]}'][site_pos] = self.site_coef[:, k]
                    site_pos += 1
            if (t + 1) % progress_every == 0:
                logger.info("Chain %d: %d/%d iterations", self.chain_id, t + 1, cfg.n_iter)

        latent_means = {'lambda': lam_sum / n_post}
        for k, j in enumerate(self.data.random_idx):
            latent_means[f'coef:{columns[j]}'] = coef_sum[:, k] / n_post

        acceptance = {
            name: scale.acceptance_rate()
            for name, scale in self.scales.items()
            if not np.isnan(scale.acceptance_rate())
        }
        logger.info("Chain %d done; acceptance %s", self.chain_id,
                    ', '.join(f'{k}={v:.2f}' for k, v in sorted(acceptance.items())))
        low, high = ACCEPTANCE_RANGE
        off_target = sorted(k for k, v in acceptance.items() if not low <= v <= high)
        if off_target:
            logger.warning("Chain %d: acceptance outside [%.2f, %.2f] after adaptation for %s",
                           self.chain_id, low, high, ', '.join(off_target))

        return ChainDraws(
            chain_id=self.chain_id,
            seed=self.seed,
            meta=self.meta,
            scalars={name: scalar_block[:, i].copy() for i, name in enumerate(names)},
            burn_in=burn_records,
            thin=cfg.thin,
            site_draws=site_block,
            site_records=np.array([t // cfg.thin for t in site_iters], dtype=np.int64),
            latent_means=latent_means,
            acceptance=acceptance,
        )

    def _freeze_adaptation(self):
        for scale in self.scales.values():
            scale.freeze()


def _run_chain(spec, data, cfg, meta, chain_id) -> ChainDraws:
    return GibbsSampler(spec, data, cfg, chain_id=chain_id, meta=meta).run()


def run(spec: ModelSpec, design: DesignMatrix, y: Sequence, cfg: McmcConfig,
        threads: int = 1, data_path: str = '') -> list:
    """
    Run ``cfg.n_chains`` independent chains; chain k is seeded with
    ``cfg.seed + k`` so results do not depend on ``threads``.
    """
    check_full_rank(design)
    data = ModelData.from_design(design, y, spec)
    meta = FitMetadata.from_fit(spec, design, cfg.to_dict(), data_path=data_path)
    logger.info("Sampling %s on %d sites x %d columns with %d chain(s), %d worker(s)",
                spec.family, design.n_sites, len(design.columns), cfg.n_chains, threads)
    jobs = (delayed(_run_chain)(spec, data, cfg, meta, k) for k in range(cfg.n_chains))
    return list(Parallel(n_jobs=max(1, int(threads)))(jobs))
