"""
Posterior draws and their on-disk format.

``ChainDraws`` holds one chain: every stored iteration of the scalar
parameters (coefficients, random-parameter SDs, φ, θ or GE a/b and the
conditional log-likelihood), thinned site-level draws (λ_i, z_i and site
coefficients b_ij) and the post-burn-in running means of the site latents.

File layout (``chain_<k>.draws``, format version 1, little-endian):

    8 bytes   magic  b'CRSHDRW1'
    uint32    header length H
    H bytes   UTF-8 JSON header (sorted keys)
    float64   scalar block   n_records x n_scalars        (iteration-major)
    float64   site block     n_site_records x n_site_names x n_sites
    float64   means block    n_mean_names x n_sites

See docs/DRAWS_FORMAT.md for the header keys.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from safety_apps.run_manifest import atomic_write_bytes

from .model_spec import ColumnStat, Formula

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b'CRSHDRW1'
CHAIN_GLOB = 'chain_*.draws'


@dataclass(frozen=True)
class FitMetadata:
    """Everything needed to interpret draws without the original run."""

    family: str
    mixing: str
    formula: Mapping
    priors: Mapping
    mcmc: Mapping
    columns: tuple
    continuous: tuple
    groups: tuple
    random_columns: tuple
    column_stats: Mapping
    site_ids: tuple
    data_path: str = ''

    @property
    def response(self) -> str:
        return self.formula['response']

    def formula_obj(self) -> Formula:
        return Formula.from_dict(self.formula)

    def stats(self) -> dict:
        return {label: ColumnStat(*pair) for label, pair in self.column_stats.items()}

    def coefficient_names(self) -> list:
        return [f'b:{c}' for c in self.columns]

    def to_dict(self) -> dict:
        return {
            'family': self.family,
            'mixing': self.mixing,
            'formula': dict(self.formula),
            'priors': dict(self.priors),
            'mcmc': dict(self.mcmc),
            'columns': list(self.columns),
            'continuous': list(self.continuous),
            'groups': list(self.groups),
            'random_columns': list(self.random_columns),
            'column_stats': {k: list(v) for k, v in self.column_stats.items()},
            'site_ids': list(self.site_ids),
            'data_path': self.data_path,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'FitMetadata':
        return cls(
            family=data['family'],
            mixing=data['mixing'],
            formula=data['formula'],
            priors=data['priors'],
            mcmc=data['mcmc'],
            columns=tuple(data['columns']),
            continuous=tuple(data['continuous']),
            groups=tuple(data['groups']),
            random_columns=tuple(data['random_columns']),
            column_stats={k: tuple(v) for k, v in data['column_stats'].items()},
            site_ids=tuple(data['site_ids']),
            data_path=data.get('data_path', ''),
        )

    @classmethod
    def from_fit(cls, spec, design, mcmc: Mapping, data_path: str = '') -> 'FitMetadata':
        return cls(
            family=spec.family,
            mixing=spec.mixing,
            formula=spec.formula.to_dict(),
            priors=spec.priors.to_dict(),
            mcmc=dict(mcmc),
            columns=tuple(design.columns),
            continuous=tuple(design.continuous),
            groups=tuple(design.groups),
            random_columns=tuple(spec.formula.random_terms),
            column_stats={k: (s.mean, s.sd) for k, s in design.column_stats.items()},
            site_ids=tuple(design.site_ids),
            data_path=str(data_path),
        )


@dataclass
class ChainDraws:
    chain_id: int
    seed: int
    meta: FitMetadata
    scalars: dict
    burn_in: int
    thin: int = 1
    site_draws: dict = field(default_factory=dict)
    site_records: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    latent_means: dict = field(default_factory=dict)
    acceptance: dict = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return len(next(iter(self.scalars.values())))

    @property
    def scalar_names(self) -> list:
        return list(self.scalars)

    def post(self, name: str) -> np.ndarray:
        """Post-burn-in draws of one scalar."""
        if name not in self.scalars:
            raise ValueError(f"parameter {name!r} not in draws {self.scalar_names}")
        return self.scalars[name][self.burn_in:]

    def coefficient_draws(self, records: Optional[np.ndarray] = None) -> np.ndarray:
        """(draws, p) standardized-scale coefficients; post-burn-in unless rows given."""
        names = self.meta.coefficient_names()
        rows = slice(self.burn_in, None) if records is None else records
        return np.column_stack([self.scalars[n][rows] for n in names])

    def site_coefficient_draws(self) -> dict:
        return {
            label: self.site_draws[f'coef:{label}']
            for label in self.meta.random_columns
        }


# ── Persistence ──────────────────────────────────────────────────────────────

def encode_chain(chain: ChainDraws) -> bytes:
    scalar_names = list(chain.scalars)
    site_names = list(chain.site_draws)
    mean_names = list(chain.latent_means)
    n_sites = len(chain.meta.site_ids)
    header = {
        'format': 'crashsafe-draws',
        'version': FORMAT_VERSION,
        'chain_id': chain.chain_id,
        'seed': int(chain.seed),
        'burn_in': chain.burn_in,
        'thin': chain.thin,
        'meta': chain.meta.to_dict(),
        'scalar_names': scalar_names,
        'n_records': chain.n_records,
        'site_names': site_names,
        'site_records': [int(i) for i in chain.site_records],
        'mean_names': mean_names,
        'n_sites': n_sites,
        'acceptance': {k: float(v) for k, v in chain.acceptance.items()},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')

    scalar_block = np.column_stack([chain.scalars[n] for n in scalar_names]).astype('<f8')
    if site_names:
        site_block = np.stack([chain.site_draws[n] for n in site_names], axis=1).astype('<f8')
    else:
        site_block = np.zeros((0,), dtype='<f8')
    if mean_names:
        means_block = np.stack([chain.latent_means[n] for n in mean_names]).astype('<f8')
    else:
        means_block = np.zeros((0,), dtype='<f8')

    return b''.join([
        MAGIC,
        struct.pack('<I', len(header_bytes)),
        header_bytes,
        np.ascontiguousarray(scalar_block).tobytes(),
        np.ascontiguousarray(site_block).tobytes(),
        np.ascontiguousarray(means_block).tobytes(),
    ])


def decode_chain(blob: bytes, source: str = '<bytes>') -> ChainDraws:
    if blob[:8] != MAGIC:
        raise ValueError(f"{source} is not a draws file")
    (header_len,) = struct.unpack('<I', blob[8:12])
    header = json.loads(blob[12:12 + header_len].decode('utf-8'))
    if header.get('version') != FORMAT_VERSION:
        raise ValueError(
            f"{source}: unsupported draws format version {header.get('version')} "
            f"(expected {FORMAT_VERSION})"
        )
    offset = 12 + header_len
    n_records = header['n_records']
    scalar_names = header['scalar_names']
    site_names = header['site_names']
    mean_names = header['mean_names']
    n_sites = header['n_sites']
    n_site_records = len(header['site_records'])

    def take(count):
        nonlocal offset
        arr = np.frombuffer(blob, dtype='<f8', count=count, offset=offset).astype(float)
        offset += 8 * count
        return arr

    scalar_block = take(n_records * len(scalar_names)).reshape(n_records, len(scalar_names))
    site_block = take(n_site_records * len(site_names) * n_sites).reshape(
        n_site_records, len(site_names), n_sites)
    means_block = take(len(mean_names) * n_sites).reshape(len(mean_names), n_sites)
    if offset != len(blob):
        raise ValueError(f"{source}: trailing or missing bytes in draws file")

    return ChainDraws(
        chain_id=header['chain_id'],
        seed=header['seed'],
        meta=FitMetadata.from_dict(header['meta']),
        scalars={n: scalar_block[:, i].copy() for i, n in enumerate(scalar_names)},
        burn_in=header['burn_in'],
        thin=header['thin'],
        site_draws={n: site_block[:, i, :].copy() for i, n in enumerate(site_names)},
        site_records=np.asarray(header['site_records'], dtype=np.int64),
        latent_means={n: means_block[i].copy() for i, n in enumerate(mean_names)},
        acceptance=header['acceptance'],
    )


def write_chain(chain: ChainDraws, path) -> Path:
    return atomic_write_bytes(path, encode_chain(chain))


def read_chain(path) -> ChainDraws:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"missing draws file: {path}")
    return decode_chain(path.read_bytes(), str(path))


def save_fit(chains, out_dir) -> list:
    out_dir = Path(out_dir)
    paths = [write_chain(chain, out_dir / f'chain_{chain.chain_id}.draws') for chain in chains]
    logger.info("Saved %d chain file(s) to %s", len(paths), out_dir)
    return paths


def load_fit(draws_dir) -> list:
    draws_dir = Path(draws_dir)
    paths = sorted(draws_dir.glob(CHAIN_GLOB))
    if not paths:
        raise ValueError(f"no draws files ({CHAIN_GLOB}) in {draws_dir}")
    chains = sorted((read_chain(p) for p in paths), key=lambda c: c.chain_id)
    first = chains[0].meta
    for chain in chains[1:]:
        if chain.meta.to_dict() != first.to_dict():
            raise ValueError(f"chains in {draws_dir} come from different fits")
    return chains
