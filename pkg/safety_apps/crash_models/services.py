"""
FitService
──────────
Runs the estimation protocol end to end:
  1. Load and validate the site file
  2. Build (and standardize) the design for the configured formula
  3. Sample every chain, persist one draws file per chain
  4. Summarize, compute DIC, evaluate the convergence gates

Downstream commands (report, effects, psi, cure, evaluate) rebuild the same
design from the metadata stored in the draws via ``design_for``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from django.conf import settings

from safety_apps.run_manifest import write_frame, write_json
from safety_apps.site_data.records import load_sites

from . import sampler
from .convergence import BGR_THRESHOLD, MC_ERROR_RATIO
from .draws_store import FORMAT_VERSION, save_fit
from .inference import DicReport, PosteriorSummary, dic, summarize
from .model_spec import apply_standardization, build_design, response_vector, standardize
from .schemas import ModelConfig

logger = logging.getLogger(__name__)

SUMMARY_FILE = 'summary.csv'
FIT_FILE = 'fit.json'


@dataclass
class FitResult:
    chains: list
    summary: PosteriorSummary
    dic: DicReport
    gate_failures: list
    paths: list

    @property
    def converged(self) -> bool:
        return not self.gate_failures


class FitService:

    def __init__(self, config: ModelConfig, threads: int = 1,
                 bgr_max: Optional[float] = None, mc_ratio: Optional[float] = None):
        self.config = config
        self.threads = max(1, int(threads))
        self.bgr_max = bgr_max or getattr(settings, 'CONVERGENCE_BGR_MAX', BGR_THRESHOLD)
        self.mc_ratio = mc_ratio or getattr(settings, 'CONVERGENCE_MC_ERROR_RATIO', MC_ERROR_RATIO)

    # ── Public API ────────────────────────────────────────────────────────────

    def fit(self, data_path, out_dir) -> FitResult:
        records = load_sites(data_path)
        return self.fit_records(records, out_dir, data_path=str(data_path))

    def fit_records(self, records: Sequence, out_dir, data_path: str = '') -> FitResult:
        out_dir = Path(out_dir)
        spec = self.config.model_spec(n_obs=len(records))
        design = build_design(records, spec.formula)
        if spec.standardize:
            design = standardize(design)
        y = response_vector(records, spec.formula.response)

        chains = sampler.run(spec, design, y, self.config.mcmc, threads=self.threads, data_path=data_path)
        paths = save_fit(chains, out_dir)

        summary = summarize(chains, mc_ratio=self.mc_ratio)
        report = dic(chains, design, y)
        failures = summary.gate_failures(self.bgr_max)
        self._write_reports(out_dir, chains, summary, report)

        if failures:
            logger.warning("Convergence gates failed for %d parameter(s): %s",
                           len(failures), ', '.join(failures))
        else:
            logger.info("All %d monitored parameters passed the convergence gates", len(summary.rows))
        return FitResult(chains=chains, summary=summary, dic=report, gate_failures=failures, paths=paths)

    # ── Helpers ───────────────────────────────────────────────────────────────

    def _write_reports(self, out_dir, chains, summary, report):
        write_frame(out_dir / SUMMARY_FILE, summary.to_frame())
        write_json(out_dir / FIT_FILE, {
            'format_version': FORMAT_VERSION,
            'family': self.config.family,
            'config_path': self.config.path,
            'mcmc': self.config.mcmc.to_dict(),
            'dic': report.to_dict(),
            'gates': {'bgr_max': self.bgr_max, 'mc_error_ratio': self.mc_ratio},
            'gate_failures': summary.gate_failures(self.bgr_max),
            'acceptance': {str(c.chain_id): c.acceptance for c in chains},
        })


# ── Saved fits ───────────────────────────────────────────────────────────────

def design_for(chains: Sequence, records: Sequence, training: bool = True):
    """
    Design and response for ``records`` under a saved fit's formula and
    standardization. Training designs are reordered to the fitted site order
    and must hold exactly the fitted sites.
    """
    meta = chains[0].meta
    formula = meta.formula_obj()
    if training:
        by_id = {r.site_id: r for r in records}
        missing = [sid for sid in meta.site_ids if sid not in by_id]
        extra = sorted(set(by_id) - set(meta.site_ids))
        if missing or extra:
            raise ValueError(
                f"site data does not match the fitted sites "
                f"({len(missing)} missing, e.g. {missing[:3]}; {len(extra)} unknown, e.g. {extra[:3]})"
            )
        records = [by_id[sid] for sid in meta.site_ids]
    design = build_design(records, formula)
    if tuple(design.columns) != tuple(meta.columns):
        raise ValueError(f"design columns {design.columns} do not match the fit {meta.columns}")
    stats = meta.stats()
    if stats:
        design = apply_standardization(design, stats)
    return design, response_vector(records, formula.response)
