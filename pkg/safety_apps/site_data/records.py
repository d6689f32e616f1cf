"""
Bus-stop site records.

One row per bus stop: crash counts by severity group plus the continuous and
categorical covariates of the site inventory. Files are UTF-8 CSV with a
header row; the column names are exactly the ``SiteRecord`` field names.

Loading collects every row-level problem (with its line number) before
raising, so a bad file is reported in one pass.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from safety_apps.run_manifest import atomic_write_text

logger = logging.getLogger(__name__)


SEVERITY_COLUMNS = ('kabco', 'kabc', 'kab')

CONTINUOUS_FIELDS = (
    'aadt', 'avg_on', 'avg_off', 'dist_to_int', 'median_width',
)
INTEGER_FIELDS = (
    'speed_limit', 'lane_count', 'school_count', 'park_count', 'stop_count',
)

# Closed label sets; the first label is the default reference level (code 0).
CATEGORY_LEVELS = {
    'int_type':     ('non_signalized', 'signalized'),
    'marked_xwalk': ('yes', 'no'),
    'median_type':  ('divided', 'undivided'),
    'lighting':     ('yes', 'no'),
    'area':         ('com', 'res', 'mix'),
    'sidewalk':     ('yes', 'no'),
    'curve':        ('no', 'yes'),
    'design':       ('other', 'curbside'),
    'proximity':    ('near', 'far', 'midblock'),
    'cover':        ('covered', 'uncovered'),
}

SPEED_LIMIT_RANGE = (20, 65)


class SiteDataError(ValueError):
    """Raised with every row-level problem found in a site file."""

    def __init__(self, errors: Sequence[tuple]):
        self.errors = list(errors)
        preview = '; '.join(f"line {line}: {msg}" for line, msg in self.errors[:10])
        more = f" (+{len(self.errors) - 10} more)" if len(self.errors) > 10 else ''
        super().__init__(f"{len(self.errors)} invalid site row(s): {preview}{more}")


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    kabco: int
    kabc: int
    kab: int
    aadt: float
    avg_on: float
    avg_off: float
    dist_to_int: float
    median_width: float
    speed_limit: int
    lane_count: int
    school_count: int
    park_count: int
    stop_count: int
    int_type: str
    marked_xwalk: str
    median_type: str
    lighting: str
    area: str
    sidewalk: str
    curve: str
    design: str
    proximity: str
    cover: str

    def problems(self) -> list:
        """Invariant violations as human-readable messages (empty when valid)."""
        issues = []
        if not str(self.site_id).strip():
            issues.append("site_id is empty")
        for name in SEVERITY_COLUMNS:
            if getattr(self, name) < 0:
                issues.append(f"{name} must be >= 0")
        if not (self.kab <= self.kabc <= self.kabco):
            issues.append(
                f"severity ordering violated: kab={self.kab}, kabc={self.kabc}, kabco={self.kabco}"
            )
        if not self.aadt > 0:
            issues.append("aadt must be > 0")
        for name in CONTINUOUS_FIELDS + INTEGER_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                issues.append(f"{name} must be finite and >= 0")
        low, high = SPEED_LIMIT_RANGE
        if not low <= self.speed_limit <= high:
            issues.append(f"speed_limit must be in [{low}, {high}]")
        for name, levels in CATEGORY_LEVELS.items():
            if getattr(self, name) not in levels:
                issues.append(f"unknown {name} label {getattr(self, name)!r}; expected one of {levels}")
        return issues

    def count(self, response: str) -> int:
        if response not in SEVERITY_COLUMNS:
            raise ValueError(f"response must be one of {SEVERITY_COLUMNS}, got {response!r}")
        return getattr(self, response)


FIELD_NAMES = tuple(f.name for f in fields(SiteRecord))


# ── Reading / writing ────────────────────────────────────────────────────────

def load_sites(path) -> list:
    """Read and validate a site CSV; raises ``SiteDataError`` on any bad row."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"site file not found: {path}")
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding='utf-8',
    )
    missing = [name for name in FIELD_NAMES if name not in frame.columns]
    if missing:
        raise SiteDataError([(1, f"missing column(s): {', '.join(missing)}")])

    records, errors = [], []
    for offset, row in enumerate(frame[list(FIELD_NAMES)].itertuples(index=False)):
        line = offset + 2  # header is line 1
        try:
            record = _parse_row(row._asdict())
        except ValueError as exc:
            errors.append((line, str(exc)))
            continue
        issues = record.problems()
        if issues:
            errors.extend((line, msg) for msg in issues)
            continue
        records.append(record)

    seen = set()
    for offset, record in enumerate(records):
        if record.site_id in seen:
            errors.append((offset + 2, f"duplicate site_id {record.site_id!r}"))
        seen.add(record.site_id)

    if errors:
        raise SiteDataError(errors)
    logger.info("Loaded %d site records from %s", len(records), path)
    return records


def _parse_row(raw: Mapping) -> SiteRecord:
    values = {'site_id': raw['site_id'].strip()}
    for name in SEVERITY_COLUMNS + INTEGER_FIELDS:
        values[name] = _parse_int(name, raw[name])
    for name in CONTINUOUS_FIELDS:
        try:
            values[name] = float(raw[name])
        except ValueError:
            raise ValueError(f"{name} is not a number: {raw[name]!r}")
    for name in CATEGORY_LEVELS:
        values[name] = raw[name].strip().lower()
    return SiteRecord(**values)


def _parse_int(name, text) -> int:
    try:
        number = float(text)
    except ValueError:
        raise ValueError(f"{name} is not a number: {text!r}")
    if not number.is_integer():
        raise ValueError(f"{name} must be an integer, got {text!r}")
    return int(number)


def records_frame(records: Iterable[SiteRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=list(FIELD_NAMES))


def write_sites(records: Sequence[SiteRecord], path) -> Path:
    """Write records as CSV; floats use shortest round-trip repr."""
    frame = records_frame(records)
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator='\n'))


# ── Descriptives ─────────────────────────────────────────────────────────────

# (min, max, mean, sd) from the site inventory the generator is calibrated to.
INVENTORY_DESCRIPTIVES = {
    'kabco':        (0, 8, 0.752, 1.45),
    'kabc':         (0, 6, 0.526, 1.11),
    'kab':          (0, 5, 0.314, 0.65),
    'aadt':         (166, 42056, 13540.6, 8827.85),
    'avg_on':       (0, 769.0, 53.20, 66.78),
    'avg_off':      (0, 831.0, 56.63, 60.64),
    'dist_to_int':  (0.4, 2106, 198.94, 241.04),
    'median_width': (0.0, 131.9, 7.10, 12.38),
    'speed_limit':  (20, 65, 36.63, 7.78),
    'lane_count':   (1, 8, 4.34, 1.46),
    'school_count': (0, 6, 0.82, 1.12),
    'park_count':   (0, 6, 0.64, 0.84),
    'stop_count':   (0, 11, 3.45, 2.19),
}


def validate_descriptives(
    records: Sequence[SiteRecord],
    reference: Optional[Mapping] = None,
    tolerance: float = 0.25,
) -> pd.DataFrame:
    """
    Min/max/mean/SD per numeric variable. When ``reference`` maps a variable to
    (min, max, mean, sd), rows whose mean differs from the reference mean by
    more than ``tolerance`` reference SDs are flagged.
    """
    if not records:
        raise ValueError("validate_descriptives needs at least one record")
    frame = records_frame(records)
    reference = reference or {}
    rows = []
    for name in SEVERITY_COLUMNS + CONTINUOUS_FIELDS + INTEGER_FIELDS:
        column = frame[name].astype(float).to_numpy()
        row = {
            'variable': name,
            'n': column.size,
            'min': column.min(),
            'max': column.max(),
            'mean': column.mean(),
            'sd': column.std(ddof=1) if column.size > 1 else 0.0,
            'ref_mean': np.nan,
            'flagged': False,
        }
        if name in reference:
            _, _, ref_mean, ref_sd = reference[name]
            row['ref_mean'] = ref_mean
            row['flagged'] = bool(abs(row['mean'] - ref_mean) > tolerance * ref_sd)
        rows.append(row)
    report = pd.DataFrame(rows)
    flagged = report.loc[report['flagged'], 'variable'].tolist()
    if flagged:
        logger.warning("Descriptives outside tolerance: %s", ', '.join(flagged))
    return report
