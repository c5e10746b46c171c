"""Run configuration: one JSON document with model, prior, sampler and io blocks."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data_model import CalendarGrid, ValidationError, parse_date, to_day
from .hazard import KNOWLEDGE, SCHEMES, THRESHOLD_MODES, ThresholdConfig
from .inference.samplers import SamplerConfig

PRIOR_SOURCES = ("built", "file", "flat")


@dataclass
class ModelBlock:
    origin: str = "2021-01-01"
    start: str | None = None
    end: str | None = None
    interval_length: int = 14
    sites: list | None = None
    variants: list | None = None
    threshold_mode: str = "none"
    llod: float | None = None
    threshold_bounds: list | None = None
    variant_knowledge: str = "unknown"
    scheme: str = "exact_piecewise"

    def validate(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValidationError(f"model.threshold_mode must be one of {THRESHOLD_MODES}")
        if (self.threshold_bounds is not None) != (self.threshold_mode == "estimate"):
            raise ValidationError("model.threshold_bounds must be given exactly when "
                                  "threshold_mode is 'estimate'")
        if self.variant_knowledge not in KNOWLEDGE:
            raise ValidationError(f"model.variant_knowledge must be one of {KNOWLEDGE}")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"model.scheme must be one of {SCHEMES}")
        if self.interval_length <= 0:
            raise ValidationError("model.interval_length must be positive")
        self.threshold()  # validates llod/bounds

    def threshold(self) -> ThresholdConfig:
        bounds = tuple(self.threshold_bounds) if self.threshold_bounds is not None else None
        return ThresholdConfig(self.threshold_mode, self.llod, bounds)


@dataclass
class PriorBlock:
    source: str = "built"
    sd_override: float | None = None
    sd_scale: float = 1.0
    sigma_ref: float = 5.0
    coefficient_scale: float = 2.0
    gamma_truncation: str = "none"
    flat_mean_mode: str = "zero"
    flat_sd: float = 5.0
    misspecified_map: dict | None = None
    day_shift: int = 0

    def validate(self):
        if self.source not in PRIOR_SOURCES:
            raise ValidationError(f"prior.source must be one of {PRIOR_SOURCES}")
        if self.coefficient_scale <= 0 or self.sd_scale <= 0:
            raise ValidationError("prior scales must be positive")


@dataclass
class IOBlock:
    data: str | None = None
    curve: str | None = None
    variants: str | None = None
    priors: str | None = None
    draws: str | None = None
    out: str = "out"


@dataclass
class PPCBlock:
    eval_days: list = field(default_factory=lambda: [60, 180])
    n_draws: int = 100
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    prior: PriorBlock = field(default_factory=PriorBlock)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    io: IOBlock = field(default_factory=IOBlock)
    ppc: PPCBlock = field(default_factory=PPCBlock)
    contrasts: list = field(default_factory=lambda: [1.0])
    max_rhat: float = 1.05

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        blocks = {"model": ModelBlock, "prior": PriorBlock, "sampler": SamplerConfig,
                  "io": IOBlock, "ppc": PPCBlock}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {}
        for name, value in d.items():
            if name in blocks:
                if not isinstance(value, dict):
                    raise ValidationError(f"config block {name!r} must be an object")
                allowed = {f.name for f in fields(blocks[name])}
                bad = set(value) - allowed
                if bad:
                    raise ValidationError(f"unknown {name} settings: {', '.join(sorted(bad))}")
                try:
                    kw[name] = blocks[name](**value)
                except TypeError as exc:
                    raise ValidationError(f"config block {name!r}: {exc}") from None
            else:
                kw[name] = value
        cfg = cls(**kw)
        cfg.model.validate()
        cfg.prior.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def set_value(self, dotted: str, raw: str) -> None:
        """Override one scalar field, e.g. ``sampler.seed=3``."""
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ValidationError(f"unknown config key {dotted!r}")
            obj = getattr(obj, p)
        name = parts[-1]
        if not hasattr(obj, name):
            raise ValidationError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        setattr(obj, name, value)

    # -- derived ---------------------------------------------------------------

    @property
    def origin_date(self):
        return parse_date(self.model.origin)

    def grid(self, data_path: str | Path | None = None) -> CalendarGrid:
        """Calendar grid from the model block, or spanning the data's dates."""
        m = self.model
        origin = self.origin_date
        if m.start and m.end:
            return CalendarGrid(to_day(parse_date(m.start), origin),
                                to_day(parse_date(m.end), origin), m.interval_length)
        if data_path is None:
            raise ValidationError("model.start/model.end missing and no data to infer them from")
        lo, hi = date_span(data_path)
        start = to_day(parse_date(m.start), origin) if m.start else to_day(lo, origin)
        end = to_day(parse_date(m.end), origin) if m.end else to_day(hi, origin)
        if end <= start:
            end = start + 1
        return CalendarGrid(start, end, m.interval_length)


def date_span(path: str | Path):
    """Earliest and latest parseable date in a participants file."""
    dates = []
    try:
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                for col in ("enroll_date", "date_lower", "date_upper"):
                    v = (row.get(col) or "").strip()
                    if v:
                        try:
                            dates.append(parse_date(v))
                        except ValueError:
                            pass
    except FileNotFoundError:
        raise ValidationError(f"data file {path} not found") from None
    if not dates:
        raise ValidationError(f"{path}: no dates found")
    return min(dates), max(dates)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
