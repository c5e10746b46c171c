"""Domain types, calendar-grid arithmetic and CSV ingestion.

Time is measured in integer days from a configured origin date. Every step
function in the package is left-open/right-closed: a value attached to day
``d`` holds on ``(d - 1, d]``, and grid interval ``k`` covers
``(t_{k-1}, t_k]``. The grid start ``t_0`` itself is assigned to interval 1 so
that hazards are defined on the first day of follow-up.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import re
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EVENT = "event"
RIGHT_CENSORED = "right_censored"
INTERVAL_CENSORED = "interval_censored"
STATUSES = (EVENT, RIGHT_CENSORED, INTERVAL_CENSORED)

PROPORTION_TOL = 1e-6


class ValidationError(ValueError):
    """Input data violates a schema or domain invariant."""


def to_day(value: dt.date, origin: dt.date) -> int:
    return (value - origin).days


def from_day(day: int, origin: dt.date) -> dt.date:
    return origin + dt.timedelta(days=int(day))


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


# ---------------------------------------------------------------------------
# Calendar grid and step functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalendarGrid:
    """K calendar intervals between ``start_day`` and ``end_day``.

    Intervals have ``interval_length`` days except the last, which absorbs the
    remainder when the span is not a multiple of the length.
    """

    start_day: int
    end_day: int
    interval_length: int = 14
    boundaries: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.end_day <= self.start_day:
            raise ValidationError("grid end must be after grid start")
        if self.interval_length <= 0:
            raise ValidationError("interval length must be positive")
        n = math.ceil((self.end_day - self.start_day) / self.interval_length)
        bounds = [self.start_day + k * self.interval_length for k in range(n)]
        bounds.append(self.end_day)
        object.__setattr__(self, "boundaries", tuple(bounds))

    @classmethod
    def from_dates(cls, origin: dt.date, start: dt.date, end: dt.date,
                   interval_length: int = 14) -> "CalendarGrid":
        return cls(to_day(start, origin), to_day(end, origin), interval_length)

    @property
    def K(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_days(self) -> int:
        """Number of day indices ``start_day..end_day`` inclusive."""
        return self.end_day - self.start_day + 1

    def contains(self, t: float) -> bool:
        return self.start_day <= t <= self.end_day

    def interval_lengths(self) -> np.ndarray:
        return np.diff(np.asarray(self.boundaries, dtype=float))

    def day_intervals(self) -> np.ndarray:
        """1-based interval index for every day ``start_day..end_day``."""
        days = np.arange(self.start_day, self.end_day + 1)
        idx = np.searchsorted(np.asarray(self.boundaries), days, side="left")
        return np.maximum(idx, 1)


def interval_index(grid: CalendarGrid, t: float) -> int:
    """Return the 1-based k with ``t`` in ``(t_{k-1}, t_k]`` (``t_0`` maps to 1)."""
    if not grid.contains(t):
        raise ValidationError(
            f"time {t} outside grid [{grid.start_day}, {grid.end_day}]")
    return max(bisect_left(grid.boundaries, t), 1)


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """Step function taking ``values[j]`` on ``(boundaries[j], boundaries[j+1]]``.

    The first boundary belongs to the first piece. Boundaries may be infinite,
    which is how constant covariate paths are represented.
    """

    boundaries: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if b.ndim != 1 or v.ndim != 1 or len(b) != len(v) + 1:
            raise ValueError("need len(boundaries) == len(values) + 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls(np.array([-np.inf, np.inf]), np.array([value]))

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1

    def __call__(self, t: float) -> float:
        b = self.boundaries
        if t < b[0] or t > b[-1]:
            raise ValueError(f"t={t} outside support [{b[0]}, {b[-1]}]")
        j = int(np.searchsorted(b, t, side="left"))
        return float(self.values[max(j, 1) - 1])

    def knots(self) -> np.ndarray:
        """Finite interior breakpoints."""
        inner = self.boundaries[1:-1]
        return inner[np.isfinite(inner)]


# ---------------------------------------------------------------------------
# Study data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Subject:
    id: str
    site: int
    enroll_day: int
    status: str
    time_lower: int
    time_upper: int | None = None
    variant: int | None = None
    x_path: PiecewiseConstant = field(default_factory=lambda: PiecewiseConstant.constant(0.0))
    z_paths: tuple[PiecewiseConstant, ...] = ()

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValidationError(f"subject {self.id}: unknown status {self.status!r}")
        if self.enroll_day > self.time_lower:
            raise ValidationError(f"subject {self.id}: enrollment after event/censoring time")
        if self.status == INTERVAL_CENSORED:
            if self.time_upper is None:
                raise ValidationError(f"subject {self.id}: interval censoring needs an upper date")
            if self.time_lower >= self.time_upper:
                raise ValidationError(f"subject {self.id}: inverted censoring interval")
        elif self.time_upper is not None:
            raise ValidationError(f"subject {self.id}: upper date only allowed for interval censoring")
        if self.status == RIGHT_CENSORED:
            if self.time_lower == self.enroll_day:
                raise ValidationError(f"subject {self.id}: zero follow-up")
            if self.variant is not None:
                raise ValidationError(f"subject {self.id}: variant recorded without infection")
        for path in (self.x_path, *self.z_paths):
            if not np.all(np.mod(path.knots(), 1.0) == 0):
                raise ValidationError(f"subject {self.id}: covariate breakpoints must be whole days")

    @property
    def end_day(self) -> int:
        """Last day of observation."""
        return self.time_upper if self.status == INTERVAL_CENSORED else self.time_lower

    def x(self, t: float) -> float:
        return self.x_path(t)

    def z(self, t: float) -> np.ndarray:
        return np.array([p(t) for p in self.z_paths], dtype=float)


@dataclass(frozen=True, eq=False)
class StudyData:
    """Validated cohort. Subjects are kept in id order."""

    subjects: tuple[Subject, ...]
    grid: CalendarGrid
    site_labels: tuple[str, ...]
    variant_labels: tuple[str, ...] = ("all",)
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        subjects = tuple(sorted(self.subjects, key=lambda s: s.id))
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")
        object.__setattr__(self, "subjects", subjects)
        p = len(self.covariate_names)
        for s in subjects:
            if not 0 <= s.site < self.n_sites:
                raise ValidationError(f"subject {s.id}: site index out of range")
            if s.variant is not None and not 0 <= s.variant < self.n_variants:
                raise ValidationError(f"subject {s.id}: variant index out of range")
            if len(s.z_paths) != p:
                raise ValidationError(f"subject {s.id}: expected {p} covariates")
            if not (self.grid.contains(s.enroll_day) and self.grid.contains(s.end_day)):
                raise ValidationError(f"subject {s.id}: follow-up outside calendar grid")

    @property
    def n_sites(self) -> int:
        return len(self.site_labels)

    @property
    def n_variants(self) -> int:
        return len(self.variant_labels)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def __len__(self) -> int:
        return len(self.subjects)

    def check_sites_populated(self) -> None:
        seen = {s.site for s in self.subjects}
        missing = [self.site_labels[i] for i in range(self.n_sites) if i not in seen]
        if missing:
            raise ValidationError(f"no subjects at site(s) {', '.join(missing)}")

    def replace_subjects(self, subjects: Iterable[Subject]) -> "StudyData":
        return StudyData(tuple(subjects), self.grid, self.site_labels,
                         self.variant_labels, self.covariate_names)


# ---------------------------------------------------------------------------
# Variant proportions and epidemic curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VariantMix:
    """Daily variant proportions per site; ``props[s][d - start_day, v]``."""

    grid: CalendarGrid
    props: np.ndarray  # (n_sites, n_days, V)

    def __post_init__(self):
        p = np.asarray(self.props, dtype=float)
        if p.ndim != 3 or p.shape[1] != self.grid.n_days:
            raise ValidationError("variant proportions must cover every grid day")
        if np.any(p < 0) or np.any(p > 1):
            raise ValidationError("variant proportions must lie in [0, 1]")
        err = np.abs(p.sum(axis=2) - 1.0)
        if np.any(err > PROPORTION_TOL):
            raise ValidationError("variant proportions must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "props", p)

    @classmethod
    def single(cls, grid: CalendarGrid, n_sites: int) -> "VariantMix":
        return cls(grid, np.ones((n_sites, grid.n_days, 1)))

    @property
    def n_variants(self) -> int:
        return self.props.shape[2]

    def day_of(self, t: float) -> int:
        """Day whose value applies at time ``t``."""
        if not self.grid.contains(t):
            raise ValidationError(f"time {t} outside grid")
        return max(int(math.ceil(t)), self.grid.start_day)

    def at(self, site: int, t: float) -> np.ndarray:
        return self.props[site, self.day_of(t) - self.grid.start_day]


@dataclass(frozen=True, eq=False)
class CurveSeries:
    """Contiguous daily series for one site, starting at ``first_day``."""

    first_day: int
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def last_day(self) -> int:
        return self.first_day + len(self.mean) - 1

    def window(self, first: int, last: int, shift: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values for days ``first..last`` read ``shift`` days earlier."""
        a, b = first - shift, last - shift
        if a < self.first_day or b > self.last_day:
            raise ValidationError(
                f"days {a}..{b} outside curve support {self.first_day}..{self.last_day}")
        sl = slice(a - self.first_day, b - self.first_day + 1)
        return self.mean[sl], self.lower[sl], self.upper[sl]


@dataclass(frozen=True, eq=False)
class EpidemicCurve:
    series: dict[str, CurveSeries]

    def __getitem__(self, site: str) -> CurveSeries:
        try:
            return self.series[site]
        except KeyError:
            raise ValidationError(f"no epidemic curve for site {site!r}") from None

    @property
    def sites(self) -> tuple[str, ...]:
        return tuple(self.series)

    def scaled(self, factor: float) -> "EpidemicCurve":
        return EpidemicCurve({k: CurveSeries(s.first_day, s.mean * factor, s.lower * factor,
                                             s.upper * factor)
                              for k, s in self.series.items()})


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _read_rows(path: str | Path, required: Sequence[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path.name}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows = [(reader.line_num, {k: (v or "").strip() for k, v in row.items() if k is not None})
                for row in reader]
    return header, rows


def _cell_error(path, line, column, msg) -> ValidationError:
    return ValidationError(f"{Path(path).name} line {line}, column '{column}': {msg}")


def _date_cell(path, line, row, column, origin) -> int:
    try:
        return to_day(parse_date(row[column]), origin)
    except (ValueError, KeyError):
        raise _cell_error(path, line, column, f"cannot parse date {row.get(column)!r}") from None


def _float_cell(path, line, row, column) -> float:
    try:
        value = float(row[column])
    except (ValueError, KeyError):
        raise _cell_error(path, line, column, f"not a number: {row.get(column)!r}") from None
    if not math.isfinite(value):
        raise _cell_error(path, line, column, "value must be finite")
    return value


_Z_COLUMN = re.compile(r"^z(\d+)$")


def load_participants(path: str | Path, grid: CalendarGrid, origin_date: dt.date,
                      sites: Sequence[str] | None = None,
                      variants: Sequence[str] | None = None) -> StudyData:
    """Read ``participants.csv`` into a validated :class:`StudyData`.

    ``sites`` and ``variants`` fix the label order (site index, variant 0 is
    the reference variant). When omitted, sites are sorted alphabetically and
    variants follow order of first appearance.

    Covariate columns are ``z1..zp`` in numeric order. A wholly blank ``x``
    column means no predictor (X = 0 for everyone).
    """
    header, rows = _read_rows(path, ["id", "site", "enroll_date", "status", "date_lower", "x"])
    zcols = sorted((c for c in header if _Z_COLUMN.match(c)), key=lambda c: int(c[1:]))
    x_blank = all(row.get("x", "") == "" for _, row in rows)

    site_list = list(sites) if sites is not None else sorted({r["site"] for _, r in rows})
    site_index = {s: i for i, s in enumerate(site_list)}
    if variants is not None:
        variant_list = list(variants)
    else:
        variant_list = []
        for _, r in rows:
            v = r.get("variant", "")
            if v and v not in variant_list:
                variant_list.append(v)
        variant_list = variant_list or ["all"]
    variant_index = {v: i for i, v in enumerate(variant_list)}

    subjects = []
    for line, row in rows:
        sid = row["id"]
        if not sid:
            raise _cell_error(path, line, "id", "missing id")
        if row["site"] not in site_index:
            raise _cell_error(path, line, "site", f"unknown site label {row['site']!r}")
        status = row["status"]
        if status not in STATUSES:
            raise _cell_error(path, line, "status", f"unknown status {status!r}")
        enroll = _date_cell(path, line, row, "enroll_date", origin_date)
        lower = _date_cell(path, line, row, "date_lower", origin_date)
        upper = None
        if row.get("date_upper", ""):
            if status != INTERVAL_CENSORED:
                raise _cell_error(path, line, "date_upper", "only allowed for interval_censored rows")
            upper = _date_cell(path, line, row, "date_upper", origin_date)
        elif status == INTERVAL_CENSORED:
            raise _cell_error(path, line, "date_upper", "interval_censored row needs an upper date")
        if enroll > lower:
            raise _cell_error(path, line, "date_lower", "enroll after event")
        if upper is not None and upper <= lower:
            raise _cell_error(path, line, "date_upper", "inverted censoring interval")
        if status == RIGHT_CENSORED and lower == enroll:
            raise _cell_error(path, line, "date_lower", "zero follow-up")
        for col, day in (("enroll_date", enroll), ("date_lower", lower), ("date_upper", upper)):
            if day is not None and not grid.contains(day):
                raise _cell_error(path, line, col, "date outside the calendar grid")
        variant = None
        vlabel = row.get("variant", "")
        if vlabel:
            if status == RIGHT_CENSORED:
                raise _cell_error(path, line, "variant", "variant recorded without infection")
            if vlabel not in variant_index:
                raise _cell_error(path, line, "variant", f"unknown variant label {vlabel!r}")
            variant = variant_index[vlabel]
        if x_blank:
            x = 0.0
        elif row.get("x", "") == "":
            raise _cell_error(path, line, "x", "missing predictor value")
        else:
            x = _float_cell(path, line, row, "x")
        zs = tuple(PiecewiseConstant.constant(_float_cell(path, line, row, c)) for c in zcols)
        subjects.append(Subject(sid, site_index[row["site"]], enroll, status, lower, upper,
                                variant, PiecewiseConstant.constant(x), zs))

    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"{Path(path).name}: duplicate subject id(s) {', '.join(dup)}")
    return StudyData(tuple(subjects), grid, tuple(site_list), tuple(variant_list), tuple(zcols))


def _fmt_float(value: float) -> str:
    return repr(float(value))


def write_participants(data: StudyData, path: str | Path, origin_date: dt.date) -> None:
    """Write the normalized participants file (id order, canonical formatting)."""
    header = ["id", "site", "enroll_date", "status", "date_lower", "date_upper", "variant", "x",
              *data.covariate_names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in data.subjects:
            if not s.x_path.is_constant or not all(z.is_constant for z in s.z_paths):
                raise ValidationError(f"subject {s.id}: time-varying covariates cannot be written")
            w.writerow([
                s.id, data.site_labels[s.site],
                from_day(s.enroll_day, origin_date).isoformat(), s.status,
                from_day(s.time_lower, origin_date).isoformat(),
                "" if s.time_upper is None else from_day(s.time_upper, origin_date).isoformat(),
                "" if s.variant is None else data.variant_labels[s.variant],
                _fmt_float(s.x_path.values[0]),
                *(_fmt_float(z.values[0]) for z in s.z_paths),
            ])


def load_variant_proportions(path: str | Path, grid: CalendarGrid, n_variants: int,
                             sites: Sequence[str], origin_date: dt.date,
                             variants: Sequence[str] | None = None) -> VariantMix:
    """Read ``variant_props.csv`` into dense daily paths for the given sites.

    Days without records carry the previous day forward; a recorded day that
    omits a variant gives it proportion 0.
    """
    _, rows = _read_rows(path, ["site", "date", "variant", "proportion"])
    if variants is None:
        labels = []
        for _, r in rows:
            if r["variant"] not in labels:
                labels.append(r["variant"])
    else:
        labels = list(variants)
    if len(labels) != n_variants:
        raise ValidationError(f"{Path(path).name}: expected {n_variants} variants, found {len(labels)}")
    vindex = {v: i for i, v in enumerate(labels)}
    sindex = {s: i for i, s in enumerate(sites)}

    n_days = grid.n_days
    raw = np.full((len(sites), n_days, n_variants), np.nan)
    recorded = np.zeros((len(sites), n_days), dtype=bool)
    for line, r in rows:
        if r["site"] not in sindex:
            continue
        if r["variant"] not in vindex:
            raise _cell_error(path, line, "variant", f"unknown variant label {r['variant']!r}")
        day = _date_cell(path, line, r, "date", origin_date)
        if not grid.contains(day):
            continue
        p = _float_cell(path, line, r, "proportion")
        if not 0.0 <= p <= 1.0:
            raise _cell_error(path, line, "proportion", f"proportion {p} outside [0, 1]")
        s, d = sindex[r["site"]], day - grid.start_day
        if not recorded[s, d]:
            raw[s, d] = 0.0
            recorded[s, d] = True
        raw[s, d, vindex[r["variant"]]] = p

    props = np.empty_like(raw)
    for s, label in enumerate(sites):
        if not recorded[s, 0]:
            raise ValidationError(
                f"{Path(path).name}: site {label} has no proportions on the first grid day "
                f"{from_day(grid.start_day, origin_date).isoformat()}")
        for d in range(n_days):
            props[s, d] = raw[s, d] if recorded[s, d] else props[s, d - 1]
            total = props[s, d].sum()
            if abs(total - 1.0) > PROPORTION_TOL:
                date = from_day(grid.start_day + d, origin_date).isoformat()
                raise ValidationError(
                    f"{Path(path).name}: site {label} on {date}: variant proportions sum to {total:.6g}")
    return VariantMix(grid, props)


def _log_linear_fill(days: np.ndarray, values: np.ndarray, first: int, last: int) -> np.ndarray:
    """Fill days ``first..last`` by interpolation on the log scale.

    Falls back to linear interpolation across gaps touching a zero.
    """
    out = np.empty(last - first + 1)
    out[days - first] = values
    for a, b in zip(days[:-1], days[1:]):
        if b - a <= 1:
            continue
        va, vb = out[a - first], out[b - first]
        frac = (np.arange(a + 1, b) - a) / (b - a)
        if va > 0 and vb > 0:
            out[a + 1 - first:b - first] = np.exp(np.log(va) + frac * (np.log(vb) - np.log(va)))
        else:
            out[a + 1 - first:b - first] = va + frac * (vb - va)
    return out


def load_epidemic_curve(path: str | Path, grid: CalendarGrid | None, origin_date: dt.date) -> EpidemicCurve:
    """Read ``epidemic_curve.csv`` (site, date, mean, lower, upper)."""
    _, rows = _read_rows(path, ["site", "date", "mean", "lower", "upper"])
    by_site: dict[str, dict[int, tuple[float, float, float]]] = {}
    for line, r in rows:
        day = _date_cell(path, line, r, "date", origin_date)
        mean = _float_cell(path, line, r, "mean")
        lower = _float_cell(path, line, r, "lower")
        upper = _float_cell(path, line, r, "upper")
        for col, val in (("mean", mean), ("lower", lower), ("upper", upper)):
            if val < 0:
                raise _cell_error(path, line, col, "negative value")
        if mean < lower:
            raise _cell_error(path, line, "mean", "mean below lower bound")
        if mean > upper:
            raise _cell_error(path, line, "mean", "mean above upper bound")
        site = r["site"]
        if not site:
            raise _cell_error(path, line, "site", "missing site")
        recs = by_site.setdefault(site, {})
        if day in recs:
            raise _cell_error(path, line, "date", "duplicate date for site")
        recs[day] = (mean, lower, upper)

    series = {}
    for site, recs in by_site.items():
        days = np.array(sorted(recs))
        vals = np.array([recs[d] for d in days])
        first, last = int(days[0]), int(days[-1])
        if grid is not None and (last < grid.start_day or first > grid.end_day):
            raise ValidationError(f"{Path(path).name}: site {site} has no records inside the grid")
        cols = [_log_linear_fill(days, vals[:, j], first, last) for j in range(3)]
        series[site] = CurveSeries(first, *cols)
    if not series:
        raise ValidationError(f"{Path(path).name}: empty epidemic curve")
    return EpidemicCurve(series)


def write_epidemic_curve(curve: EpidemicCurve, path: str | Path, origin_date: dt.date) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "date", "mean", "lower", "upper"])
        for site in curve.sites:
            s = curve[site]
            for i in range(len(s.mean)):
                w.writerow([site, from_day(s.first_day + i, origin_date).isoformat(),
                            _fmt_float(s.mean[i]), _fmt_float(s.lower[i]), _fmt_float(s.upper[i])])
