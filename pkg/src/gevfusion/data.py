"""Site metadata, annual-maxima series, CSV ingestion and great-circle geometry.

Coordinates are kept in degrees everywhere and only converted to radians
inside :func:`haversine_km`. All distances are in kilometres.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError

EARTH_RADIUS_KM = 6371.0
SOURCES = ("OBS", "SIM")


@dataclass(frozen=True)
class Site:
    id: str
    source: str
    lat: float
    lon: float

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"unknown source tag {self.source!r} for site {self.id!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"latitude out of range for site {self.id!r}: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"longitude out of range for site {self.id!r}: {self.lon}")


@dataclass(frozen=True)
class AnnualMaximaSeries:
    site_id: str
    years: np.ndarray
    values: np.ndarray
    completeness: np.ndarray | None = None

    def __post_init__(self):
        years = np.asarray(self.years, dtype=int)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)
        if years.shape != values.shape or years.ndim != 1:
            raise DataError(f"series {self.site_id!r}: years and values differ in length")
        if len(years) > 1 and np.any(np.diff(years) <= 0):
            raise DataError(f"series {self.site_id!r}: years must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError(f"series {self.site_id!r}: non-finite values")
        if self.completeness is not None:
            comp = np.asarray(self.completeness, dtype=float)
            if comp.shape != years.shape:
                raise DataError(f"series {self.site_id!r}: completeness length mismatch")
            if np.any((comp < 0) | (comp > 1)):
                raise DataError(f"series {self.site_id!r}: completeness outside [0, 1]")
            object.__setattr__(self, "completeness", comp)

    def __len__(self):
        return len(self.years)

    def __eq__(self, other):
        if not isinstance(other, AnnualMaximaSeries):
            return NotImplemented
        same_comp = (self.completeness is None and other.completeness is None) or (
            self.completeness is not None
            and other.completeness is not None
            and np.array_equal(self.completeness, other.completeness)
        )
        return (
            self.site_id == other.site_id
            and np.array_equal(self.years, other.years)
            and np.array_equal(self.values, other.values)
            and same_comp
        )


@dataclass(frozen=True)
class Dataset:
    """Sites with one annual-maxima series each, indexed by site id."""

    sites: tuple
    series: tuple

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "series", tuple(self.series))
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate site id(s): {', '.join(dup)}")
        known = set(ids)
        seen = set()
        for ser in self.series:
            if ser.site_id not in known:
                raise DataError(f"series references unknown site {ser.site_id!r}")
            if ser.site_id in seen:
                raise DataError(f"more than one series for site {ser.site_id!r}")
            seen.add(ser.site_id)
        missing = known - seen
        if missing:
            raise DataError(f"sites without a series: {', '.join(sorted(missing))}")

    @property
    def site_map(self):
        return {s.id: s for s in self.sites}

    @property
    def series_map(self):
        return {s.site_id: s for s in self.series}

    def subset(self, site_ids):
        keep = set(site_ids)
        return Dataset(
            [s for s in self.sites if s.id in keep],
            [s for s in self.series if s.site_id in keep],
        )

    def by_source(self, source):
        return [s for s in self.sites if s.source == source]


@dataclass
class FilterReport:
    dropped_years: dict = field(default_factory=dict)
    dropped_sites: list = field(default_factory=list)
    empty: bool = False


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} file not found: {path}")
    return path


def load_sites(sites_path):
    """Read a sites CSV with columns ``site_id,source,lat,lon``."""
    sites_path = _require(sites_path, "sites")
    sites = []
    with open(sites_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        _check_header(reader.fieldnames, ["site_id", "source", "lat", "lon"], sites_path)
        for lineno, row in enumerate(reader, start=2):
            try:
                sites.append(
                    Site(row["site_id"].strip(), row["source"].strip(),
                         float(row["lat"]), float(row["lon"]))
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{sites_path}: line {lineno}: {exc}") from None
    return sites


def load_dataset(sites_path, maxima_path):
    """Read the sites and maxima CSV files into a validated :class:`Dataset`.

    sites CSV columns: ``site_id,source,lat,lon``.
    maxima CSV columns: ``site_id,year,value[,completeness]``.
    """
    sites = load_sites(sites_path)
    maxima_path = _require(maxima_path, "maxima")

    rows = {}
    has_comp = False
    with open(maxima_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        _check_header(reader.fieldnames, ["site_id", "year", "value"], maxima_path)
        has_comp = "completeness" in reader.fieldnames
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = row["site_id"].strip()
                year = int(row["year"])
                value = float(row["value"])
                comp_raw = row.get("completeness")
                comp = float(comp_raw) if comp_raw not in (None, "") else 1.0
            except (TypeError, ValueError) as exc:
                raise DataError(f"{maxima_path}: line {lineno}: malformed row ({exc})") from None
            per_site = rows.setdefault(sid, {})
            if year in per_site:
                raise DataError(f"{maxima_path}: line {lineno}: duplicate (site_id, year) = ({sid}, {year})")
            per_site[year] = (value, comp)

    series = []
    for sid, per_site in rows.items():
        years = sorted(per_site)
        series.append(
            AnnualMaximaSeries(
                sid,
                np.array(years),
                np.array([per_site[y][0] for y in years]),
                np.array([per_site[y][1] for y in years]) if has_comp else None,
            )
        )
    return Dataset(sites, series)


def save_dataset(ds, sites_path, maxima_path):
    """Write ``ds`` in the CSV layout read by :func:`load_dataset`."""
    with open(sites_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "source", "lat", "lon"])
        for s in ds.sites:
            w.writerow([s.id, s.source, repr(float(s.lat)), repr(float(s.lon))])
    with_comp = any(s.completeness is not None for s in ds.series)
    with open(maxima_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "year", "value"] + (["completeness"] if with_comp else []))
        for ser in ds.series:
            comp = ser.completeness if ser.completeness is not None else np.ones(len(ser))
            for i in range(len(ser)):
                row = [ser.site_id, int(ser.years[i]), repr(float(ser.values[i]))]
                if with_comp:
                    row.append(repr(float(comp[i])))
                w.writerow(row)


def _skip_comments(fh):
    for line in fh:
        if not line.startswith("#"):
            yield line


def _check_header(fieldnames, required, path):
    if fieldnames is None:
        raise DataError(f"{path}: empty file, header row required")
    missing = [c for c in required if c not in fieldnames]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def haversine_km(a, b):
    """Great-circle distance in km between two objects with ``lat``/``lon`` in degrees."""
    lat1, lon1 = math.radians(a.lat), math.radians(a.lon)
    lat2, lon2 = math.radians(b.lat), math.radians(b.lon)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(sites, others=None):
    """Pairwise haversine distances (km) as a dense array.

    With one argument the result is the symmetric ``len(sites) x len(sites)``
    matrix with an exact zero diagonal.
    """
    lat1 = np.radians([s.lat for s in sites])[:, None]
    lon1 = np.radians([s.lon for s in sites])[:, None]
    o = sites if others is None else others
    lat2 = np.radians([s.lat for s in o])[None, :]
    lon2 = np.radians([s.lon for s in o])[None, :]
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))
    if others is None:
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
    return d


def completeness_filter(ds, year_frac=0.90, min_years=20):
    """Drop incomplete years, then sites left with fewer than ``min_years`` maxima.

    Series without completeness metadata (simulation output) are treated as
    complete. Returns ``(filtered_dataset, FilterReport)``.
    """
    report = FilterReport()
    keep_sites, keep_series = [], []
    smap = ds.site_map
    for ser in ds.series:
        if ser.completeness is not None:
            ok = ser.completeness >= year_frac
            if not ok.all():
                report.dropped_years[ser.site_id] = [int(y) for y in ser.years[~ok]]
            ser = AnnualMaximaSeries(ser.site_id, ser.years[ok], ser.values[ok], ser.completeness[ok])
        if len(ser) < min_years:
            report.dropped_sites.append(ser.site_id)
            continue
        keep_sites.append(smap[ser.site_id])
        keep_series.append(ser)
    order = {s.id: i for i, s in enumerate(ds.sites)}
    keep_sites.sort(key=lambda s: order[s.id])
    report.empty = not keep_sites
    return Dataset(keep_sites, keep_series), report
