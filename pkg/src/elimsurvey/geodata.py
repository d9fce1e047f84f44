"""Domain model and ingestion: sites, prevalence records, evaluation units,
prediction grids, and population-density rasters.

Coordinates are planar kilometres internally.  CSV inputs carry lon/lat
columns; under the (default) geographic convention they are degrees and an
equirectangular projection about the data centroid maps them to km, while
under the planar convention the columns already hold km and pass through
unchanged.  Loaders are pure given file content and the returned collections
are never mutated by later pipeline stages.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Point, shape
from shapely.geometry.base import BaseGeometry

__all__ = [
    "SiteRecord",
    "PrevalenceRecord",
    "EvaluationUnit",
    "PredictionGrid",
    "Raster",
    "EquirectangularProjection",
    "IdentityProjection",
    "GeodataError",
    "load_gazette",
    "write_gazette",
    "load_prevalence",
    "write_prevalence",
    "empirical_prevalence",
    "load_eus",
    "read_ascii_grid",
    "write_ascii_grid",
    "build_grid",
    "design_to_geojson",
]

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


class GeodataError(ValueError):
    """Malformed or inconsistent geospatial input."""


# ---------------------------------------------------------------------------
# projections


@dataclass(frozen=True)
class EquirectangularProjection:
    """Equirectangular (plate carree) projection about a reference point.

    Linear in lon/lat, so point-in-polygon relations and relative distances
    are preserved; adequate at country scale.
    """

    lon0: float
    lat0: float

    def forward(self, lon, lat):
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        x = (np.asarray(lon, dtype=float) - self.lon0) * k * math.cos(math.radians(self.lat0))
        y = (np.asarray(lat, dtype=float) - self.lat0) * k
        return x, y

    def inverse(self, x, y):
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        lon = np.asarray(x, dtype=float) / (k * math.cos(math.radians(self.lat0))) + self.lon0
        lat = np.asarray(y, dtype=float) / k + self.lat0
        return lon, lat


@dataclass(frozen=True)
class IdentityProjection:
    """No-op projection for inputs whose lon/lat columns already hold planar km."""

    def forward(self, lon, lat):
        return np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)

    def inverse(self, x, y):
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def make_projection(crs: str, lons=None, lats=None, lon0=None, lat0=None):
    """Projection for a declared coordinate convention ("geographic"/"planar")."""
    if crs == "planar":
        return IdentityProjection()
    if crs != "geographic":
        raise GeodataError(f"unknown crs {crs!r}; expected 'geographic' or 'planar'")
    if lon0 is None or lat0 is None:
        if lons is None or len(lons) == 0:
            raise GeodataError("geographic crs needs a projection origin or data to derive one")
        lon0 = float(np.mean(lons))
        lat0 = float(np.mean(lats))
    return EquirectangularProjection(lon0=float(lon0), lat0=float(lat0))


# ---------------------------------------------------------------------------
# domain records


@dataclass(frozen=True)
class SiteRecord:
    """A candidate or sampled location from the gazette."""

    id: str
    name: str
    lon: float
    lat: float
    x: float  # planar km
    y: float  # planar km
    population: int
    inhabited: bool
    eu_id: str

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeodataError(f"site {self.id}: coordinates must be finite")
        if self.population < 0:
            raise GeodataError(f"site {self.id}: negative population")


@dataclass(frozen=True)
class PrevalenceRecord:
    """One survey triplet: location, number tested, number positive."""

    lon: float
    lat: float
    x: float
    y: float
    n_tested: int
    n_positive: int
    year: int

    def __post_init__(self) -> None:
        if self.n_tested < 1:
            raise GeodataError("n_tested must be >= 1")
        if not 0 <= self.n_positive <= self.n_tested:
            raise GeodataError(
                f"n_positive must be in [0, n_tested], got {self.n_positive}/{self.n_tested}"
            )
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeodataError("coordinates must be finite")


@dataclass(frozen=True)
class EvaluationUnit:
    """Administrative area for which one elimination decision is made."""

    eu_id: str
    name: str
    geometry: BaseGeometry  # polygon in planar km


@dataclass
class PredictionGrid:
    """Regular grid of cells carrying population density and EU membership.

    Attributes:
        cell_ids: (n,) int array, row-major ids.
        xs, ys: (n,) cell-centre coordinates, planar km.
        pd: (n,) population density per km^2, finite and >= 0.
        eu_ids: list of str or None per cell.
        spacing: cell side length, km.
        nx, ny: grid shape; x0, y0: lower-left corner of the gridded region.
    """

    cell_ids: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    pd: np.ndarray
    eu_ids: list
    spacing: float
    nx: int
    ny: int
    x0: float
    y0: float

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    def points(self) -> np.ndarray:
        return np.column_stack([self.xs, self.ys])

    def cells_in_eu(self, eu_id: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.eu_ids) if e == eu_id], dtype=int)

    def eu_list(self) -> list:
        seen = []
        for e in self.eu_ids:
            if e is not None and e not in seen:
                seen.append(e)
        return seen

    def values_to_array2d(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-cell values to (ny, nx) with row 0 = northernmost row."""
        arr = np.asarray(values, dtype=float).reshape(self.ny, self.nx)
        return arr[::-1, :]

    def cell_at(self, x: float, y: float) -> int:
        """Index of the cell containing (or nearest to) a planar point.

        Points on the outer edge clamp to the boundary cell; points beyond
        half a cell outside the gridded region are an error.
        """
        fx = (x - self.x0) / self.spacing
        fy = (y - self.y0) / self.spacing
        if fx < -0.5 or fy < -0.5 or fx > self.nx + 0.5 or fy > self.ny + 0.5:
            raise GeodataError(f"point ({x}, {y}) lies outside the prediction grid")
        ix = min(max(int(fx), 0), self.nx - 1)
        iy = min(max(int(fy), 0), self.ny - 1)
        return iy * self.nx + ix


# ---------------------------------------------------------------------------
# CSV loaders

GAZETTE_HEADER = ["id", "name", "lon", "lat", "population", "inhabited", "eu_id"]
PREVALENCE_HEADER = ["lon", "lat", "n_tested", "n_positive", "year"]

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


def _check_header(row: list, expected: list, path) -> None:
    if [h.strip() for h in row] != expected:
        raise GeodataError(
            f"{path}: header mismatch; expected {','.join(expected)!r}, got {','.join(row)!r}"
        )


def _parse_float(value: str, row_no: int, column: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise GeodataError(f"malformed value in column '{column}', row {row_no}") from None
    if not math.isfinite(out):
        raise GeodataError(f"non-finite value in column '{column}', row {row_no}")
    return out


def _parse_int(value: str, row_no: int, column: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise GeodataError(f"malformed value in column '{column}', row {row_no}") from None


def load_gazette(path, projection=None, crs: str = "geographic"):
    """Read the gazette CSV into SiteRecords.

    Uninhabited rows are flagged, not dropped; candidate-set filters exclude
    them downstream.

    Args:
        path: CSV with the exact header ``id,name,lon,lat,population,inhabited,eu_id``.
        projection: Shared projection; derived from the file's centroid if None.
        crs: Coordinate convention used when deriving a projection.

    Returns:
        (records, projection) with the projection actually used.
    """
    path = Path(path)
    raw = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GeodataError(f"{path}: empty file, expected gazette header") from None
        _check_header(header, GAZETTE_HEADER, path)
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(GAZETTE_HEADER):
                raise GeodataError(f"{path}: wrong number of fields, row {row_no}")
            raw.append((row_no, row))

    if projection is None:
        lons = [ _parse_float(r[2], n, "lon") for n, r in raw ]
        lats = [ _parse_float(r[3], n, "lat") for n, r in raw ]
        projection = make_projection(crs, lons, lats)

    records = []
    seen_ids = {}
    for row_no, row in raw:
        site_id = row[0].strip()
        if site_id in seen_ids:
            raise GeodataError(
                f"{path}: duplicate id '{site_id}' at row {row_no} (first seen row {seen_ids[site_id]})"
            )
        seen_ids[site_id] = row_no
        lon = _parse_float(row[2], row_no, "lon")
        lat = _parse_float(row[3], row_no, "lat")
        population = _parse_int(row[4], row_no, "population")
        if population < 0:
            raise GeodataError(f"negative population, row {row_no}")
        flag = row[5].strip().lower()
        if flag in _TRUE:
            inhabited = True
        elif flag in _FALSE:
            inhabited = False
        else:
            raise GeodataError(f"malformed value in column 'inhabited', row {row_no}")
        x, y = projection.forward(lon, lat)
        records.append(
            SiteRecord(
                id=site_id,
                name=row[1].strip(),
                lon=lon,
                lat=lat,
                x=float(x),
                y=float(y),
                population=population,
                inhabited=inhabited,
                eu_id=row[6].strip(),
            )
        )
    return records, projection


def write_gazette(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAZETTE_HEADER)
        for r in records:
            writer.writerow(
                [r.id, r.name, repr(r.lon), repr(r.lat), r.population,
                 "true" if r.inhabited else "false", r.eu_id]
            )


def load_prevalence(path, projection=None, crs: str = "geographic"):
    """Read the prevalence CSV into PrevalenceRecords.

    Returns (records, projection).  Emits an ingest summary (total sites,
    total tested, zero-prevalence count) at INFO level; an empty file yields
    an empty list and a warning.
    """
    path = Path(path)
    raw = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GeodataError(f"{path}: empty file, expected prevalence header") from None
        _check_header(header, PREVALENCE_HEADER, path)
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PREVALENCE_HEADER):
                raise GeodataError(f"{path}: wrong number of fields, row {row_no}")
            raw.append((row_no, row))

    if not raw:
        log.warning("%s: no prevalence records", path)
        return [], projection

    if projection is None:
        lons = [ _parse_float(r[0], n, "lon") for n, r in raw ]
        lats = [ _parse_float(r[1], n, "lat") for n, r in raw ]
        projection = make_projection(crs, lons, lats)

    records = []
    for row_no, row in raw:
        lon = _parse_float(row[0], row_no, "lon")
        lat = _parse_float(row[1], row_no, "lat")
        n_tested = _parse_int(row[2], row_no, "n_tested")
        n_positive = _parse_int(row[3], row_no, "n_positive")
        year = _parse_int(row[4], row_no, "year")
        if n_tested < 1:
            raise GeodataError(f"n_tested must be >= 1, row {row_no}")
        if n_positive < 0 or n_positive > n_tested:
            raise GeodataError(f"n_positive exceeds n_tested, row {row_no}")
        x, y = projection.forward(lon, lat)
        records.append(
            PrevalenceRecord(
                lon=lon, lat=lat, x=float(x), y=float(y),
                n_tested=n_tested, n_positive=n_positive, year=year,
            )
        )
    n_zero = sum(1 for r in records if r.n_positive == 0)
    log.info(
        "%s: %d sites, %d individuals tested, %d with zero positives",
        path, len(records), sum(r.n_tested for r in records), n_zero,
    )
    return records, projection


def write_prevalence(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREVALENCE_HEADER)
        for r in records:
            writer.writerow([repr(r.lon), repr(r.lat), r.n_tested, r.n_positive, r.year])


def empirical_prevalence(records):
    """Per-site observed prevalence y/n plus its mean and max across sites.

    Returns (ratios, mean, max) where ratios align with ``records``.
    """
    if not records:
        raise GeodataError("empirical_prevalence needs at least one record")
    ratios = np.array([r.n_positive / r.n_tested for r in records])
    return ratios, float(np.mean(ratios)), float(np.max(ratios))


# ---------------------------------------------------------------------------
# evaluation units (GeoJSON polygons)


def load_eus(path, projection) -> list:
    """Read EU polygons from a GeoJSON FeatureCollection.

    Features need ``eu_id`` (and optionally ``name``) properties and polygon
    geometry in the same lon/lat convention as the CSVs; vertices are mapped
    through ``projection``.  Overlapping EU polygons are rejected because a
    grid cell may belong to at most one EU.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise GeodataError(f"{path}: expected a GeoJSON FeatureCollection")
    eus = []
    for feat in doc.get("features", []):
        props = feat.get("properties", {})
        if "eu_id" not in props:
            raise GeodataError(f"{path}: feature missing 'eu_id' property")
        geom = shape(feat["geometry"])
        lon, lat = np.array(geom.exterior.coords).T
        x, y = projection.forward(lon, lat)
        from shapely.geometry import Polygon

        eus.append(
            EvaluationUnit(
                eu_id=str(props["eu_id"]),
                name=str(props.get("name", props["eu_id"])),
                geometry=Polygon(np.column_stack([x, y])),
            )
        )
    ids = [e.eu_id for e in eus]
    if len(set(ids)) != len(ids):
        raise GeodataError(f"{path}: duplicate eu_id")
    for i in range(len(eus)):
        for j in range(i + 1, len(eus)):
            inter = eus[i].geometry.intersection(eus[j].geometry)
            if inter.area > 1e-9 * max(eus[i].geometry.area, eus[j].geometry.area):
                raise GeodataError(
                    f"EU polygons '{eus[i].eu_id}' and '{eus[j].eu_id}' overlap; "
                    "each grid cell may belong to at most one EU"
                )
    return eus


# ---------------------------------------------------------------------------
# ASCII-grid rasters


@dataclass(frozen=True)
class Raster:
    """Plain-text grid raster (ASCII-grid convention, row 1 = northernmost)."""

    values: np.ndarray  # (nrows, ncols), nodata already mapped to nan
    xll: float
    yll: float
    cellsize: float
    nodata: float

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    def lookup(self, x, y) -> np.ndarray:
        """Nearest-cell values at planar points; nan (nodata/outside) -> 0."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        col = np.clip(((x - self.xll) / self.cellsize).astype(int), 0, self.ncols - 1)
        row_from_bottom = np.clip(((y - self.yll) / self.cellsize).astype(int), 0, self.nrows - 1)
        row = self.nrows - 1 - row_from_bottom
        out = self.values[row, col]
        outside = (
            (x < self.xll) | (x > self.xll + self.ncols * self.cellsize)
            | (y < self.yll) | (y > self.yll + self.nrows * self.cellsize)
        )
        out = np.where(outside | ~np.isfinite(out), 0.0, out)
        return out

    def total_mass(self) -> float:
        """Sum of value * cell area over valid cells (population if values are density)."""
        vals = np.where(np.isfinite(self.values), self.values, 0.0)
        return float(np.sum(vals) * self.cellsize**2)


def read_ascii_grid(path) -> Raster:
    header = {}
    with open(path) as fh:
        lines = fh.read().split("\n")
    expected = ["ncols", "nrows", "xll", "yll", "cellsize", "nodata"]
    for i, key in enumerate(expected):
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise GeodataError(f"{path}: bad raster header line {i + 1}, expected '{key} <value>'")
        header[key] = float(parts[1])
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    data = " ".join(lines[len(expected):])
    values = np.fromstring(data, sep=" ") if data.strip() else np.array([])
    if values.size != ncols * nrows:
        raise GeodataError(
            f"{path}: expected {ncols * nrows} raster values, found {values.size}"
        )
    values = values.reshape(nrows, ncols)
    values = np.where(values == header["nodata"], np.nan, values)
    return Raster(
        values=values,
        xll=header["xll"],
        yll=header["yll"],
        cellsize=header["cellsize"],
        nodata=header["nodata"],
    )


def write_ascii_grid(path, raster: Raster, fmt: str = "%.10g") -> None:
    with open(path, "w") as fh:
        fh.write(f"ncols {raster.ncols}\n")
        fh.write(f"nrows {raster.nrows}\n")
        fh.write(f"xll {raster.xll!r}\n")
        fh.write(f"yll {raster.yll!r}\n")
        fh.write(f"cellsize {raster.cellsize!r}\n")
        fh.write(f"nodata {raster.nodata!r}\n")
        vals = np.where(np.isfinite(raster.values), raster.values, raster.nodata)
        for row in vals:
            fh.write(" ".join(fmt % v for v in row) + "\n")


# ---------------------------------------------------------------------------
# prediction grid


def build_grid(bounds, spacing: float, raster: Raster | None = None, eus=None) -> PredictionGrid:
    """Lay a regular grid over ``bounds`` and tag cells with pd(x) and EU membership.

    Args:
        bounds: (xmin, ymin, xmax, ymax) in planar km.
        spacing: Cell side length, km, > 0.
        raster: Population-density raster; None means pd = 1 everywhere.
        eus: EvaluationUnits for membership tagging (cell centre in polygon).

    Raises:
        GeodataError: If an EU ends up with zero population mass (the
            population-weighted prevalence for that EU would be undefined).
    """
    xmin, ymin, xmax, ymax = map(float, bounds)
    if spacing <= 0:
        raise GeodataError("spacing must be > 0")
    if xmax <= xmin or ymax <= ymin:
        raise GeodataError("empty region bounds")
    # bounds that went through a lon/lat round trip carry float noise; do not
    # let a few ulps above an exact multiple spawn an extra row of cells
    nx = math.ceil((xmax - xmin) / spacing - 1e-9)
    ny = math.ceil((ymax - ymin) / spacing - 1e-9)
    ix = np.arange(nx)
    iy = np.arange(ny)
    cx = xmin + (ix + 0.5) * spacing
    cy = ymin + (iy + 0.5) * spacing
    xg, yg = np.meshgrid(cx, cy)
    xs = xg.ravel()
    ys = yg.ravel()

    if raster is not None:
        pd = raster.lookup(xs, ys)
        if np.any(~np.isfinite(pd)) or np.any(pd < 0):
            raise GeodataError("population density must be finite and >= 0")
    else:
        pd = np.ones_like(xs)

    eu_ids = [None] * len(xs)
    if eus:
        for i in range(len(xs)):
            pt = Point(xs[i], ys[i])
            for eu in eus:
                if eu.geometry.contains(pt) or eu.geometry.touches(pt):
                    eu_ids[i] = eu.eu_id
                    break
        for eu in eus:
            mask = np.array([e == eu.eu_id for e in eu_ids])
            if not mask.any() or float(pd[mask].sum()) <= 0:
                raise GeodataError(
                    f"EU '{eu.eu_id}' has zero population mass on the grid; "
                    "population-weighted prevalence would be undefined"
                )

    return PredictionGrid(
        cell_ids=np.arange(nx * ny),
        xs=xs,
        ys=ys,
        pd=np.asarray(pd, dtype=float),
        eu_ids=eu_ids,
        spacing=spacing,
        nx=nx,
        ny=ny,
        x0=xmin,
        y0=ymin,
    )


def grid_raster(grid: PredictionGrid, values, nodata: float = -9999.0) -> Raster:
    """Wrap per-cell values as a Raster aligned with the grid, for ASCII export."""
    return Raster(
        values=grid.values_to_array2d(np.asarray(values, dtype=float)),
        xll=grid.x0,
        yll=grid.y0,
        cellsize=grid.spacing,
        nodata=nodata,
    )


# ---------------------------------------------------------------------------
# design export


def design_to_geojson(design) -> dict:
    """GeoJSON FeatureCollection of design points (properties: eu_id, target_n, reserve)."""
    features = []
    for row in design.rows():
        site = row.site
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [site.lon, site.lat]},
                "properties": {
                    "site_id": site.id,
                    "eu_id": row.eu_id,
                    "target_n": row.target_n,
                    "reserve": row.reserve,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}
