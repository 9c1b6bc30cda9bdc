"""Gridded study-area data: loading, validation, standardization, masks.

A grid CSV has one row per location with columns

    id,lon,lat,vs30,slope,landcover,dem,cti,water_dist,lithology,
    prior_ls,prior_lf,has_building,dpm

where ``dpm`` (the damage-proxy observation) may be empty to mark an
absent observation. Categorical features (landcover, lithology) travel as
integer codes and are standardized like any other column by default; a
one-hot expansion is available for callers that want it.
"""

import csv
import dataclasses
import io

import numpy as np

from .exceptions import (
    DegenerateFeatureError,
    ParseError,
    SchemaError,
    ValidationError,
)
from .util import atomic_write_text, format_float

FEATURE_NAMES = ("vs30", "slope", "landcover", "dem", "cti", "water_dist", "lithology")
CATEGORICAL_FEATURES = ("landcover", "lithology")
NODE_NAMES = ("ls", "lf", "bd")
COLUMNS = (
    ("id", "lon", "lat")
    + FEATURE_NAMES
    + ("prior_ls", "prior_lf", "has_building", "dpm")
)


@dataclasses.dataclass
class FeatureStats:
    """Per-feature location/scale used to standardize and to invert."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, features):
        return (features - self.mean) / self.std

    def invert(self, standardized):
        return standardized * self.std + self.mean


@dataclasses.dataclass
class Location:
    """A single grid row, mostly for tests and worked examples."""

    id: int
    lon: float
    lat: float
    features: np.ndarray
    prior_ls: float
    prior_lf: float
    has_building: bool
    dpm: float  # nan when absent


@dataclasses.dataclass
class GridDataset:
    """Column-oriented grid. ``features`` is (n, d); raw grids have d = 7.

    ``feature_stats`` is None for raw features and holds the standardizer
    once ``standardize_features`` has run. ``active`` is a (n, 3) boolean
    matrix over the latent nodes (ls, lf, bd) once ``compute_active_masks``
    has run.
    """

    ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    features: np.ndarray
    prior_ls: np.ndarray
    prior_lf: np.ndarray
    has_building: np.ndarray
    dpm: np.ndarray
    feature_stats: FeatureStats | None = None
    active: np.ndarray | None = None

    @property
    def n_locations(self):
        return self.ids.shape[0]

    @property
    def dpm_present(self):
        return ~np.isnan(self.dpm)

    @property
    def any_active(self):
        if self.active is None:
            raise ValidationError("active masks not computed yet")
        return self.active.any(axis=1)

    def location(self, i):
        return Location(
            id=int(self.ids[i]),
            lon=float(self.lon[i]),
            lat=float(self.lat[i]),
            features=self.features[i].copy(),
            prior_ls=float(self.prior_ls[i]),
            prior_lf=float(self.prior_lf[i]),
            has_building=bool(self.has_building[i]),
            dpm=float(self.dpm[i]),
        )


def _parse_cell(raw, column, row_index):
    try:
        return float(raw)
    except ValueError:
        raise ParseError(
            f"row {row_index}: column {column!r} has non-numeric value {raw!r}",
            row=row_index,
        ) from None


def load_grid(path_or_file, schema=None):
    """Read and validate a grid CSV.

    ``schema`` optionally maps canonical column names to the names used in
    the file (unmapped columns keep their canonical name). Raises
    SchemaError for missing columns, ParseError (with row index) for bad
    cells, and ValidationError for out-of-range values.
    """
    schema = dict(schema or {})
    rename = {name: schema.get(name, name) for name in COLUMNS}

    if hasattr(path_or_file, "read"):
        rows = list(csv.DictReader(path_or_file))
    else:
        with open(path_or_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError("grid file has no data rows")

    header = rows[0].keys()
    for canonical, actual in rename.items():
        if actual not in header:
            raise SchemaError(f"missing required column {actual!r} ({canonical})")

    n = len(rows)
    ids = np.empty(n, dtype=np.int64)
    lon = np.empty(n)
    lat = np.empty(n)
    features = np.empty((n, len(FEATURE_NAMES)))
    prior_ls = np.empty(n)
    prior_lf = np.empty(n)
    has_building = np.empty(n, dtype=bool)
    dpm = np.empty(n)

    for i, row in enumerate(rows):
        ids[i] = int(_parse_cell(row[rename["id"]], "id", i))
        lon[i] = _parse_cell(row[rename["lon"]], "lon", i)
        lat[i] = _parse_cell(row[rename["lat"]], "lat", i)
        for j, feat in enumerate(FEATURE_NAMES):
            features[i, j] = _parse_cell(row[rename[feat]], feat, i)
        prior_ls[i] = _parse_cell(row[rename["prior_ls"]], "prior_ls", i)
        prior_lf[i] = _parse_cell(row[rename["prior_lf"]], "prior_lf", i)
        hb = _parse_cell(row[rename["has_building"]], "has_building", i)
        if hb not in (0.0, 1.0):
            raise ValidationError(
                f"row {i}: has_building must be 0 or 1, got {hb!r}"
            )
        has_building[i] = bool(hb)
        raw_dpm = (row[rename["dpm"]] or "").strip()
        dpm[i] = np.nan if raw_dpm == "" else _parse_cell(raw_dpm, "dpm", i)

    if not np.isfinite(features).all():
        raise ValidationError("features contain non-finite values")
    for name, arr in (("prior_ls", prior_ls), ("prior_lf", prior_lf)):
        if not np.isfinite(arr).all() or (arr < 0).any() or (arr > 1).any():
            raise ValidationError(f"{name} must lie in [0, 1]")
    present = ~np.isnan(dpm)
    if (dpm[present] < 0).any() or not np.isfinite(dpm[present]).all():
        raise ValidationError("dpm must be finite and non-negative when present")
    if np.unique(ids).size != n:
        raise ValidationError("location ids are not unique")

    return GridDataset(
        ids=ids,
        lon=lon,
        lat=lat,
        features=features,
        prior_ls=prior_ls,
        prior_lf=prior_lf,
        has_building=has_building,
        dpm=dpm,
    )


def write_grid(grid, path=None):
    """Write a grid CSV. Floats use shortest round-trip formatting so
    load(write(g)) reproduces every numeric field bit-exactly.

    With path=None the CSV text is returned instead of written.
    """
    if grid.features.shape[1] != len(FEATURE_NAMES):
        raise ValidationError(
            "grid with expanded features cannot be written in canonical form"
        )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for i in range(grid.n_locations):
        row = [str(int(grid.ids[i])), format_float(grid.lon[i]), format_float(grid.lat[i])]
        row += [format_float(v) for v in grid.features[i]]
        row += [
            format_float(grid.prior_ls[i]),
            format_float(grid.prior_lf[i]),
            "1" if grid.has_building[i] else "0",
            "" if np.isnan(grid.dpm[i]) else format_float(grid.dpm[i]),
        ]
        writer.writerow(row)
    text = buf.getvalue()
    if path is None:
        return text
    atomic_write_text(path, text)
    return None


def standardize_features(grid, one_hot=False, rows=None):
    """Return a grid whose features have mean 0 and (population) std 1.

    Idempotent: a grid that already carries feature_stats is returned
    unchanged. A zero-scale column raises DegenerateFeatureError naming the
    feature. With one_hot=True the categorical columns are expanded into
    0/1 indicator columns (left unstandardized) before the numeric columns
    are standardized; the expanded layout cannot be written back to the
    canonical CSV. ``rows`` optionally restricts the rows the statistics
    are computed from (the transform still applies to every row), so a fit
    can key the standardization to the locations that actually enter it.
    """
    if grid.feature_stats is not None:
        return grid

    features = grid.features
    if one_hot:
        cols = []
        is_indicator = []
        for j, name in enumerate(FEATURE_NAMES):
            if name in CATEGORICAL_FEATURES:
                codes = features[:, j]
                for level in np.unique(codes):
                    cols.append((codes == level).astype(float))
                    is_indicator.append(True)
            else:
                cols.append(features[:, j])
                is_indicator.append(False)
        features = np.column_stack(cols)
        numeric = ~np.asarray(is_indicator)
    else:
        numeric = np.ones(features.shape[1], dtype=bool)

    fit_rows = features if rows is None else features[np.asarray(rows)]
    if fit_rows.shape[0] == 0:
        raise ValidationError("no rows to compute feature statistics from")
    mean = np.zeros(features.shape[1])
    std = np.ones(features.shape[1])
    mean[numeric] = fit_rows[:, numeric].mean(axis=0)
    std[numeric] = fit_rows[:, numeric].std(axis=0)  # population convention
    zero = numeric & (std <= 0)
    if zero.any():
        j = int(np.argmax(zero))
        name = FEATURE_NAMES[j] if not one_hot else f"column {j}"
        raise DegenerateFeatureError(
            f"feature {name} has zero scale and cannot be standardized"
        )
    stats = FeatureStats(mean=mean, std=std)
    return dataclasses.replace(
        grid, features=stats.apply(features), feature_stats=stats
    )


def subset_rows(grid, rows):
    """Grid restricted to a boolean mask or index array of rows."""
    rows = np.asarray(rows)
    return dataclasses.replace(
        grid,
        ids=grid.ids[rows].copy(),
        lon=grid.lon[rows].copy(),
        lat=grid.lat[rows].copy(),
        features=grid.features[rows].copy(),
        prior_ls=grid.prior_ls[rows].copy(),
        prior_lf=grid.prior_lf[rows].copy(),
        has_building=grid.has_building[rows].copy(),
        dpm=grid.dpm[rows].copy(),
        active=None if grid.active is None else grid.active[rows].copy(),
    )


def compute_active_masks(grid, prior_floor):
    """Attach the (n, 3) node-activity matrix.

    BD is active exactly where a building footprint exists; LS/LF are
    active where their prior reaches prior_floor. Inactive nodes are pinned
    to q = 0 and excluded from every ELBO sum.
    """
    if not 0.0 <= prior_floor < 1.0:
        raise ValidationError("prior_floor must lie in [0, 1)")
    active = np.column_stack(
        [
            grid.prior_ls >= prior_floor,
            grid.prior_lf >= prior_floor,
            grid.has_building.copy(),
        ]
    )
    return dataclasses.replace(grid, active=active)
