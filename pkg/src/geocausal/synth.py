"""Synthetic grids with known causal truth.

Generates lattice grids whose features are smoothed random surfaces,
whose hazard priors come from those surfaces through fixed logistic
links, and whose latent states and damage proxies are sampled from the
same conditional structure the model assumes: logistic latents with
per-location coefficient surfaces and a log-linear Gaussian observation.

Two coefficient regimes: "smooth" uses closed-form surfaces over the
lattice coordinates; "gp_flow" draws each surface from a sparse GP
interpolant pushed through a random planar-flow stack, so the truth
lives in the family the model fits.

Also provides the exact per-location posterior over the eight latent
configurations (quadrature over the logit noise, closed-form Gaussian
observation density), used as a reference ceiling in tests and demos.
"""

import csv
import dataclasses
import io

import numpy as np
from scipy.ndimage import gaussian_filter

from . import flows, gp
from .exceptions import SchemaError, ValidationError
from .fields import FIELD_NAMES
from .grid import GridDataset
from .util import PURPOSE_SYNTH, atomic_write_text, format_float, sigmoid, stream

TRUTH_COLUMNS = ("id", "x_ls", "x_lf", "x_bd") + tuple(
    f"true_{name}" for name in FIELD_NAMES
)

# Truth noise weights shared by both regimes. The observation noise is kept
# well below the smallest damage coefficient and the parent-to-damage edges
# are kept moderate: a sharp proxy plus limited parent/child collinearity is
# what makes the three damage contributions separately identifiable.
TRUE_W0_Y = 0.0
TRUE_WE_Y = 0.35
TRUE_W0_LAT = (-2.0, -2.0, -1.2)
TRUE_WE_LAT = (0.35, 0.35, 0.35)

# Gauss-Hermite rule for integrating the logit noise exactly enough.
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(32)


@dataclasses.dataclass
class TruthTable:
    """Latent states and true coefficient surfaces for a synthetic grid."""

    ids: np.ndarray
    x: np.ndarray  # (n, 3) in {0, 1}, ordered ls, lf, bd
    coefficients: dict  # field name -> (n,) true surface

    @property
    def n_locations(self):
        return self.ids.shape[0]


def _smooth_field(rng, side, sigma_frac=0.125):
    """Zero-mean, unit-scale smoothed noise surface on a side x side lattice."""
    raw = gaussian_filter(rng.standard_normal((side, side)), sigma=side * sigma_frac)
    raw = raw - raw.mean()
    scale = raw.std()
    return (raw / scale if scale > 0 else raw).ravel()


def _quantile_codes(z, n_codes):
    edges = np.quantile(z, np.linspace(0, 1, n_codes + 1)[1:-1])
    return np.digitize(z, edges) + 1.0


def _smooth_surfaces(lon, lat):
    """Closed-form coefficient surfaces over unit lattice coordinates."""
    t_diag = np.tanh(1.5 * (lon + lat - 1.0))
    t_anti = np.tanh(1.8 * (lon - lat))
    t_lon = np.tanh(2.0 * (lon - 0.5))
    t_lat = np.tanh(2.0 * (lat - 0.5))
    return {
        "lam_ls": 6.8 + 0.3 * t_diag,
        "lam_lf": 3.4 - 0.2 * t_anti,
        "lam_bd": 1.7 + 0.15 * t_lon,
        "gam_als": 6.0 + 0.8 * t_lat,
        "gam_alf": 4.5 - 0.9 * t_lon,
        "gam_ls": 0.8 + 0.3 * t_lat,
        "gam_lf": 0.7 - 0.3 * t_lon,
    }


# Centers and spreads the gp_flow surfaces are affinely mapped onto,
# matching the smooth-regime magnitudes.
_GP_FLOW_RANGES = {
    "lam_ls": (6.8, 0.3),
    "lam_lf": (3.4, 0.2),
    "lam_bd": (1.7, 0.15),
    "gam_als": (6.0, 0.8),
    "gam_alf": (4.5, 0.9),
    "gam_ls": (0.8, 0.3),
    "gam_lf": (0.7, 0.3),
}


def _gp_flow_surfaces(features, seed, k_truth):
    """Coefficient surfaces drawn from a sparse-GP interpolant warped by a
    depth-k_truth planar stack, then affinely placed at the smooth-regime
    scales. The warp makes the surfaces non-Gaussian in exactly the way a
    depth-k_truth fitted flow can represent."""
    feats = np.asarray(features, dtype=float)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    z_feats = (feats - mu) / np.where(sd > 0, sd, 1.0)
    n = z_feats.shape[0]
    surfaces = {}
    for f_idx, name in enumerate(FIELD_NAMES):
        rng = stream(seed, PURPOSE_SYNTH, 10 + f_idx)
        m = min(48, n)
        idx = rng.choice(n, size=m, replace=False)
        points = z_feats[idx]
        d_pp = gp.pairwise_distances(points, points)
        iu = np.triu_indices(m, k=1)
        ell = float(np.median(d_pp[iu])) if m > 1 else 1.0
        hyper = gp.MaternHyper(variance=0.36, length_scale=max(ell, 1e-3))
        k_uu, chol, _ = gp.jittered_cholesky(points, hyper)
        u = chol @ rng.standard_normal(m)
        k_tu = gp.gram(z_feats, points, hyper)
        f_t = k_tu @ np.linalg.solve(k_uu, u)
        stack = flows.enforce_stack(flows.init_stack(k_truth, rng))
        warped = flows.stack_value(f_t, stack)
        spread = warped.std()
        warped = (warped - warped.mean()) / (spread if spread > 0 else 1.0)
        center, scale = _GP_FLOW_RANGES[name]
        surfaces[name] = center + scale * warped
    return surfaces


def synthesize_grid(side=32, seed=0, mode="smooth", k_truth=6,
                    building_frac=0.7, dpm_coverage=0.92, dead_frac=0.0):
    """Sample a raw grid plus its truth table on a side x side lattice.

    dead_frac > 0 carves out a smooth blob of locations with zero hazard
    priors and no buildings (useful for pruning experiments); those rows
    keep truth x = 0.
    """
    if mode not in ("smooth", "gp_flow"):
        raise ValidationError(f"unknown synthesis mode {mode!r}")
    if side < 2:
        raise ValidationError("side must be at least 2")
    n = side * side
    rows, cols = np.divmod(np.arange(n), side)
    lon = cols / (side - 1.0)
    lat = rows / (side - 1.0)

    f_rng = stream(seed, PURPOSE_SYNTH, 0)
    z = {name: _smooth_field(f_rng, side) for name in
         ("vs30", "slope", "landcover", "dem", "cti", "water_dist", "lithology")}
    features = np.column_stack([
        400.0 + 150.0 * z["vs30"],
        12.0 + 8.0 * z["slope"],
        _quantile_codes(z["landcover"], 5),
        800.0 + 300.0 * z["dem"],
        6.0 + 2.0 * z["cti"],
        np.maximum(2000.0 + 1500.0 * z["water_dist"], 0.0),
        _quantile_codes(z["lithology"], 4),
    ])

    prior_ls = sigmoid(1.1 * z["slope"] - 1.2)
    prior_lf = sigmoid(1.0 * z["cti"] - 0.5 * z["water_dist"] - 1.0)

    b_rng = stream(seed, PURPOSE_SYNTH, 1)
    has_building = b_rng.random(n) < building_frac

    if dead_frac > 0:
        blob = _smooth_field(stream(seed, PURPOSE_SYNTH, 2), side)
        cut = np.quantile(blob, dead_frac)
        dead = blob <= cut
        prior_ls = np.where(dead, 0.0, prior_ls)
        prior_lf = np.where(dead, 0.0, prior_lf)
        has_building = has_building & ~dead

    if mode == "smooth":
        coeffs = _smooth_surfaces(lon, lat)
    else:
        coeffs = _gp_flow_surfaces(features, seed, k_truth)

    x_rng = stream(seed, PURPOSE_SYNTH, 3)
    eps_ls = x_rng.normal(0.0, TRUE_WE_LAT[0], size=n)
    eps_lf = x_rng.normal(0.0, TRUE_WE_LAT[1], size=n)
    eps_bd = x_rng.normal(0.0, TRUE_WE_LAT[2], size=n)
    p_ls = sigmoid(TRUE_W0_LAT[0] + coeffs["gam_als"] * prior_ls + eps_ls)
    x_ls = (x_rng.random(n) < p_ls).astype(np.int64)
    p_lf = sigmoid(TRUE_W0_LAT[1] + coeffs["gam_alf"] * prior_lf + eps_lf)
    x_lf = (x_rng.random(n) < p_lf).astype(np.int64)
    logit_bd = (
        TRUE_W0_LAT[2]
        + coeffs["gam_ls"] * x_ls
        + coeffs["gam_lf"] * x_lf
        + eps_bd
    )
    x_bd = ((x_rng.random(n) < sigmoid(logit_bd)) & has_building).astype(np.int64)
    x_ls = np.where(prior_ls > 0, x_ls, 0)
    x_lf = np.where(prior_lf > 0, x_lf, 0)

    y_rng = stream(seed, PURPOSE_SYNTH, 4)
    log_y = (
        TRUE_W0_Y
        + coeffs["lam_ls"] * x_ls
        + coeffs["lam_lf"] * x_lf
        + coeffs["lam_bd"] * x_bd
        + y_rng.normal(0.0, TRUE_WE_Y, size=n)
    )
    dpm = np.exp(log_y)
    dpm[y_rng.random(n) >= dpm_coverage] = np.nan

    grid = GridDataset(
        ids=np.arange(n, dtype=np.int64),
        lon=lon,
        lat=lat,
        features=features,
        prior_ls=prior_ls,
        prior_lf=prior_lf,
        has_building=has_building,
        dpm=dpm,
    )
    truth = TruthTable(
        ids=grid.ids.copy(),
        x=np.column_stack([x_ls, x_lf, x_bd]),
        coefficients=coeffs,
    )
    return grid, truth


def write_truth(truth, path=None):
    """Truth table as CSV; returns the text when path is None."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRUTH_COLUMNS)
    for i in range(truth.n_locations):
        writer.writerow(
            [int(truth.ids[i]), int(truth.x[i, 0]), int(truth.x[i, 1]),
             int(truth.x[i, 2])]
            + [format_float(truth.coefficients[name][i]) for name in FIELD_NAMES]
        )
    text = buf.getvalue()
    if path is None:
        return text
    atomic_write_text(path, text)
    return None


def load_truth(path_or_file):
    if hasattr(path_or_file, "read"):
        rows = list(csv.DictReader(path_or_file))
    else:
        with open(path_or_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError("truth file has no data rows")
    for col in TRUTH_COLUMNS:
        if col not in rows[0]:
            raise SchemaError(f"missing required column {col!r}")
    n = len(rows)
    ids = np.empty(n, dtype=np.int64)
    x = np.empty((n, 3), dtype=np.int64)
    coeffs = {name: np.empty(n) for name in FIELD_NAMES}
    for i, row in enumerate(rows):
        ids[i] = int(row["id"])
        for j, col in enumerate(("x_ls", "x_lf", "x_bd")):
            val = int(row[col])
            if val not in (0, 1):
                raise ValidationError(f"row {i}: {col} must be 0 or 1")
            x[i, j] = val
        for name in FIELD_NAMES:
            coeffs[name][i] = float(row[f"true_{name}"])
    return TruthTable(ids=ids, x=x, coefficients=coeffs)


# ---------------------------------------------------------------------------
# Exact posterior by enumeration (the Bayes ceiling on synthetic data).

def _gh_bernoulli(logit_mean, we):
    """E_eps[sigmoid(logit_mean + eps)], eps ~ N(0, we^2), via quadrature."""
    nodes = np.sqrt(2.0) * we * _GH_X
    vals = sigmoid(np.asarray(logit_mean, dtype=float)[..., None] + nodes)
    return vals @ _GH_W / np.sqrt(np.pi)


def exact_posterior(grid, coefficients, dpm_floor=1e-4):
    """Exact marginals P(x_i = 1 | y) per location under the true model.

    Enumerates the eight latent configurations; the logit noises are
    integrated with 32-node quadrature and the observation enters through
    its closed-form Gaussian log-density. Locations without buildings pin
    x_bd = 0, and zero-prior locations pin the matching hazard.
    """
    n = grid.n_locations
    c = coefficients
    p_ls = _gh_bernoulli(TRUE_W0_LAT[0] + c["gam_als"] * grid.prior_ls,
                         TRUE_WE_LAT[0])
    p_lf = _gh_bernoulli(TRUE_W0_LAT[1] + c["gam_alf"] * grid.prior_lf,
                         TRUE_WE_LAT[1])
    p_ls = np.where(grid.prior_ls > 0, p_ls, 0.0)
    p_lf = np.where(grid.prior_lf > 0, p_lf, 0.0)

    log_y = np.where(grid.dpm_present,
                     np.log(np.maximum(np.where(grid.dpm_present, grid.dpm, 1.0),
                                       dpm_floor)),
                     0.0)
    post = np.zeros((n, 3))
    weight_sum = np.zeros(n)
    marg = np.zeros((n, 3))
    for a in (0, 1):
        pa = p_ls if a else 1.0 - p_ls
        for b in (0, 1):
            pb = p_lf if b else 1.0 - p_lf
            p_bd = _gh_bernoulli(
                TRUE_W0_LAT[2] + c["gam_ls"] * a + c["gam_lf"] * b,
                TRUE_WE_LAT[2],
            )
            p_bd = np.where(grid.has_building, p_bd, 0.0)
            for d in (0, 1):
                pd = p_bd if d else 1.0 - p_bd
                prior = pa * pb * pd
                mean_y = (TRUE_W0_Y + c["lam_ls"] * a + c["lam_lf"] * b
                          + c["lam_bd"] * d)
                log_lik = np.where(
                    grid.dpm_present,
                    -0.5 * ((log_y - mean_y) / TRUE_WE_Y) ** 2,
                    0.0,
                )
                w = prior * np.exp(log_lik)
                weight_sum += w
                for j, bit in enumerate((a, b, d)):
                    if bit:
                        marg[:, j] += w
    safe = np.where(weight_sum > 0, weight_sum, 1.0)
    post = marg / safe[:, None]
    return post
