"""Evidence lower bound for the per-location causal network.

Per location the graph is

    alpha_ls -> LS -\
                     >-> BD      LS, LF, BD  -> log y (observation)
    alpha_lf -> LF -/

with logistic conditionals for the binary latents (coefficients gamma) and
a log-linear Gaussian observation model (coefficients lambda). All seven
coefficients are spatial fields; the ELBO consumes them through their
Monte-Carlo moment caches.

The latent terms use the bound E[-log(1+exp(x))] >= -log(1+E[exp(x)]),
which turns each parent into an independent mixture factor
(1-q_k) + q_k E[exp(+-gamma_k)]; an alpha-parent (the prior probability
entering the logit as a value) contributes E[exp(+-gamma_alpha * alpha)]
from the same gamma samples.
"""

import dataclasses

import numpy as np

from . import fields as fields_mod
from . import gp
from .exceptions import ValidationError
from .util import clamp_q, sigmoid, softplus, stream

NODE_NAMES = ("ls", "lf", "bd")
# Parents of each latent node: BD has the two binary hazards; LS/LF have
# their prior probability as a continuous parent.
BD_PARENT_FIELDS = {"ls": "gam_ls", "lf": "gam_lf"}
ALPHA_PARENT_FIELDS = {"ls": "gam_als", "lf": "gam_alf"}
OBS_PARENT_FIELDS = ("lam_ls", "lam_lf", "lam_bd")

DPM_FLOOR = 1e-4


@dataclasses.dataclass
class NoiseWeights:
    """Intercepts and noise scales: w0_y/we_y for the observation,
    w0_lat/we_lat (ordered ls, lf, bd) for the latent logits."""

    w0_y: float
    we_y: float
    w0_lat: np.ndarray
    we_lat: np.ndarray

    def __post_init__(self):
        self.w0_lat = np.asarray(self.w0_lat, dtype=float)
        self.we_lat = np.asarray(self.we_lat, dtype=float)
        if self.we_y <= 0:
            raise ValidationError("we_y must be positive")
        if self.w0_lat.shape != (3,) or self.we_lat.shape != (3,):
            raise ValidationError("latent noise weights must have shape (3,)")


@dataclasses.dataclass
class PosteriorGrid:
    """Per-location activation posteriors q over (ls, lf, bd).

    Active entries are clamped into [1e-6, 1 - 1e-6]; inactive entries are
    pinned to exactly 0 and never updated.
    """

    q: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        active = np.asarray(self.active, dtype=bool)
        if q.shape != active.shape or q.ndim != 2 or q.shape[1] != 3:
            raise ValidationError("q and active must both be (n, 3)")
        self.q = np.where(active, clamp_q(q), 0.0)
        self.active = active


@dataclasses.dataclass
class ParentTerm:
    """One parent's contribution to a latent node's bound.

    For a binary parent, q is its activation posterior and exp_pos/exp_neg
    are E[exp(+-gamma)]. For an alpha-parent q is None and exp_pos/exp_neg
    are already the alpha-scaled expectations E[exp(+-gamma*alpha)].
    """

    q: np.ndarray | None
    exp_pos: np.ndarray
    exp_neg: np.ndarray


@dataclasses.dataclass
class ElboBreakdown:
    obs: float
    latent: float
    entropy: float
    kl: float

    @property
    def total(self):
        return self.obs + self.latent + self.entropy - self.kl


def obs_term(log_y, q, lam_mean, lam_second, noise):
    """Expected log-density of the observation, up to the -log(2*pi)/2
    constant.

    Shapes: log_y (n,), q/lam_mean/lam_second (n, 3). The Bernoulli
    parents are independent under q and the lambda moments are per-parent
    expectations, so the cross term runs over unordered parent pairs.
    """
    log_y = np.asarray(log_y, dtype=float)
    q = np.asarray(q, dtype=float)
    lam_mean = np.asarray(lam_mean, dtype=float)
    lam_second = np.asarray(lam_second, dtype=float)
    w2 = noise.we_y**2
    resid = log_y - noise.w0_y
    eq = lam_mean * q
    s1 = eq.sum(axis=-1)
    cross = 0.5 * (s1 * s1 - (eq * eq).sum(axis=-1))
    quad = resid * resid + (lam_second * q).sum(axis=-1)
    return (
        -log_y
        - np.log(np.abs(noise.we_y))
        - quad / (2.0 * w2)
        - (cross - resid * s1) / w2
    )


def latent_bound(q_node, w0, we, parents):
    """Jensen-bounded E[log p(x | parents, eps)] for one latent node.

    parents is a sequence of ParentTerm. Everything is vectorized over
    locations; scalars broadcast.
    """
    value, _, _ = _bound_parts(q_node, w0, we, parents)
    return value


def _bound_parts(q_node, w0, we, parents):
    q_node = np.asarray(q_node, dtype=float)
    log_p_pos = 0.0
    log_p_neg = 0.0
    for p in parents:
        if p.q is None:
            log_p_pos = log_p_pos + np.log(p.exp_pos)
            log_p_neg = log_p_neg + np.log(p.exp_neg)
        else:
            log_p_pos = log_p_pos + np.log((1.0 - p.q) + p.q * p.exp_pos)
            log_p_neg = log_p_neg + np.log((1.0 - p.q) + p.q * p.exp_neg)
    half_we2 = 0.5 * we * we
    arg_neg = log_p_neg + half_we2 - w0
    arg_pos = log_p_pos + half_we2 + w0
    value = -q_node * softplus(arg_neg) - (1.0 - q_node) * softplus(arg_pos)
    return value, arg_neg, arg_pos


def entropy_term(q, active=None):
    """Sum over active nodes of q log q + (1-q) log(1-q) (non-positive;
    the ELBO subtracts it, adding the entropy)."""
    q = clamp_q(np.asarray(q, dtype=float))
    per = q * np.log(q) + (1.0 - q) * np.log1p(-q)
    if active is not None:
        per = np.where(np.asarray(active, dtype=bool), per, 0.0)
    return per.sum(axis=-1)


def _bd_parent_terms(q, active, caches):
    terms = []
    for j, node in enumerate(("ls", "lf")):
        cache = caches[BD_PARENT_FIELDS[node]]
        q_par = np.where(active[:, j], q[:, j], 0.0)
        terms.append(ParentTerm(q=q_par, exp_pos=cache.exp_pos, exp_neg=cache.exp_neg))
    return terms


def _alpha_parent_term(node_idx, alphas, caches):
    name = ALPHA_PARENT_FIELDS[NODE_NAMES[node_idx]]
    pos, neg = caches[name].scaled_exp(alphas)
    return ParentTerm(q=None, exp_pos=pos, exp_neg=neg)


def location_terms(log_y, dpm_mask, q, active, alpha_ls, alpha_lf, caches, noise):
    """Per-location ELBO pieces (obs, bounds, entropy).

    obs is zeroed where no observation is present or no node is active;
    bounds is (n, 3) zeroed at inactive nodes; entropy sums active nodes.
    The caches dict maps field names to MomentSamples over the same rows.
    """
    n = q.shape[0]
    any_active = active.any(axis=1)

    lam_mean = np.column_stack([caches[f].mean for f in OBS_PARENT_FIELDS])
    lam_second = np.column_stack([caches[f].second for f in OBS_PARENT_FIELDS])
    obs = obs_term(log_y, q, lam_mean, lam_second, noise)
    obs = np.where(dpm_mask & any_active, obs, 0.0)

    bounds = np.zeros((n, 3))
    for i, alphas in ((0, alpha_ls), (1, alpha_lf)):
        term = _alpha_parent_term(i, alphas, caches)
        val = latent_bound(q[:, i], noise.w0_lat[i], noise.we_lat[i], [term])
        bounds[:, i] = np.where(active[:, i], val, 0.0)
    bd_terms = _bd_parent_terms(q, active, caches)
    val = latent_bound(q[:, 2], noise.w0_lat[2], noise.we_lat[2], bd_terms)
    bounds[:, 2] = np.where(active[:, 2], val, 0.0)

    entropy = entropy_term(q, active)
    entropy = np.where(any_active, entropy, 0.0)
    return obs, bounds, entropy


def q_gradient(log_y, dpm_mask, q, active, alpha_ls, alpha_lf, caches, noise):
    """Partial derivative of the non-entropy ELBO terms with respect to
    each q_i (the quantity g in the stationarity condition logit(q) = g).

    Entries at inactive nodes are zero.
    """
    n = q.shape[0]
    g = np.zeros((n, 3))
    w2 = noise.we_y**2

    lam_mean = np.column_stack([caches[f].mean for f in OBS_PARENT_FIELDS])
    lam_second = np.column_stack([caches[f].second for f in OBS_PARENT_FIELDS])
    eq = lam_mean * q
    s1 = eq.sum(axis=1)
    resid0 = noise.w0_y - log_y
    obs_rows = dpm_mask & active.any(axis=1)
    for k in range(3):
        others = s1 - eq[:, k]
        d = (
            -lam_second[:, k] / (2.0 * w2)
            - (lam_mean[:, k] * others + resid0 * lam_mean[:, k]) / w2
        )
        g[:, k] += np.where(obs_rows, d, 0.0)

    # Own-bound coefficient: the bound is linear in the node's q.
    for i in range(2):
        term = _alpha_parent_term(i, alpha_ls if i == 0 else alpha_lf, caches)
        _, arg_neg, arg_pos = _bound_parts(
            q[:, i], noise.w0_lat[i], noise.we_lat[i], [term]
        )
        g[:, i] += np.where(active[:, i], softplus(arg_pos) - softplus(arg_neg), 0.0)
    bd_terms = _bd_parent_terms(q, active, caches)
    _, arg_neg_bd, arg_pos_bd = _bound_parts(
        q[:, 2], noise.w0_lat[2], noise.we_lat[2], bd_terms
    )
    g[:, 2] += np.where(active[:, 2], softplus(arg_pos_bd) - softplus(arg_neg_bd), 0.0)

    # BD's bound seen as a function of its parents' q.
    sig_neg = sigmoid(arg_neg_bd)
    sig_pos = sigmoid(arg_pos_bd)
    for j, term in enumerate(bd_terms):
        mix_pos = (1.0 - term.q) + term.q * term.exp_pos
        mix_neg = (1.0 - term.q) + term.q * term.exp_neg
        d = -q[:, 2] * sig_neg * (term.exp_neg - 1.0) / mix_neg - (
            1.0 - q[:, 2]
        ) * sig_pos * (term.exp_pos - 1.0) / mix_pos
        g[:, j] += np.where(active[:, 2] & active[:, j], d, 0.0)

    return np.where(active, g, 0.0)


def field_kl(field):
    """KL(q(u) || GP prior at the inducing points) for one field."""
    k_uu, _, _ = gp.jittered_cholesky(field.points, field.hyper())
    prior_mean = field.mean_net.forward(field.points)
    return gp.kl_gaussian(field.q_u(), prior_mean, k_uu)


def elbo(grid, posterior, field_map, noise, m_samples, seed, dpm_floor=DPM_FLOOR):
    """Full-data ELBO and its breakdown, deterministic for a fixed seed.

    The grid must be standardized with active masks computed. Moment noise
    is drawn once per field over all locations (keyed by location row), so
    any sub-setting of locations sees identical per-location draws.
    """
    if grid.feature_stats is None or grid.active is None:
        raise ValidationError("elbo needs a standardized grid with active masks")
    n = grid.n_locations
    live = fields_mod.live_masks(grid)
    caches = {}
    for f_idx, name in enumerate(fields_mod.FIELD_NAMES):
        eps = stream(seed, f_idx).standard_normal((n, m_samples))
        caches[name] = fields_mod.draw_moments(
            field_map[name], grid.features, m_samples, noise=eps, live=live[name]
        )

    safe_dpm = np.where(grid.dpm_present, grid.dpm, 1.0)
    log_y = np.where(
        grid.dpm_present, np.log(np.maximum(safe_dpm, dpm_floor)), 0.0
    )
    obs, bounds, entropy = location_terms(
        log_y,
        grid.dpm_present,
        posterior.q,
        grid.active,
        grid.prior_ls,
        grid.prior_lf,
        caches,
        noise,
    )
    kl = sum(field_kl(field_map[name]) for name in fields_mod.FIELD_NAMES)
    breakdown = ElboBreakdown(
        obs=float(obs.sum()),
        latent=float(bounds.sum()),
        entropy=float(-entropy.sum()),
        kl=float(kl),
    )
    return breakdown.total, breakdown
