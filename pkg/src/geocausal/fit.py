"""Stochastic variational EM for the spatial causal network.

Each iteration draws a minibatch of active locations, freezes Monte-Carlo
moment caches for the seven coefficient fields, runs damped fixed-point
sweeps on the activation posteriors (E-step, with a backtracking guard
that keeps the frozen-sample objective non-decreasing), then takes one
preconditioned gradient-ascent step on all continuous parameters
(M-step). All gradients are hand-derived adjoints of the same forward
code the objective uses, so finite differences of the objective are the
ground truth the tests compare against.

Every random quantity is a pure function of (seed, purpose, index), and
minibatch noise is keyed by a location's position in the active-location
list, so pruning inactive rows changes no arithmetic on the surviving
rows.
"""

import copy
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fields as fields_mod
from . import flows, gp
from .elbo import (
    DPM_FLOOR,
    OBS_PARENT_FIELDS,
    ElboBreakdown,
    NoiseWeights,
    PosteriorGrid,
    _alpha_parent_term,
    _bd_parent_terms,
    _bound_parts,
    field_kl,
    location_terms,
    q_gradient,
)
from .exceptions import FitFailedError, ValidationError
from .fields import FIELD_NAMES, CoefficientField, MeanNetwork
from .grid import compute_active_masks, standardize_features, subset_rows
from .util import (
    EXP_CLAMP,
    PURPOSE_EPOCH,
    PURPOSE_EVAL,
    PURPOSE_INIT,
    PURPOSE_LENGTH,
    PURPOSE_NOISE,
    PURPOSE_PREDICT,
    clamp_q,
    format_float,
    sigmoid,
    stream,
)

LAM_INDEX = {"lam_ls": 0, "lam_lf": 1, "lam_bd": 2}
ALPHA_NODE = {"gam_als": 0, "gam_alf": 1}
BD_PARENT = {"gam_ls": 0, "gam_lf": 1}

# Preconditioner and learning-rate schedule constants (frozen, not config).
PRECOND_DECAY = 0.999
PRECOND_EPS = 1e-8
LR_DECAY_HORIZON = 1000.0
LR_DECAY_POWER = 0.6
FLOW_C_FLOOR = 0.01
LATENT_NOISE_LR_SCALE = 0.1

FIELD_PARAM_NAMES = (
    "nn_w1", "nn_b1", "nn_w2", "nn_b2", "nn_w3", "nn_b3",
    "log_variance", "log_length",
    "mu_u", "low_rank", "log_diag",
    "flow_u", "flow_c", "flow_b",
)
GLOBAL_PARAM_NAMES = ("w0_y", "log_we_y", "w0_lat", "we_lat")


@dataclasses.dataclass
class FitConfig:
    batch_size: int = 256
    mc_samples: int = 8
    eval_samples: int = 64
    eval_interval: int = 25
    flow_depth: int = 6
    inducing_count: int = 64
    rank: int = 8
    learning_rate: float = 0.05
    e_step_sweeps: int = 2
    e_step_damping: float = 0.8
    e_step_warmup: int = 0
    noise_warmup: int = 0
    field_warmup: int = 0
    max_iters: int = 1500
    elbo_tol: float = 0.5
    prior_floor: float = 1e-3
    dpm_floor: float = DPM_FLOOR
    freeze_noise: bool = False
    freeze_kernel: bool = False
    prune: bool = True
    threads: int | None = None

    def __post_init__(self):
        for name in ("batch_size", "mc_samples", "eval_samples",
                     "eval_interval", "inducing_count", "rank", "max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
            setattr(self, name, int(getattr(self, name)))
        self.flow_depth = int(self.flow_depth)
        if self.flow_depth < 0:
            raise ValidationError("flow_depth must be non-negative")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 < self.e_step_damping <= 1.0:
            raise ValidationError("e_step_damping must lie in (0, 1]")
        if self.e_step_sweeps < 1:
            raise ValidationError("e_step_sweeps must be at least 1")
        for name in ("e_step_warmup", "noise_warmup", "field_warmup"):
            if int(getattr(self, name)) < 0:
                raise ValidationError(f"{name} must be non-negative")
            setattr(self, name, int(getattr(self, name)))
        if not 0.0 <= self.prior_floor < 1.0:
            raise ValidationError("prior_floor must lie in [0, 1)")
        if self.dpm_floor <= 0:
            raise ValidationError("dpm_floor must be positive")
        if self.elbo_tol <= 0:
            raise ValidationError("elbo_tol must be positive")
        if self.threads is not None and int(self.threads) < 1:
            raise ValidationError("threads must be a positive integer")


@dataclasses.dataclass
class ModelState:
    """Everything the M-step learns, plus what predict needs to reuse it."""

    fields: dict
    noise: NoiseWeights
    feature_stats: object
    prior_floor: float
    dpm_floor: float
    iteration: int = 0


@dataclasses.dataclass
class FitResult:
    state: ModelState
    posterior: PosteriorGrid
    grid: object
    history: list
    sweep_log: list
    evals: list
    stop_reason: str
    seconds: float


@dataclasses.dataclass
class PredictResult:
    grid: object
    posterior: PosteriorGrid
    field_means: dict
    sweeps: int
    max_delta: float


def parallel_map(fn, items, threads):
    """Map preserving item order; threaded only when threads > 1."""
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# ---------------------------------------------------------------------------
# Parameter plumbing: every learnable lives at a string key, flat-array view.

def param_keys(config=None, include_noise=True, include_kernel=True):
    keys = []
    for fname in FIELD_NAMES:
        for pname in FIELD_PARAM_NAMES:
            if not include_kernel and pname in ("log_variance", "log_length"):
                continue
            keys.append(f"{fname}.{pname}")
    if include_noise:
        keys.extend(GLOBAL_PARAM_NAMES)
    return keys


def param_get(state, key):
    """Current value at a key, as a flat float array copy."""
    if key in GLOBAL_PARAM_NAMES:
        if key == "w0_y":
            return np.array([state.noise.w0_y])
        if key == "log_we_y":
            return np.array([np.log(state.noise.we_y)])
        if key == "w0_lat":
            return state.noise.w0_lat.copy()
        return state.noise.we_lat.copy()
    fname, pname = key.split(".", 1)
    field = state.fields[fname]
    if pname.startswith("nn_"):
        return np.atleast_1d(
            np.asarray(getattr(field.mean_net, pname[3:]), dtype=float)
        ).ravel().copy()
    if pname.startswith("flow_"):
        return getattr(field.flow, pname[5:]).copy()
    return np.atleast_1d(np.asarray(getattr(field, pname), dtype=float)).ravel().copy()


def param_add(state, key, delta):
    """In-place update of the parameter at a key by a flat delta."""
    delta = np.asarray(delta, dtype=float)
    if key in GLOBAL_PARAM_NAMES:
        if key == "w0_y":
            state.noise.w0_y += float(delta[0])
        elif key == "log_we_y":
            state.noise.we_y = float(np.exp(np.log(state.noise.we_y) + delta[0]))
        elif key == "w0_lat":
            state.noise.w0_lat = state.noise.w0_lat + delta
        else:
            state.noise.we_lat = state.noise.we_lat + delta
        return
    fname, pname = key.split(".", 1)
    field = state.fields[fname]
    if pname.startswith("nn_"):
        attr = pname[3:]
        cur = getattr(field.mean_net, attr)
        if attr == "b3":
            field.mean_net.b3 = float(cur) + float(delta[0])
        else:
            setattr(field.mean_net, attr, cur + delta.reshape(np.shape(cur)))
    elif pname.startswith("flow_"):
        attr = pname[5:]
        setattr(field.flow, attr, getattr(field.flow, attr) + delta)
    elif pname in ("log_variance", "log_length"):
        setattr(field, pname, float(getattr(field, pname)) + float(delta[0]))
    else:
        cur = getattr(field, pname)
        setattr(field, pname, cur + delta.reshape(cur.shape))


def pack_params(state, keys):
    return np.concatenate([param_get(state, k) for k in keys])


def set_params(state, keys, vector):
    vector = np.asarray(vector, dtype=float)
    offset = 0
    for key in keys:
        cur = param_get(state, key)
        size = cur.size
        param_add(state, key, vector[offset:offset + size] - cur)
        offset += size
    if offset != vector.size:
        raise ValidationError("parameter vector length mismatch")


class Preconditioner:
    """Diagonal second-moment preconditioner with bias correction.

    v <- decay * v + (1 - decay) * g^2, step = lr_t * g / (sqrt(v_hat) + eps)
    with v_hat = v / (1 - decay^t) and lr_t = lr * (1 + t / 1000)^-0.6.

    The latent intercepts and logit-noise scales move at a tenth of the
    base rate. Normalized steps walk every coordinate at the same speed,
    and those four global scalars otherwise sprint: each one shifts a
    whole hazard column per step, and a few hundred unchecked steps can
    saturate a column before the damage coefficients see any credit for
    the same rows.
    """

    def __init__(self, learning_rate):
        self.learning_rate = learning_rate
        self.v = {}
        self.t = 0

    def lr_at(self, t):
        return self.learning_rate * (1.0 + t / LR_DECAY_HORIZON) ** (-LR_DECAY_POWER)

    def step(self, state, grads):
        """One ascent step along the supplied gradient dict."""
        self.t += 1
        corr = 1.0 - PRECOND_DECAY**self.t
        lr_t = self.lr_at(self.t)
        for key, g in grads.items():
            g = np.atleast_1d(np.asarray(g, dtype=float)).ravel()
            v = self.v.get(key)
            if v is None:
                v = np.zeros_like(g)
            v = PRECOND_DECAY * v + (1.0 - PRECOND_DECAY) * g * g
            self.v[key] = v
            v_hat = v / corr
            rate = lr_t * (LATENT_NOISE_LR_SCALE
                           if key in ("w0_lat", "we_lat") else 1.0)
            param_add(state, key, rate * g / (np.sqrt(v_hat) + PRECOND_EPS))
            if key.endswith(".flow_c"):
                # The invertibility enforcement divides by c, so keep every
                # layer's c away from that pole (sign-preserving floor).
                c = param_get(state, key)
                sign = np.where(c < 0, -1.0, 1.0)
                floored = sign * np.maximum(np.abs(c), FLOW_C_FLOOR)
                if not np.array_equal(floored, c):
                    param_add(state, key, floored - c)


# ---------------------------------------------------------------------------
# Forward pass over one field at a set of rows, keeping everything the
# backward pass needs.

@dataclasses.dataclass
class _FieldForward:
    live: np.ndarray
    cache: fields_mod.MomentSamples
    stack: flows.FlowStack
    du_chain: np.ndarray
    dc_chain: np.ndarray
    ws: gp.ConditionalWorkspace | None
    std: np.ndarray | None
    eps_live: np.ndarray | None
    v: np.ndarray | None
    flow_inputs: list | None
    nn_tape: tuple
    n_live: int


def _field_forward(field, feats, eps_rows, live, m_samples):
    n = feats.shape[0]
    live = np.asarray(live, dtype=bool)
    n_live = int(live.sum())
    stack, du_chain, dc_chain = flows.enforce_stack_with_chain(field.flow)

    draws = np.zeros((n, m_samples))
    eps = np.zeros((n, m_samples))
    if n_live:
        x = feats[live]
        stacked = np.concatenate([x, field.points], axis=0)
        m_all, nn_tape = field.mean_net.forward_tape(stacked)
        m_t, m_u = m_all[:n_live], m_all[n_live:]
        ws = gp.sparse_conditional(
            field.inducing(), field.hyper(), x, m_u, m_t, workspace=True
        )
        std = np.sqrt(ws.var)
        eps_live = eps_rows[live]
        z = ws.mean[:, None] + std[:, None] * eps_live
        v, flow_inputs = flows.stack_forward_tape(z, stack)
        draws[live] = v
        eps[live] = eps_live
    else:
        _, nn_tape = field.mean_net.forward_tape(field.points)
        ws = std = eps_live = v = flow_inputs = None

    arg = np.clip(draws, -EXP_CLAMP, EXP_CLAMP)
    cache = fields_mod.MomentSamples(
        draws=draws,
        eps=eps,
        live=live.copy(),
        mean=np.where(live, draws.mean(axis=1), 0.0),
        second=np.where(live, (draws * draws).mean(axis=1), 0.0),
        exp_pos=np.where(live, np.exp(arg).mean(axis=1), 1.0),
        exp_neg=np.where(live, np.exp(-arg).mean(axis=1), 1.0),
        clamp_count=int(np.count_nonzero(np.abs(draws[live]) > EXP_CLAMP)),
    )
    return _FieldForward(
        live=live, cache=cache, stack=stack, du_chain=du_chain,
        dc_chain=dc_chain, ws=ws, std=std, eps_live=eps_live, v=v,
        flow_inputs=flow_inputs, nn_tape=nn_tape, n_live=n_live,
    )


# ---------------------------------------------------------------------------
# Batch view: the per-row data the location terms consume.

@dataclasses.dataclass
class _BatchView:
    rows: np.ndarray
    feats: np.ndarray
    log_y: np.ndarray
    dpm_mask: np.ndarray
    active: np.ndarray
    alpha_ls: np.ndarray
    alpha_lf: np.ndarray
    live: dict
    scale: float


def _make_view(grid, log_y_full, live_full, rows, scale):
    rows = np.asarray(rows)
    return _BatchView(
        rows=rows,
        feats=grid.features[rows],
        log_y=log_y_full[rows],
        dpm_mask=grid.dpm_present[rows],
        active=grid.active[rows],
        alpha_ls=grid.prior_ls[rows],
        alpha_lf=grid.prior_lf[rows],
        live={name: live_full[name][rows] for name in FIELD_NAMES},
        scale=scale,
    )


def safe_log_dpm(grid, dpm_floor=DPM_FLOOR):
    dpm = np.where(grid.dpm_present, grid.dpm, 1.0)
    return np.where(grid.dpm_present, np.log(np.maximum(dpm, dpm_floor)), 0.0)


def _location_objective(view, q_b, caches, noise_w):
    obs, bounds, entropy = location_terms(
        view.log_y, view.dpm_mask, q_b, view.active,
        view.alpha_ls, view.alpha_lf, caches, noise_w,
    )
    return float(obs.sum() + bounds.sum() - entropy.sum())


# ---------------------------------------------------------------------------
# E-step: damped Gauss-Seidel fixed point with a monotonicity guard.

def e_step(view, q_b, caches, noise_w, sweeps, damping, max_backtracks=6):
    """Update batch posteriors in node order ls, lf, bd.

    Each sweep is accepted only if the frozen-sample batch objective did
    not decrease; otherwise the damping is halved and the sweep retried,
    and if every retry fails the old posteriors are kept. Returns the new
    posteriors and a list of (pre, post) objective values per sweep.
    """
    q_b = q_b.copy()
    diag = []
    for _ in range(sweeps):
        pre = _location_objective(view, q_b, caches, noise_w)
        d = damping
        accepted = None
        for _ in range(max_backtracks + 1):
            q_try = q_b.copy()
            for node in range(3):
                g = q_gradient(
                    view.log_y, view.dpm_mask, q_try, view.active,
                    view.alpha_ls, view.alpha_lf, caches, noise_w,
                )[:, node]
                upd = (1.0 - d) * q_try[:, node] + d * sigmoid(g)
                q_try[:, node] = np.where(
                    view.active[:, node], clamp_q(upd), 0.0
                )
            post = _location_objective(view, q_try, caches, noise_w)
            if post >= pre - 1e-12:
                accepted = (q_try, post)
                break
            d *= 0.5
        if accepted is None:
            diag.append((pre, pre))
        else:
            q_b, post = accepted
            diag.append((pre, post))
    return q_b, diag


# ---------------------------------------------------------------------------
# M-step gradients.

def _node_args(view, q_b, caches, noise_w):
    """Softplus arguments per node plus the parent terms behind them."""
    n = q_b.shape[0]
    arg_neg = np.zeros((n, 3))
    arg_pos = np.zeros((n, 3))
    alpha_terms = []
    for i, alphas in ((0, view.alpha_ls), (1, view.alpha_lf)):
        term = _alpha_parent_term(i, alphas, caches)
        alpha_terms.append(term)
        _, an, ap = _bound_parts(
            q_b[:, i], noise_w.w0_lat[i], noise_w.we_lat[i], [term]
        )
        arg_neg[:, i], arg_pos[:, i] = an, ap
    bd_terms = _bd_parent_terms(q_b, view.active, caches)
    _, an, ap = _bound_parts(
        q_b[:, 2], noise_w.w0_lat[2], noise_w.we_lat[2], bd_terms
    )
    arg_neg[:, 2], arg_pos[:, 2] = an, ap
    return arg_neg, arg_pos, bd_terms, alpha_terms


def _moment_cotangents(name, view, q_b, caches, noise_w, args):
    """d(location terms)/d(draw v) for one field, (n_live, M), including
    the minibatch scale."""
    arg_neg, arg_pos, bd_terms, _ = args
    fw_live = view.live[name]
    cache = caches[name]
    m = cache.m_samples
    scale = view.scale
    v = cache.draws[fw_live]

    if name in LAM_INDEX:
        k = LAM_INDEX[name]
        lam_mean = np.column_stack([caches[f].mean for f in OBS_PARENT_FIELDS])
        eq = lam_mean * q_b
        s1 = eq.sum(axis=1)
        we2 = noise_w.we_y**2
        obs_rows = view.dpm_mask & view.active.any(axis=1)
        qk = q_b[:, k]
        d_e1 = np.where(
            obs_rows,
            -(qk * (s1 - eq[:, k]) + (noise_w.w0_y - view.log_y) * qk) / we2,
            0.0,
        )[fw_live]
        d_e2 = np.where(obs_rows, -qk / (2.0 * we2), 0.0)[fw_live]
        return scale * (d_e1[:, None] + 2.0 * v * d_e2[:, None]) / m

    if name in BD_PARENT:
        j = BD_PARENT[name]
        term = bd_terms[j]
        sig_neg = sigmoid(arg_neg[:, 2])
        sig_pos = sigmoid(arg_pos[:, 2])
        mix_pos = (1.0 - term.q) + term.q * term.exp_pos
        mix_neg = (1.0 - term.q) + term.q * term.exp_neg
        rows = view.active[:, 2] & view.active[:, j]
        d_pos = np.where(rows, -(1.0 - q_b[:, 2]) * sig_pos * term.q / mix_pos, 0.0)
        d_neg = np.where(rows, -q_b[:, 2] * sig_neg * term.q / mix_neg, 0.0)
        d_pos = d_pos[fw_live][:, None]
        d_neg = d_neg[fw_live][:, None]
        inside = np.abs(v) <= EXP_CLAMP
        ev = np.exp(np.clip(v, -EXP_CLAMP, EXP_CLAMP))
        return scale * inside * (d_pos * ev - d_neg / ev) / m

    i = ALPHA_NODE[name]
    alphas = view.alpha_ls if i == 0 else view.alpha_lf
    term = args[3][i]
    sig_neg = sigmoid(arg_neg[:, i])
    sig_pos = sigmoid(arg_pos[:, i])
    rows = view.active[:, i]
    d_pos = np.where(rows, -(1.0 - q_b[:, i]) * sig_pos / term.exp_pos, 0.0)
    d_neg = np.where(rows, -q_b[:, i] * sig_neg / term.exp_neg, 0.0)
    d_pos = d_pos[fw_live][:, None]
    d_neg = d_neg[fw_live][:, None]
    a = alphas[fw_live][:, None]
    av = a * v
    inside = np.abs(av) <= EXP_CLAMP
    eav = np.exp(np.clip(av, -EXP_CLAMP, EXP_CLAMP))
    return scale * inside * a * (d_pos * eav - d_neg / eav) / m


def _conditional_backward(ws, cot_mean, cot_var, q_u):
    """Cotangents of the sparse-conditional inputs given cotangents of its
    marginal mean and variance."""
    b, r, c = ws.b, ws.r, ws.c
    b_cm = b @ cot_mean
    g_kuu = -np.outer(b_cm, r)
    g_kut = np.outer(r, cot_mean)
    bdv = b * cot_var[None, :]
    g_kut += 2.0 * (c - b) * cot_var[None, :]
    g_kuu += bdv @ b.T - bdv @ c.T - c @ bdv.T
    g_sigma = bdv @ b.T
    return {
        "mu_u": b_cm.copy(),
        "m_u": -b_cm,
        "m_t": cot_mean,
        "g_kuu": g_kuu,
        "g_kut": g_kut,
        "low_rank": 2.0 * g_sigma @ q_u.low_rank,
        "delta": np.sum(b * bdv, axis=1),
        "var_direct": float(cot_var.sum()),
    }


def _hyper_grads(hyper, g_kuu, k_uu, dist_uu, g_kut=None, k_ut=None,
                 dist_ut=None, var_direct=0.0):
    """Fold gram-matrix cotangents into (log variance, log length scale).

    The jitter tracks the variance (1e-6 * variance scaled by any
    escalation), so dK/dlog variance equals the jittered gram itself; the
    length-scale direction is dk/dlog ell = variance * s^2 exp(-s) with
    s = sqrt(3) r / ell, which vanishes on the diagonal.
    """
    ell = hyper.length_scale
    s_uu = gp.SQRT3 * dist_uu / ell
    d_logl_uu = hyper.variance * s_uu**2 * np.exp(-s_uu)
    g_logvar = float(np.sum(g_kuu * k_uu)) + hyper.variance * var_direct
    g_logl = float(np.sum(g_kuu * d_logl_uu))
    if g_kut is not None:
        s_ut = gp.SQRT3 * dist_ut / ell
        g_logvar += float(np.sum(g_kut * k_ut))
        g_logl += float(np.sum(g_kut * hyper.variance * s_ut**2 * np.exp(-s_ut)))
    return g_logvar, g_logl


def _field_backward(field, fw, cot_v):
    """All parameter gradients of one field: the data path through its
    draws (cot_v may be None when the field has no live rows) plus the KL
    term. Returns (grads dict, kl value)."""
    hyper = field.hyper()
    q_u = field.q_u()
    delta = np.exp(field.log_diag)
    depth = field.flow.depth
    grads = {}

    if fw.n_live:
        cot_z, d_u_hat, d_c_raw, d_b = flows.stack_backward(
            fw.stack, fw.flow_inputs, cot_v
        )
        grads["flow_u"] = d_u_hat * fw.du_chain
        grads["flow_c"] = d_c_raw + d_u_hat * fw.dc_chain
        grads["flow_b"] = d_b
        cot_mean = cot_z.sum(axis=1)
        std_safe = np.where(fw.std > 0.0, fw.std, 1.0)
        cot_var = np.where(
            fw.std > 0.0, (cot_z * fw.eps_live).sum(axis=1) / (2.0 * std_safe), 0.0
        )
        cond = _conditional_backward(fw.ws, cot_mean, cot_var, q_u)
        k_uu, dist_uu = fw.ws.k_uu, fw.ws.dist_uu
    else:
        grads["flow_u"] = np.zeros(depth)
        grads["flow_c"] = np.zeros(depth)
        grads["flow_b"] = np.zeros(depth)
        cond = None
        dist_uu = gp.pairwise_distances(field.points, field.points)
        k_uu, _, _ = gp.jittered_cholesky(field.points, hyper)

    # Prior mean at the inducing points, read off the same tape the
    # conditional used (its last count rows); the tape holds (x, h1, h2).
    m_count = field.points.shape[0]
    h2_u = fw.nn_tape[2][-m_count:]
    prior_mean_u = h2_u @ field.mean_net.w3 + field.mean_net.b3

    kl_value, kg = gp.kl_gaussian_grads(q_u, prior_mean_u, k_uu)

    g_mu_u = -kg["d_mean"]
    g_low = -kg["d_low_rank"]
    g_delta = -kg["d_diag"]
    g_kuu = -kg["d_prior_cov"]
    d_m_u = kg["d_mean"].copy()
    var_direct = 0.0
    g_kut = k_ut = dist_ut = None
    if cond is not None:
        g_mu_u = g_mu_u + cond["mu_u"]
        g_low = g_low + cond["low_rank"]
        g_delta = g_delta + cond["delta"]
        g_kuu = g_kuu + cond["g_kuu"]
        d_m_u = d_m_u + cond["m_u"]
        var_direct = cond["var_direct"]
        g_kut, k_ut, dist_ut = cond["g_kut"], fw.ws.k_ut, fw.ws.dist_ut

    grads["mu_u"] = g_mu_u
    grads["low_rank"] = g_low
    grads["log_diag"] = g_delta * delta
    g_logvar, g_logl = _hyper_grads(
        hyper, g_kuu, k_uu, dist_uu, g_kut, k_ut, dist_ut, var_direct
    )
    grads["log_variance"] = np.array([g_logvar])
    grads["log_length"] = np.array([g_logl])

    if cond is not None:
        cot_out = np.concatenate([cond["m_t"], d_m_u])
    else:
        cot_out = d_m_u
    nn_grads = field.mean_net.backward(fw.nn_tape, cot_out)
    grads.update(nn_grads)
    return grads, kl_value


def batch_gradients(state, view, q_b, forwards):
    """ELBO gradients for one minibatch at the current posteriors.

    Data-term cotangents carry view.scale (the active-count over batch-size
    upscaling); the KL terms enter at full strength. Returns (grads keyed
    like param_keys, parts dict with the scaled objective pieces).
    """
    caches = {name: forwards[name].cache for name in FIELD_NAMES}
    noise_w = state.noise
    args = _node_args(view, q_b, caches, noise_w)
    grads = {}
    kl_total = 0.0
    for name in FIELD_NAMES:
        fw = forwards[name]
        cot_v = None
        if fw.n_live:
            cot_v = _moment_cotangents(name, view, q_b, caches, noise_w, args)
        fgrads, kl_value = _field_backward(state.fields[name], fw, cot_v)
        kl_total += kl_value
        for pname, g in fgrads.items():
            grads[f"{name}.{pname}"] = g

    grads.update(_noise_grads(view, q_b, caches, noise_w, args))

    obs, bounds, entropy = location_terms(
        view.log_y, view.dpm_mask, q_b, view.active,
        view.alpha_ls, view.alpha_lf, caches, noise_w,
    )
    parts = {
        "obs": view.scale * float(obs.sum()),
        "latent": view.scale * float(bounds.sum()),
        "entropy": view.scale * float(-entropy.sum()),
        "kl": kl_total,
        "clamp_count": sum(caches[f].clamp_count for f in FIELD_NAMES),
    }
    parts["total"] = parts["obs"] + parts["latent"] + parts["entropy"] - parts["kl"]
    return grads, parts


def _noise_grads(view, q_b, caches, noise_w, args):
    arg_neg, arg_pos, _, _ = args
    scale = view.scale
    we2 = noise_w.we_y**2
    lam_mean = np.column_stack([caches[f].mean for f in OBS_PARENT_FIELDS])
    lam_second = np.column_stack([caches[f].second for f in OBS_PARENT_FIELDS])
    eq = lam_mean * q_b
    s1 = eq.sum(axis=1)
    resid = view.log_y - noise_w.w0_y
    obs_rows = view.dpm_mask & view.active.any(axis=1)

    g_w0y = np.where(obs_rows, (resid - s1) / we2, 0.0).sum()
    quad = resid * resid + (lam_second * q_b).sum(axis=1)
    cross = 0.5 * (s1 * s1 - (eq * eq).sum(axis=1))
    g_logwe = np.where(
        obs_rows, -1.0 + quad / we2 + 2.0 * (cross - resid * s1) / we2, 0.0
    ).sum()

    g_w0_lat = np.zeros(3)
    g_we_lat = np.zeros(3)
    for i in range(3):
        sn = sigmoid(arg_neg[:, i])
        sp = sigmoid(arg_pos[:, i])
        qi = q_b[:, i]
        act = view.active[:, i]
        g_w0_lat[i] = np.where(act, qi * sn - (1.0 - qi) * sp, 0.0).sum()
        g_we_lat[i] = (
            np.where(act, -qi * sn - (1.0 - qi) * sp, 0.0).sum()
            * noise_w.we_lat[i]
        )
    return {
        "w0_y": np.array([scale * g_w0y]),
        "log_we_y": np.array([scale * g_logwe]),
        "w0_lat": scale * g_w0_lat,
        "we_lat": scale * g_we_lat,
    }


def batch_objective(state, view, q_b, eps_map, m_samples):
    """The scalar the batch gradients differentiate: scaled location terms
    plus entropy minus the field KLs, with caches rebuilt from the given
    noise. Used by the finite-difference tests."""
    caches = {}
    kl_total = 0.0
    for name in FIELD_NAMES:
        fw = _field_forward(
            state.fields[name], view.feats, eps_map[name], view.live[name],
            m_samples,
        )
        caches[name] = fw.cache
        m_count = state.fields[name].points.shape[0]
        h2_u = fw.nn_tape[2][-m_count:]
        prior_mean_u = h2_u @ state.fields[name].mean_net.w3 + state.fields[name].mean_net.b3
        if fw.ws is not None:
            k_uu = fw.ws.k_uu
        else:
            k_uu, _, _ = gp.jittered_cholesky(
                state.fields[name].points, state.fields[name].hyper()
            )
        kl_total += gp.kl_gaussian(state.fields[name].q_u(), prior_mean_u, k_uu)
    obs, bounds, entropy = location_terms(
        view.log_y, view.dpm_mask, q_b, view.active,
        view.alpha_ls, view.alpha_lf, caches, state.noise,
    )
    return (
        view.scale * float(obs.sum() + bounds.sum() - entropy.sum()) - kl_total
    )


# ---------------------------------------------------------------------------
# Initialization.

def prepare_grid(grid, config):
    """Active masks, standardization keyed to active rows, optional prune."""
    if grid.n_locations == 0:
        raise ValidationError("grid is empty")
    if grid.active is None:
        grid = compute_active_masks(grid, config.prior_floor)
    any_active = grid.active.any(axis=1)
    if not any_active.any():
        raise ValidationError(
            "no location has an active node; lower prior_floor or check priors"
        )
    grid = standardize_features(grid, rows=any_active)
    if config.prune and not any_active.all():
        grid = subset_rows(grid, any_active)
    return grid


def median_length_scale(features, seed, cap=512):
    """Median pairwise distance over at most cap points, as a length-scale
    initializer."""
    n = features.shape[0]
    if n > cap:
        idx = stream(seed, PURPOSE_LENGTH).choice(n, size=cap, replace=False)
        features = features[idx]
    d = gp.pairwise_distances(features, features)
    iu = np.triu_indices(d.shape[0], k=1)
    vals = d[iu]
    med = float(np.median(vals)) if vals.size else 1.0
    return med if med > 0 else 1.0


def _calibrate_alpha_edge(alpha):
    """Intercept and slope of a logistic fit sigma(w0 + g*a) ~ a.

    Newton iterations on the soft-label cross entropy. Used at init so the
    first posterior sweep approximately reproduces the hazard prior instead
    of erasing its ranking (a zero-initialized edge would send every
    location to the same logit).
    """
    a = np.asarray(alpha, dtype=float)
    if a.size < 3 or a.std() < 1e-6:
        p = float(np.clip(a.mean() if a.size else 0.5, 1e-4, 1.0 - 1e-4))
        return float(np.log(p) - np.log1p(-p)), 0.0
    design = np.column_stack([np.ones_like(a), a])
    w = np.array([-1.0, 2.0])
    for _ in range(40):
        p = sigmoid(design @ w)
        g = design.T @ (a - p)
        s = p * (1.0 - p)
        hess = design.T @ (design * s[:, None]) + 1e-9 * np.eye(2)
        step = np.linalg.solve(hess, g)
        w = w + step
        if np.abs(step).max() < 1e-10:
            break
    return float(w[0]), float(np.clip(w[1], 0.0, 20.0))


def init_state(grid, config, seed):
    """Model state at iteration zero for a prepared grid."""
    act_rows = np.flatnonzero(grid.active.any(axis=1))
    feats_act = grid.features[act_rows]
    points = gp.kmeans_inducing(feats_act, config.inducing_count, seed)
    m_u = points.shape[0]
    ell0 = median_length_scale(feats_act, seed)
    in_dim = grid.features.shape[1]

    fields = {}
    for f_idx, name in enumerate(FIELD_NAMES):
        rng = stream(seed, PURPOSE_INIT, f_idx)
        net = MeanNetwork.init(in_dim, rng)
        # Hazards raise the damage proxy and parents raise child odds, so
        # every edge coefficient starts mildly positive to break symmetry.
        net = dataclasses.replace(net, b3=1.0)
        fields[name] = CoefficientField(
            name=name,
            mean_net=net,
            log_variance=0.0,
            log_length=float(np.log(ell0)),
            points=points.copy(),
            mu_u=np.zeros(m_u),
            low_rank=np.zeros((m_u, min(config.rank, m_u))),
            log_diag=np.full(m_u, np.log(0.1)),
            flow=flows.init_stack(config.flow_depth, rng),
        )

    log_y = safe_log_dpm(grid, config.dpm_floor)
    obs_rows = grid.dpm_present & grid.active.any(axis=1)
    # Anchor the damage coefficients at the scale the observations imply:
    # ridge regression of log damage on the starting posteriors (the hazard
    # priors, and 1/2 where buildings stand). Starting all three at the
    # same token magnitude leaves the largest hazard's unexplained residual
    # free to drag the other columns around, or flip one into its mirror
    # mode, for the first few hundred steps.
    if obs_rows.any():
        q0 = np.column_stack([
            np.where(grid.active[:, 0], grid.prior_ls, 0.0),
            np.where(grid.active[:, 1], grid.prior_lf, 0.0),
            np.where(grid.active[:, 2], 0.5, 0.0),
        ])[obs_rows]
        design = np.column_stack([np.ones(q0.shape[0]), q0])
        gram = design.T @ design + 1e-3 * np.eye(4)
        beta = np.linalg.solve(gram, design.T @ log_y[obs_rows])
        w0_y = float(beta[0])
        lam0 = np.clip(beta[1:], 0.5, 12.0)
        resid = log_y[obs_rows] - design @ beta
        we_y = max(float(resid.std()), 0.1)
        for f_idx, lam_name in enumerate(("lam_ls", "lam_lf", "lam_bd")):
            fields[lam_name].mean_net.b3 = float(lam0[f_idx])
    else:
        w0_y, we_y = 0.0, 1.0
    # Calibrate each hazard's intercept and prior-edge slope so the latent
    # model itself reproduces the prior at iteration zero.
    w0_lat = np.zeros(3)
    for i, prior, edge in ((0, grid.prior_ls, "gam_als"),
                           (1, grid.prior_lf, "gam_alf")):
        act = grid.active[:, i]
        w0_i, slope = _calibrate_alpha_edge(prior[act]) if act.any() else (0.0, 0.0)
        w0_lat[i] = w0_i
        fields[edge].mean_net.b3 = slope
    # Start the variational inducing mean at the GP prior mean. Zero would
    # cancel the mean network in the conditional (m_t - b @ m_u + b @ 0),
    # silently flattening every field at iteration zero.
    for field in fields.values():
        field.mu_u = field.mean_net.forward(points)
    noise = NoiseWeights(w0_y=w0_y, we_y=we_y, w0_lat=w0_lat, we_lat=np.full(3, 0.5))
    return ModelState(
        fields=fields,
        noise=noise,
        feature_stats=grid.feature_stats,
        prior_floor=config.prior_floor,
        dpm_floor=config.dpm_floor,
    )


def init_posterior(grid):
    """Hazard posteriors start at their priors; building damage at 1/2."""
    n = grid.n_locations
    q = np.zeros((n, 3))
    q[:, 0] = np.where(grid.active[:, 0], clamp_q(grid.prior_ls), 0.0)
    q[:, 1] = np.where(grid.active[:, 1], clamp_q(grid.prior_lf), 0.0)
    q[:, 2] = np.where(grid.active[:, 2], 0.5, 0.0)
    return q


# ---------------------------------------------------------------------------
# Full-data evaluation with a frozen noise stream.

def evaluate(state, grid, q, live_full, act_rows, m_samples, seed):
    """ELBO breakdown over the whole grid with eval-stream noise keyed by
    active-list position, so pruning does not change it."""
    n = grid.n_locations
    caches = {}
    clamp_count = 0
    for f_idx, name in enumerate(FIELD_NAMES):
        eps_act = stream(seed, PURPOSE_EVAL, f_idx).standard_normal(
            (act_rows.size, m_samples)
        )
        eps = np.zeros((n, m_samples))
        eps[act_rows] = eps_act
        caches[name] = fields_mod.draw_moments(
            state.fields[name], grid.features, m_samples,
            noise=eps, live=live_full[name],
        )
        clamp_count += caches[name].clamp_count
    log_y = safe_log_dpm(grid, state.dpm_floor)
    obs, bounds, entropy = location_terms(
        log_y, grid.dpm_present, q, grid.active,
        grid.prior_ls, grid.prior_lf, caches, state.noise,
    )
    kl = sum(field_kl(state.fields[name]) for name in FIELD_NAMES)
    breakdown = ElboBreakdown(
        obs=float(obs.sum()),
        latent=float(bounds.sum()),
        entropy=float(-entropy.sum()),
        kl=float(kl),
    )
    return breakdown, clamp_count


# ---------------------------------------------------------------------------
# The fit loop.

def fit(grid, config=None, seed=0):
    """Run stochastic variational EM on a raw or prepared grid."""
    config = config or FitConfig()
    t_start = time.perf_counter()
    grid = prepare_grid(grid, config)
    state = init_state(grid, config, seed)
    q = init_posterior(grid)
    live_full = fields_mod.live_masks(grid)
    log_y_full = safe_log_dpm(grid, config.dpm_floor)
    act_rows = np.flatnonzero(grid.active.any(axis=1))
    n_act = act_rows.size
    batch_size = min(config.batch_size, n_act)
    scale = n_act / batch_size

    optimizer = Preconditioner(config.learning_rate)
    history = []
    sweep_log = []
    evals = []
    perm = np.zeros(0, dtype=int)
    cursor = 0
    epoch = 0
    nonfinite_run = 0
    last_good = None
    stop_reason = "max_iters"
    last_eval_iter = -1

    def run_eval(iteration):
        nonlocal last_good, last_eval_iter
        breakdown, clamps = evaluate(
            state, grid, q, live_full, act_rows, config.eval_samples, seed
        )
        total = breakdown.total
        evals.append((iteration, total))
        history.append({
            "iter": iteration,
            "elbo": total,
            "obs": breakdown.obs,
            "latent": breakdown.latent,
            "entropy": breakdown.entropy,
            "kl": breakdown.kl,
            "clamp_count": clamps,
            "seconds": time.perf_counter() - t_start,
        })
        if np.isfinite(total):
            last_good = (copy.deepcopy(state), q.copy())
        last_eval_iter = iteration
        return total

    t = 0
    for t in range(config.max_iters):
        if t % config.eval_interval == 0:
            run_eval(t)
            # The anchor phase plateaus by construction, so the stall
            # window only counts evaluations taken after every parameter
            # group is free to move.
            released = [e for e in evals if e[0] >= config.field_warmup]
            if len(released) >= 4:
                deltas = [
                    released[-k][1] - released[-k - 1][1] for k in (1, 2, 3)
                ]
                if all(d < config.elbo_tol for d in deltas):
                    stop_reason = "converged"
                    break

        if cursor + batch_size > perm.size:
            perm = stream(seed, PURPOSE_EPOCH, epoch).permutation(n_act)
            cursor = 0
            epoch += 1
        positions = perm[cursor:cursor + batch_size]
        cursor += batch_size
        rows = act_rows[positions]
        view = _make_view(grid, log_y_full, live_full, rows, scale)

        eps_map = {}
        for f_idx, name in enumerate(FIELD_NAMES):
            eps_act = stream(seed, PURPOSE_NOISE, t, f_idx).standard_normal(
                (n_act, config.mc_samples)
            )
            eps_map[name] = eps_act[positions]

        forwards = dict(zip(FIELD_NAMES, parallel_map(
            lambda name: _field_forward(
                state.fields[name], view.feats, eps_map[name],
                view.live[name], config.mc_samples,
            ),
            FIELD_NAMES, config.threads,
        )))
        caches = {name: forwards[name].cache for name in FIELD_NAMES}

        if t >= config.e_step_warmup:
            q_b, diag = e_step(
                view, q[rows], caches, state.noise,
                config.e_step_sweeps, config.e_step_damping,
            )
            q[rows] = q_b
            sweep_log.append(diag)
        else:
            # Warmup: hold the posteriors at their (prior-ranked) start so
            # the regression side locks onto the signal before inference
            # can drift the posteriors toward a degenerate corner.
            q_b = q[rows]

        grads, parts = batch_gradients(state, view, q_b, forwards)
        finite = np.isfinite(parts["total"]) and all(
            np.all(np.isfinite(np.asarray(g))) for g in grads.values()
        )
        if not finite:
            nonfinite_run += 1
            if nonfinite_run >= 3:
                raise FitFailedError(
                    f"non-finite objective or gradients in 3 consecutive "
                    f"iterations (at iteration {t})",
                    last_good=last_good,
                )
            continue
        nonfinite_run = 0

        if t < config.field_warmup:
            # Anchor phase: hold every coefficient field and the latent
            # intercepts at their calibrated start, training only the
            # damage intercept and noise scale while fixed-point sweeps
            # sharpen the posteriors. Released too early, the field
            # posteriors absorb the still-unexplained residual as a
            # blanket downward shift: soft posteriors act like a ridge
            # penalty on the coefficients (the q(1-q) variance term), and
            # a coefficient shrunk toward zero loses the observation pull
            # it needs to make its posteriors sharp again.
            for key in list(grads):
                if key not in ("w0_y", "log_we_y"):
                    del grads[key]
        if config.freeze_noise:
            for key in GLOBAL_PARAM_NAMES:
                grads.pop(key, None)
        elif t < config.noise_warmup:
            # Hold the latent intercepts and logit-noise scales at their
            # calibrated start while the observation side finds the
            # coefficient scales. The intercepts are three fast global
            # scalars; left free from the very first step they can walk a
            # hazard column into a degenerate all-on or all-off state
            # before the damage coefficients have earned any credit.
            grads.pop("w0_lat", None)
            grads.pop("we_lat", None)
        if config.freeze_kernel:
            for key in list(grads):
                if key.endswith(".log_variance") or key.endswith(".log_length"):
                    del grads[key]
        optimizer.step(state, grads)
        state.iteration = t + 1

    if last_eval_iter != state.iteration:
        run_eval(state.iteration)

    return FitResult(
        state=state,
        posterior=PosteriorGrid(q, grid.active),
        grid=grid,
        history=history,
        sweep_log=sweep_log,
        evals=evals,
        stop_reason=stop_reason,
        seconds=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# Prediction on a new grid with a fitted state.

def predict(state, grid, seed=0, mc_samples=256, max_sweeps=200, tol=1e-8):
    """Posteriors on a grid under frozen parameters.

    The grid's features are standardized with the stats stored in the
    state; activation masks use the stored prior floor. Fixed-point sweeps
    run undamped (with the same backtracking guard as the fit) until the
    largest posterior change drops below tol.
    """
    if grid.feature_stats is None:
        grid = dataclasses.replace(
            grid,
            features=state.feature_stats.apply(grid.features),
            feature_stats=state.feature_stats,
        )
    if grid.active is None:
        grid = compute_active_masks(grid, state.prior_floor)
    live_full = fields_mod.live_masks(grid)
    log_y_full = safe_log_dpm(grid, state.dpm_floor)
    n = grid.n_locations

    caches = {}
    for f_idx, name in enumerate(FIELD_NAMES):
        eps = stream(seed, PURPOSE_PREDICT, f_idx).standard_normal(
            (n, mc_samples)
        )
        caches[name] = fields_mod.draw_moments(
            state.fields[name], grid.features, mc_samples,
            noise=eps, live=live_full[name],
        )

    view = _make_view(grid, log_y_full, live_full, np.arange(n), 1.0)
    q = init_posterior(grid)
    max_delta = np.inf
    sweeps = 0
    while sweeps < max_sweeps and max_delta > tol:
        q_new, _ = e_step(view, q, caches, state.noise, 1, 1.0)
        max_delta = float(np.abs(q_new - q).max())
        q = q_new
        sweeps += 1

    field_means = {
        name: np.where(live_full[name], caches[name].mean, np.nan)
        for name in FIELD_NAMES
    }
    return PredictResult(
        grid=grid,
        posterior=PosteriorGrid(q, grid.active),
        field_means=field_means,
        sweeps=sweeps,
        max_delta=max_delta,
    )


def write_fit_log(history, path=None):
    """Fit history as CSV; returns the text when path is None."""
    lines = ["iter,elbo,obs,latent,entropy,kl,clamp_count,seconds"]
    for row in history:
        lines.append(
            f"{row['iter']},{format_float(row['elbo'])},"
            f"{format_float(row['obs'])},{format_float(row['latent'])},"
            f"{format_float(row['entropy'])},{format_float(row['kl'])},"
            f"{row['clamp_count']},{format_float(row['seconds'])}"
        )
    text = "\n".join(lines) + "\n"
    if path is None:
        return text
    from .util import atomic_write_text

    atomic_write_text(path, text)
    return None
