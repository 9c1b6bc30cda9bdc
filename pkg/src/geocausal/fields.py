"""Per-edge coefficient fields: GP latents warped by planar flows.

Each causal coefficient (three lambda fields into the observation, four
gamma fields between latent nodes) is a spatial random field: a sparse-GP
latent with a feedforward prior mean over the standardized features,
pushed through a scalar planar-flow stack shared across locations. The
fit consumes the fields only through per-location Monte-Carlo moment
caches (MomentSamples).
"""

import dataclasses

import numpy as np

from . import flows, gp
from .exceptions import ValidationError
from .util import EXP_CLAMP, stream

# Order is load-bearing: checkpoints and optimizer state iterate fields in
# this declaration order.
FIELD_NAMES = ("lam_ls", "lam_lf", "lam_bd", "gam_als", "gam_alf", "gam_ls", "gam_lf")

HIDDEN = 32


@dataclasses.dataclass
class MeanNetwork:
    """Feedforward prior mean: features -> 32 -> 32 -> 1 with tanh hidden
    layers and a linear output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: float

    @classmethod
    def init(cls, in_dim, rng):
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, HIDDEN)),
            b1=np.zeros(HIDDEN),
            w2=rng.normal(0.0, 1.0 / np.sqrt(HIDDEN), size=(HIDDEN, HIDDEN)),
            b2=np.zeros(HIDDEN),
            w3=rng.normal(0.0, 1.0 / np.sqrt(HIDDEN), size=HIDDEN),
            b3=0.0,
        )

    def forward(self, x):
        h1 = np.tanh(x @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        return h2 @ self.w3 + self.b3

    def forward_tape(self, x):
        h1 = np.tanh(x @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        return h2 @ self.w3 + self.b3, (x, h1, h2)

    def backward(self, tape, cot_out):
        """Parameter gradients given the cotangent of the outputs."""
        x, h1, h2 = tape
        d_w3 = h2.T @ cot_out
        d_b3 = float(np.sum(cot_out))
        da2 = np.outer(cot_out, self.w3) * (1.0 - h2 * h2)
        d_w2 = h1.T @ da2
        d_b2 = da2.sum(axis=0)
        da1 = (da2 @ self.w2.T) * (1.0 - h1 * h1)
        d_w1 = x.T @ da1
        d_b1 = da1.sum(axis=0)
        return {
            "nn_w1": d_w1,
            "nn_b1": d_b1,
            "nn_w2": d_w2,
            "nn_b2": d_b2,
            "nn_w3": d_w3,
            "nn_b3": np.array([d_b3]),
        }


@dataclasses.dataclass
class CoefficientField:
    """One named coefficient field with its learnable state.

    Positivity-constrained quantities (kernel variance and length scale,
    covariance diagonal) are stored in log space; the flow stack stores the
    raw parameters and is invertibility-enforced at evaluation time.
    """

    name: str
    mean_net: MeanNetwork
    log_variance: float
    log_length: float
    points: np.ndarray
    mu_u: np.ndarray
    low_rank: np.ndarray
    log_diag: np.ndarray
    flow: flows.FlowStack

    def hyper(self):
        return gp.MaternHyper(
            variance=float(np.exp(self.log_variance)),
            length_scale=float(np.exp(self.log_length)),
        )

    def q_u(self):
        return gp.VariationalGaussian(
            mean=self.mu_u, low_rank=self.low_rank, diag=np.exp(self.log_diag)
        )

    def inducing(self):
        return gp.InducingSet(points=self.points, q_u=self.q_u())

    def conditional(self, features, workspace=False):
        """Sparse conditional moments at features, prior means from the
        mean network."""
        prior_t = self.mean_net.forward(features)
        prior_u = self.mean_net.forward(self.points)
        return gp.sparse_conditional(
            self.inducing(), self.hyper(), features, prior_u, prior_t,
            workspace=workspace,
        )


@dataclasses.dataclass
class MomentSamples:
    """Per-location Monte-Carlo draws of a coefficient with cached moments.

    Rows outside ``live`` hold neutral fill values (0 for draws and raw
    moments, 1 for exponential moments) so masked arithmetic stays finite.
    Every cached scalar is the sample mean of the stored draws.
    """

    draws: np.ndarray
    eps: np.ndarray
    live: np.ndarray
    mean: np.ndarray
    second: np.ndarray
    exp_pos: np.ndarray
    exp_neg: np.ndarray
    clamp_count: int

    @property
    def m_samples(self):
        return self.draws.shape[1]

    def scaled_exp(self, scale):
        """E[exp(+scale*v)] and E[exp(-scale*v)] per location from the
        stored draws, with the same exponent clamp as the cached moments.

        Used for the alpha-parent bound where the parent value multiplying
        gamma is the prior probability itself.
        """
        scale = np.asarray(scale, dtype=float)[:, None]
        arg = np.clip(scale * self.draws, -EXP_CLAMP, EXP_CLAMP)
        pos = np.exp(arg).mean(axis=1)
        neg = np.exp(-arg).mean(axis=1)
        pos = np.where(self.live, pos, 1.0)
        neg = np.where(self.live, neg, 1.0)
        return pos, neg


def draw_moments(field, features, m_samples, seed=None, noise=None, live=None):
    """Sample the field at each live location and cache its moments.

    Draws z from the sparse conditional (prior mean from the mean network,
    marginal variance from the conditional, independent per-location,
    per-sample noise), pushes z through the enforced flow stack, and stores
    the draws together with E[v], E[v^2], E[exp(v)], E[exp(-v)]. Exactly
    one of seed / noise selects the standard-normal input: a seed is
    deterministic (same seed, same cache), or the caller passes the (n, m)
    noise matrix directly.
    """
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if (seed is None) == (noise is None):
        raise ValidationError("pass exactly one of seed / noise")
    if noise is None:
        noise = stream(seed).standard_normal((n, m_samples))
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (n, m_samples):
        raise ValidationError("noise must have shape (n_locations, m_samples)")
    if live is None:
        live = np.ones(n, dtype=bool)

    draws = np.zeros((n, m_samples))
    eps = np.zeros((n, m_samples))
    if live.any():
        sub = features[live]
        mean, var = field.conditional(sub)
        z = mean[:, None] + np.sqrt(var)[:, None] * noise[live]
        v = flows.stack_value(z, flows.enforce_stack(field.flow))
        draws[live] = v
        eps[live] = noise[live]

    clamped = np.abs(draws[live]) > EXP_CLAMP if live.any() else np.zeros(0, bool)
    arg = np.clip(draws, -EXP_CLAMP, EXP_CLAMP)
    mean_v = np.where(live, draws.mean(axis=1), 0.0)
    second = np.where(live, (draws * draws).mean(axis=1), 0.0)
    exp_pos = np.where(live, np.exp(arg).mean(axis=1), 1.0)
    exp_neg = np.where(live, np.exp(-arg).mean(axis=1), 1.0)
    return MomentSamples(
        draws=draws,
        eps=eps,
        live=np.asarray(live, dtype=bool).copy(),
        mean=mean_v,
        second=second,
        exp_pos=exp_pos,
        exp_neg=exp_neg,
        clamp_count=int(np.count_nonzero(clamped)),
    )


def live_masks(grid):
    """Where each field's ELBO contributions are structurally nonzero.

    A lambda field matters where its node is active and an observation is
    present; a gamma field into a latent node matters where the target
    node is active (and, for the LS/LF -> BD edges, where the parent is
    active too, since a pinned q = 0 parent contributes the neutral
    mixture factor 1).
    """
    if grid.active is None:
        raise ValidationError("grid needs active masks (compute_active_masks)")
    act = grid.active
    present = grid.dpm_present
    return {
        "lam_ls": act[:, 0] & present,
        "lam_lf": act[:, 1] & present,
        "lam_bd": act[:, 2] & present,
        "gam_als": act[:, 0].copy(),
        "gam_alf": act[:, 1].copy(),
        "gam_ls": act[:, 2] & act[:, 0],
        "gam_lf": act[:, 2] & act[:, 1],
    }


def field_posterior_mean_map(field, features, live, m_samples, seed):
    """Posterior-mean surface of a field; inactive locations get nan."""
    cache = draw_moments(field, features, m_samples, seed=seed, live=live)
    out = np.where(live, cache.mean, np.nan)
    return out
