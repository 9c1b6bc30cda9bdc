"""Scalar planar flows used to warp per-location GP latents.

A layer maps z -> z + u_hat * tanh(c z + b) with log|dv/dz| =
log|1 + u_hat c (1 - tanh^2(c z + b))|. Invertibility requires
u_hat * c > -1; raw parameters are reparameterized so the product is
-1 + softplus(u c), floored at -1 + MARGIN.
"""

import dataclasses

import numpy as np

from .exceptions import ValidationError
from .util import sigmoid, softplus

MARGIN = 1e-6

# softplus(A_STAR) == 1, so an enforced layer with u*c near A_STAR has
# u_hat*c near 0 and is near-identity.
A_STAR = float(np.log(np.e - 1.0))


@dataclasses.dataclass
class PlanarLayer:
    u: float
    c: float
    b: float


@dataclasses.dataclass
class FlowStack:
    """Depth-K stack stored as parameter arrays; K = 0 is the identity."""

    u: np.ndarray
    c: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if not (self.u.shape == self.c.shape == self.b.shape):
            raise ValidationError("flow parameter arrays must share a shape")

    @property
    def depth(self):
        return self.u.shape[0]

    def layer(self, k):
        return PlanarLayer(float(self.u[k]), float(self.c[k]), float(self.b[k]))


def identity_stack(depth=0):
    return FlowStack(np.zeros(depth), np.zeros(depth), np.zeros(depth))


def init_stack(depth, rng):
    """Random near-identity stack.

    The invertibility reparameterization pins u_hat*c = softplus(u*c) - 1,
    so u*c is placed near A_STAR (where that product vanishes) instead of
    near zero; see the enforcement notes in enforce_invertibility. c is
    kept order-one: the enforcement divides by c, so a small |c| paired
    with the matching large |u| = A_STAR/|c| would sit next to that pole
    and one optimizer step on c could blow the effective u up.
    """
    sign = np.where(rng.random(depth) < 0.5, -1.0, 1.0)
    c = sign * rng.uniform(0.5, 1.5, size=depth)
    u = (A_STAR + rng.normal(0.0, 0.005, size=depth)) / c
    return FlowStack(u, c, np.zeros(depth))


def _enforced_u(u, c):
    """Effective u after enforcement, with its partials wrt raw u and c.

    For c != 0:  u_hat = u + (t - u c) / c  with  t = softplus(u c) - 1
    floored at -1 + MARGIN, which makes u_hat * c = t > -1 always.
    For c == 0 the layer is returned unchanged.
    """
    u = np.asarray(u, dtype=float)
    c = np.asarray(c, dtype=float)
    a = u * c
    t = softplus(a) - 1.0
    floored = t < (-1.0 + MARGIN)
    t = np.where(floored, -1.0 + MARGIN, t)
    sig = np.where(floored, 0.0, sigmoid(a))
    nonzero = c != 0.0
    safe_c = np.where(nonzero, c, 1.0)
    u_hat = np.where(nonzero, u + (t - a) / safe_c, u)
    du = np.where(nonzero, sig, 1.0)
    dc = np.where(nonzero, (sig - 1.0) * u / safe_c - (t - a) / safe_c**2, 0.0)
    return u_hat, du, dc


def enforce_invertibility(layer):
    """Return the layer with u replaced by its invertibility-safe value."""
    u_hat, _, _ = _enforced_u(layer.u, layer.c)
    return PlanarLayer(float(u_hat), layer.c, layer.b)


def enforce_stack(stack):
    u_hat, _, _ = _enforced_u(stack.u, stack.c)
    return FlowStack(u_hat, stack.c.copy(), stack.b.copy())


def enforce_stack_with_chain(stack):
    """Enforced stack plus d(u_hat)/du and d(u_hat)/dc for backprop."""
    u_hat, du, dc = _enforced_u(stack.u, stack.c)
    return FlowStack(u_hat, stack.c.copy(), stack.b.copy()), du, dc


def planar_forward(z, layer):
    """(value, logdet) of one enforced layer at z (scalar or array)."""
    z = np.asarray(z, dtype=float)
    t = np.tanh(layer.c * z + layer.b)
    value = z + layer.u * t
    arg = 1.0 + layer.u * layer.c * (1.0 - t * t)
    logdet = np.log(np.maximum(np.abs(arg), MARGIN))
    return value, logdet


def stack_forward(z, stack):
    """(value, summed logdet) of an enforced stack at z."""
    z = np.asarray(z, dtype=float)
    logdet = np.zeros_like(z)
    v = z
    for k in range(stack.depth):
        v, ld = planar_forward(v, stack.layer(k))
        logdet = logdet + ld
    return v, logdet


def stack_value(z, stack):
    """Value-only fast path (moment draws never need the logdet)."""
    v = np.asarray(z, dtype=float)
    for k in range(stack.depth):
        v = v + stack.u[k] * np.tanh(stack.c[k] * v + stack.b[k])
    return v


def transformed_log_density(z, base_logpdf, stack):
    """Log density of the pushforward through an enforced stack, evaluated
    at the image point stack(z) of the base point z."""
    _, logdet = stack_forward(z, stack)
    return base_logpdf(np.asarray(z, dtype=float)) - logdet


def stack_forward_tape(z, stack):
    """Value plus the per-layer inputs needed for the backward pass."""
    v = np.asarray(z, dtype=float)
    inputs = []
    for k in range(stack.depth):
        inputs.append(v)
        v = v + stack.u[k] * np.tanh(stack.c[k] * v + stack.b[k])
    return v, inputs


def stack_backward(stack, inputs, cot_value):
    """Reverse pass through an enforced stack.

    Given the cotangent of the stack output, returns (cot_z, d_u_hat, d_c,
    d_b) where the parameter gradients are summed over all elements of z.
    d_c here is only the direct dependence through tanh(c z + b); the
    enforcement chain from u_hat back to raw (u, c) is applied by the
    caller via enforce_stack_with_chain.
    """
    cot = np.asarray(cot_value, dtype=float)
    k_depth = stack.depth
    d_u_hat = np.zeros(k_depth)
    d_c = np.zeros(k_depth)
    d_b = np.zeros(k_depth)
    for k in range(k_depth - 1, -1, -1):
        zk = inputs[k]
        t = np.tanh(stack.c[k] * zk + stack.b[k])
        d_u_hat[k] = float(np.sum(cot * t))
        da = cot * stack.u[k] * (1.0 - t * t)
        d_c[k] = float(np.sum(da * zk))
        d_b[k] = float(np.sum(da))
        cot = cot + da * stack.c[k]
    return cot, d_u_hat, d_c, d_b
