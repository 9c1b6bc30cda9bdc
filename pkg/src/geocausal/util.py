"""Small numeric helpers shared across the package."""

import os
import tempfile

import numpy as np

# Posteriors are clamped into [Q_MIN, 1 - Q_MIN] so entropies and logits
# stay finite.
Q_MIN = 1e-6

# Arguments of exp() in moment caches are clamped into [-EXP_CLAMP, EXP_CLAMP].
EXP_CLAMP = 30.0


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def clamp_q(q):
    """Clamp probabilities into the open unit interval used everywhere."""
    return np.clip(q, Q_MIN, 1.0 - Q_MIN)


def stream(*key):
    """Deterministic Generator keyed by a tuple of non-negative integers.

    Every random draw in the package goes through one of these streams, so
    any quantity is a pure function of (seed, purpose, iteration, ...).
    """
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


# Stream purpose codes. Values are arbitrary but frozen: changing them
# changes every seeded result.
PURPOSE_INIT = 101
PURPOSE_NOISE = 102
PURPOSE_EVAL = 103
PURPOSE_EPOCH = 104
PURPOSE_PREDICT = 105
PURPOSE_INDUCING = 106
PURPOSE_SYNTH = 107
PURPOSE_LENGTH = 108


def atomic_write_text(path, text):
    """Write text to path via a temp file + rename so readers never see
    a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(x):
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))
