"""Binary model checkpoints.

Layout: 4-byte magic "GCBN", little-endian u32 format version, then a
flat sequence of named sections. Each section is a u16 name length, the
UTF-8 name, a u8 dtype tag (0 = float64, 1 = int64), a u8 ndim, ndim
little-endian u64 dims, and the row-major little-endian payload. Order
does not matter on load; unknown sections are ignored so later versions
can add fields, but a missing required section is an error.
"""

import struct

import numpy as np

from .elbo import NoiseWeights
from .exceptions import CheckpointError, CheckpointVersionError
from .fields import FIELD_NAMES, CoefficientField, MeanNetwork
from .fit import ModelState
from .flows import FlowStack
from .grid import FeatureStats
from .util import atomic_write_bytes

MAGIC = b"GCBN"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}

_FIELD_ARRAYS = (
    "points", "nn_w1", "nn_b1", "nn_w2", "nn_b2", "nn_w3", "nn_b3",
    "log_variance", "log_length", "mu_u", "low_rank", "log_diag",
    "flow_u", "flow_c", "flow_b",
)


def _encode_section(name, array):
    array = np.asarray(array)
    tag = 1 if array.dtype.kind in "iu" else 0
    payload = array.astype(_DTYPES[tag], copy=False).tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", tag, array.ndim)
    head += b"".join(struct.pack("<Q", d) for d in array.shape)
    return head + payload


def _state_sections(state):
    yield "feature_mean", state.feature_stats.mean
    yield "feature_std", state.feature_stats.std
    yield "prior_floor", np.float64(state.prior_floor)
    yield "dpm_floor", np.float64(state.dpm_floor)
    yield "iteration", np.int64(state.iteration)
    yield "w0_y", np.float64(state.noise.w0_y)
    yield "we_y", np.float64(state.noise.we_y)
    yield "w0_lat", state.noise.w0_lat
    yield "we_lat", state.noise.we_lat
    for fname in FIELD_NAMES:
        field = state.fields[fname]
        net = field.mean_net
        values = {
            "points": field.points,
            "nn_w1": net.w1, "nn_b1": net.b1,
            "nn_w2": net.w2, "nn_b2": net.b2,
            "nn_w3": net.w3, "nn_b3": np.float64(net.b3),
            "log_variance": np.float64(field.log_variance),
            "log_length": np.float64(field.log_length),
            "mu_u": field.mu_u, "low_rank": field.low_rank,
            "log_diag": field.log_diag,
            "flow_u": field.flow.u, "flow_c": field.flow.c,
            "flow_b": field.flow.b,
        }
        for pname in _FIELD_ARRAYS:
            yield f"{fname}.{pname}", values[pname]


def save_model(state, path):
    """Serialize a ModelState to a checkpoint file (atomic write)."""
    blob = MAGIC + struct.pack("<I", VERSION)
    blob += b"".join(_encode_section(n, a) for n, a in _state_sections(state))
    atomic_write_bytes(path, blob)


def _read_exact(view, offset, size, what):
    if offset + size > len(view):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return view[offset:offset + size], offset + size


def _parse_sections(blob):
    sections = {}
    offset = 8
    while offset < len(blob):
        raw, offset = _read_exact(blob, offset, 2, "a section name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(blob, offset, name_len, "a section name")
        name = raw.decode("utf-8", errors="replace")
        raw, offset = _read_exact(blob, offset, 2, f"the header of {name}")
        tag, ndim = struct.unpack("<BB", raw)
        if tag not in _DTYPES:
            raise CheckpointError(f"section {name} has unknown dtype tag {tag}")
        raw, offset = _read_exact(blob, offset, 8 * ndim, f"the dims of {name}")
        shape = struct.unpack(f"<{ndim}Q", raw) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        size = count * 8
        raw, offset = _read_exact(blob, offset, size, f"the payload of {name}")
        sections[name] = np.frombuffer(raw, dtype=_DTYPES[tag]).reshape(shape).copy()
    return sections


def load_model(path):
    """Rebuild a ModelState from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointVersionError(version, VERSION)
    sections = _parse_sections(blob)

    def take(name, shape=None):
        if name not in sections:
            raise CheckpointError(f"checkpoint is missing section {name}")
        arr = sections[name]
        if shape is not None and arr.shape != shape:
            raise CheckpointError(
                f"section {name} has shape {arr.shape}, expected {shape}"
            )
        return arr

    fields = {}
    for fname in FIELD_NAMES:
        get = lambda p: take(f"{fname}.{p}")  # noqa: E731
        net = MeanNetwork(
            w1=get("nn_w1"), b1=get("nn_b1"),
            w2=get("nn_w2"), b2=get("nn_b2"),
            w3=get("nn_w3"), b3=float(get("nn_b3")),
        )
        fields[fname] = CoefficientField(
            name=fname,
            mean_net=net,
            log_variance=float(get("log_variance")),
            log_length=float(get("log_length")),
            points=get("points"),
            mu_u=get("mu_u"),
            low_rank=get("low_rank"),
            log_diag=get("log_diag"),
            flow=FlowStack(get("flow_u"), get("flow_c"), get("flow_b")),
        )
    noise = NoiseWeights(
        w0_y=float(take("w0_y")),
        we_y=float(take("we_y")),
        w0_lat=take("w0_lat", (3,)),
        we_lat=take("we_lat", (3,)),
    )
    stats = FeatureStats(mean=take("feature_mean"), std=take("feature_std"))
    return ModelState(
        fields=fields,
        noise=noise,
        feature_stats=stats,
        prior_floor=float(take("prior_floor")),
        dpm_floor=float(take("dpm_floor")),
        iteration=int(take("iteration")),
    )
