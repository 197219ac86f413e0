"""Neural building blocks on top of the tape engine: MLP, GRU cell, Adam.

Parameters live in a :class:`ParamStore` as named float64 arrays together
with their Adam moment buffers.  A forward pass snapshots the store onto a
tape via :meth:`ParamStore.tensors`; gradients come back keyed by node id and
are mapped to names with :func:`collect_grads`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MlpSpec:
    """Layer widths and activations of a fully connected network.

    ``widths`` includes input and output, e.g. ``[3, 32, 32, 2]``.
    """

    widths: list[int]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.hidden_activation not in ("tanh", "softplus", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_activation not in ("tanh", "softplus", "identity"):
            raise ValueError(f"unknown activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class GruSpec:
    input_width: int
    hidden_width: int

    def __post_init__(self):
        if self.input_width <= 0 or self.hidden_width <= 0:
            raise ValueError("GRU widths must be positive")


class ParamStore:
    """Named parameter arrays with per-parameter Adam moments."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self._params[name] = value
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def n_parameters(self) -> int:
        return sum(v.size for v in self._params.values())

    def tensors(self, tape) -> dict[str, np.ndarray | Tensor]:
        """Immutable snapshot of all parameters for one forward pass.

        With ``tape=None`` the raw arrays are returned (evaluation mode).
        """
        if tape is None:
            return dict(self._params)
        return {name: tape.leaf(value) for name, value in self._params.items()}

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self._params.items():
            other.add(name, value.copy())
            other._m[name] = self._m[name].copy()
            other._v[name] = self._v[name].copy()
        other.step = self.step
        return other


def collect_grads(leaves: dict[str, Tensor], gradmap: dict[int, np.ndarray]):
    """Map a backward() result onto parameter names (zeros where unused)."""
    out = {}
    for name, leaf in leaves.items():
        g = gradmap.get(leaf.node_id)
        out[name] = np.zeros_like(leaf.value) if g is None else g
    return out


def accumulate_grads(total: dict[str, np.ndarray] | None, new: dict[str, np.ndarray]):
    if total is None:
        return {k: v.copy() for k, v in new.items()}
    for k, v in new.items():
        total[k] += v
    return total


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grads_by_global_norm(grads, max_norm: float = 10.0):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update over all parameters in the store."""
    for name in store.names():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != store[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    store.step += 1
    t = store.step
    for name in store.names():
        g = grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store._params[name] = store._params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# MLP


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng, zero_final=False):
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init; optional zero last layer.

    Zeroing the final layer of drift networks starts training from the
    prior-equals-posterior regime (all Girsanov log-weights exactly zero).
    """
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(1.0 / fan_in)
        if zero_final and i == spec.n_layers - 1:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", b)


def _activate(name: str, x):
    if name == "tanh":
        return ad.tanh(x)
    if name == "softplus":
        return ad.softplus(x)
    return x


def mlp_apply(spec: MlpSpec, params, prefix: str, x):
    """Affine + activation composition; input is 1-D or (batch, in)."""
    if ad.value_of(x).shape[-1] != spec.widths[0]:
        raise ValueError("MLP input width mismatch")
    h = x
    for i in range(spec.n_layers):
        h = ad.matmul(h, params[f"{prefix}.w{i}"]) + params[f"{prefix}.b{i}"]
        act = (
            spec.output_activation
            if i == spec.n_layers - 1
            else spec.hidden_activation
        )
        h = _activate(act, h)
    return h


def mlp_jvp(spec: MlpSpec, params, prefix: str, x, v):
    """Forward value and directional derivative J @ v in one pass.

    The tangent ``v`` has the same shape as ``x`` and propagates through the
    same affine layers with the activation derivative applied elementwise, so
    the result stays on the tape and is differentiable w.r.t. the parameters.
    """
    h, dh = x, v
    for i in range(spec.n_layers):
        w = params[f"{prefix}.w{i}"]
        pre = ad.matmul(h, w) + params[f"{prefix}.b{i}"]
        dpre = ad.matmul(dh, w)
        act = (
            spec.output_activation
            if i == spec.n_layers - 1
            else spec.hidden_activation
        )
        if act == "tanh":
            h = ad.tanh(pre)
            dh = dpre * (1.0 - ad.square(h))
        elif act == "softplus":
            h = ad.softplus(pre)
            dh = dpre * ad.sigmoid(pre)
        else:
            h, dh = pre, dpre
    return h, dh


# ---------------------------------------------------------------------------
# GRU cell


def init_gru(store: ParamStore, prefix: str, spec: GruSpec, rng):
    n_in, n_h = spec.input_width, spec.hidden_width
    bound_x = np.sqrt(1.0 / n_in)
    bound_h = np.sqrt(1.0 / n_h)
    for gate in ("r", "z", "n"):
        store.add(f"{prefix}.wx_{gate}", rng.uniform(-bound_x, bound_x, (n_in, n_h)))
        store.add(f"{prefix}.wh_{gate}", rng.uniform(-bound_h, bound_h, (n_h, n_h)))
        store.add(f"{prefix}.b_{gate}", np.zeros(n_h))


def gru_step(spec: GruSpec, params, prefix: str, x, state):
    """Standard GRU update with reset, update, and candidate gates."""
    if ad.value_of(x).shape[-1] != spec.input_width:
        raise ValueError("GRU input width mismatch")
    if ad.value_of(state).shape[-1] != spec.hidden_width:
        raise ValueError("GRU state width mismatch")
    r = ad.sigmoid(
        ad.matmul(x, params[f"{prefix}.wx_r"])
        + ad.matmul(state, params[f"{prefix}.wh_r"])
        + params[f"{prefix}.b_r"]
    )
    z = ad.sigmoid(
        ad.matmul(x, params[f"{prefix}.wx_z"])
        + ad.matmul(state, params[f"{prefix}.wh_z"])
        + params[f"{prefix}.b_z"]
    )
    n = ad.tanh(
        ad.matmul(x, params[f"{prefix}.wx_n"])
        + ad.matmul(r * state, params[f"{prefix}.wh_n"])
        + params[f"{prefix}.b_n"]
    )
    return (1.0 - z) * n + z * state


# ---------------------------------------------------------------------------
# checkpoint format
#
# Layout (little endian):
#   magic b"CLPF", version u32
#   n_params u32, then per parameter:
#     name_len u32, name utf-8, rank u32, dims u64..., float64 data
#   adam step u64
#   the m-moments and v-moments repeated in the same array layout

_MAGIC = b"CLPF"
_VERSION = 1


def _write_array(fh, name: str, value: np.ndarray):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", value.ndim))
    for dim in value.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _read_array(fh):
    (name_len,) = struct.unpack("<I", fh.read(4))
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def save_checkpoint(store: ParamStore, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(store.names())))
        for name in store.names():
            _write_array(fh, name, store[name])
        fh.write(struct.pack("<Q", store.step))
        for name in store.names():
            _write_array(fh, name, store._m[name])
        for name in store.names():
            _write_array(fh, name, store._v[name])


def load_checkpoint(path: str) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        for _ in range(n):
            name, value = _read_array(fh)
            store.add(name, value)
        (store.step,) = struct.unpack("<Q", fh.read(8))
        for _ in range(n):
            name, value = _read_array(fh)
            store._m[name] = value
        for _ in range(n):
            name, value = _read_array(fh)
            store._v[name] = value
    return store
