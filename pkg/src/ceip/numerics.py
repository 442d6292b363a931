"""Fully-connected networks on flat parameter vectors, Adam, gradient clipping.

A network is described by an :class:`MlpSpec`; its trainable parameters live in a
single flat float64 array whose layout is given by :func:`param_layout`. Batch
normalization running statistics are kept outside the trainable vector in a
separate ``buffers`` array.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from ceip.autodiff import Tensor, linear

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A non-finite value appeared; ``layer`` names the offending layer when known."""

    def __init__(self, message: str, layer: int | None = None, checkpoint=None):
        super().__init__(message)
        self.layer = layer
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    batchnorm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be non-empty with positive widths")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "batchnorm": self.batchnorm,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> MlpSpec:
        return cls(d["input_dim"], tuple(d["hidden_widths"]), d["output_dim"],
                   d.get("activation", "relu"), bool(d.get("batchnorm", False)))


@dataclass(frozen=True)
class LayoutEntry:
    layer: int
    kind: str  # "weight" | "bias" | "bn_gamma" | "bn_beta"
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@lru_cache(maxsize=None)
def param_layout(spec: MlpSpec) -> tuple[LayoutEntry, ...]:
    entries = []
    offset = 0
    dims = spec.dims
    n_layers = len(dims) - 1
    for i in range(n_layers):
        shapes = [("weight", (dims[i], dims[i + 1])), ("bias", (dims[i + 1],))]
        if spec.batchnorm and i < n_layers - 1:
            shapes += [("bn_gamma", (dims[i + 1],)), ("bn_beta", (dims[i + 1],))]
        for kind, shape in shapes:
            e = LayoutEntry(i, kind, offset, shape)
            entries.append(e)
            offset += e.size
    return tuple(entries)


def n_params(spec: MlpSpec) -> int:
    last = param_layout(spec)[-1]
    return last.offset + last.size


def n_buffers(spec: MlpSpec) -> int:
    return 2 * sum(spec.hidden_widths) if spec.batchnorm else 0


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform fan-in initialization; zero biases, unit BN gains."""
    params = np.zeros(n_params(spec))
    for e in param_layout(spec):
        if e.kind == "weight":
            bound = np.sqrt(6.0 / e.shape[0])
            params[e.slice] = rng.uniform(-bound, bound, size=e.size)
        elif e.kind == "bn_gamma":
            params[e.slice] = 1.0
    return params


def init_buffers(spec: MlpSpec) -> np.ndarray | None:
    if not spec.batchnorm:
        return None
    parts = []
    for w in spec.hidden_widths:
        parts += [np.zeros(w), np.ones(w)]
    return np.concatenate(parts)


def _buffer_slices(spec: MlpSpec):
    off = 0
    for w in spec.hidden_widths:
        yield slice(off, off + w), slice(off + w, off + 2 * w)
        off += 2 * w


def _unpack(spec: MlpSpec, params: np.ndarray) -> list[dict[str, np.ndarray]]:
    layers: list[dict[str, np.ndarray]] = [{} for _ in range(len(spec.dims) - 1)]
    for e in param_layout(spec):
        layers[e.layer][e.kind] = params[e.slice].reshape(e.shape)
    return layers


def _check_input(spec: MlpSpec, x: np.ndarray) -> None:
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"expected input dim {spec.input_dim}, got {x.shape[-1]}")


def _check_finite(h: np.ndarray, layer: int) -> None:
    if not np.isfinite(h).all():
        raise NumericError(f"non-finite value in layer {layer}", layer=layer)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x, buffers: np.ndarray | None = None) -> np.ndarray:
    """Inference-mode forward pass. ``x`` may be a single vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x)
    if params.shape != (n_params(spec),):
        raise ShapeError(f"expected {n_params(spec)} params, got {params.shape}")
    h = x
    layers = _unpack(spec, params)
    bn = list(_buffer_slices(spec)) if spec.batchnorm else []
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        h = h @ layer["weight"] + layer["bias"]
        if i < last:
            if spec.batchnorm:
                mean_sl, var_sl = bn[i]
                h = (h - buffers[mean_sl]) / np.sqrt(buffers[var_sl] + BN_EPS)
                h = h * layer["bn_gamma"] + layer["bn_beta"]
            h = np.maximum(h, 0.0)
        _check_finite(h, i)
    return h


def mlp_apply(spec: MlpSpec, params: Tensor, x, buffers: np.ndarray | None = None,
              training: bool = False) -> tuple[Tensor, np.ndarray | None]:
    """Differentiable forward pass on a batch.

    Returns the output tensor and the updated BN buffers (training mode) or the
    unchanged buffers (inference mode).
    """
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    _check_input(spec, x.data)
    if params.shape != (n_params(spec),):
        raise ShapeError(f"expected {n_params(spec)} params, got {params.shape}")
    layout = param_layout(spec)
    views: list[dict[str, Tensor]] = [{} for _ in range(len(spec.dims) - 1)]
    for e in layout:
        views[e.layer][e.kind] = params[e.slice].reshape(*e.shape)
    new_buffers = None if buffers is None else buffers.copy()
    bn = list(_buffer_slices(spec)) if spec.batchnorm else []
    h = x
    last = len(views) - 1
    for i, v in enumerate(views):
        h = linear(h, v["weight"], v["bias"])
        if i < last:
            if spec.batchnorm:
                mean_sl, var_sl = bn[i]
                if training:
                    mu = h.mean(axis=0, keepdims=True)
                    centered = h - mu
                    var = centered.square().mean(axis=0, keepdims=True)
                    h = centered / (var + BN_EPS).sqrt()
                    n = h.shape[0]
                    unbiased = var.data[0] * (n / max(n - 1, 1))
                    new_buffers[mean_sl] = (1 - BN_MOMENTUM) * new_buffers[mean_sl] + BN_MOMENTUM * mu.data[0]
                    new_buffers[var_sl] = (1 - BN_MOMENTUM) * new_buffers[var_sl] + BN_MOMENTUM * unbiased
                else:
                    h = (h - buffers[mean_sl]) / np.sqrt(buffers[var_sl] + BN_EPS)
                h = h * v["bn_gamma"] + v["bn_beta"]
            h = h.relu()
        _check_finite(h.data, i)
    return h, new_buffers


def grad_scalar(objective: Callable[[Tensor], Tensor], params: np.ndarray) -> np.ndarray:
    """Gradient of a scalar objective with respect to a flat parameter vector."""
    p = Tensor(np.array(params, dtype=np.float64), requires_grad=True)
    value = objective(p)
    if value.data.size != 1:
        raise ShapeError("objective must return a scalar")
    if not np.isfinite(value.data).all():
        raise NumericError("non-finite objective value")
    value.backward()
    g = np.zeros_like(p.data) if p.grad is None else p.grad
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient")
    return g


def value_and_grad(objective: Callable[[Tensor], Tensor], params: np.ndarray) -> tuple[float, np.ndarray]:
    p = Tensor(np.array(params, dtype=np.float64), requires_grad=True)
    value = objective(p)
    if not np.isfinite(value.data).all():
        raise NumericError("non-finite objective value")
    value.backward()
    g = np.zeros_like(p.data) if p.grad is None else p.grad
    return float(value.data), g


def finite_difference_grad(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences; used as an independent check on reverse mode."""
    params = np.array(params, dtype=np.float64)
    g = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        fp = f(params)
        params[i] = orig - h
        fm = f(params)
        params[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    if not (params.shape == grads.shape == state.first_moment.shape):
        raise ShapeError("params, grads and Adam moments must have equal length")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named float64 arrays as one flat little-endian block after a JSON header line."""
    entries = {}
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries[name] = {"offset": offset, "length": int(arr.size), "shape": list(arr.shape)}
        offset += arr.size
        chunks.append(arr.ravel())
    header = {"format": "ceip-params", "version": CHECKPOINT_VERSION,
              "entries": entries, "meta": dict(meta or {})}
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != "ceip-params":
        raise ValueError(f"{path}: not a parameter checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = np.frombuffer(raw[nl + 1:], dtype="<f8")
    arrays = {}
    for name, e in header["entries"].items():
        arrays[name] = blob[e["offset"]:e["offset"] + e["length"]].reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def params_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
