"""Dense feed-forward nets with hand-written backprop and Adam.

Everything runs in float64. Dropout is inverted dropout applied to the input
of a layer, so inference needs no rescaling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
PROB_CLAMP = 1e-12
MAGIC = b"HBNN"
VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight/bias shapes do not match")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a net needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def param_paths(self) -> list[str]:
        out = []
        for i in range(len(self.layers)):
            out += [f"layers.{i}.weight", f"layers.{i}.bias"]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.dropout) for l in self.layers]
        )

    def architecture(self) -> list[dict]:
        return [
            {"in": l.n_in, "out": l.n_out, "activation": l.activation, "dropout": l.dropout}
            for l in self.layers
        ]


def init_net(
    dims: Sequence[int],
    rng: np.random.Generator,
    dropout: float | Sequence[float] = 0.0,
    hidden_activation: str = "relu",
) -> DenseNet:
    """Glorot-uniform weights, zero biases, sigmoid output."""
    n = len(dims) - 1
    drops = [dropout] * n if np.isscalar(dropout) else list(dropout)
    layers = []
    for i in range(n):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "sigmoid" if i == n - 1 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act, float(drops[i])))
    return DenseNet(layers)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _apply(act: str, z: np.ndarray) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return _sigmoid(z)
    return z


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # post-dropout layer inputs
    masks: list[np.ndarray | None] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None

    @property
    def logit(self) -> np.ndarray:
        return self.pre[-1][:, 0]


def forward(
    net: DenseNet,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run ``x`` (a vector or a batch of row vectors) through ``net``.

    Returns the scalar output per row (probability when the last activation is
    sigmoid) and the cache needed by :func:`bce_grad`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.n_in:
        raise ValueError(f"input dimension mismatch: expected {net.n_in}, got {h.shape[1]}")
    if train and rng is None and any(l.dropout > 0 for l in net.layers):
        raise ValueError("train-mode forward with dropout needs an rng")
    cache = ForwardCache()
    for layer in net.layers:
        mask = None
        if train and layer.dropout > 0:
            keep = 1.0 - layer.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        cache.inputs.append(h)
        cache.masks.append(mask)
        z = h @ layer.weight.T + layer.bias
        cache.pre.append(z)
        h = _apply(layer.activation, z)
    out = h[:, 0] if h.shape[1] == 1 else h
    cache.output = out
    return (out[0] if single else out), cache


def bce_grad(
    net: DenseNet,
    cache: ForwardCache,
    labels,
    weights=1.0,
) -> tuple[list[np.ndarray], float]:
    """Gradients of ``sum(weight * BCE(output, label))`` for every parameter.

    The last layer must be a single sigmoid unit.
    """
    last = net.layers[-1]
    if last.activation != "sigmoid" or last.n_out != 1:
        raise ValueError("bce_grad needs a single sigmoid output unit")
    p = cache.output
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), p.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), p.shape)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.sum(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))

    delta = (w * (p - y))[:, None]  # dL/dz at the output
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        grads[2 * i] = delta.T @ cache.inputs[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        dh = delta @ layer.weight
        if cache.masks[i] is not None:
            dh = dh * cache.masks[i]
        prev = net.layers[i - 1]
        if prev.activation == "relu":
            dh = dh * (cache.pre[i - 1] > 0)
        elif prev.activation == "sigmoid":
            s = _sigmoid(cache.pre[i - 1])
            dh = dh * s * (1.0 - s)
        delta = dh
    return grads, loss


@dataclass
class AdamState:
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    paths: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """One in-place Adam update with decoupled weight decay (lr * wd * param)."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g) or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            where = paths[i] if paths else f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient in {where}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if state.weight_decay:
            update = update + state.learning_rate * state.weight_decay * p
        p -= update
    return params


def train_binary(
    net: DenseNet,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    weight_decay: float,
    rng: np.random.Generator,
) -> list[float]:
    """Minibatch BCE training (mean loss per batch). Returns per-epoch total loss."""
    state = AdamState(learning_rate=learning_rate, weight_decay=weight_decay)
    n = len(y)
    history = []
    paths = net.param_paths()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, cache = forward(net, x[idx], train=True, rng=rng)
            grads, loss = bce_grad(net, cache, y[idx], 1.0 / len(idx))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {start // batch_size}")
            adam_step(state, net.params(), grads, paths)
            total += loss * len(idx)
        history.append(total)
    return history


# -- checkpoints -------------------------------------------------------------


def save_net(net: DenseNet, path: str | Path, seed: int | None = None, extra: dict | None = None) -> None:
    """Write ``<path>`` (binary parameters) and ``<path>.json`` (architecture)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    meta = {"architecture": net.architecture(), "seed": seed}
    if extra:
        meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_net(path: str | Path) -> DenseNet:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    buf = np.frombuffer(raw[8:], dtype="<f8")
    layers, pos = [], 0
    for spec in meta["architecture"]:
        n_w = spec["out"] * spec["in"]
        w = buf[pos : pos + n_w].reshape(spec["out"], spec["in"]).copy()
        pos += n_w
        b = buf[pos : pos + spec["out"]].copy()
        pos += spec["out"]
        layers.append(Layer(w, b, spec["activation"], spec["dropout"]))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing data in checkpoint")
    return DenseNet(layers)
