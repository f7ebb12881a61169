"""Dense float64 MLPs with hand-written reverse mode and Adam.

Matrices are plain ``numpy.ndarray`` objects (row-major float64). A network
maps a batch ``x`` of shape ``(n, in)`` to ``(n, out)``; hidden layers use
the configured activation, the output layer is linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"ISEPNN1"


class NonFiniteError(FloatingPointError):
    """Raised as soon as a NaN/Inf shows up in a forward pass or a gradient."""


class StaleTapeError(RuntimeError):
    pass


def mish(x):
    """x * tanh(softplus(x)); softplus via logaddexp so |x| up to 700 is safe."""
    return x * np.tanh(np.logaddexp(0.0, x))


def _mish_grad(x):
    sp = np.logaddexp(0.0, x)
    th = np.tanh(sp)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return th + x * (1.0 - th * th) * sig


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "mish":
        return mish(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return _mish_grad(z)


@dataclass
class MlpParams:
    """Weights ``(out, in)`` and biases per layer, plus Adam moments.

    All parameters live in one contiguous buffer ``theta`` (weights of every
    layer, then biases); ``weights`` and ``biases`` are views into it, so Adam
    and Polyak updates are single vector operations.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    step: int = 0
    version: int = 0

    def __post_init__(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i}: parameter shapes do not match layer_sizes {self.layer_sizes}")
        self.theta = np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])
        self.weights, self.biases = self._views(self.theta)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.theta)
            self.adam_v = np.zeros_like(self.theta)

    def _views(self, buf: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws, bs, k = [], [], 0
        sizes = self.layer_sizes
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            ws.append(buf[k:k + fi * fo].reshape(fo, fi))
            k += fi * fo
        for fo in sizes[1:]:
            bs.append(buf[k:k + fo])
            k += fo
        return ws, bs

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation, self.adam_m.copy(), self.adam_v.copy(), self.step)

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, theta: np.ndarray) -> None:
        self.theta[...] = theta
        self.version += 1


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def __add__(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, c: float) -> "MlpGrads":
        return MlpGrads([c * w for w in self.weights], [c * b for b in self.biases])

    @staticmethod
    def zeros_like(net: MlpParams) -> "MlpGrads":
        return MlpGrads([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


@dataclass
class Tape:
    net_id: int
    version: int
    batched: bool
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of hidden layers
    post: list[np.ndarray]


def init_mlp(
    layer_sizes: list[int],
    rng: SplitMix64,
    activation: str = "relu",
    zero_last: bool = False,
) -> MlpParams:
    """Glorot-uniform weights, zero biases; optionally zero the output layer."""
    if activation not in ("relu", "tanh", "mish"):
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform_range(-limit, limit, (fan_out, fan_in))
        if zero_last and i == len(layer_sizes) - 2:
            w = np.zeros((fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases, activation)


def mlp_forward(net: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input width {h.shape[1]} != layer_sizes[0]={net.layer_sizes[0]}")
    inputs, pre, post = [], [], []
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < last:
            h = _act(net.activation, z)
            pre.append(z)
            post.append(h)
        else:
            h = z
    if not np.all(np.isfinite(h)):
        raise NonFiniteError(f"non-finite output from network {net.layer_sizes}")
    tape = Tape(id(net), net.version, batched, inputs, pre, post)
    return (h if batched else h[0]), tape


def mlp_apply(net: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping the tape."""
    return mlp_forward(net, x)[0]


def mlp_backward(net: MlpParams, tape: Tape, output_grad: np.ndarray) -> MlpGrads:
    """Gradient of ``sum(output * output_grad)`` w.r.t. every parameter and the input."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTapeError("tape does not belong to the current parameters of this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    gw = [None] * net.n_layers
    gb = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        if i < net.n_layers - 1:
            g = g * _act_grad(net.activation, tape.pre[i], tape.post[i])
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    return MlpGrads(gw, gb, g if tape.batched else g[0])


def adam_update(param, grad, m, v, step: int, lr: float) -> None:
    """One in-place Adam update of ``param`` given moments ``m``/``v`` and 1-based ``step``."""
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    mhat = m / (1.0 - ADAM_BETA1**step)
    vhat = v / (1.0 - ADAM_BETA2**step)
    param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def adam_step(net: MlpParams, grads: MlpGrads, lr: float) -> MlpParams:
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != net.weights[i].shape or gb.shape != net.biases[i].shape:
            raise ValueError(f"layer {i}: gradient shape mismatch")
    g = grads.flat()
    if not np.all(np.isfinite(g)):
        bad = next(i for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases))
                   if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))))
        raise NonFiniteError(f"non-finite gradient in layer {bad} of network {net.layer_sizes}")
    net.step += 1
    adam_update(net.theta, g, net.adam_m, net.adam_v, net.step, lr)
    net.version += 1
    return net


@dataclass
class AdamVector:
    """Adam state for a free parameter vector (e.g. a policy's log-std)."""

    value: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.value)
            self.v = np.zeros_like(self.value)

    def update(self, grad: np.ndarray, lr: float) -> None:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient for vector parameter")
        self.step += 1
        adam_update(self.value, grad, self.m, self.v, self.step, lr)

    def copy(self) -> "AdamVector":
        return AdamVector(self.value.copy(), self.m.copy(), self.v.copy(), self.step)


def polyak_blend(target: MlpParams, live: MlpParams, rho: float) -> None:
    """target <- rho * target + (1 - rho) * live, in place."""
    target.theta *= rho
    target.theta += (1.0 - rho) * live.theta
    target.version += 1


def save_mlp(net: MlpParams, path: str | Path) -> None:
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w in net.weights:
            fh.write(w.astype("<f8").tobytes())
        for b in net.biases:
            fh.write(b.astype("<f8").tobytes())


def load_mlp(path: str | Path, activation: str = "relu") -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:7] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", raw, 7)
    sizes = list(struct.unpack_from(f"<{count}I", raw, 11))
    off = 11 + 4 * count
    floats = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    expected = sum(a * b for a, b in zip(sizes[:-1], sizes[1:])) + sum(sizes[1:])
    if floats.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {floats.size}")
    weights, biases, k = [], [], 0
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        weights.append(floats[k:k + fi * fo].reshape(fo, fi).copy())
        k += fi * fo
    for fo in sizes[1:]:
        biases.append(floats[k:k + fo].copy())
        k += fo
    return MlpParams(sizes, weights, biases, activation)
