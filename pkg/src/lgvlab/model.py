"""Small fully-connected classifiers evaluated over a flat float64 weight vector.

Parameters are laid out layer by layer: the (w_in, w_out) weight matrix in
row-major order followed by the w_out biases. Hidden layers use the chosen
activation; the last layer emits logits scored with softmax cross-entropy.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class InvalidArgument(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InvalidArgument("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise InvalidArgument(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def to_dict(self) -> dict:
        return {"kind": "mlp", "layer_widths": list(self.layer_widths),
                "activation": self.activation, "loss": "cross_entropy"}

    @property
    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def layers(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of (W, b) per layer into the flat vector ``w``."""
        out = []
        offset = 0
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = w[offset:offset + a * b].reshape(a, b)
            offset += a * b
            bias = w[offset:offset + b]
            offset += b
            out.append((W, bias))
        return out


@dataclass(frozen=True, eq=False)
class QuadraticSpec:
    """Test model with loss ``0.5 (w-c)^T A (w-c) + offset``, independent of inputs.

    Used to check curvature probes against dense linear algebra.
    """
    A: np.ndarray
    center: np.ndarray | None = None
    offset: float = 0.0
    activation: str = field(default="quadratic", init=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidArgument("A must be square")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        c = np.zeros(A.shape[0]) if self.center is None else np.asarray(self.center, np.float64)
        object.__setattr__(self, "center", c)

    @property
    def n_params(self) -> int:
        return self.A.shape[0]

    def to_dict(self) -> dict:
        return {"kind": "quadratic", "A": self.A.tolist(), "center": self.center.tolist(),
                "offset": self.offset}

    @property
    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim == 1:
            x = x[None, :]
        y = np.atleast_1d(y).astype(np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidArgument("inputs must be a non-empty n x d matrix")
        if y.shape != (x.shape[0],):
            raise InvalidArgument(f"labels shape {y.shape} does not match {x.shape[0]} inputs")
        if not np.all(np.isfinite(x)):
            raise InvalidArgument("inputs contain non-finite values")
        if np.any(y < 0):
            raise InvalidArgument("labels must be non-negative class indices")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])

    def with_inputs(self, x: np.ndarray) -> "Batch":
        return Batch(x, self.labels)


def init_weights(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic from ``seed``."""
    rng = np.random.default_rng(seed)
    w = np.zeros(spec.n_params)
    for W, _ in spec.layers(w):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return w


def check_weights(spec, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.n_params,):
        raise InvalidArgument(f"weight vector has shape {w.shape}, expected ({spec.n_params},)")
    return w


def _check(spec: ModelSpec, w, b: Batch) -> np.ndarray:
    w = check_weights(spec, w)
    if b.inputs.shape[1] != spec.input_dim:
        raise InvalidArgument(
            f"inputs have dimension {b.inputs.shape[1]}, model expects {spec.input_dim}")
    if np.any(b.labels >= spec.n_classes):
        raise InvalidArgument(f"labels must lie in [0, {spec.n_classes})")
    return w


def _act(spec: ModelSpec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(spec: ModelSpec, z, h):
    if spec.activation == "relu":
        # subgradient at 0 is taken as 0
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def _forward(spec: ModelSpec, w, x):
    layers = spec.layers(w)
    hs = [x]
    zs = []
    h = x
    for i, (W, bias) in enumerate(layers):
        z = h @ W + bias
        zs.append(z)
        if i < len(layers) - 1:
            h = _act(spec, z)
            hs.append(h)
    return layers, hs, zs, zs[-1]


def logits(spec: ModelSpec, w, x) -> np.ndarray:
    w = check_weights(spec, w)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _forward(spec, w, x)[3]


def predict(spec: ModelSpec, w, x) -> np.ndarray:
    """Class predictions; argmax ties go to the lowest class index."""
    return np.argmax(logits(spec, w, x), axis=1)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_example_loss(spec: ModelSpec, w, b: Batch) -> np.ndarray:
    w = _check(spec, w, b)
    out = _forward(spec, w, b.inputs)[3]
    logp = _log_softmax(out)
    return -logp[np.arange(len(b)), b.labels]


def loss(spec, w, b: Batch | None) -> float:
    """Mean cross-entropy of the batch."""
    if isinstance(spec, QuadraticSpec):
        w = check_weights(spec, w)
        r = w - spec.center
        return float(0.5 * r @ spec.A @ r + spec.offset)
    return float(per_example_loss(spec, w, b).mean())


def _backward(spec: ModelSpec, w, b: Batch, want_weights: bool, want_input: bool,
              mean: bool = True):
    layers, hs, zs, out = _forward(spec, w, b.inputs)
    n = len(b)
    logp = _log_softmax(out)
    value = float(-logp[np.arange(n), b.labels].mean())
    delta = np.exp(logp)
    delta[np.arange(n), b.labels] -= 1.0
    if mean:
        delta /= n
    gw = np.zeros_like(w) if want_weights else None
    offsets = []
    off = 0
    for W, bias in layers:
        offsets.append(off)
        off += W.size + bias.size
    for i in range(len(layers) - 1, -1, -1):
        W, bias = layers[i]
        if want_weights:
            o = offsets[i]
            gw[o:o + W.size] = (hs[i].T @ delta).ravel()
            gw[o + W.size:o + W.size + bias.size] = delta.sum(axis=0)
        if i == 0 and not want_input:
            break
        dh = delta @ W.T
        if i > 0:
            delta = dh * _act_grad(spec, zs[i - 1], hs[i])
        else:
            delta = dh
    return gw, (delta if want_input else None), value


def grad_input(spec: ModelSpec, w, b: Batch, reduction: str = "mean") -> np.ndarray:
    """Gradient of the batch loss with respect to the inputs (n x d).

    With ``reduction="sum"`` row i is the gradient of example i's own loss.
    """
    w = _check(spec, w, b)
    if reduction not in ("mean", "sum"):
        raise InvalidArgument(f"unknown reduction {reduction!r}")
    return _backward(spec, w, b, want_weights=False, want_input=True,
                     mean=reduction == "mean")[1]


def grad_weights(spec, w, b: Batch | None) -> np.ndarray:
    if isinstance(spec, QuadraticSpec):
        w = check_weights(spec, w)
        return spec.A @ (w - spec.center)
    w = _check(spec, w, b)
    return _backward(spec, w, b, want_weights=True, want_input=False)[0]


def loss_and_grad(spec: ModelSpec, w, b: Batch) -> tuple[float, np.ndarray]:
    if isinstance(spec, QuadraticSpec):
        return loss(spec, w, b), grad_weights(spec, w, b)
    w = _check(spec, w, b)
    gw, _, value = _backward(spec, w, b, want_weights=True, want_input=False)
    return value, gw


def fd_step(w: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.linalg.norm(w)))


def hvp(spec, w, b: Batch | None, v) -> np.ndarray:
    """Hessian-vector product by central differences of the weight gradient.

    The step is taken along the unit direction v/||v|| and the result rescaled
    by ||v||, so the finite-difference error does not depend on the scale of v.
    """
    w = check_weights(spec, w)
    v = check_weights(spec, v)
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise InvalidArgument("hvp direction must be non-zero")
    u = v / norm
    h = fd_step(w)
    g_plus = grad_weights(spec, w + h * u, b)
    g_minus = grad_weights(spec, w - h * u, b)
    return (g_plus - g_minus) / (2.0 * h) * norm


def accuracy(spec: ModelSpec, w, b: Batch) -> float:
    return float(np.mean(predict(spec, w, b.inputs) == b.labels))


def spec_from_dict(d: dict):
    kind = d.get("kind", "mlp")
    if kind == "quadratic":
        return QuadraticSpec(np.asarray(d["A"]), np.asarray(d.get("center")) if d.get("center") is not None else None,
                             float(d.get("offset", 0.0)))
    if kind != "mlp":
        raise InvalidArgument(f"unknown model kind {kind!r}")
    return ModelSpec(tuple(d["layer_widths"]), d.get("activation", "relu"))


def ensure_specs_match(specs: Sequence) -> None:
    hashes = {s.spec_hash for s in specs}
    if len(hashes) > 1:
        raise InvalidArgument("weight vectors belong to different model specs")
