"""Small dense numerical kernel: activations, MLPs with explicit caches, Adam
and a finite-difference gradient checker.

Everything is float64 numpy. Backward passes are written by hand; there is no
autodiff tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import NonDeterministicError, NumericalError, ShapeError, UsageError

ACTIVATIONS = ("none", "relu", "sigmoid", "two_sigmoid")


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _activate(name, z):
    if name == "none":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "two_sigmoid":
        return 2.0 * sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name, z, a, grad):
    if name == "none":
        return grad
    if name == "relu":
        # subgradient at 0 is 0
        return grad * (z > 0)
    if name == "sigmoid":
        return grad * a * (1.0 - a)
    if name == "two_sigmoid":
        s = a / 2.0
        return grad * 2.0 * s * (1.0 - s)
    raise ValueError(f"unknown activation {name!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """Fully connected network.

    ``activation`` is applied after every hidden layer, ``output_activation``
    after the last one. Weights are stored as (fan_in, fan_out) so a forward
    pass is ``x @ W + b``.
    """

    def __init__(self, layers, activation="relu", output_activation="none"):
        if activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}/{output_activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w, _ in layers]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for _, b in layers]
        self.activation = activation
        self.output_activation = output_activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[0]} does not chain with "
                    f"previous output dim {self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def init(cls, dims, rng, activation="relu", output_activation="none"):
        layers = [
            (glorot_uniform(rng, dims[i], dims[i + 1]), np.zeros(dims[i + 1]))
            for i in range(len(dims) - 1)
        ]
        return cls(layers, activation, output_activation)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def _act(self, i):
        return self.output_activation if i == len(self.weights) - 1 else self.activation

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"layer 0: expected input with {self.input_dim} columns, got {x.shape}")
        inputs, pre, post = [], [], []
        a = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            a = _activate(self._act(i), z)
            pre.append(z)
            post.append(a)
        masks = [z > 0 for i, z in enumerate(pre) if self._act(i) == "relu"]
        return a, {"inputs": inputs, "pre": pre, "post": post, "relu_masks": masks}

    def backward(self, cache, grad_out):
        """Return ``(param_grads, grad_input)``; param grads are (dW, db) per layer."""
        if not cache:
            raise UsageError("mlp backward called without a forward cache")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != cache["post"][-1].shape:
            raise ShapeError(
                f"upstream gradient {grad.shape} does not match output {cache['post'][-1].shape}"
            )
        grads = [None] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            dz = _activate_grad(self._act(i), cache["pre"][i], cache["post"][i], grad)
            grads[i] = (cache["inputs"][i].T @ dz, dz.sum(axis=0))
            grad = dz @ self.weights[i].T
        return grads, grad

    def params(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    @staticmethod
    def named_grads(grads, prefix=""):
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}w{i}"] = dw
            out[f"{prefix}b{i}"] = db
        return out


def relu_pattern(cache):
    """Concatenated ReLU on/off masks found anywhere inside a (nested) cache."""
    found = []

    def walk(obj):
        if isinstance(obj, dict):
            if "relu_masks" in obj:
                found.extend(m.ravel() for m in obj["relu_masks"])
            for k, v in obj.items():
                if k != "relu_masks":
                    walk(v)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                walk(v)

    walk(cache)
    return np.concatenate(found) if found else np.zeros(0, dtype=bool)


@dataclass
class SparseRows:
    """Row-sparse gradient for an embedding-like table."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape):
        out = np.zeros(shape)
        np.add.at(out, self.rows, self.values)
        return out


@dataclass
class Adam:
    """Adam with bias correction.

    Dense blocks update every coordinate. Blocks whose gradient arrives as
    :class:`SparseRows` use lazy updates: only the listed rows have their
    moments and values touched.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    frozen_rows: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name, g in grads.items():
            vals = g.values if isinstance(g, SparseRows) else g
            if not np.all(np.isfinite(vals)):
                raise NumericalError(f"non-finite gradient in parameter block {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if isinstance(g, SparseRows):
                rows = np.unique(g.rows)
                dense = np.zeros((rows.size,) + p.shape[1:])
                np.add.at(dense, np.searchsorted(rows, g.rows), g.values)
                m[rows] = self.beta1 * m[rows] + (1 - self.beta1) * dense
                v[rows] = self.beta2 * v[rows] + (1 - self.beta2) * dense**2
                p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.epsilon)
            else:
                if g.shape != p.shape:
                    raise ShapeError(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
                frozen = self.frozen_rows.get(name)
                if frozen is not None:
                    update[frozen] = 0.0
                p -= update
        return params


@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    passed: bool


@dataclass
class GradcheckReport:
    blocks: list
    tolerance: float
    step: float

    @property
    def passed(self):
        return all(b.passed for b in self.blocks)

    @property
    def n_excluded(self):
        return sum(b.n_excluded for b in self.blocks)

    def format(self):
        lines = []
        for b in self.blocks:
            status = "PASS" if b.passed else "FAIL"
            lines.append(
                f"{b.name:<28} max_rel_err={b.max_rel_error:.3e} "
                f"checked={b.n_checked} excluded={b.n_excluded} {status}"
            )
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-5):
    """Coordinate-wise |a - n| / max(|a| + |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def gradcheck(
    loss_fn: Callable[[], float],
    params: dict,
    grads: dict,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    exclude: Optional[Callable[[], bool]] = None,
    floor: float = 1e-5,
) -> GradcheckReport:
    """Compare ``grads`` with central differences of ``loss_fn``.

    ``loss_fn`` reads the arrays in ``params``, which are perturbed in place
    and restored. ``exclude`` is consulted at each perturbed point; a True
    result drops that coordinate (e.g. a quantizer code would flip).
    With ``max_coords`` set, each block is checked on a random subset.
    Relative errors use ``max(|a| + |n|, floor)`` as denominator; the floor
    sits near the central-difference roundoff (~eps * |loss| / step).
    """
    if not params:
        return GradcheckReport([], tolerance, step)
    first, second = loss_fn(), loss_fn()
    if first != second:
        raise NonDeterministicError(
            f"loss closure is not deterministic: {first!r} != {second!r}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    blocks = []
    for name, p in params.items():
        g = grads[name]
        if isinstance(g, SparseRows):
            g = g.to_dense(p.shape)
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, checked, excluded = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            skip = exclude is not None and exclude()
            flat[i] = orig - step
            minus = loss_fn()
            skip = skip or (exclude is not None and exclude())
            flat[i] = orig
            if skip:
                excluded += 1
                continue
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, float(relative_error(gflat[i], numeric, floor)))
            checked += 1
        blocks.append(BlockCheck(name, worst, checked, excluded, worst <= tolerance))
    return GradcheckReport(blocks, tolerance, step)
