"""Prediction heads.

All backbones take the full embedding ``x`` and a gate input (``s_D`` for the
hierarchical model, ``x_b`` for the vanilla variants) and produce one logit
per example. ``backward`` expects the gradient with respect to that logit.
"""
from __future__ import annotations

import math

import numpy as np

from .exceptions import ShapeError, UsageError
from .nn import MLP, glorot_uniform, sigmoid, softmax

HIDDEN_UNITS = (128, 64, 32)
KINDS = ("moe", "dw", "dnn")
GATE_INPUTS = ("hierarchical_sD", "raw_xb")


class MoEBackbone:
    """Softmax-gated mixture of expert MLPs followed by a linear tower."""

    kind = "moe"

    def __init__(self, experts, gate_weight, tower):
        self.experts = list(experts)
        self.gate_weight = np.asarray(gate_weight, dtype=np.float64)
        self.tower = tower
        if self.gate_weight.shape[1] != len(self.experts):
            raise ShapeError(f"gate weight has {self.gate_weight.shape[1]} columns for {len(self.experts)} experts")
        dims = {(e.input_dim, e.output_dim) for e in self.experts}
        if len(dims) != 1:
            raise ShapeError(f"experts disagree on input/output dims: {sorted(dims)}")

    @classmethod
    def init(cls, x_dim, gate_dim, rng, n_experts=3, hidden_units=HIDDEN_UNITS):
        experts = [MLP.init([x_dim, *hidden_units], rng, "relu", "relu") for _ in range(n_experts)]
        gate = glorot_uniform(rng, gate_dim, n_experts)
        tower = MLP.init([hidden_units[-1], 1], rng, "none", "none")
        return cls(experts, gate, tower)

    def params(self):
        out = {"gate.w": self.gate_weight}
        for i, e in enumerate(self.experts):
            out.update(e.params(f"expert{i}."))
        out.update(self.tower.params("tower."))
        return out

    def gate_weights(self, gate_input):
        return softmax(gate_input @ self.gate_weight, axis=1)

    def forward(self, x, gate_input):
        if gate_input.shape[1] != self.gate_weight.shape[0]:
            raise ShapeError(f"gate input has {gate_input.shape[1]} columns, gate expects {self.gate_weight.shape[0]}")
        weights = self.gate_weights(gate_input)
        outs, caches = [], []
        for e in self.experts:
            o, c = e.forward(x)
            outs.append(o)
            caches.append(c)
        outs = np.stack(outs, axis=1)  # (batch, n, hidden)
        combined = np.einsum("bn,bnh->bh", weights, outs)
        logit, tower_cache = self.tower.forward(combined)
        cache = {"kind": self.kind, "gate_input": gate_input, "weights": weights, "outs": outs,
                 "expert_caches": caches, "tower_cache": tower_cache}
        return logit[:, 0], cache

    def backward(self, cache, grad_logit):
        if cache.get("kind") != self.kind:
            raise UsageError(f"cache from {cache.get('kind')!r} passed to {self.kind} backward")
        tower_grads, d_combined = self.tower.backward(cache["tower_cache"], grad_logit[:, None])
        weights, outs = cache["weights"], cache["outs"]
        grads = MLP.named_grads(tower_grads, "tower.")
        grad_x = 0.0
        for i, e in enumerate(self.experts):
            g, gx = e.backward(cache["expert_caches"][i], weights[:, i:i + 1] * d_combined)
            grads.update(MLP.named_grads(g, f"expert{i}."))
            grad_x = grad_x + gx
        d_w = np.einsum("bh,bnh->bn", d_combined, outs)
        d_logits = weights * (d_w - np.sum(weights * d_w, axis=1, keepdims=True))
        grads["gate.w"] = cache["gate_input"].T @ d_logits
        grad_gate = d_logits @ self.gate_weight.T
        return grads, grad_x, grad_gate


class DWBackbone:
    """GateNU scaling of the bottom embedding followed by an MLP tower.

    The gate emits ``2 * sigmoid(.)`` so scales lie in (0, 2) and an all-zero
    gate leaves ``x`` unchanged.
    """

    kind = "dw"

    def __init__(self, gate_nu, tower):
        self.gate_nu = gate_nu
        self.tower = tower
        if gate_nu.output_dim != tower.input_dim:
            raise ShapeError(f"gate output dim {gate_nu.output_dim} != tower input dim {tower.input_dim}")

    @classmethod
    def init(cls, x_dim, gate_dim, rng, hidden_units=HIDDEN_UNITS):
        gate_nu = MLP.init([gate_dim, math.ceil(x_dim / 2), x_dim], rng, "relu", "two_sigmoid")
        tower = MLP.init([x_dim, *hidden_units, 1], rng, "relu", "none")
        return cls(gate_nu, tower)

    def params(self):
        out = self.gate_nu.params("gate_nu.")
        out.update(self.tower.params("tower."))
        return out

    def forward(self, x, gate_input):
        if x.shape[1] != self.tower.input_dim:
            raise ShapeError(f"x has {x.shape[1]} columns, tower expects {self.tower.input_dim}")
        delta, gate_cache = self.gate_nu.forward(gate_input)
        logit, tower_cache = self.tower.forward(delta * x)
        cache = {"kind": self.kind, "x": x, "delta": delta, "gate_cache": gate_cache, "tower_cache": tower_cache}
        return logit[:, 0], cache

    def backward(self, cache, grad_logit):
        if cache.get("kind") != self.kind:
            raise UsageError(f"cache from {cache.get('kind')!r} passed to {self.kind} backward")
        tower_grads, d_scaled = self.tower.backward(cache["tower_cache"], grad_logit[:, None])
        gate_grads, grad_gate = self.gate_nu.backward(cache["gate_cache"], d_scaled * cache["x"])
        grads = MLP.named_grads(tower_grads, "tower.")
        grads.update(MLP.named_grads(gate_grads, "gate_nu."))
        return grads, d_scaled * cache["delta"], grad_gate


class DNNBackbone:
    """Plain MLP on ``x``; the gate input is ignored."""

    kind = "dnn"

    def __init__(self, mlp):
        self.mlp = mlp

    @classmethod
    def init(cls, x_dim, gate_dim, rng, hidden_units=HIDDEN_UNITS):
        return cls(MLP.init([x_dim, *hidden_units, 1], rng, "relu", "none"))

    def params(self):
        return self.mlp.params("mlp.")

    def forward(self, x, gate_input=None):
        logit, c = self.mlp.forward(x)
        return logit[:, 0], {"kind": self.kind, "mlp_cache": c}

    def backward(self, cache, grad_logit):
        if cache.get("kind") != self.kind:
            raise UsageError(f"cache from {cache.get('kind')!r} passed to {self.kind} backward")
        g, grad_x = self.mlp.backward(cache["mlp_cache"], grad_logit[:, None])
        return MLP.named_grads(g, "mlp."), grad_x, None


def build_backbone(kind, x_dim, gate_dim, rng, n_experts=3, hidden_units=HIDDEN_UNITS):
    if kind == "moe":
        return MoEBackbone.init(x_dim, gate_dim, rng, n_experts, hidden_units)
    if kind == "dw":
        return DWBackbone.init(x_dim, gate_dim, rng, hidden_units)
    if kind == "dnn":
        return DNNBackbone.init(x_dim, gate_dim, rng, hidden_units)
    raise ValueError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")


def moe_forward(backbone, x, gate_input):
    logit, cache = backbone.forward(x, gate_input)
    return sigmoid(logit), cache


def dw_forward(backbone, x, gate_input):
    logit, cache = backbone.forward(x, gate_input)
    return sigmoid(logit), cache["delta"], cache


def dnn_forward(backbone, x):
    logit, _ = backbone.forward(x)
    return sigmoid(logit)
