"""The full network: embeddings, optional residual quantizer and a backbone."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import backbones
from .embedding import embed_batch, embedding_gradients, init_tables
from .exceptions import ConfigError
from .metrics import log_loss
from .nn import gradcheck, relu_pattern, sigmoid
from .quantizer import QuantizerConfig, ResidualQuantizer


@dataclass
class ModelConfig:
    backbone: str = "moe"
    gate_input: str = "hierarchical_sD"
    n_experts: int = 3
    hidden_units: tuple = backbones.HIDDEN_UNITS
    embedding_init_std: float = 0.01
    quantizer: Optional[QuantizerConfig] = field(default_factory=QuantizerConfig)

    def validate(self):
        if self.backbone not in backbones.KINDS:
            raise ConfigError(f"backbone must be one of {backbones.KINDS}, got {self.backbone!r}")
        if self.gate_input not in backbones.GATE_INPUTS:
            raise ConfigError(f"gate_input must be one of {backbones.GATE_INPUTS}, got {self.gate_input!r}")
        if self.gate_input == "hierarchical_sD" and self.quantizer is None and self.backbone != "dnn":
            raise ConfigError("gate_input 'hierarchical_sD' requires an enabled quantizer")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if self.embedding_init_std < 0:
            raise ConfigError(f"embedding_init_std must be >= 0, got {self.embedding_init_std}")
        if not self.hidden_units or any(h < 1 for h in self.hidden_units):
            raise ConfigError(f"bad hidden_units {self.hidden_units}")
        if self.quantizer is not None:
            self.quantizer.validate()
        return self

    def to_dict(self):
        q = None if self.quantizer is None else dict(self.quantizer.__dict__)
        return {"backbone": self.backbone, "gate_input": self.gate_input, "n_experts": self.n_experts,
                "hidden_units": list(self.hidden_units), "embedding_init_std": self.embedding_init_std,
                "quantizer": q}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        q = d.pop("quantizer", None)
        d["hidden_units"] = tuple(d.get("hidden_units", backbones.HIDDEN_UNITS))
        return cls(quantizer=None if q is None else QuantizerConfig(**q), **d)


@dataclass
class Forward:
    probs: np.ndarray
    logits: np.ndarray
    x: np.ndarray
    x_b: np.ndarray
    slice_map: dict
    quant: object
    gate_input: Optional[np.ndarray]
    cache: dict

    @property
    def l_rq(self):
        return 0.0 if self.quant is None else self.quant.l_rq


class HMDNModel:
    """Embeddings -> (residual quantizer) -> backbone.

    Parameters are exposed as a flat dict of arrays with prefixes ``emb.``,
    ``rq.`` and ``bb.``; optimizers and checkpoints work on that dict.
    """

    def __init__(self, schema, config, seed=0):
        self.schema = schema
        self.config = config.validate()
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        emb_ss, rq_ss, bb_ss, self._train_ss = ss.spawn(4)
        self.tables = init_tables(schema, np.random.default_rng(emb_ss), config.embedding_init_std)
        q = config.quantizer
        self.quantizer = None if q is None else ResidualQuantizer(q, schema, np.random.default_rng(rq_ss))
        if config.gate_input == "hierarchical_sD" and self.quantizer is not None:
            gate_dim = self.quantizer.code_dim
        else:
            gate_dim = schema.xb_dim
        self.backbone = backbones.build_backbone(
            config.backbone, schema.x_dim, gate_dim, np.random.default_rng(bb_ss),
            n_experts=config.n_experts, hidden_units=tuple(config.hidden_units),
        )

    def train_rng(self):
        """Generator for codebook seeding, shuffling and restarts."""
        return np.random.default_rng(self._train_ss)

    @property
    def uses_hierarchy(self):
        return self.quantizer is not None and self.config.gate_input == "hierarchical_sD"

    def params(self):
        out = {f"emb.{k}": v for k, v in self.tables.items()}
        if self.quantizer is not None:
            out.update({f"rq.{k}": v for k, v in self.quantizer.params().items()})
        out.update({f"bb.{k}": v for k, v in self.backbone.params().items()})
        return out

    def frozen_rows(self):
        if self.quantizer is None:
            return {}
        return {f"rq.{k}": v for k, v in self.quantizer.frozen_rows().items()}

    def n_parameters(self):
        return sum(p.size for p in self.params().values())

    def forward(self, batch, codes=None):
        x, x_b, slice_map = embed_batch(self.schema, self.tables, batch)
        quant = None if self.quantizer is None else self.quantizer.quantize(x_b, codes=codes)
        gate = quant.s_D if self.uses_hierarchy else x_b
        logits, cache = self.backbone.forward(x, gate)
        return Forward(sigmoid(logits), logits, x, x_b, slice_map, quant, gate, cache)

    def predict_proba(self, batch):
        return self.forward(batch).probs

    def backward(self, fwd, batch, alpha):
        """Gradients of cross-entropy + ``alpha`` * L_rq for a finished forward."""
        n = len(batch)
        grad_logit = (fwd.probs - batch.labels) / n
        grads, grad_x, grad_gate = self.backbone.backward(fwd.cache, grad_logit)
        out = {f"bb.{k}": v for k, v in grads.items()}
        grad_xb = None
        if self.quantizer is not None:
            task = grad_gate if self.uses_hierarchy else np.zeros_like(fwd.quant.s_D)
            q_grads, grad_xb = self.quantizer.backward(fwd.quant, task, alpha)
            out.update({f"rq.{k}": v for k, v in q_grads.items()})
            if not self.uses_hierarchy and grad_gate is not None:
                grad_xb = grad_xb + grad_gate
        elif grad_gate is not None:
            grad_xb = grad_gate
        for name, g in embedding_gradients(self.schema, batch, grad_x, grad_xb, fwd.slice_map).items():
            out[f"emb.{name}"] = g
        return out

    def loss(self, fwd, batch, alpha):
        return log_loss(fwd.probs, batch.labels) + alpha * fwd.l_rq

    def surrogate_loss(self, batch, alpha, anchor, codes=None, return_cache=False):
        """Loss whose exact gradient at ``anchor`` equals :meth:`backward`.

        Stop-gradient terms are pinned to the anchor; ``codes`` defaults to the
        anchor's codes.
        """
        x, x_b, _ = embed_batch(self.schema, self.tables, batch)
        l_rq = 0.0
        gate = x_b
        if self.quantizer is not None:
            a = anchor.quant
            if codes is not None:
                a = replace(a, codes=codes)
            q_gate, l_rq = self.quantizer.surrogate(x_b, a)
            if self.uses_hierarchy:
                gate = q_gate
        logits, cache = self.backbone.forward(x, gate)
        loss = log_loss(sigmoid(logits), batch.labels) + alpha * l_rq
        return (loss, cache) if return_cache else loss


def check_gradients(model, batch, alpha=1.0, step=1e-5, tolerance=1e-4, max_coords=20,
                    freeze_codes=True, seed=0):
    """Finite-difference check of :meth:`HMDNModel.backward` on ``batch``.

    With ``freeze_codes`` the quantizer codes stay at the unperturbed
    assignment. Otherwise codes are recomputed and any perturbation that
    changes an assignment is excluded from the comparison. Perturbations that
    switch a ReLU on or off are always excluded.
    """
    anchor = model.forward(batch)
    grads = model.backward(anchor, batch, alpha)
    base_pattern = relu_pattern(anchor.cache)
    state = {}

    def current_codes():
        x_b = embed_batch(model.schema, model.tables, batch)[1]
        return model.quantizer.quantize(x_b).codes

    recompute = not freeze_codes and model.quantizer is not None

    def loss_fn():
        codes = current_codes() if recompute else None
        loss, cache = model.surrogate_loss(batch, alpha, anchor, codes=codes, return_cache=True)
        state["flipped"] = codes is not None and not np.array_equal(codes, anchor.quant.codes)
        state["kinked"] = not np.array_equal(relu_pattern(cache), base_pattern)
        return loss

    def exclude():
        return state["flipped"] or state["kinked"]

    return gradcheck(loss_fn, model.params(), grads, step=step, tolerance=tolerance, max_coords=max_coords,
                     rng=np.random.default_rng(seed), exclude=exclude)
