"""Residual quantization of the distribution embedding ``x_b``.

A stack of ``depth`` codebooks maps ``x_b`` to a hierarchical representation
``s_D``, the sum of the selected code embeddings over all levels.

Two extraction modes:

* ``implicit`` -- every level quantizes the residual left by the previous
  levels, starting from the full ``x_b``.
* ``explicit`` -- level ``d`` quantizes a linear projection of the features
  assigned to that level; levels are independent.

Gradients use the straight-through estimator: the task gradient on ``s_D`` is
passed unchanged to the level inputs. Codebooks learn only from the
codebook term of the quantization loss, level inputs from the commitment term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, ShapeError
from .nn import glorot_uniform

MODES = ("implicit", "explicit")


@dataclass
class QuantizerConfig:
    depth: int = 6
    codebook_size: int = 64
    code_dim: Optional[int] = None
    mode: str = "implicit"
    beta: float = 0.25
    include_zero_code: bool = False
    restart_dead_codes_every: Optional[int] = None

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.code_dim is not None and self.code_dim < 1:
            raise ConfigError(f"code_dim must be >= 1, got {self.code_dim}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.restart_dead_codes_every is not None and self.restart_dead_codes_every < 1:
            raise ConfigError("restart_dead_codes_every must be a positive step count")
        return self


@dataclass
class QuantizeOutput:
    """Result of one quantization pass.

    ``residuals[d]`` is r_d for d = 0..D (``residuals[0]`` is x_b in implicit
    mode and None in explicit mode). ``level_inputs[d - 1]`` is the vector fed
    to codebook d and ``quantized[d - 1]`` the selected embedding e(c_d).
    """

    codes: np.ndarray
    s_D: np.ndarray
    residuals: list
    level_inputs: list
    quantized: list
    x_b: np.ndarray
    l_rq: float = 0.0
    mode: str = "implicit"

    @property
    def depth(self):
        return self.codes.shape[1]


def nearest_codes(inputs, codebook):
    """Index of the closest codebook row for each input row.

    Candidates are screened with the expanded form ||c||^2 - 2<s, c>; rows
    with more than one candidate near the minimum are resolved with explicit
    differences, so the result is the exact argmin with ties going to the
    lowest index.
    """
    inputs = np.atleast_2d(inputs)
    if codebook.shape[0] == 0:
        raise ConfigError("codebook is empty")
    if inputs.shape[1] != codebook.shape[1]:
        raise ShapeError(f"input dim {inputs.shape[1]} != codebook dim {codebook.shape[1]}")
    sq_in = np.einsum("bz,bz->b", inputs, inputs)
    sq_cb = np.einsum("kz,kz->k", codebook, codebook)
    approx = sq_cb[None, :] - 2.0 * (inputs @ codebook.T)
    best = approx.min(axis=1)
    # rounding error of the expanded form is far below this margin
    tol = 1e-9 * (sq_in + sq_cb.max()) + 1e-300
    near = approx <= (best + tol)[:, None]
    codes = np.argmax(near, axis=1)
    for i in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[i])
        diff = inputs[i] - codebook[cand]
        codes[i] = cand[np.argmin(np.einsum("kz,kz->k", diff, diff))]
    return codes


def vq_nearest(s, codebook):
    """Code of the codebook row nearest to vector ``s`` (lowest index on ties)."""
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    return int(nearest_codes(s, np.asarray(codebook, dtype=np.float64))[0])


def rq_loss(output, beta):
    """Codebook + commitment loss, averaged over the batch.

    Both terms have the same value; they differ only in where gradients go.
    """
    n = output.codes.shape[0]
    codebook_term = 0.0
    commitment_term = 0.0
    for x_d, e_d in zip(output.level_inputs, output.quantized):
        diff = e_d - x_d
        sq = float(np.sum(diff * diff))
        codebook_term += sq
        commitment_term += sq
    return (codebook_term + beta * commitment_term) / n


class ResidualQuantizer:
    def __init__(self, config, schema, rng):
        self.config = config.validate()
        self.schema = schema
        xb_dim = schema.xb_dim
        self.code_dim = config.code_dim or xb_dim
        D, K, z = config.depth, config.codebook_size, self.code_dim
        if config.mode == "implicit":
            if self.code_dim != xb_dim:
                raise ConfigError(
                    f"implicit mode quantizes x_b directly: code_dim {self.code_dim} != dim(x_b) {xb_dim}"
                )
            self.level_columns = None
            self.projections = None
        else:
            levels = schema.explicit_levels(D)
            offsets, col = {}, 0
            for f in schema.distribution_features:
                offsets[f.name] = np.arange(col, col + f.embedding_dim)
                col += f.embedding_dim
            self.level_columns = [
                np.concatenate([offsets[name] for name, lvl in levels.items() if lvl == d])
                for d in range(1, D + 1)
            ]
            self.projections = [
                [glorot_uniform(rng, cols.size, z), np.zeros(z)] for cols in self.level_columns
            ]
        self.codebooks = [rng.normal(0.0, 0.1, size=(K, z)) for _ in range(D)]
        if config.include_zero_code:
            for c in self.codebooks:
                c[0] = 0.0
        self.initialized = False
        self.usage_since_restart = np.zeros((D, K), dtype=np.int64)

    @property
    def depth(self):
        return self.config.depth

    def params(self):
        out = {f"codebook.{d + 1}": c for d, c in enumerate(self.codebooks)}
        if self.projections is not None:
            for d, (w, b) in enumerate(self.projections):
                out[f"proj.{d + 1}.w"] = w
                out[f"proj.{d + 1}.b"] = b
        return out

    def frozen_rows(self):
        if not self.config.include_zero_code:
            return {}
        return {f"codebook.{d + 1}": np.array([0]) for d in range(self.depth)}

    def _project(self, x_b):
        return [x_b[:, cols] @ w + b for cols, (w, b) in zip(self.level_columns, self.projections)]

    def _seed_rows(self, codebook, source, rng, rows=None):
        K = codebook.shape[0]
        start = 1 if self.config.include_zero_code else 0
        rows = np.arange(start, K) if rows is None else rows
        if rows.size == 0:
            return
        if source.shape[0] >= K:
            codebook[rows] = source[rng.integers(0, source.shape[0], size=rows.size)]
        else:
            codebook[rows] = rng.normal(0.0, 0.1, size=(rows.size, codebook.shape[1]))

    def init_codebooks(self, x_b, rng):
        """Seed each level's codebook with rows drawn from that level's inputs."""
        if self.config.mode == "implicit":
            r = x_b
            for c in self.codebooks:
                self._seed_rows(c, r, rng)
                r = r - c[nearest_codes(r, c)]
        else:
            for c, x_d in zip(self.codebooks, self._project(x_b)):
                self._seed_rows(c, x_d, rng)
        self.initialized = True

    def quantize(self, x_b, codes=None):
        x_b = np.asarray(x_b, dtype=np.float64)
        D = self.depth
        if x_b.ndim != 2 or x_b.shape[1] != self.schema.xb_dim:
            raise ShapeError(f"x_b has shape {x_b.shape}, expected (batch, {self.schema.xb_dim})")
        n = x_b.shape[0]
        out_codes = np.empty((n, D), dtype=np.int64)
        level_inputs, quantized = [], []
        if self.config.mode == "implicit":
            residuals = [x_b]
            r = x_b
            for d, c in enumerate(self.codebooks):
                k = nearest_codes(r, c) if codes is None else codes[:, d]
                e = c[k]
                out_codes[:, d] = k
                level_inputs.append(r)
                quantized.append(e)
                r = r - e
                residuals.append(r)
        else:
            residuals = [None]
            for d, (c, x_d) in enumerate(zip(self.codebooks, self._project(x_b))):
                k = nearest_codes(x_d, c) if codes is None else codes[:, d]
                e = c[k]
                out_codes[:, d] = k
                level_inputs.append(x_d)
                quantized.append(e)
                residuals.append(x_d - e)
        s_D = np.sum(quantized, axis=0) if n else np.zeros((0, self.code_dim))
        out = QuantizeOutput(out_codes, s_D, residuals, level_inputs, quantized, x_b, mode=self.config.mode)
        out.l_rq = rq_loss(out, self.config.beta)
        return out

    def backward(self, output, grad_sD, alpha):
        """Return ``(param_grads, grad_xb)`` for task gradient ``grad_sD``.

        The returned gradients already include the ``alpha``-weighted
        quantization loss.
        """
        beta = self.config.beta
        n = output.codes.shape[0]
        grads = {}
        commit = []
        for d, (c, x_d, e_d) in enumerate(zip(self.codebooks, output.level_inputs, output.quantized)):
            diff = e_d - x_d
            g = np.zeros_like(c)
            np.add.at(g, output.codes[:, d], (2.0 * alpha / n) * diff)
            if self.config.include_zero_code:
                g[0] = 0.0
            grads[f"codebook.{d + 1}"] = g
            commit.append((2.0 * alpha * beta / n) * (x_d - e_d))
        if self.config.mode == "implicit":
            # residual chain uses sg[e], so every level input has d/dx_b = I
            grad_xb = grad_sD + np.sum(commit, axis=0)
        else:
            grad_xb = np.zeros_like(output.x_b)
            for d, (cols, (w, _)) in enumerate(zip(self.level_columns, self.projections)):
                g_d = grad_sD + commit[d]
                grads[f"proj.{d + 1}.w"] = output.x_b[:, cols].T @ g_d
                grads[f"proj.{d + 1}.b"] = g_d.sum(axis=0)
                grad_xb[:, cols] += g_d @ w.T
        return grads, grad_xb

    def surrogate(self, x_b, anchor):
        """Forward pass whose exact gradient equals :meth:`backward` at ``anchor``.

        Stop-gradient quantities and codes are held at their ``anchor`` values
        while parameters and ``x_b`` vary. Returns ``(gate_input, l_rq)``; both
        equal the real forward values at the anchor point. Used for finite
        difference checks only.
        """
        beta = self.config.beta
        n = x_b.shape[0]
        if self.config.mode == "implicit":
            inputs = []
            acc = np.zeros_like(x_b)
            for e0 in anchor.quantized:
                inputs.append(x_b - acc)
                acc = acc + e0
            gate = x_b + (anchor.s_D - anchor.x_b)
        else:
            inputs = self._project(x_b)
            gate = sum(x_d + (e0 - x0) for x_d, e0, x0 in zip(inputs, anchor.quantized, anchor.level_inputs))
        loss = 0.0
        for d, c in enumerate(self.codebooks):
            e = c[anchor.codes[:, d]]
            loss += np.sum((e - anchor.level_inputs[d]) ** 2)
            loss += beta * np.sum((anchor.quantized[d] - inputs[d]) ** 2)
        return gate, loss / n

    def restart_dead_codes(self, output, rng):
        """Re-seed rows unused since the last restart from current level inputs."""
        for d, c in enumerate(self.codebooks):
            dead = np.flatnonzero(self.usage_since_restart[d] == 0)
            if self.config.include_zero_code:
                dead = dead[dead != 0]
            self._seed_rows(c, output.level_inputs[d], rng, rows=dead)
        self.usage_since_restart[:] = 0

    def record_usage(self, codes):
        for d in range(self.depth):
            self.usage_since_restart[d] += np.bincount(codes[:, d], minlength=self.config.codebook_size)


@dataclass
class UsageStats:
    """Per-level code histograms accumulated over many batches."""

    counts: np.ndarray
    n_examples: int = 0

    @classmethod
    def empty(cls, depth, codebook_size):
        return cls(np.zeros((depth, codebook_size), dtype=np.int64))

    def update(self, codes):
        for d in range(self.counts.shape[0]):
            self.counts[d] += np.bincount(codes[:, d], minlength=self.counts.shape[1])
        self.n_examples += codes.shape[0]
        return self

    @property
    def entropy(self):
        p = self.counts / np.maximum(self.counts.sum(axis=1, keepdims=True), 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=1)

    @property
    def dead_codes(self):
        return (self.counts == 0).sum(axis=1)

    def summary(self):
        return [
            {"level": d + 1, "entropy": float(self.entropy[d]), "dead_codes": int(self.dead_codes[d]),
             "histogram": self.counts[d].tolist()}
            for d in range(self.counts.shape[0])
        ]


def codebook_usage_stats(code_batches, codebook_size):
    """Histogram, entropy and dead-code count per level over ``code_batches``."""
    code_batches = list(code_batches)
    if not code_batches:
        raise ValueError("need at least one batch of codes")
    stats = UsageStats.empty(code_batches[0].shape[1], codebook_size)
    for codes in code_batches:
        stats.update(codes)
    return stats
