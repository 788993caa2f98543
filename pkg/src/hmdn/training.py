"""Minibatch training, evaluation and checkpoint I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embedding import FeatureSchema, embed_batch
from .exceptions import ConfigError, NumericalError, ShapeError
from .metrics import auc, log_loss
from .model import HMDNModel, ModelConfig
from .nn import Adam
from .quantizer import UsageStats


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 3
    seed: int = 0
    eval_every: Optional[int] = None

    def validate(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be a positive step count")
        return self


@dataclass
class Metrics:
    auc: float
    logloss: float
    l_rq: float = 0.0
    usage_entropy: list = field(default_factory=list)
    dead_codes: list = field(default_factory=list)
    n_examples: int = 0
    step: int = 0
    epoch: int = 0

    def records(self, split):
        out = [(self.step, split, "auc", self.auc), (self.step, split, "logloss", self.logloss),
               (self.step, split, "l_rq", self.l_rq)]
        for d, h in enumerate(self.usage_entropy):
            out.append((self.step, split, f"usage_entropy.{d + 1}", h))
        return out


class MetricsLog:
    """Writes (step, split, metric, value) records as JSON lines."""

    def __init__(self, stream=None, path=None):
        self.stream = stream
        self.file = open(path, "w") if path else None
        self.records = []

    def emit(self, step, split, metric, value):
        rec = {"step": int(step), "split": split, "metric": metric, "value": float(value)}
        self.records.append(rec)
        line = json.dumps(rec)
        if self.stream is not None:
            print(line, file=self.stream)
        if self.file is not None:
            self.file.write(line + "\n")

    def close(self):
        if self.file is not None:
            self.file.close()


class Trainer:
    def __init__(self, model, config):
        self.model = model
        self.config = config.validate()
        self.optimizer = Adam(lr=config.lr, frozen_rows=model.frozen_rows())
        self.rng = model.train_rng()
        self.step = 0
        self.epoch = 0

    def train_step(self, batch):
        model, alpha = self.model, self.config.alpha
        q = model.quantizer
        if q is not None and not q.initialized:
            q.init_codebooks(embed_batch(model.schema, model.tables, batch)[1], self.rng)
        fwd = model.forward(batch)
        loss = model.loss(fwd, batch, alpha)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {self.step}")
        grads = model.backward(fwd, batch, alpha)
        try:
            self.optimizer.step(model.params(), grads)
        except NumericalError as e:
            raise NumericalError(f"step {self.step}: {e}") from None
        self.step += 1
        if q is not None:
            q.record_usage(fwd.quant.codes)
            every = q.config.restart_dead_codes_every
            if every and self.step % every == 0:
                q.restart_dead_codes(fwd.quant, self.rng)
        return loss, fwd.l_rq

    def train_epoch(self, data, log=None, eval_data=None):
        """One seeded-shuffled pass; returns the per-step (loss, l_rq) trace."""
        n = len(data)
        order = self.rng.permutation(n)
        trace = []
        for start in range(0, n, self.config.batch_size):
            batch = data.take(order[start:start + self.config.batch_size])
            loss, l_rq = self.train_step(batch)
            trace.append((loss, l_rq))
            if log is not None:
                log.emit(self.step, "train", "loss", loss)
                log.emit(self.step, "train", "l_rq", l_rq)
            every = self.config.eval_every
            if eval_data is not None and log is not None and every and self.step % every == 0:
                for rec in evaluate(self.model, eval_data, step=self.step, epoch=self.epoch).records("eval"):
                    log.emit(*rec)
        self.epoch += 1
        return trace

    def fit(self, data, log=None, eval_data=None):
        traces = []
        for _ in range(self.config.epochs):
            traces.append(self.train_epoch(data, log=log, eval_data=eval_data))
            if eval_data is not None and log is not None:
                for rec in evaluate(self.model, eval_data, step=self.step, epoch=self.epoch).records("eval"):
                    log.emit(*rec)
        return traces


def evaluate(model, data, batch_size=4096, step=0, epoch=0):
    """Forward-only pass over ``data``."""
    probs, l_rq = [], 0.0
    usage = None
    if model.quantizer is not None:
        usage = UsageStats.empty(model.quantizer.depth, model.quantizer.config.codebook_size)
    for start in range(0, len(data), batch_size):
        batch = data.take(np.arange(start, min(start + batch_size, len(data))))
        fwd = model.forward(batch)
        probs.append(fwd.probs)
        if usage is not None:
            l_rq += fwd.l_rq * len(batch)
            usage.update(fwd.quant.codes)
    probs = np.concatenate(probs)
    return Metrics(
        auc=auc(probs, data.labels),
        logloss=log_loss(probs, data.labels),
        l_rq=l_rq / len(data),
        usage_entropy=[] if usage is None else usage.entropy.tolist(),
        dead_codes=[] if usage is None else usage.dead_codes.tolist(),
        n_examples=len(data),
        step=step,
        epoch=epoch,
    )


MAGIC = b"HMDNCKPT"
VERSION = 1


def save_checkpoint(model, path, extra=None):
    """Write every parameter block as little-endian float64 behind a JSON header."""
    params = model.params()
    header = {
        "version": VERSION,
        "schema": model.schema.to_dict(),
        "model_config": model.config.to_dict(),
        "seed": model.seed,
        "quantizer_initialized": bool(model.quantizer is not None and model.quantizer.initialized),
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(raw)))
        fh.write(raw)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(n).decode("utf-8"))
        offset = fh.tell()
    return header, offset


def load_checkpoint(path, schema=None, config=None):
    """Rebuild a model from ``path``.

    If ``schema`` or ``config`` is given it must match the file, otherwise a
    :class:`ConfigError` is raised.
    """
    header, offset = read_checkpoint_header(path)
    file_schema = FeatureSchema.from_dict(header["schema"])
    file_config = ModelConfig.from_dict(header["model_config"])
    if schema is not None and schema.to_dict() != file_schema.to_dict():
        raise ConfigError("checkpoint schema does not match the requested schema")
    if config is not None and config.to_dict() != file_config.to_dict():
        diff = [k for k, v in config.to_dict().items() if file_config.to_dict().get(k) != v]
        raise ConfigError(f"checkpoint model config differs in {diff}")
    model = HMDNModel(file_schema, file_config, seed=header["seed"])
    params = model.params()
    names = [b["name"] for b in header["blocks"]]
    if names != list(params):
        missing = sorted(set(params) ^ set(names))
        raise ShapeError(f"checkpoint blocks do not match model: {missing}")
    with open(path, "rb") as fh:
        fh.seek(offset)
        for block in header["blocks"]:
            p = params[block["name"]]
            if list(p.shape) != block["shape"]:
                raise ShapeError(f"block {block['name']!r}: file shape {block['shape']} != model shape {list(p.shape)}")
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ShapeError(f"block {block['name']!r} is truncated")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    if model.quantizer is not None:
        model.quantizer.initialized = header["quantizer_initialized"]
    model.checkpoint_extra = header.get("extra", {})
    return model
