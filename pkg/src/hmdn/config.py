"""JSON run configuration shared by the command-line tools."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from typing import Optional

from .data import SyntheticConfig
from .embedding import FeatureSchema
from .exceptions import ConfigError
from .model import ModelConfig
from .quantizer import QuantizerConfig
from .training import TrainConfig

ENV_VAR = "HMDN_CONFIG"

_QUANTIZER_KEYS = {f.name for f in fields(QuantizerConfig)} | {"enabled"}
_BACKBONE_KEYS = {"kind", "n_experts", "gate_input", "hidden_units", "embedding_init_std"}
_TRAINING_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {"train", "test", "schema", "synthetic"}
_SECTIONS = {"schema", "quantizer", "backbone", "training", "data"}


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    schema: Optional[FeatureSchema] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    schema_path: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None

    @classmethod
    def from_dict(cls, d):
        _check_keys("<root>", d, _SECTIONS)
        q = dict(d.get("quantizer", {}))
        _check_keys("quantizer", q, _QUANTIZER_KEYS)
        enabled = q.pop("enabled", True)
        b = dict(d.get("backbone", {}))
        _check_keys("backbone", b, _BACKBONE_KEYS)
        t = dict(d.get("training", {}))
        _check_keys("training", t, _TRAINING_KEYS)
        data = dict(d.get("data", {}))
        _check_keys("data", data, _DATA_KEYS)

        quantizer = QuantizerConfig(**q) if enabled else None
        gate = b.get("gate_input", "hierarchical_sD" if enabled else "raw_xb")
        model = ModelConfig(
            backbone=b.get("kind", "moe"),
            gate_input=gate,
            n_experts=b.get("n_experts", 3),
            hidden_units=tuple(b.get("hidden_units", ModelConfig.hidden_units)),
            embedding_init_std=b.get("embedding_init_std", 0.01),
            quantizer=quantizer,
        )
        synthetic = None
        if "synthetic" in data:
            s = data["synthetic"]
            _check_keys("data.synthetic", s, {f.name for f in fields(SyntheticConfig)})
            try:
                synthetic = SyntheticConfig(**s)
            except TypeError as e:
                raise ConfigError(str(e)) from None
        schema = FeatureSchema.from_dict(d["schema"]) if "schema" in d else None
        cfg = cls(model, TrainConfig(**t), schema, data.get("train"), data.get("test"),
                  data.get("schema"), synthetic)
        return cfg.validate()

    def validate(self):
        self.model.validate()
        self.training.validate()
        if self.synthetic is not None:
            self.synthetic.validate()
        return self

    def to_dict(self):
        q = self.model.quantizer
        out = {
            "quantizer": {"enabled": False} if q is None else {"enabled": True, **q.__dict__},
            "backbone": {"kind": self.model.backbone, "n_experts": self.model.n_experts,
                         "gate_input": self.model.gate_input, "hidden_units": list(self.model.hidden_units),
                         "embedding_init_std": self.model.embedding_init_std},
            "training": dict(self.training.__dict__),
            "data": {},
        }
        if self.schema is not None:
            out["schema"] = self.schema.to_dict()
        for key, val in (("train", self.train_path), ("test", self.test_path), ("schema", self.schema_path)):
            if val is not None:
                out["data"][key] = val
        if self.synthetic is not None:
            s = dict(self.synthetic.__dict__)
            s["distribution_types"] = [list(t) for t in s["distribution_types"]]
            out["data"]["synthetic"] = s
        return out


def load_config(path=None):
    """Read a config file; ``None`` falls back to $HMDN_CONFIG, then defaults."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return RunConfig(synthetic=SyntheticConfig()).validate()
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        return RunConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from None
