"""Multi-seed comparison drivers: backbone/extraction ablation and depth sweep."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .exceptions import ConfigError
from .model import HMDNModel, ModelConfig
from .quantizer import QuantizerConfig
from .training import Trainer, evaluate

ABLATION_MODELS = (
    "dnn",
    "vanilla-moe",
    "hmdn-moe-implicit",
    "hmdn-moe-explicit",
    "vanilla-dw",
    "hmdn-dw",
)


def ablation_model_config(name, schema, base):
    """Model config for one ablation row, derived from ``base``."""
    q = base.quantizer or QuantizerConfig()
    common = dict(n_experts=base.n_experts, hidden_units=base.hidden_units,
                  embedding_init_std=base.embedding_init_std)
    if name == "dnn":
        return ModelConfig(backbone="dnn", gate_input="raw_xb", quantizer=None, **common)
    if name == "vanilla-moe":
        return ModelConfig(backbone="moe", gate_input="raw_xb", quantizer=None, **common)
    if name == "vanilla-dw":
        return ModelConfig(backbone="dw", gate_input="raw_xb", quantizer=None, **common)
    if name == "hmdn-moe-implicit":
        return ModelConfig(backbone="moe", quantizer=replace(q, mode="implicit"), **common)
    if name == "hmdn-moe-explicit":
        levels = schema.explicit_levels()
        return ModelConfig(backbone="moe", quantizer=replace(q, mode="explicit", depth=max(levels.values())),
                           **common)
    if name == "hmdn-dw":
        return ModelConfig(backbone="dw", quantizer=replace(q, mode="implicit"), **common)
    raise ConfigError(f"unknown ablation model {name!r}; choose from {ABLATION_MODELS}")


def train_and_evaluate(schema, train, test, model_config, train_config, seed):
    start = time.perf_counter()
    model = HMDNModel(schema, model_config, seed=seed)
    Trainer(model, replace(train_config, seed=seed)).fit(train)
    m = evaluate(model, test)
    return {"seed": seed, "auc": m.auc, "logloss": m.logloss, "l_rq": m.l_rq,
            "seconds": time.perf_counter() - start}


def run_ablation(schema, train, test, base_model, train_config, n_seeds=3, models=None):
    """Train every requested model for ``n_seeds`` seeds.

    Returns ``(runs, table)``: one dict per (model, seed) and one summary row
    per model with mean/min/max AUC and the relative improvement of the mean
    AUC over the DNN row (when DNN is included).
    """
    models = list(ABLATION_MODELS if models is None else models)
    unknown = [m for m in models if m not in ABLATION_MODELS]
    if unknown:
        raise ConfigError(f"unknown ablation models {unknown}")
    models = [m for m in ABLATION_MODELS if m in models]
    seeds = [train_config.seed + i for i in range(n_seeds)]
    runs = []
    for name in models:
        mc = ablation_model_config(name, schema, base_model)
        for s in seeds:
            runs.append({"model": name, **train_and_evaluate(schema, train, test, mc, train_config, s)})
    return runs, summarize(runs, models)


def summarize(runs, models):
    table = []
    for name in models:
        aucs = np.array([r["auc"] for r in runs if r["model"] == name])
        table.append({"model": name, "auc_mean": float(aucs.mean()), "auc_min": float(aucs.min()),
                      "auc_max": float(aucs.max()), "n_seeds": int(aucs.size)})
    base = next((row["auc_mean"] for row in table if row["model"] == "dnn"), None)
    for row in table:
        row["rela_impr"] = None if base is None else relative_improvement(row["auc_mean"], base)
    return table


def relative_improvement(auc, base_auc):
    """Percent change of ``auc`` over ``base_auc``."""
    return (auc - base_auc) / base_auc * 100.0


def sweep_depth(schema, train, test, model_config, train_config, depths, n_seeds=3):
    """Train the configured quantized model once per depth and seed."""
    depths = list(depths)
    if not depths:
        raise ConfigError("depth list is empty")
    if len(set(depths)) != len(depths):
        raise ConfigError(f"duplicate depths in {depths}")
    if any(d < 1 for d in depths):
        raise ConfigError(f"depths must be >= 1, got {depths}")
    if model_config.quantizer is None:
        raise ConfigError("depth sweep needs an enabled quantizer")
    seeds = [train_config.seed + i for i in range(n_seeds)]
    rows = []
    for d in depths:
        mc = replace(model_config, quantizer=replace(model_config.quantizer, depth=d))
        runs = [train_and_evaluate(schema, train, test, mc, train_config, s) for s in seeds]
        aucs = np.array([r["auc"] for r in runs])
        rows.append({"depth": d, "auc_mean": float(aucs.mean()), "auc_min": float(aucs.min()),
                     "auc_max": float(aucs.max()), "seconds": float(sum(r["seconds"] for r in runs)),
                     "aucs": aucs.tolist()})
    return rows


def format_table(rows, columns):
    """Tab-separated table with a header line; floats get 6 decimals."""
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    lines = ["\t".join(columns)]
    lines += ["\t".join(fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines)
