"""Synthetic mixed multi-distribution data, CSV ingestion and partition counts."""
from __future__ import annotations

import csv
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .embedding import ExampleBatch, Feature, FeatureSchema
from .exceptions import ConfigError, IngestionError
from .nn import sigmoid, softmax


def _default_types():
    return [("domain_id", 3), ("is_new_user", 2), ("ad_source", 2)]


@dataclass
class SyntheticConfig:
    """Generator for labels with planted coarse-to-fine partition effects.

    The label logit is the sum of

    * ``base_logit``;
    * one effect per distribution type, scaled by ``level_effect_scales``
      (coarse types first, largest scale);
    * pairwise interactions between types (``interaction_scale``);
    * per-value effects of the ordinary features: a shared part
      (``feature_effect_scale``) plus a partition-dependent part. Each
      partition is a soft mixture of ``n_latent_modes`` latent modes whose
      weights come from per-member affinities (scaled by ``mode_sharpness``
      and the type's relative level scale); each mode carries its own feature
      effects (``partition_feature_scale``);
    * Gaussian logit noise (``label_noise``).
    """

    distribution_types: list = field(default_factory=_default_types)
    nondist_cardinalities: list = field(default_factory=lambda: [50] * 5)
    n_examples: int = 60000
    test_size: int = 10000
    base_logit: float = -0.5
    level_effect_scales: list = field(default_factory=lambda: [2.0, 1.5, 1.0])
    interaction_scale: float = 0.5
    feature_effect_scale: float = 0.5
    partition_feature_scale: float = 1.0
    n_latent_modes: int = 3
    mode_sharpness: float = 3.0
    label_noise: float = 0.1
    embedding_dim: int = 8
    seed: int = 0

    def validate(self):
        types = [tuple(t) for t in self.distribution_types]
        if len(types) < 2:
            raise ConfigError("need at least 2 distribution types")
        if len({t[0] for t in types}) != len(types):
            raise ConfigError("distribution type labels must be unique")
        if any(c < 2 for _, c in types) or any(c < 2 for c in self.nondist_cardinalities):
            raise ConfigError("cardinalities must be >= 2")
        if len(self.level_effect_scales) != len(types):
            raise ConfigError("level_effect_scales needs one entry per distribution type")
        scales = [*self.level_effect_scales, self.interaction_scale, self.feature_effect_scale,
                  self.partition_feature_scale, self.mode_sharpness, self.label_noise]
        if any(s < 0 for s in scales):
            raise ConfigError("effect scales and label_noise must be >= 0")
        if self.n_latent_modes < 1:
            raise ConfigError("n_latent_modes must be >= 1")
        if self.n_examples < 1 or not 0 <= self.test_size <= self.n_examples:
            raise ConfigError("need n_examples >= 1 and 0 <= test_size <= n_examples")
        self.distribution_types = types
        return self

    def schema(self):
        feats = [Feature(name, card, self.embedding_dim, True, name) for name, card in self.distribution_types]
        feats += [Feature(f"f{i}", card, self.embedding_dim) for i, card in enumerate(self.nondist_cardinalities)]
        return FeatureSchema(tuple(feats), "label")


def generate_synthetic(config, return_effects=False):
    """Return ``(schema, train, test)``; ids start at 1 (0 is the OOV id).

    With ``return_effects`` a fourth element holds the planted parameters,
    indexed by 0-based member/value.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_examples
    types = config.distribution_types
    scales = np.asarray(config.level_effect_scales, dtype=np.float64)
    rel = scales / scales.max() if scales.max() > 0 else scales

    members = [rng.integers(0, card, size=n) for _, card in types]
    values = [rng.integers(0, card, size=n) for card in config.nondist_cardinalities]

    type_effects = [rng.normal(size=card) * s for (_, card), s in zip(types, scales)]
    interactions = {
        (a, b): rng.normal(size=(types[a][1], types[b][1])) * config.interaction_scale
        for a, b in itertools.combinations(range(len(types)), 2)
    }
    shared = [rng.normal(size=card) * config.feature_effect_scale for card in config.nondist_cardinalities]
    # each partition is a soft mixture of latent modes; coarse types weigh most
    affinity = [rng.normal(size=(tcard, config.n_latent_modes)) * config.mode_sharpness * rel[t]
                for t, (_, tcard) in enumerate(types)]
    mode_effects = [rng.normal(size=(config.n_latent_modes, card)) * config.partition_feature_scale
                    for card in config.nondist_cardinalities]

    logit = np.full(n, config.base_logit)
    for m, eff in zip(members, type_effects):
        logit += eff[m]
    for (a, b), table in interactions.items():
        logit += table[members[a], members[b]]
    mode_weights = softmax(sum(a[m] for a, m in zip(affinity, members)), axis=1)
    for f, v in enumerate(values):
        logit += shared[f][v]
        logit += np.einsum("nk,nk->n", mode_weights, mode_effects[f][:, v].T)
    logit += rng.normal(size=n) * config.label_noise
    labels = (rng.random(n) < sigmoid(logit)).astype(np.float64)

    schema = config.schema()
    cols = [m + 1 for m in members] + [v + 1 for v in values]
    data = ExampleBatch({f.name: c for f, c in zip(schema.features, cols)}, labels)
    n_train = n - config.test_size
    out = (schema, data.take(np.arange(n_train)), data.take(np.arange(n_train, n)))
    if return_effects:
        effects = {"type_effects": type_effects, "interactions": interactions, "shared": shared,
                   "affinity": affinity, "mode_effects": mode_effects, "logit": logit}
        return out + (effects,)
    return out


def write_csv(schema, batch, path, decode=None):
    """Write ``batch`` as a header + comma-separated rows.

    ``decode`` maps feature name -> {id: string}; by default ids are written
    as ``id - 1`` so synthetic members round-trip as 0-based values.
    """
    names = schema.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + [schema.label_column])
        cols = [batch.ids[nm] for nm in names]
        for i in range(len(batch)):
            row = []
            for nm, col in zip(names, cols):
                v = int(col[i])
                row.append(decode[nm][v] if decode else str(v - 1))
            row.append(str(int(batch.labels[i])))
            w.writerow(row)


def load_csv(schema, path, dictionaries=None):
    """Read a CSV into an :class:`ExampleBatch`.

    Without ``dictionaries`` the per-feature encoding is fit on this file in
    first-seen order (ids 1..cardinality). Values missing from a given
    dictionary map to id 0. Returns ``(batch, dictionaries)``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    for name in schema.names + [schema.label_column]:
        if name not in col:
            raise IngestionError(f"{path}: missing column {name!r}")
    fit = dictionaries is None
    dictionaries = {f.name: {} for f in schema.features} if fit else dictionaries
    ids = {f.name: np.zeros(len(body), dtype=np.int64) for f in schema.features}
    labels = np.zeros(len(body))
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != len(header):
            raise IngestionError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        lab = row[col[schema.label_column]].strip()
        if lab not in ("0", "1"):
            raise IngestionError(f"{path}: non-binary label {lab!r} on line {line}")
        labels[r] = float(lab)
        for f in schema.features:
            value = row[col[f.name]]
            table = dictionaries[f.name]
            if value not in table and fit:
                if len(table) >= f.cardinality:
                    raise IngestionError(
                        f"{path}: feature {f.name!r} has more than {f.cardinality} distinct values (line {line})"
                    )
                table[value] = len(table) + 1
            ids[f.name][r] = table.get(value, 0)
    return ExampleBatch(ids, labels), dictionaries


def decode_ids(dictionaries, name, ids):
    inverse = {v: k for k, v in dictionaries[name].items()}
    return [inverse.get(int(i)) for i in ids]


def partition_report(batch, schema):
    """Counts per combination of distribution-feature ids, sorted by key."""
    names = [f.name for f in schema.distribution_features]
    keys = zip(*(batch.ids[nm].tolist() for nm in names))
    counts = Counter(keys)
    return {k: counts[k] for k in sorted(counts)}


def save_schema(schema, path, extra=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**schema.to_dict(), **(extra or {})}, fh, indent=2, sort_keys=True)


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return FeatureSchema.from_dict({k: d[k] for k in ("features", "label_column") if k in d})
