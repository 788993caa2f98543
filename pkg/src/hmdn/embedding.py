"""Feature schema, example batches and embedding tables.

Every categorical feature is embedded; the concatenation of all embeddings is
``x`` and the concatenation of the distribution features only (schema order)
is ``x_b``. Distribution features therefore appear in both.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, IngestionError, ShapeError
from .nn import SparseRows

DEFAULT_EMBEDDING_DIM = 8


@dataclass(frozen=True)
class Feature:
    name: str
    cardinality: int
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    is_distribution_feature: bool = False
    distribution_type: Optional[str] = None
    explicit_level: Optional[int] = None

    def to_dict(self):
        return {
            "name": self.name,
            "cardinality": self.cardinality,
            "embedding_dim": self.embedding_dim,
            "is_distribution_feature": self.is_distribution_feature,
            "distribution_type": self.distribution_type,
            "explicit_level": self.explicit_level,
        }


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    label_column: str = "label"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate feature names in schema: {names}")
        for f in self.features:
            if f.cardinality < 1:
                raise ConfigError(f"feature {f.name!r}: cardinality must be >= 1")
            if f.embedding_dim < 1:
                raise ConfigError(f"feature {f.name!r}: embedding_dim must be >= 1")
            if f.explicit_level is not None and not f.is_distribution_feature:
                raise ConfigError(f"feature {f.name!r}: explicit_level set on a non-distribution feature")
        if not any(f.is_distribution_feature for f in self.features):
            raise ConfigError("schema needs at least one distribution feature")
        if self.label_column in names:
            raise ConfigError(f"label column {self.label_column!r} clashes with a feature name")

    @property
    def names(self):
        return [f.name for f in self.features]

    @property
    def distribution_features(self):
        return [f for f in self.features if f.is_distribution_feature]

    @property
    def x_dim(self):
        return sum(f.embedding_dim for f in self.features)

    @property
    def xb_dim(self):
        return sum(f.embedding_dim for f in self.distribution_features)

    @property
    def distribution_types(self):
        """Distinct distribution type labels in schema order."""
        out = []
        for f in self.distribution_features:
            t = f.distribution_type or f.name
            if t not in out:
                out.append(t)
        return out

    def explicit_levels(self, depth=None):
        """Map each distribution feature to a 1-based quantizer level.

        Features without ``explicit_level`` are assigned by distribution type,
        in order of first appearance.
        """
        types = self.distribution_types
        levels = {}
        for f in self.distribution_features:
            if f.explicit_level is not None:
                levels[f.name] = f.explicit_level
            else:
                levels[f.name] = types.index(f.distribution_type or f.name) + 1
        if depth is not None:
            for name, lvl in levels.items():
                if not 1 <= lvl <= depth:
                    raise ConfigError(f"feature {name!r}: explicit level {lvl} outside [1, {depth}]")
            missing = sorted(set(range(1, depth + 1)) - set(levels.values()))
            if missing:
                raise ConfigError(f"explicit mode: levels {missing} have no distribution feature")
        return levels

    def to_dict(self):
        return {"label_column": self.label_column, "features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"label_column", "features"}
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        feats = []
        allowed = set(Feature.__dataclass_fields__)
        for fd in d.get("features", []):
            bad = set(fd) - allowed
            if bad:
                raise ConfigError(f"unknown feature keys: {sorted(bad)}")
            try:
                feats.append(Feature(**fd))
            except TypeError as e:
                raise ConfigError(f"bad feature entry {fd}: {e}") from None
        return cls(tuple(feats), d.get("label_column", "label"))


@dataclass
class ExampleBatch:
    ids: dict
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.ids = {k: np.asarray(v, dtype=np.int64) for k, v in self.ids.items()}
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = len(self.labels)
        for k, v in self.ids.items():
            if v.shape != (n,):
                raise ShapeError(f"column {k!r} has length {v.shape} but there are {n} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return ExampleBatch({k: v[idx] for k, v in self.ids.items()}, self.labels[idx])

    def validate(self, schema):
        for f in schema.features:
            if f.name not in self.ids:
                raise IngestionError(f"batch is missing feature {f.name!r}")
            col = self.ids[f.name]
            bad = np.flatnonzero((col < 0) | (col > f.cardinality))
            if bad.size:
                r = int(bad[0])
                raise IngestionError(
                    f"feature {f.name!r}: id {int(col[r])} at row {r} outside [0, {f.cardinality}]"
                )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            r = int(np.flatnonzero((self.labels != 0) & (self.labels != 1))[0])
            raise IngestionError(f"non-binary label {self.labels[r]!r} at row {r}")

    def to_matrix(self, schema):
        return np.column_stack([self.ids[f.name] for f in schema.features])

    @classmethod
    def from_matrix(cls, schema, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != len(schema.features):
            raise ShapeError(f"expected {len(schema.features)} id columns, got shape {X.shape}")
        labels = np.zeros(X.shape[0]) if y is None else y
        return cls({f.name: X[:, j] for j, f in enumerate(schema.features)}, labels)


def init_tables(schema, rng, std=0.01):
    """One (cardinality + 1, dim) table per feature; row 0 is the OOV row."""
    return {f.name: rng.normal(0.0, std, size=(f.cardinality + 1, f.embedding_dim)) for f in schema.features}


def embed_batch(schema, tables, batch):
    """Return ``(x, x_b, slice_map)``.

    ``slice_map`` maps each distribution feature to its column slice in x_b.
    """
    batch.validate(schema)
    parts, dist_parts, slice_map = [], [], {}
    col = 0
    for f in schema.features:
        e = tables[f.name][batch.ids[f.name]]
        parts.append(e)
        if f.is_distribution_feature:
            dist_parts.append(e)
            slice_map[f.name] = slice(col, col + f.embedding_dim)
            col += f.embedding_dim
    return np.hstack(parts), np.hstack(dist_parts), slice_map


def embedding_gradients(schema, batch, grad_x, grad_xb, slice_map):
    """Scatter gradients of x and x_b back onto table rows as :class:`SparseRows`."""
    n = len(batch)
    if grad_x.shape != (n, schema.x_dim):
        raise ShapeError(f"grad_x has shape {grad_x.shape}, expected {(n, schema.x_dim)}")
    if grad_xb is not None and grad_xb.shape != (n, schema.xb_dim):
        raise ShapeError(f"grad_xb has shape {grad_xb.shape}, expected {(n, schema.xb_dim)}")
    out = {}
    col = 0
    for f in schema.features:
        g = grad_x[:, col:col + f.embedding_dim]
        col += f.embedding_dim
        if grad_xb is not None and f.name in slice_map:
            g = g + grad_xb[:, slice_map[f.name]]
        ids = batch.ids[f.name]
        rows, inverse = np.unique(ids, return_inverse=True)
        acc = np.zeros((rows.size, f.embedding_dim))
        np.add.at(acc, inverse, g)
        out[f.name] = SparseRows(rows, acc)
    return out
