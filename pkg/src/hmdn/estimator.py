"""scikit-learn compatible wrapper around :class:`HMDNModel`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .embedding import ExampleBatch, Feature, FeatureSchema, embed_batch
from .model import HMDNModel, ModelConfig
from .quantizer import QuantizerConfig
from .training import Trainer, TrainConfig


class HMDNClassifier(ClassifierMixin, BaseEstimator):
    """Binary CTR classifier over integer-encoded categorical columns.

    ``X`` holds one id column per schema feature (ids 1..cardinality, 0 for
    unseen values). Without a ``schema`` one is inferred from the training
    data: every column is a feature and ``distribution_columns`` lists the
    indices of the distribution features.

    ``quantizer_depth=0`` disables residual quantization; the gate then reads
    the raw distribution embedding.
    """

    def __init__(self, schema=None, distribution_columns=(0,), backbone="moe", gate_input="hierarchical_sD",
                 quantizer_depth=6, codebook_size=64, mode="implicit", beta=0.25, include_zero_code=False,
                 alpha=1.0, n_experts=3, hidden_units=(128, 64, 32), embedding_dim=8, embedding_init_std=0.01,
                 learning_rate=1e-3, batch_size=256, epochs=3, random_state=0):
        self.schema = schema
        self.distribution_columns = distribution_columns
        self.backbone = backbone
        self.gate_input = gate_input
        self.quantizer_depth = quantizer_depth
        self.codebook_size = codebook_size
        self.mode = mode
        self.beta = beta
        self.include_zero_code = include_zero_code
        self.alpha = alpha
        self.n_experts = n_experts
        self.hidden_units = hidden_units
        self.embedding_dim = embedding_dim
        self.embedding_init_std = embedding_init_std
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _make_schema(self, X):
        if self.schema is not None:
            return self.schema
        dist = set(self.distribution_columns)
        feats = [
            Feature(f"x{j}", max(int(X[:, j].max()), 1), self.embedding_dim, j in dist, f"x{j}" if j in dist else None)
            for j in range(X.shape[1])
        ]
        return FeatureSchema(tuple(feats))

    def _model_config(self):
        q = None
        if self.quantizer_depth:
            q = QuantizerConfig(depth=self.quantizer_depth, codebook_size=self.codebook_size, mode=self.mode,
                                beta=self.beta, include_zero_code=self.include_zero_code)
        gate = self.gate_input if q is not None else "raw_xb"
        return ModelConfig(backbone=self.backbone, gate_input=gate, n_experts=self.n_experts,
                           hidden_units=tuple(self.hidden_units), embedding_init_std=self.embedding_init_std,
                           quantizer=q)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size != 2:
            raise ValueError(f"HMDNClassifier is binary; got classes {self.classes_.tolist()}")
        self.schema_ = self._make_schema(X)
        self.n_features_in_ = X.shape[1]
        self.model_ = HMDNModel(self.schema_, self._model_config(), seed=self.random_state)
        trainer = Trainer(self.model_, TrainConfig(alpha=self.alpha, lr=self.learning_rate,
                                                   batch_size=self.batch_size, epochs=self.epochs,
                                                   seed=self.random_state))
        self.loss_curve_ = trainer.fit(ExampleBatch.from_matrix(self.schema_, X, y_enc))
        return self

    def _batch(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.int64)
        X = X.copy()
        for j, f in enumerate(self.schema_.features):
            X[(X[:, j] < 0) | (X[:, j] > f.cardinality), j] = 0
        return ExampleBatch.from_matrix(self.schema_, X)

    def predict_proba(self, X):
        p = self.model_.predict_proba(self._batch(X))
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X):
        return self.model_.forward(self._batch(X)).logits

    def predict(self, X):
        return self.classes_[(self.predict_proba(X)[:, 1] >= 0.5).astype(int)]

    def transform(self, X):
        """Hierarchical representation ``s_D`` (or ``x_b`` without a quantizer)."""
        batch = self._batch(X)
        x_b = embed_batch(self.schema_, self.model_.tables, batch)[1]
        if self.model_.quantizer is None:
            return x_b
        return self.model_.quantizer.quantize(x_b).s_D
