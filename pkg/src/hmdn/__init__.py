"""Hierarchical multi-distribution CTR models built on residual quantization."""
from .backbones import DNNBackbone, DWBackbone, MoEBackbone
from .data import SyntheticConfig, generate_synthetic, load_csv, partition_report, write_csv
from .embedding import ExampleBatch, Feature, FeatureSchema, embed_batch, embedding_gradients
from .estimator import HMDNClassifier
from .metrics import auc, log_loss, total_loss
from .model import HMDNModel, ModelConfig, check_gradients
from .quantizer import QuantizerConfig, ResidualQuantizer, codebook_usage_stats, rq_loss, vq_nearest
from .training import Trainer, TrainConfig, evaluate, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DNNBackbone", "DWBackbone", "MoEBackbone",
    "SyntheticConfig", "generate_synthetic", "load_csv", "partition_report", "write_csv",
    "ExampleBatch", "Feature", "FeatureSchema", "embed_batch", "embedding_gradients",
    "HMDNClassifier",
    "auc", "log_loss", "total_loss",
    "HMDNModel", "ModelConfig", "check_gradients",
    "QuantizerConfig", "ResidualQuantizer", "codebook_usage_stats", "rq_loss", "vq_nearest",
    "Trainer", "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint",
]
