"""Relational self-supervised pretraining with weak-teacher targets and a memory queue."""

from .augment import AugmentationPolicy, ColorJitter, contrastive_policy, make_view_pair, weak_policy
from .config import ExperimentConfig, load_config, lr_at
from .data import DatasetSpec, ingest, iterate_batches
from .estimators import KNNProbe, LinearProbe, ReSSL
from .evaluation import EvalReport, LinearEvalConfig, export_embeddings, knn_eval, linear_eval
from .models import BackboneSpec, ProjectionHeadSpec, init_pair, l2_normalize
from .relational import (
    MemoryQueue,
    TemperaturePair,
    ema_update,
    info_nce_loss,
    relation_distribution,
    relational_loss,
)
from .trainer import Trainer, train, train_step

__version__ = "0.1.0"
