"""scikit-learn style front ends.

``ReSSL`` pretrains on an image array and transforms images to frozen
backbone features; ``LinearProbe`` and ``KNNProbe`` are classifiers over such
features, so the three compose in a :class:`sklearn.pipeline.Pipeline`.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_images, check_labels, check_positive
from .config import ExperimentConfig
from .data import ArrayDataset
from .evaluation import extract_features, knn_predict, load_networks
from .exceptions import ConfigError
from .models import BackboneSpec, ProjectionHeadSpec, l2_normalize


class ReSSL(TransformerMixin, BaseEstimator):
    """Relational self-supervised pretraining as a transformer.

    ``fit`` trains a student/teacher pair on ``X`` (``(N, H, W, 3)`` images,
    labels ignored); ``transform`` returns the student's pooled backbone
    features under a deterministic centre view.
    """

    def __init__(self, arch="resnet18_small", base_width=64, hidden_dim=512, output_dim=128, tau_t=0.04,
                 tau_s=0.1, queue_capacity=4096, momentum=0.99, batch_size=256, epochs=200, base_lr=None,
                 weight_decay=5e-4, warmup_epochs=5, bn_groups=8, multicrop_sides=None, image_side=None,
                 teacher_augmentation="weak", objective="ressl", out_dir=None, seed=0):
        self.arch = arch
        self.base_width = base_width
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.tau_t = tau_t
        self.tau_s = tau_s
        self.queue_capacity = queue_capacity
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.bn_groups = bn_groups
        self.multicrop_sides = multicrop_sides
        self.image_side = image_side
        self.teacher_augmentation = teacher_augmentation
        self.objective = objective
        self.out_dir = out_dir
        self.seed = seed

    def _config(self, side: int) -> ExperimentConfig:
        image_side = self.image_side or (side if side in (32, 64) else 64)
        return ExperimentConfig(
            batch_size=self.batch_size, epochs=self.epochs, tau_t=self.tau_t, tau_s=self.tau_s,
            queue_capacity=self.queue_capacity, ema_momentum=self.momentum, base_lr=self.base_lr,
            weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs, bn_groups=self.bn_groups,
            objective=self.objective, image_side=image_side,
            multicrop_sides=list(self.multicrop_sides) if self.multicrop_sides else None,
            teacher_augmentation=self.teacher_augmentation,
            backbone=BackboneSpec(self.arch, base_width=self.base_width),
            head=ProjectionHeadSpec(self.hidden_dim, self.output_dim), seed=self.seed,
        )

    def fit(self, X, y=None, max_steps=None):
        from .trainer import Trainer

        X = check_images(X)
        trainer = Trainer(self._config(X.shape[1]), self.out_dir, dataset=ArrayDataset(X))
        result = trainer.run(max_steps=max_steps)
        self._set_fitted(result.state.pair.student, result.state.pair.teacher, trainer.config)
        self.queue_ = result.state.queue
        self.history_ = result.history
        self.collapse_warnings_ = result.warnings
        return self

    def _set_fitted(self, student, teacher, config):
        self.student_ = student.eval()
        self.teacher_ = None if teacher is None else teacher.eval()
        self.config_ = config
        self.n_features_out_ = student.backbone.feature_dim
        self.normalization_ = config.normalization

    @classmethod
    def from_checkpoint(cls, path, network: str = "student") -> "ReSSL":
        net, config, _ = load_networks(path, network)
        est = cls(arch=config.backbone.arch, base_width=config.backbone.base_width,
                  hidden_dim=config.head.hidden_dim, output_dim=config.head.output_dim,
                  tau_t=config.tau_t, tau_s=config.tau_s, queue_capacity=config.queue_capacity,
                  momentum=config.ema_momentum, batch_size=config.batch_size, epochs=config.epochs,
                  base_lr=config.base_lr, weight_decay=config.weight_decay,
                  warmup_epochs=config.warmup_epochs, bn_groups=config.bn_groups,
                  multicrop_sides=config.multicrop_sides, image_side=config.image_side,
                  teacher_augmentation=config.teacher_augmentation, objective=config.objective,
                  seed=config.seed)
        est._set_fitted(net, None, config)
        return est

    def _norm(self):
        if self.normalization_ is None:
            return None, None
        return self.normalization_["mean"], self.normalization_["std"]

    def transform(self, X):
        check_is_fitted(self, "student_")
        X = check_images(X)
        return extract_features(self.student_.backbone, ArrayDataset(X), self.config_.image_side, *self._norm())

    def embed(self, X, normalize: bool = True):
        """Projection-head outputs for ``X`` (unit rows when ``normalize``)."""
        check_is_fitted(self, "student_")
        X = check_images(X)
        z = extract_features(self.student_, ArrayDataset(X), self.config_.image_side, *self._norm())
        return l2_normalize(torch.from_numpy(z)).numpy() if normalize else z


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial linear classifier trained by SGD with momentum and step decay.

    ``lr`` is the rate for a batch of 256 and is scaled linearly with
    ``batch_size``; it is multiplied by ``gamma`` at each milestone epoch.
    """

    def __init__(self, epochs=100, lr=30.0, momentum=0.9, milestones=(60, 80), gamma=0.1, batch_size=256,
                 seed=0):
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.milestones = milestones
        self.gamma = gamma
        self.batch_size = batch_size
        self.seed = seed

    def _init(self, dim: int, num_classes: int):
        gen = torch.Generator().manual_seed(self.seed)
        self.linear_ = torch.nn.Linear(dim, num_classes)
        with torch.no_grad():
            self.linear_.weight.copy_(torch.randn(num_classes, dim, generator=gen) * 0.01)
            self.linear_.bias.zero_()
        self.classes_ = np.arange(num_classes)
        self.n_features_in_ = dim

    def _run(self, features_for_epoch, y: np.ndarray):
        check_positive("batch_size", self.batch_size)
        opt = torch.optim.SGD(self.linear_.parameters(), lr=self.lr * self.batch_size / 256,
                              momentum=self.momentum, weight_decay=0.0)
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(self.milestones), self.gamma)
        rng = np.random.default_rng(self.seed)
        target = torch.from_numpy(y)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            X = torch.from_numpy(np.ascontiguousarray(features_for_epoch(epoch), dtype=np.float32))
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = torch.from_numpy(order[start:start + self.batch_size])
                loss = F.cross_entropy(self.linear_(X[idx]), target[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            sched.step()
            self.loss_curve_.append(total / len(X))
        return self

    def fit(self, X, y, num_classes: int | None = None):
        X = check_features(X)
        y = check_labels(y, len(X))
        self._init(X.shape[1], num_classes or int(y.max()) + 1)
        return self._run(lambda epoch: X, y)

    def fit_schedule(self, features_for_epoch, y, num_classes: int):
        """Like ``fit`` but features are recomputed per epoch (train-time augmentation)."""
        y = check_labels(y, len(y))
        first = check_features(features_for_epoch(0))
        self._init(first.shape[1], num_classes)
        cache = {0: first}
        return self._run(lambda e: cache.pop(e) if e in cache else features_for_epoch(e), y)

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self, "linear_")
        X = check_features(X)
        return self.linear_(torch.from_numpy(X)).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(1)]


class KNNProbe(ClassifierMixin, BaseEstimator):
    """Cosine kNN with ``exp(sim / temperature)``-weighted votes."""

    def __init__(self, k=200, temperature=0.1):
        self.k = k
        self.temperature = temperature

    def fit(self, X, y, num_classes: int | None = None):
        X = check_features(X)
        y = check_labels(y, len(X))
        if self.k > len(X):
            raise ConfigError(f"k={self.k} exceeds the {len(X)} training points")
        self.train_features_ = X
        self.train_labels_ = y
        self.classes_ = np.arange(num_classes or int(y.max()) + 1)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "train_features_")
        X = check_features(X)
        return knn_predict(X, self.train_features_, self.train_labels_, len(self.classes_), self.k,
                           self.temperature)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(1)]
