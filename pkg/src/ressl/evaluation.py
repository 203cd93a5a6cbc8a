"""Frozen-backbone evaluation: linear probe, weighted kNN and embedding export."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import eval_view, make_batch_views, weak_policy
from .checkpoint import Checkpoint
from .data import UNLABELED, ArrayDataset, DatasetSpec, open_split
from .exceptions import ConfigError, IngestError

EMB_MAGIC = b"RSSLEMB\x00"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<8sIII")


@dataclass(frozen=True)
class LinearEvalConfig:
    """Linear-probe schedule. ``lr`` is the value for batch 256 and is scaled linearly."""

    epochs: int = 100
    lr: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (60, 80)
    gamma: float = 0.1
    batch_size: int = 256
    train_augmentation: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.weight_decay != 0:
            raise ConfigError("linear evaluation uses no weight decay")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigError("milestones must be smaller than epochs")

    @property
    def scaled_lr(self) -> float:
        return self.lr * self.batch_size / 256


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class_accuracy: list = field(default_factory=list)
    config_hash: str = ""
    checkpoint_ref: str = ""
    kind: str = "linear"

    def __post_init__(self):
        if not 0 <= self.top1 <= self.top5 + 1e-9 <= 100 + 1e-9:
            raise ValueError(f"inconsistent accuracies top1={self.top1}, top5={self.top5}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of rows whose label is among the ``k`` highest scores (exact count / n)."""
    k = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = (top == labels[:, None]).any(1)
    return 100.0 * int(hits.sum()) / len(labels)


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list:
    out = []
    for c in range(num_classes):
        mask = labels == c
        out.append(float(100.0 * (pred[mask] == c).mean()) if mask.any() else float("nan"))
    return out


@torch.no_grad()
def extract_features(module: torch.nn.Module, data, side: int, mean=None, std=None,
                     batch_size: int = 512) -> np.ndarray:
    """Deterministic centre-view outputs of ``module`` for every record, in record order."""
    was_training = module.training
    device = next(module.parameters()).device
    module.eval()
    out = []
    try:
        for start in range(0, len(data), batch_size):
            batch = data.take(np.arange(start, min(start + batch_size, len(data))))
            x = torch.stack([eval_view(img, side, mean, std) for img in batch.images])
            out.append(module(x.to(device)).float().cpu().numpy())
    finally:
        module.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.float32)


def knn_predict(test_features, train_features, train_labels, num_classes: int, k: int = 200,
                temperature: float = 0.1, chunk: int = 1024) -> np.ndarray:
    """Class scores from a similarity-weighted vote of the ``k`` nearest (cosine) training points.

    Each neighbour votes ``exp(sim / temperature)`` for its label; ties in the
    neighbour ranking are broken by training index.
    """
    train = torch.nn.functional.normalize(torch.tensor(np.asarray(train_features), dtype=torch.float32), dim=1)
    labels = torch.tensor(np.asarray(train_labels), dtype=torch.long)
    if k > len(train):
        raise ConfigError(f"k={k} exceeds the {len(train)} training points")
    test = torch.nn.functional.normalize(torch.tensor(np.asarray(test_features), dtype=torch.float32), dim=1)
    scores = []
    for part in test.split(chunk):
        sim = part @ train.T
        w, idx = sim.topk(k, dim=1, sorted=True)
        votes = torch.zeros(len(part), num_classes)
        votes.scatter_add_(1, labels[idx], (w / temperature).exp())
        scores.append(votes)
    return torch.cat(scores).numpy()


def _labeled(data):
    mask = data.labels != UNLABELED
    if mask.all():
        return data
    keep = np.nonzero(mask)[0]
    batch = data.take(keep)
    return ArrayDataset(batch.images, batch.labels, batch.ids)


def load_networks(checkpoint, network: str = "student"):
    """Rebuild the embedding network stored in a checkpoint, plus its config."""
    from .config import ExperimentConfig
    from .models import init_pair

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint(checkpoint)
    config = ExperimentConfig.from_dict(ckpt.metadata["config"])
    pair = init_pair(config.backbone, config.head, config.seed, config.ema_momentum,
                     config.predictor_hidden if config.objective == "byol_style" else None)
    if network == "student":
        pair.student.load_state_dict(ckpt.student())
        net = pair.student
    elif network == "teacher":
        pair.teacher.load_state_dict(ckpt.teacher())
        net = pair.teacher
    else:
        raise ConfigError(f"network must be 'student' or 'teacher', got {network!r}")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, config, ckpt


def _norm(config):
    if config.normalization is None:
        return None, None
    return config.normalization["mean"], config.normalization["std"]


def param_hash(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _check_dataset(config, dataset: DatasetSpec) -> None:
    if config.dataset is not None and config.dataset.name != dataset.name:
        raise ConfigError(
            f"checkpoint was trained on {config.dataset.name}, cannot evaluate labels of {dataset.name}"
        )


def _open(spec: DatasetSpec, split: str):
    return _labeled(open_split(DatasetSpec(spec.name, spec.root_path, split))[0])


def linear_probe_report(backbone: torch.nn.Module, train_data, test_data, num_classes: int, side: int,
                        mean=None, std=None, config: LinearEvalConfig = LinearEvalConfig(),
                        config_hash: str = "", checkpoint_ref: str = "") -> EvalReport:
    """Train a linear classifier on frozen pooled features and score the test split."""
    from .estimators import LinearProbe

    before = param_hash(backbone)
    test_x = extract_features(backbone, test_data, side, mean, std)
    probe = LinearProbe(epochs=config.epochs, lr=config.lr, momentum=config.momentum,
                        milestones=config.milestones, gamma=config.gamma, batch_size=config.batch_size,
                        seed=config.seed)
    if config.train_augmentation:
        policy = weak_policy(side, mean=mean, std=std)

        @torch.no_grad()
        def epoch_features(epoch):
            backbone.eval()
            feats = []
            for start in range(0, len(train_data), 512):
                b = train_data.take(np.arange(start, min(start + 512, len(train_data))))
                views, _ = make_batch_views(b.images, b.ids, policy, policy, [side], config.seed, epoch)
                feats.append(backbone(views).numpy())
            return np.concatenate(feats)

        probe.fit_schedule(epoch_features, train_data.labels, num_classes)
    else:
        train_x = extract_features(backbone, train_data, side, mean, std)
        probe.fit(train_x, train_data.labels, num_classes=num_classes)
    scores = probe.decision_function(test_x)
    labels = np.asarray(test_data.labels)
    if param_hash(backbone) != before:
        raise RuntimeError("backbone parameters changed during linear evaluation")
    pred = scores.argmax(1)
    return EvalReport(
        top1=topk_accuracy(scores, labels, 1),
        top5=topk_accuracy(scores, labels, 5),
        per_class_accuracy=per_class_accuracy(pred, labels, num_classes),
        config_hash=config_hash,
        checkpoint_ref=checkpoint_ref,
    )


def linear_eval(checkpoint, dataset: DatasetSpec, config: LinearEvalConfig = LinearEvalConfig(),
                network: str = "student") -> EvalReport:
    """Linear evaluation of a checkpoint's backbone on the labeled train split / test split.

    For STL-10 the labeled ``train`` split holds exactly the 5K labeled images.
    """
    net, exp, ckpt = load_networks(checkpoint, network)
    _check_dataset(exp, dataset)
    mean, std = _norm(exp)
    return linear_probe_report(
        net.backbone, _open(dataset, "train"), _open(dataset, "test"), dataset.num_classes,
        exp.image_side, mean, std, config, exp.hash(), str(ckpt.path),
    )


def knn_eval(checkpoint, dataset: DatasetSpec, k: int = 200, temperature: float = 0.1,
             network: str = "student") -> EvalReport:
    net, exp, ckpt = load_networks(checkpoint, network)
    _check_dataset(exp, dataset)
    mean, std = _norm(exp)
    train, test = _open(dataset, "train"), _open(dataset, "test")
    train_x = extract_features(net.backbone, train, exp.image_side, mean, std)
    test_x = extract_features(net.backbone, test, exp.image_side, mean, std)
    scores = knn_predict(test_x, train_x, train.labels, dataset.num_classes, k, temperature)
    labels = np.asarray(test.labels)
    return EvalReport(
        top1=topk_accuracy(scores, labels, 1), top5=topk_accuracy(scores, labels, 5),
        per_class_accuracy=per_class_accuracy(scores.argmax(1), labels, dataset.num_classes),
        config_hash=exp.hash(), checkpoint_ref=str(ckpt.path), kind="knn",
    )


def write_embeddings(path, ids, labels, vectors) -> Path:
    path = Path(path)
    vectors = np.asarray(vectors, dtype="<f4")
    n, dim = vectors.shape
    rec = np.empty(n, dtype=[("id", "<u4"), ("label", "<i4"), ("vec", "<f4", (dim,))])
    rec["id"], rec["label"], rec["vec"] = ids, labels, vectors
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, n, dim))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IngestError(f"cannot write embeddings ({exc.strerror})", path) from exc
    return path


def read_embeddings(path):
    """Returns ``(ids, labels, vectors)`` from an embedding file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read embeddings ({exc.strerror})", path) from exc
    magic, version, n, dim = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC or version != EMB_VERSION:
        raise IngestError("not an embedding file", path)
    rec = np.frombuffer(raw, offset=_EMB_HEADER.size, count=n,
                        dtype=[("id", "<u4"), ("label", "<i4"), ("vec", "<f4", (dim,))])
    return rec["id"].astype(np.int64), rec["label"].astype(np.int64), rec["vec"].copy()


def export_embeddings(checkpoint, dataset: DatasetSpec, split: str, path, features: str = "embedding",
                      network: str = "student") -> Path:
    """Write one row per record of ``split``: projection outputs (``embedding``) or pooled ``backbone`` features."""
    net, exp, _ = load_networks(checkpoint, network)
    data = open_split(DatasetSpec(dataset.name, dataset.root_path, split))[0]
    module = {"embedding": net, "backbone": net.backbone}.get(features)
    if module is None:
        raise ConfigError(f"features must be 'embedding' or 'backbone', got {features!r}")
    mean, std = _norm(exp)
    vectors = extract_features(module, data, exp.image_side, mean, std)
    return write_embeddings(path, data.ids, data.labels, vectors)
