import copy
import json
import math

import numpy as np
import pytest
import torch

from conftest import class_images, tiny_config
from ressl.augment import make_batch_views
from ressl.checkpoint import Checkpoint
from ressl.config import ExperimentConfig, lr_at
from ressl.data import ArrayDataset
from ressl.exceptions import ConfigError, NumericError
from ressl.models import forward_embed, l2_normalize
from ressl.relational import info_nce_loss, relational_loss
from ressl.trainer import Trainer, _EpochViews, init_state, make_optimizer, read_metrics, train_step


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def _views(config, data, idx, epoch=0):
    batch = data.take(idx)
    return batch, make_batch_views(batch.images, batch.ids, *config.policies(), config.multicrop_sides,
                                   config.seed, epoch)


# -- schedule ------------------------------------------------------------------

def test_lr_schedule_examples():
    config = ExperimentConfig(batch_size=256)
    spe = 195
    peak = 0.06
    assert config.base_lr == pytest.approx(peak)
    assert lr_at(0, config, spe) == 0.0
    assert lr_at(1, config, spe) == pytest.approx(peak / (5 * spe))
    assert lr_at(5 * spe, config, spe) == pytest.approx(peak, rel=1e-15)
    last = config.epochs * spe - 1
    assert lr_at(last, config, spe) < 1e-3 * peak
    ramp = [lr_at(s, config, spe) for s in range(5 * spe + 1)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    tail = [lr_at(s, config, spe) for s in range(5 * spe, last + 1)]
    assert all(b <= a for a, b in zip(tail, tail[1:]))
    assert max(lr_at(s, config, spe) for s in range(last + 1)) == pytest.approx(peak)


def test_lr_scales_with_batch_size():
    assert ExperimentConfig(batch_size=512).base_lr == pytest.approx(0.12)
    assert ExperimentConfig(batch_size=256, base_lr=0.1).base_lr == 0.1


# -- config --------------------------------------------------------------------

def test_config_defaults_by_dataset(tmp_path):
    small = ExperimentConfig(dataset={"name": "cifar10", "root_path": str(tmp_path)})
    medium = ExperimentConfig(dataset={"name": "stl10", "root_path": str(tmp_path)})
    assert (small.queue_capacity, small.ema_momentum, small.image_side) == (4096, 0.99, 32)
    assert (medium.queue_capacity, medium.ema_momentum, medium.image_side) == (16384, 0.996, 64)
    assert (small.weight_decay, small.sgd_momentum, small.warmup_epochs, small.epochs) == (5e-4, 0.9, 5, 200)
    assert (small.tau_t, small.tau_s) == (0.04, 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(tau_t=0.2, tau_s=0.1)
    with pytest.raises(ConfigError):
        tiny_config(bn_groups=3)
    with pytest.raises(ConfigError):
        tiny_config(queue_capacity=4)
    with pytest.raises(ConfigError):
        tiny_config(objective="simclr")
    with pytest.raises(ConfigError):
        tiny_config(multicrop_sides=[24, 32])
    with pytest.raises(ConfigError):
        tiny_config(teacher_augmentation="crop+sharpen")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"batch_sise": 3})


def test_config_roundtrip_and_hash(tmp_path):
    config = tiny_config()
    config.save(tmp_path / "c.yaml")
    from ressl.config import load_config
    again = load_config(tmp_path / "c.yaml")
    assert again == config and again.hash() == config.hash()
    assert config.override(tau_t=0.05).hash() != config.hash()
    assert config.override(device="cpu", num_workers=2, knn_every=3).hash() == config.hash()


def test_teacher_augmentation_grid():
    for name in ("weak", "crop", "crop+flip", "crop+flip+jitter", "contrastive", "none", "flip+blur"):
        teacher, _ = tiny_config(teacher_augmentation=name).policies()
        assert teacher.output_side == 32
    weak, student = tiny_config().policies()
    assert weak.kind == "weak" and weak.color_jitter is None
    assert student.grayscale_prob == 0.2 and student.blur_prob == 0.5


# -- optimizer -----------------------------------------------------------------

def test_weight_decay_groups():
    state = init_state(tiny_config())
    decay, no_decay = state.optimizer.param_groups
    assert decay["weight_decay"] == 5e-4 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim > 1 for p in decay["params"])
    assert all(p.ndim == 1 for p in no_decay["params"])
    bn = state.pair.student.backbone.stem[1]
    ids = {id(p) for p in no_decay["params"]}
    assert id(bn.weight) in ids and id(bn.bias) in ids
    assert state.optimizer.defaults["momentum"] == 0.9


# -- single step ---------------------------------------------------------------

@pytest.fixture
def warm_state(tiny_dataset):
    """A state whose queue is already full, plus one batch of views."""
    config = tiny_config()
    state = init_state(config)
    order = np.arange(len(tiny_dataset))
    for i in range(2):
        batch, views = _views(config, tiny_dataset, order[i * 8:(i + 1) * 8])
        state, metrics = train_step(state, batch, config, 4, views=views)
        assert metrics["warmup"]
    assert state.queue.full
    batch, views = _views(config, tiny_dataset, order[16:24])
    return config, state, batch, views


def test_no_op_step(warm_state):
    config, state, batch, views = warm_state
    config = config.override(base_lr=0.0, ema_momentum=1.0)
    state.pair.momentum = 1.0
    student, teacher = _params(state.pair.student), _params(state.pair.teacher)
    state, metrics = train_step(state, batch, config, 4, views=views)
    assert not metrics["warmup"] and metrics["lr"] == 0.0
    assert _same(student, _params(state.pair.student))
    assert _same(teacher, _params(state.pair.teacher))


def test_step_ordering_and_queue_rotation(warm_state):
    config, state, batch, views = warm_state
    teacher = copy.deepcopy(state.pair.teacher).train()
    student = copy.deepcopy(state.pair.student).train()
    queue_before = state.queue.buffer.clone()
    with torch.no_grad():
        z_t = l2_normalize(forward_embed(teacher, views[0], config.bn_groups))
    z_s = l2_normalize(forward_embed(student, views[1][0], 1))
    # the loss uses the queue as it was before this batch is enqueued
    expected = relational_loss(z_t, z_s, queue_before, config.temps).item()
    state, metrics = train_step(state, batch, config, 4, views=views)
    assert metrics["loss"] == pytest.approx(expected, rel=1e-5)
    torch.testing.assert_close(state.queue.ordered()[-8:], z_t)
    assert {"step", "epoch", "lr", "loss", "teacher_entropy"} <= set(metrics)


def test_info_nce_step_is_momentum_contrast(warm_state):
    config, state, batch, views = warm_state
    config = config.override(objective="info_nce")
    teacher = copy.deepcopy(state.pair.teacher).train()
    student = copy.deepcopy(state.pair.student).train()
    queue_before = state.queue.buffer.clone()
    with torch.no_grad():
        z_t = l2_normalize(forward_embed(teacher, views[0], config.bn_groups))
    z_s = l2_normalize(forward_embed(student, views[1][0], 1))
    expected = info_nce_loss(z_s, z_t, queue_before, config.info_nce_tau).item()
    _, metrics = train_step(state, batch, config, 4, views=views)
    assert metrics["loss"] == pytest.approx(expected, rel=1e-5)


def test_byol_style_objective_runs(tiny_dataset):
    config = tiny_config(objective="byol_style", epochs=1)
    result = Trainer(config, dataset=tiny_dataset).run()
    losses = [r["loss"] for r in result.history if r["kind"] == "step" and not r["warmup"]]
    assert losses and all(-1.0 - 1e-6 <= v <= 1.0 + 1e-6 for v in losses)


def test_warmup_fills_queue_without_updating_student(tiny_dataset):
    config = tiny_config(queue_capacity=24)
    state = init_state(config)
    student = _params(state.pair.student)
    for i in range(3):  # ceil(24 / 8) warm-up steps
        batch, views = _views(config, tiny_dataset, np.arange(i * 8, (i + 1) * 8))
        state, metrics = train_step(state, batch, config, 4, views=views)
        assert metrics["warmup"] and metrics["loss"] == 0.0
    assert state.queue.full
    assert _same(student, _params(state.pair.student))
    batch, views = _views(config, tiny_dataset, np.arange(24, 32))
    state, metrics = train_step(state, batch, config, 4, views=views)
    assert not metrics["warmup"]


def test_first_loss_is_near_log_k():
    images, _ = class_images(320, 10, seed=4)
    config = tiny_config(batch_size=64, queue_capacity=256, bn_groups=8, epochs=1,
                         backbone={"arch": "resnet18_small", "base_width": 8},
                         head={"hidden_dim": 128, "output_dim": 32})
    result = Trainer(config, dataset=ArrayDataset(images)).run(max_steps=5)
    first = next(r for r in result.history if r["kind"] == "step" and not r["warmup"])
    assert abs(first["loss"] - math.log(256)) <= 0.15 * math.log(256)


def test_non_finite_loss_aborts_with_snapshot(tmp_path, tiny_dataset, monkeypatch):
    import ressl.trainer as trainer_mod

    def broken(state, z_t, z_s, config):
        return (z_s[0].sum() * float("nan")), 0.0

    monkeypatch.setattr(trainer_mod, "_objective_loss", broken)
    with pytest.raises(NumericError, match="non-finite"):
        Trainer(tiny_config(), tmp_path, dataset=tiny_dataset).run()
    snap = json.loads((tmp_path / "nan_snapshot.json").read_text())
    assert snap["step"] == 2 and len(snap["batch_ids"]) == 8
    assert (tmp_path / "nan_snapshot.ckpt").exists()


# -- full runs -----------------------------------------------------------------

def test_two_epoch_bookkeeping(tmp_path, tiny_dataset):
    config = tiny_config(epochs=3)
    result = Trainer(config, tmp_path, dataset=tiny_dataset).run()
    steps = [r for r in result.history if r["kind"] == "step"]
    assert len(steps) == 3 * (32 // 8) == result.state.global_step
    assert [r["step"] for r in steps] == list(range(12))
    assert all(math.isfinite(r["loss"]) for r in steps)
    ramp = [r["lr"] for r in steps[:4]]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    epochs = [r for r in result.history if r["kind"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [0, 1, 2]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0002.ckpt", "epoch_0003.ckpt"]
    assert result.checkpoint == tmp_path / "final.ckpt"
    assert read_metrics(tmp_path / "metrics.jsonl") == result.history


def test_identical_metrics_across_runs(tmp_path, tiny_dataset):
    a = Trainer(tiny_config(), tmp_path / "a", dataset=tiny_dataset).run()
    b = Trainer(tiny_config(), tmp_path / "b", dataset=tiny_dataset).run()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert _same(_params(a.state.pair.teacher), _params(b.state.pair.teacher))


def test_worker_processes_do_not_change_results(tmp_path, tiny_dataset):
    Trainer(tiny_config(), tmp_path / "a", dataset=tiny_dataset).run()
    Trainer(tiny_config(num_workers=1), tmp_path / "b", dataset=tiny_dataset).run()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_mid_epoch_matches_uninterrupted(tmp_path, tiny_dataset):
    config = tiny_config(epochs=4)
    full = Trainer(config, tmp_path / "full", dataset=tiny_dataset).run()
    Trainer(config, tmp_path / "split", dataset=tiny_dataset).run(max_steps=6)
    resumed = Trainer(config, tmp_path / "split", dataset=tiny_dataset).run(resume=True)
    a = [r["loss"] for r in full.history if r["kind"] == "step"]
    b = [r["loss"] for r in resumed.history if r["kind"] == "step"]
    assert len(a) == len(b) == 16
    np.testing.assert_allclose(b, a, rtol=1e-5)
    assert read_metrics(tmp_path / "split" / "metrics.jsonl") == resumed.history


def test_resume_refuses_other_config(tmp_path, tiny_dataset):
    Trainer(tiny_config(), tmp_path, dataset=tiny_dataset).run(max_steps=4)
    with pytest.raises(ConfigError, match="different config"):
        Trainer(tiny_config(tau_t=0.03), tmp_path, dataset=tiny_dataset).run(resume=True)


def test_interrupt_saves_resumable_checkpoint(tmp_path, tiny_dataset):
    def stop(record):
        if record["step"] == 5:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        Trainer(tiny_config(), tmp_path, dataset=tiny_dataset).run(progress=stop)
    ckpt = Checkpoint(tmp_path / "last.ckpt")
    assert ckpt.metadata["step"] == 6
    result = Trainer(tiny_config(), tmp_path, dataset=tiny_dataset).run(resume=True)
    assert result.state.global_step == 8


def test_checkpoint_contents(tmp_path, tiny_dataset):
    result = Trainer(tiny_config(), tmp_path, dataset=tiny_dataset).run()
    ckpt = Checkpoint(result.checkpoint)
    meta = ckpt.metadata
    assert meta["config_hash"] == tiny_config().override(normalization=meta["config"]["normalization"]).hash()
    assert (meta["epoch"], meta["step"]) == (2, 8)
    q = ckpt.queue()
    assert torch.equal(q["buffer"], result.state.queue.buffer) and q["cursor"] == result.state.queue.cursor
    for k, v in ckpt.teacher().items():
        assert torch.equal(v, result.state.pair.teacher.state_dict()[k])
    assert ckpt.optimizer() is not None


def test_knn_monitor_and_best_checkpoint(tmp_path):
    images, labels = class_images(32, 4)
    test_images, test_labels = class_images(16, 4, seed=5)
    monitor = (ArrayDataset(images, labels), ArrayDataset(test_images, test_labels))
    config = tiny_config(knn_every=1)
    result = Trainer(config, tmp_path, dataset=ArrayDataset(images), monitor=monitor).run()
    accs = [r["knn_top1"] for r in result.history if r["kind"] == "epoch"]
    assert len(accs) == 2 and all(0 <= a <= 100 for a in accs)
    assert Checkpoint(tmp_path / "checkpoints" / "best.ckpt").metadata["knn_top1"] == max(accs)


def test_collapse_check_both_extremes(tiny_dataset):
    trainer = Trainer(tiny_config(), dataset=tiny_dataset)
    log_k = math.log(16)
    healthy = [{"teacher_entropy": 0.5 * log_k}] * 8
    assert trainer.collapse_check(healthy, 0) is None
    peaked = healthy[:6] + [{"teacher_entropy": 0.001 * log_k}] * 2
    warning = trainer.collapse_check(peaked, 0)
    assert warning["warning"] == "collapse" and warning["entropy_ratio"] < 0.01
    flat = [{"teacher_entropy": 0.999 * log_k}] * 8
    assert trainer.collapse_check(flat, 3)["epoch"] == 3


def test_epoch_views_dataset(tiny_dataset):
    config = tiny_config()
    order = [np.arange(8), np.arange(8, 16)]
    views = _EpochViews(tiny_dataset, order, config.policies(), config, 0)
    batch, (t, s) = views[1]
    assert len(views) == 2 and batch.ids.tolist() == list(range(8, 16))
    assert t.shape == (8, 3, 32, 32) and s[0].shape == (8, 3, 32, 32)


def test_optimizer_respects_config():
    state = init_state(tiny_config(weight_decay=1e-3))
    assert state.optimizer.param_groups[0]["weight_decay"] == 1e-3
    opt = make_optimizer(state.pair.student, tiny_config(sgd_momentum=0.5))
    assert opt.defaults["momentum"] == 0.5
