"""Memory queue, relation distributions, the relational loss and its baselines.

All distributions are taken over the ``K`` rows of the queue only; the
current batch is enqueued after its loss has been computed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigError, NumericError


@dataclass(frozen=True)
class TemperaturePair:
    """Teacher/student softmax temperatures.

    ``tau_t <= tau_s`` is enforced; a teacher temperature above half the
    student one is allowed (ablations need it) but warns that runs near
    ``tau_t == tau_s`` collapse.
    """

    tau_t: float = 0.04
    tau_s: float = 0.1

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ConfigError(f"temperatures must be positive, got tau_t={self.tau_t}, tau_s={self.tau_s}")
        if self.tau_t > self.tau_s:
            raise ConfigError(
                f"tau_t={self.tau_t} > tau_s={self.tau_s}: the teacher distribution must be sharper"
            )
        if self.tau_t > 0.5 * self.tau_s:
            warnings.warn(
                f"tau_t={self.tau_t} is close to tau_s={self.tau_s}; expect collapse",
                stacklevel=3,
            )


class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm embeddings stored in a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32, norm_tol: float = 1e-5, device="cpu"):
        if capacity <= 0 or dim <= 0:
            raise ConfigError("queue capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.norm_tol = norm_tol
        self.buffer = torch.zeros(self.capacity, self.dim, dtype=dtype, device=device)
        self.cursor = 0
        self.filled = 0

    @property
    def full(self) -> bool:
        return self.filled == self.capacity

    def __len__(self) -> int:
        return self.filled

    @torch.no_grad()
    def enqueue(self, z: torch.Tensor) -> "MemoryQueue":
        z = z.detach()
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ConfigError(f"expected embeddings of shape (B, {self.dim}), got {tuple(z.shape)}")
        b = z.shape[0]
        if b > self.capacity:
            raise ConfigError(f"batch of {b} exceeds queue capacity {self.capacity}")
        norms = z.norm(dim=1)
        bad = ((norms - 1).abs() > self.norm_tol).nonzero()
        if len(bad):
            i = int(bad[0])
            raise NumericError(f"row {i} has norm {float(norms[i]):.6g}; enqueue expects unit vectors")
        idx = (torch.arange(b, device=self.buffer.device) + self.cursor) % self.capacity
        self.buffer[idx] = z.to(self.buffer.dtype)
        self.cursor = (self.cursor + b) % self.capacity
        self.filled = min(self.capacity, self.filled + b)
        return self

    def ordered(self) -> torch.Tensor:
        """Stored rows, oldest first."""
        if not self.full:
            return self.buffer[: self.filled].clone()
        return torch.roll(self.buffer, -self.cursor, dims=0)

    def state_dict(self) -> dict:
        return {"buffer": self.buffer.clone(), "cursor": self.cursor, "filled": self.filled}

    def load_state_dict(self, state: dict) -> None:
        buf = state["buffer"]
        if tuple(buf.shape) != (self.capacity, self.dim):
            raise ConfigError(f"queue state has shape {tuple(buf.shape)}, expected {(self.capacity, self.dim)}")
        self.buffer = buf.clone().to(device=self.buffer.device, dtype=self.buffer.dtype)
        self.cursor = int(state["cursor"])
        self.filled = int(state["filled"])


def _bank(queue) -> torch.Tensor:
    if isinstance(queue, MemoryQueue):
        if not queue.full:
            raise ConfigError(f"queue holds {queue.filled}/{queue.capacity} rows; distributions need a full queue")
        return queue.buffer
    return queue


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def relation_logits(z: torch.Tensor, queue, tau: float) -> torch.Tensor:
    _check_tau(tau)
    bank = _bank(queue)
    return z @ bank.to(z.dtype).T / tau


def relation_distribution(z: torch.Tensor, queue, tau: float) -> torch.Tensor:
    """Softmax of ``z . q_k / tau`` over the queue rows (row-wise for a batch)."""
    logits = relation_logits(z, queue, tau)
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = logits.exp()
    return e / e.sum(dim=-1, keepdim=True)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Row-wise Shannon entropy in nats (0 log 0 = 0)."""
    return -(p * torch.where(p > 0, p.log(), torch.zeros_like(p))).sum(-1)


def cross_entropy(p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    return -(p * log_q).sum(-1)


def relational_loss(z_teacher: torch.Tensor, z_student, queue, temps: TemperaturePair,
                    return_teacher: bool = False):
    """Mean over the batch of ``H(p_teacher, p_student)``.

    The teacher distribution is detached. ``z_student`` may be a list of
    student crops sharing one teacher view; the loss is then averaged over crops.
    """
    crops = z_student if isinstance(z_student, (list, tuple)) else [z_student]
    with torch.no_grad():
        p_t = relation_distribution(z_teacher.detach(), queue, temps.tau_t)
    losses = []
    for z_s in crops:
        if z_s.shape != z_teacher.shape:
            raise ConfigError(
                f"teacher batch {tuple(z_teacher.shape)} and student batch {tuple(z_s.shape)} are misaligned"
            )
        log_p_s = F.log_softmax(relation_logits(z_s, queue, temps.tau_s), dim=-1)
        losses.append(cross_entropy(p_t.to(log_p_s.dtype), log_p_s).mean())
    loss = torch.stack(losses).mean()
    return (loss, p_t) if return_teacher else loss


def info_nce_loss(z1: torch.Tensor, z2: torch.Tensor, queue, tau: float) -> torch.Tensor:
    """Instance discrimination: positive ``z1 . z2`` against the queue as negatives."""
    if z1.shape != z2.shape:
        raise ConfigError(f"positive pairs are misaligned: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    pos = (z1 * z2).sum(1, keepdim=True) / tau
    neg = relation_logits(z1, queue, tau)
    logits = torch.cat([pos, neg], dim=1)
    return F.cross_entropy(logits, torch.zeros(len(z1), dtype=torch.long, device=z1.device))


def cosine_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity with ``z`` as a stop-gradient target, mean over the batch."""
    if p.shape != z.shape:
        raise ConfigError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    return -(F.normalize(p, dim=1) * F.normalize(z.detach(), dim=1)).sum(1).mean()


def mse_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance to a stop-gradient target, mean over the batch."""
    if p.shape != z.shape:
        raise ConfigError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    return ((p - z.detach()) ** 2).sum(1).mean()


def _named_tensors(module: torch.nn.Module) -> dict:
    out = dict(module.named_parameters())
    out.update(module.named_buffers())
    return out


@torch.no_grad()
def ema_update(pair, momentum: float | None = None):
    """``teacher <- m * teacher + (1 - m) * student`` for every teacher tensor.

    Floating-point buffers (batch-norm running statistics) are averaged the
    same way; integer buffers are copied.
    """
    m = pair.momentum if momentum is None else momentum
    student = _named_tensors(pair.student)
    for name, t in _named_tensors(pair.teacher).items():
        s = student.get(name)
        if s is None or s.shape != t.shape:
            raise ConfigError(f"student/teacher mismatch at {name!r}")
        if t.is_floating_point():
            t.mul_(m).add_(s.detach(), alpha=1 - m)
        else:
            t.copy_(s)
    return pair


def uniform_entropy(k: int) -> float:
    return math.log(k)
