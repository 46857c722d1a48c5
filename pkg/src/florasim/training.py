"""Local fine-tuning of an adapter on a frozen linear base model.

The toy model maps x to (w + b a) x, computed as two thin products so the
dense update is never materialized. Only the adapter trains; gradients are
hand-derived through the factored update. With per-sample residual
g = dloss/dy, the batch-mean gradients are

    d_b = mean_i  g_i (a x_i)^T        (m x rank)
    d_a = mean_i  b^T g_i x_i^T        (rank x n)

and plain mini-batch SGD applies them to both factors simultaneously. No
momentum or weight decay: the one-step update is then exactly
factor - lr * gradient, which keeps oracle tests tight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientShard
from .lora import BaseWeights, LoraAdapter
from .rng import derive_seed

LOSS_KINDS = ("squared-error", "softmax-cross-entropy")


@dataclass(frozen=True)
class ToyModel:
    """Frozen dense base plus a trainable adapter."""

    base: BaseWeights
    adapter: LoraAdapter

    def __post_init__(self) -> None:
        if (self.base.m, self.base.n) != (self.adapter.m, self.adapter.n):
            raise ValueError(
                f"adapter update is {self.adapter.m}x{self.adapter.n}, "
                f"base is {self.base.m}x{self.base.n}"
            )


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings for one client's local pass.

    learning_rate 0 is allowed and makes training a no-op, which is handy for
    exercising the surrounding protocol. Batch order reshuffles every epoch
    from a seed derived as (seed, epoch); callers fold client and round into
    ``seed`` so concurrent clients and successive rounds draw independent
    streams.
    """

    learning_rate: float = 3e-4
    batch_size: int = 32
    local_epochs: int = 1
    loss: str = "squared-error"
    seed: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}, expected one of {LOSS_KINDS}")


@dataclass(frozen=True)
class Batch:
    """Inputs (count x n) with regression targets (count x m) or class indices."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets)
        if inputs.ndim != 2 or len(inputs) < 1:
            raise ValueError("batch inputs must be a nonempty (count, n) array")
        if len(targets) != len(inputs):
            raise ValueError(
                f"batch has {len(inputs)} inputs but {len(targets)} targets"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.inputs)


def forward(model: ToyModel, x: np.ndarray) -> np.ndarray:
    """y = w x + b (a x), two thin products."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.base.n,):
        raise ValueError(f"input must be a vector of length {model.base.n}, got {x.shape}")
    return model.base.w @ x + model.adapter.b @ (model.adapter.a @ x)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _batch_outputs(w: np.ndarray, a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ w.T + (x @ a.T) @ b.T


def _loss_and_residual(
    y: np.ndarray, targets: np.ndarray, loss_kind: str
) -> tuple[float, np.ndarray]:
    count = len(y)
    if loss_kind == "squared-error":
        resid = y - np.asarray(targets, dtype=np.float64)
        return float(0.5 * (resid**2).sum() / count), resid
    labels = np.asarray(targets)
    if labels.ndim != 1:
        raise ValueError("softmax-cross-entropy expects a 1-d array of class indices")
    probs = _softmax(y)
    picked = probs[np.arange(count), labels.astype(int)]
    onehot = np.zeros_like(probs)
    onehot[np.arange(count), labels.astype(int)] = 1.0
    return float(-np.log(picked).mean()), probs - onehot


def loss_and_grads(
    model: ToyModel, batch: Batch, loss_kind: str = "squared-error"
) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean loss and gradients (loss, d_a, d_b) at the current adapter."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss_kind!r}, expected one of {LOSS_KINDS}")
    a, b, w = model.adapter.a, model.adapter.b, model.base.w
    x = batch.inputs
    if x.shape[1] != model.base.n:
        raise ValueError(f"batch inputs have {x.shape[1]} features, model expects {model.base.n}")
    ax = x @ a.T
    y = x @ w.T + ax @ b.T
    loss, g = _loss_and_residual(y, batch.targets, loss_kind)
    count = len(batch)
    d_b = g.T @ ax / count
    d_a = b.T @ (g.T @ x) / count
    return loss, d_a, d_b


def local_train(model: ToyModel, shard: ClientShard, cfg: TrainConfig) -> LoraAdapter:
    """Run local_epochs of seeded-shuffled mini-batch SGD; return the adapter.

    The base stays frozen. Shards smaller than batch_size fall back to
    full-batch steps. Deterministic for fixed (model, shard, cfg).
    """
    if shard.size < 1:
        raise ValueError("cannot train on an empty shard")
    a = np.array(model.adapter.a)
    b = np.array(model.adapter.b)
    w = model.base.w
    lr = cfg.learning_rate
    batch = min(cfg.batch_size, shard.size)
    for epoch in range(cfg.local_epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(shard.size)
        for start in range(0, shard.size, batch):
            idx = order[start : start + batch]
            x, t = shard.xs[idx], shard.ys[idx]
            ax = x @ a.T
            y = x @ w.T + ax @ b.T
            _, g = _loss_and_residual(y, t, cfg.loss)
            count = len(idx)
            d_b = g.T @ ax / count
            d_a = b.T @ (g.T @ x) / count
            a -= lr * d_a
            b -= lr * d_b
    return LoraAdapter(a=a, b=b)


def evaluate(model: ToyModel, batch: Batch, loss_kind: str = "squared-error") -> float:
    """Batch-mean loss of the model on a fixed evaluation batch."""
    y = _batch_outputs(model.base.w, model.adapter.a, model.adapter.b, batch.inputs)
    loss, _ = _loss_and_residual(y, batch.targets, loss_kind)
    return loss
