"""Synthetic federated task generation and non-IID partitioning.

The global task is a linear teacher: targets are y = w_star x + noise, and
the pre-trained base w sits a low-rank perturbation away from w_star, so a
sufficiently ranked adapter can close the gap exactly. Partitioning assigns
the generated samples to clients without modifying them — every skew is a
biased assignment, so the union of shards is always exactly the sample set:

* iid: seeded random assignment, near-equal sizes.
* feature-shift: samples are ordered by a noisy projection onto a seeded
  direction and handed out in contiguous chunks, so each client's input mean
  is offset along that direction; strength scales the projection against
  unit noise (0 = pure noise = iid, large = hard sort).
* size-skew: shard sizes are drawn from a Pareto distribution with shape
  equal to strength (0 = equal sizes), floored at one sample.
* label-skew: samples are pseudo-labelled by the argmax coordinate of their
  target and classes are spread across clients with Dirichlet proportions of
  concentration 1/strength.

"feature-shift+size-skew" composes the first two (Pareto sizes, projection
assignment). A strength of 0 reduces every kind to iid exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lora import BaseWeights, Dim

SKEW_ATOMS = ("iid", "feature-shift", "size-skew", "label-skew")
SKEW_KINDS = SKEW_ATOMS + ("feature-shift+size-skew",)

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class GlobalTask:
    """Teacher matrix, pre-trained base, and the generated sample pool."""

    teacher: np.ndarray
    base: BaseWeights
    noise_std: float
    seed: int
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self) -> None:
        for name in ("teacher", "xs", "ys"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.teacher.shape != self.base.w.shape:
            raise ValueError("teacher and base must share shape")
        if len(self.xs) != len(self.ys):
            raise ValueError("xs and ys must have equal length")

    @property
    def size(self) -> int:
        return len(self.xs)


@dataclass(frozen=True)
class ClientShard:
    """One client's slice of the sample pool."""

    client_id: int
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self) -> None:
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys)
        if len(xs) < 1 or len(xs) != len(ys):
            raise ValueError("shard must hold at least one (x, y) pair")
        xs.flags.writeable = False
        ys.flags.writeable = False
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def size(self) -> int:
        return len(self.xs)


@dataclass(frozen=True)
class SkewSpec:
    """Partition heterogeneity: a kind, a strength, and its own seed."""

    kind: str = "iid"
    strength: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SKEW_KINDS:
            raise ValueError(f"unknown skew kind {self.kind!r}, expected one of {SKEW_KINDS}")
        if not np.isfinite(self.strength) or self.strength < 0:
            raise ValueError(f"skew strength must be finite and >= 0, got {self.strength}")


def gen_task(
    dim: Dim,
    samples_total: int,
    noise_std: float = 0.0,
    seed: int = 0,
    teacher_rank: int = 4,
) -> GlobalTask:
    """Deterministically generate a task whose base-to-teacher gap is low rank.

    The gap teacher - base is a product of two rank-``teacher_rank`` Gaussian
    factors scaled so its entries have variance about 1/n, giving residuals
    of order one on unit-Gaussian inputs.
    """
    if samples_total < 1:
        raise ValueError(f"samples_total must be >= 1, got {samples_total}")
    if noise_std < 0 or not np.isfinite(noise_std):
        raise ValueError(f"noise_std must be finite and >= 0, got {noise_std}")
    if teacher_rank < 1 or teacher_rank > min(dim.m, dim.n):
        raise ValueError(f"teacher_rank must be in [1, min(m, n)], got {teacher_rank}")
    gen = np.random.default_rng(seed & _MASK64)
    w = gen.normal(0.0, 1.0 / np.sqrt(dim.n), size=(dim.m, dim.n))
    gap = (
        gen.normal(0.0, 1.0, size=(dim.m, teacher_rank))
        @ gen.normal(0.0, 1.0, size=(teacher_rank, dim.n))
    ) / np.sqrt(teacher_rank * dim.n)
    teacher = w + gap
    xs = gen.normal(0.0, 1.0, size=(samples_total, dim.n))
    ys = xs @ teacher.T
    if noise_std > 0:
        ys = ys + gen.normal(0.0, noise_std, size=(samples_total, dim.m))
    return GlobalTask(
        teacher=teacher, base=BaseWeights(w), noise_std=noise_std, seed=seed, xs=xs, ys=ys
    )


def holdout_split(task: GlobalTask, eval_fraction: float = 0.2) -> tuple[GlobalTask, "EvalSet"]:
    """Split the sample pool into a train task and a held-out evaluation set.

    Samples are i.i.d. by construction, so the tail slice is an unbiased
    holdout and keeps the split deterministic.
    """
    if not 0 < eval_fraction < 1:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    n_eval = max(1, int(round(task.size * eval_fraction)))
    if n_eval >= task.size:
        raise ValueError(f"holdout of {n_eval} samples would leave no training data")
    cut = task.size - n_eval
    train = GlobalTask(
        teacher=task.teacher,
        base=task.base,
        noise_std=task.noise_std,
        seed=task.seed,
        xs=task.xs[:cut],
        ys=task.ys[:cut],
    )
    return train, EvalSet(xs=task.xs[cut:], ys=task.ys[cut:])


@dataclass(frozen=True)
class EvalSet:
    """Held-out (xs, ys) never handed to any client."""

    xs: np.ndarray
    ys: np.ndarray

    def __len__(self) -> int:
        return len(self.xs)


def _shard_sizes(total: int, k_clients: int, spec: SkewSpec, gen: np.random.Generator) -> list[int]:
    """Target shard sizes: equal by default, Pareto-weighted under size-skew."""
    size_skewed = "size-skew" in spec.kind and spec.strength > 0
    if not size_skewed:
        base, extra = divmod(total, k_clients)
        return [base + (1 if i < extra else 0) for i in range(k_clients)]
    # Power-law size profile over client rank, (i+1)**-strength, with a
    # seeded shuffle deciding who gets which size; apportioned to integers by
    # largest remainder with a floor of one sample per client.
    weights = np.arange(1, k_clients + 1, dtype=np.float64) ** (-spec.strength)
    gen.shuffle(weights)
    shares = weights / weights.sum() * (total - k_clients)
    sizes = [1 + int(s) for s in shares]
    remainders = shares - np.floor(shares)
    deficit = total - sum(sizes)
    for i in np.argsort(-remainders)[:deficit]:
        sizes[i] += 1
    return sizes


def _ordered_indices(
    task: GlobalTask, spec: SkewSpec, gen: np.random.Generator
) -> np.ndarray:
    """Sample assignment order: random, or biased by input projection."""
    total = task.size
    if "feature-shift" in spec.kind and spec.strength > 0:
        direction = gen.normal(size=task.xs.shape[1])
        direction /= np.linalg.norm(direction)
        z = task.xs @ direction
        z = (z - z.mean()) / max(z.std(), 1e-12)
        key = spec.strength * z + gen.normal(size=total)
        return np.argsort(key, kind="stable")
    return gen.permutation(total)


def _label_skew_shards(
    task: GlobalTask, k_clients: int, spec: SkewSpec, gen: np.random.Generator
) -> list[ClientShard]:
    """Dirichlet class concentration over argmax-of-target pseudo-labels."""
    labels = np.argmax(task.ys, axis=1)
    alpha = 1.0 / spec.strength
    assigned: list[list[int]] = [[] for _ in range(k_clients)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        gen.shuffle(members)
        proportions = gen.dirichlet(np.full(k_clients, alpha))
        counts = np.floor(proportions * len(members)).astype(int)
        remainders = proportions * len(members) - counts
        for i in np.argsort(-remainders)[: len(members) - counts.sum()]:
            counts[i] += 1
        start = 0
        for client, count in enumerate(counts):
            assigned[client].extend(members[start : start + count].tolist())
            start += count
    # No client may end empty: steal singles from the largest shard.
    for client in range(k_clients):
        while not assigned[client]:
            donor = max(range(k_clients), key=lambda c: len(assigned[c]))
            assigned[client].append(assigned[donor].pop())
    # Stable per-shard ordering so shard bytes do not depend on steal order.
    rows = [np.sort(np.asarray(idx, dtype=np.int64)) for idx in assigned]
    return [
        ClientShard(client_id=i, xs=task.xs[idx], ys=task.ys[idx])
        for i, idx in enumerate(rows)
    ]


def partition(task: GlobalTask, k_clients: int, spec: SkewSpec) -> list[ClientShard]:
    """Assign every sample of the task to exactly one of k_clients shards."""
    if k_clients < 1:
        raise ValueError(f"k_clients must be >= 1, got {k_clients}")
    if task.size < k_clients:
        raise ValueError(f"{task.size} samples cannot cover {k_clients} clients")
    effective = spec if spec.strength > 0 else SkewSpec("iid", 0.0, spec.seed)
    gen = np.random.default_rng(effective.seed & _MASK64)
    if effective.kind == "label-skew":
        return _label_skew_shards(task, k_clients, effective, gen)
    sizes = _shard_sizes(task.size, k_clients, effective, gen)
    order = _ordered_indices(task, effective, gen)
    shards = []
    start = 0
    for client, size in enumerate(sizes):
        idx = order[start : start + size]
        shards.append(ClientShard(client_id=client, xs=task.xs[idx], ys=task.ys[idx]))
        start += size
    return shards


def scaling_factors(shards: list[ClientShard]) -> list[float]:
    """Data-proportional client weights: shard size over total size."""
    if len(shards) == 0:
        raise ValueError("no shards to weight")
    total = sum(s.size for s in shards)
    return [s.size / total for s in shards]


def export_shards(shards: list[ClientShard], path: str | Path) -> None:
    """Write shards as text, one sample per line: client_id, x..., y...."""
    shards = list(shards)
    if not shards:
        raise ValueError("no shards to export")
    if shards[0].ys.ndim != 2:
        raise ValueError("only dense vector targets are exportable")
    n = shards[0].xs.shape[1]
    m = shards[0].ys.shape[1]
    lines = [f"# florasim-shards v1 n={n} m={m}"]
    for shard in shards:
        for x, y in zip(shard.xs, shard.ys):
            fields = [str(shard.client_id)]
            fields += [format(v, ".17g") for v in x]
            fields += [format(v, ".17g") for v in y]
            lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_shards(path: str | Path) -> list[ClientShard]:
    """Inverse of export_shards; shards come back ordered by client_id."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = text[0].split()
    if not text[0].startswith("# florasim-shards v1"):
        raise ValueError(f"{path}: not a shard export file")
    n = int(header[3].split("=")[1])
    m = int(header[4].split("=")[1])
    by_client: dict[int, tuple[list[list[float]], list[list[float]]]] = {}
    for line in text[1:]:
        fields = line.split(",")
        client = int(fields[0])
        values = [float(v) for v in fields[1:]]
        if len(values) != n + m:
            raise ValueError(f"{path}: expected {n + m} values per sample, got {len(values)}")
        xs, ys = by_client.setdefault(client, ([], []))
        xs.append(values[:n])
        ys.append(values[n:])
    return [
        ClientShard(client_id=client, xs=np.array(xs), ys=np.array(ys))
        for client, (xs, ys) in sorted(by_client.items())
    ]
