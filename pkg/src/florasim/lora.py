"""Low-rank adapter algebra.

An adapter is a pair of thin factors (a: rank x n, b: m x rank) whose product
b @ a is a dense update to an m x n weight matrix. The key identity: entry
(x, y) of the product is the sum over the inner index i of b[x, i] * a[i, y],
so the product decomposes into a sum of rank-1 outer products, one per inner
index. Concatenating the a-factors of several adapters row-wise and the
b-factors column-wise therefore yields a single adapter whose product equals
the sum of the individual products exactly. That concatenation ("stacking")
is the aggregation primitive everything else here builds on; it places no
constraint on the individual ranks.

All values are immutable after construction and every operation is a pure
function, so the module is safe to use from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

INIT_KINDS = ("zero-delta-gaussian", "zero-delta-uniform")


def _frozen_matrix(arr: np.ndarray, name: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, order="C")
    if out.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got ndim={out.ndim}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} must have finite entries")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dim:
    """Output/input dimensions (m, n) of the adapted weight matrix."""

    m: int
    n: int

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ValueError(f"dimensions must be positive, got ({self.m}, {self.n})")


@dataclass(frozen=True)
class LoraAdapter:
    """Factor pair (a: rank x n, b: m x rank) representing the update b @ a.

    Rank must be at least 1 but may exceed min(m, n): stacked global adapters
    routinely do. Arrays are copied and made read-only at construction.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        a = _frozen_matrix(self.a, "a")
        b = _frozen_matrix(self.b, "b")
        if a.shape[0] < 1:
            raise ValueError("adapter rank must be >= 1")
        if a.shape[0] != b.shape[1]:
            raise ValueError(
                f"rank mismatch: a has {a.shape[0]} rows, b has {b.shape[1]} columns"
            )
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    @property
    def dim(self) -> Dim:
        return Dim(self.b.shape[0], self.a.shape[1])


@dataclass(frozen=True)
class BaseWeights:
    """Frozen dense pre-trained weight matrix."""

    w: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", _frozen_matrix(self.w, "w"))

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.w.shape[1]

    @property
    def dim(self) -> Dim:
        return Dim(*self.w.shape)


@dataclass(frozen=True)
class InitPolicy:
    """How fresh adapters are drawn.

    Both kinds randomize the a factor only (Gaussian with the given std, or
    uniform on [-bound, bound]) and zero the b factor, so a fresh adapter's
    update is exactly the zero matrix and merging it is always a no-op.
    """

    kind: str = "zero-delta-gaussian"
    std_or_bound: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}, expected one of {INIT_KINDS}")
        if not np.isfinite(self.std_or_bound) or self.std_or_bound < 0:
            raise ValueError(f"std_or_bound must be finite and >= 0, got {self.std_or_bound}")


def init_adapter(dim: Dim, rank: int, policy: InitPolicy) -> LoraAdapter:
    """Fresh adapter: a drawn per policy from a seeded generator, b all zeros.

    Deterministic for a fixed (dim, rank, policy): two calls with the same
    arguments produce bit-identical adapters.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    gen = np.random.default_rng(policy.seed & ((1 << 64) - 1))
    if policy.kind == "zero-delta-gaussian":
        a = gen.normal(0.0, policy.std_or_bound, size=(rank, dim.n))
    else:
        a = gen.uniform(-policy.std_or_bound, policy.std_or_bound, size=(rank, dim.n))
    return LoraAdapter(a=a, b=np.zeros((dim.m, rank)))


def adapter_delta(adapter: LoraAdapter) -> np.ndarray:
    """Materialize the dense update b @ a."""
    return adapter.b @ adapter.a


def merge_into_base(base: BaseWeights, adapter: LoraAdapter) -> BaseWeights:
    """Return new weights w + b @ a; the input base is unchanged."""
    if (base.m, base.n) != (adapter.m, adapter.n):
        raise ValueError(
            f"shape mismatch: base is {base.m}x{base.n}, "
            f"adapter update is {adapter.m}x{adapter.n}"
        )
    return BaseWeights(base.w + adapter_delta(adapter))


def stack_adapters(adapters: Sequence[LoraAdapter]) -> LoraAdapter:
    """Concatenate adapters into one: a-factors stacked vertically in list
    order, b-factors horizontally in the same order.

    The result has rank equal to the sum of the input ranks, and its update
    equals the sum of the input updates (exactly, in exact arithmetic).
    A single-element list returns that adapter itself.
    """
    if len(adapters) == 0:
        raise ValueError("cannot stack an empty list of adapters")
    shapes = {(ad.m, ad.n) for ad in adapters}
    if len(shapes) != 1:
        raise ValueError(f"adapters disagree on base shape: {sorted(shapes)}")
    if len(adapters) == 1:
        return adapters[0]
    return LoraAdapter(
        a=np.vstack([ad.a for ad in adapters]),
        b=np.hstack([ad.b for ad in adapters]),
    )


def scale_adapter(adapter: LoraAdapter, p: float) -> LoraAdapter:
    """Scale the update by p >= 0, applied to the a factor only.

    One-sided application matters: the later product b @ (p a) picks the
    factor up exactly once, whereas scaling both factors would square it.
    """
    if not np.isfinite(p) or p < 0:
        raise ValueError(f"scale factor must be finite and >= 0, got {p}")
    return LoraAdapter(a=p * adapter.a, b=adapter.b)


def split_rank1(adapter: LoraAdapter) -> list[LoraAdapter]:
    """Decompose into rank-1 sub-adapters: row i of a paired with column i of b.

    Stacking the pieces back in the original order reproduces the factors
    bit-identically; stacking them in any order reproduces the update.
    """
    return [
        LoraAdapter(a=adapter.a[i : i + 1, :], b=adapter.b[:, i : i + 1])
        for i in range(adapter.rank)
    ]


def trainable_fraction(dim: Dim, rank: int) -> float:
    """Adapter parameter count relative to the dense matrix: r (m + n) / (m n)."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return rank * (dim.m + dim.n) / (dim.m * dim.n)
