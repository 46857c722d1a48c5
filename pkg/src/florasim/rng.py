"""Deterministic seeding and shuffling primitives.

Everything stochastic in the simulator is keyed off 64-bit seeds. Two things
have to be reproducible not just run-to-run but across independent
implementations: the seed-derivation scheme that gives every (client, round,
purpose) its own stream, and the permutation used by the privacy shuffle.
Both are therefore pinned to splitmix64, a small, exactly specified generator,
instead of whatever the platform default happens to be.

splitmix64 step (all arithmetic mod 2**64):

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output = z ^ (z >> 31)
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output_word)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integer components into a single unsigned 64-bit seed.

    Components are absorbed left to right, one splitmix64 step each, so the
    result is order-sensitive and seeds derived from different prefixes never
    collide by construction of the chain. Negative inputs are taken mod 2**64.
    """
    state = _GOLDEN
    for part in parts:
        _, state = splitmix64(state ^ (part & _MASK64))
    return state


def fisher_yates(n: int, seed: int) -> list[int]:
    """Uniformly random permutation of range(n), seeded and exactly specified.

    Classic Fisher-Yates from the top index down; the swap partner j in
    [0, i] is drawn from the splitmix64 stream with rejection sampling
    (words >= 2**64 - 2**64 % (i+1) are discarded), so every permutation has
    exactly equal probability and the output is bit-reproducible from the
    seed alone.
    """
    if n < 0:
        raise ValueError(f"permutation length must be nonnegative, got {n}")
    out = list(range(n))
    state = seed & _MASK64
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            state, word = splitmix64(state)
            if word < limit:
                break
        j = word % bound
        out[i], out[j] = out[j], out[i]
    return out
