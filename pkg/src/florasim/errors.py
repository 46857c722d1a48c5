"""Exception types shared across the simulator."""

from __future__ import annotations


class HeterogeneousRankError(ValueError):
    """Averaging-style aggregation was asked to combine adapters of mixed rank.

    Independent averaging of the two factors is only defined when every
    client trains at the same rank; callers that need mixed ranks must use
    stacking or zero-padding instead.
    """


class ConfigError(ValueError):
    """Invalid experiment configuration, carrying one message per bad field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
