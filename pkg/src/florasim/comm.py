"""Parameter-count accounting for every transmission, and report files.

Counts are parameter counts, not bytes; a bytes view is a presentation
multiplier. Round 0 charges the one-time dense-model broadcast (m*n per
client) for every strategy including full fine-tuning, so totals and ratios
are well defined. From then on each round charges, per client:

    upload              rank_k * (m + n)              any adapter strategy
    download, averaging rank * (m + n)                the averaged pair
    download, padding   max rank * (m + n)            the padded pair
    download, stacking  (sum of ranks) * (m + n)      the stacked pair
    full fine-tuning    m * n up and m * n down

Standalone and centralized runs communicate nothing after the broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import HeterogeneousRankError

PAYLOAD_KINDS = ("full_model", "adapter", "stacked_adapter")
DIRECTIONS = ("up", "down")

# Strategy names accepted by the ledger; "full_ft" is the reference point
# for ratios and is not a simulator strategy.
LEDGER_STRATEGIES = ("flora", "fedit", "zero_padding", "standalone", "centralized", "full_ft")


@dataclass(frozen=True)
class CommEvent:
    """One transmission: round, direction, party, size, payload kind."""

    round: int
    direction: str
    party: int | str
    param_count: int
    payload_kind: str

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.payload_kind not in PAYLOAD_KINDS:
            raise ValueError(f"payload_kind must be one of {PAYLOAD_KINDS}")
        if self.param_count < 0:
            raise ValueError("param_count must be >= 0")


@dataclass
class CommLedger:
    """Append-only record of transmissions for one experiment run."""

    events: list[CommEvent] = field(default_factory=list)

    def add(self, event: CommEvent) -> None:
        self.events.append(event)

    def total(self) -> int:
        return sum(e.param_count for e in self.events)

    def round_totals(self, round_index: int) -> tuple[int, int]:
        """(params up, params down) accumulated in one round."""
        up = sum(e.param_count for e in self.events if e.round == round_index and e.direction == "up")
        down = sum(e.param_count for e in self.events if e.round == round_index and e.direction == "down")
        return up, down


def charge_round(
    ledger: CommLedger,
    strategy: str,
    dim,
    ranks: list[int],
    k_clients: int,
    round_index: int,
) -> None:
    """Append the transmissions of one round to the ledger.

    Round 0 also charges the initial dense broadcast. ``dim`` is anything
    with integer attributes m and n.
    """
    m, n = dim.m, dim.n
    if m < 1 or n < 1:
        raise ValueError(f"dimensions must be positive, got ({m}, {n})")
    if len(ranks) != k_clients:
        raise ValueError(f"got {len(ranks)} ranks for {k_clients} clients")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks must be >= 1")
    if strategy not in LEDGER_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {LEDGER_STRATEGIES}")

    if round_index == 0:
        # One m*n charge per receiving client, addressed as "broadcast" so the
        # one-time dissemination stays distinguishable from per-round traffic.
        broadcast_to = 1 if strategy == "centralized" else k_clients
        for _ in range(broadcast_to):
            ledger.add(CommEvent(0, "down", "broadcast", m * n, "full_model"))

    if strategy in ("standalone", "centralized"):
        return
    if strategy == "full_ft":
        for client in range(k_clients):
            ledger.add(CommEvent(round_index, "up", client, m * n, "full_model"))
            ledger.add(CommEvent(round_index, "down", client, m * n, "full_model"))
        return

    if strategy == "fedit" and len(set(ranks)) != 1:
        raise HeterogeneousRankError(f"averaging cannot run with mixed ranks {sorted(set(ranks))}")
    if strategy == "flora":
        down_count, down_kind = sum(ranks) * (m + n), "stacked_adapter"
    elif strategy == "fedit":
        down_count, down_kind = ranks[0] * (m + n), "adapter"
    else:  # zero_padding
        down_count, down_kind = max(ranks) * (m + n), "adapter"
    for client, rank in enumerate(ranks):
        ledger.add(CommEvent(round_index, "up", client, rank * (m + n), "adapter"))
        ledger.add(CommEvent(round_index, "down", client, down_count, down_kind))


@dataclass(frozen=True)
class CommSummary:
    """Ledger totals with the ratio against full fine-tuning."""

    total_params: int
    per_round: dict[int, tuple[int, int]]
    ratio_to_full_ft: float


def summarize(ledger: CommLedger, rounds: int) -> CommSummary:
    """Summarize a ledger covering rounds 0..rounds-1.

    The full fine-tuning reference over the same span is the initial
    broadcast plus a dense up and down per client per round. With rounds = 0
    only the broadcast exists on both sides, so the ratio is exactly 1.
    """
    if not ledger.events:
        raise ValueError("cannot summarize an empty ledger")
    broadcast = [e for e in ledger.events if e.round == 0 and e.party == "broadcast"]
    if not broadcast:
        raise ValueError("ledger is missing the round-0 base broadcast")
    mn = broadcast[0].param_count
    k_clients = len(broadcast)
    full_ft_total = k_clients * mn * (1 + 2 * rounds)
    per_round = {r: ledger.round_totals(r) for r in range(rounds)} if rounds else {0: ledger.round_totals(0)}
    return CommSummary(
        total_params=ledger.total(),
        per_round=per_round,
        ratio_to_full_ft=ledger.total() / full_ft_total,
    )


REPORT_SCHEMA = 1
REPORT_COLUMNS = (
    "round",
    "strategy",
    "global_loss",
    "mean_client_loss",
    "relative_noise",
    "params_up_total",
    "params_down_total",
)


@dataclass(frozen=True)
class ReportRow:
    """One serialized line of an experiment report."""

    round: int
    strategy: str
    global_loss: float
    mean_client_loss: float
    relative_noise: float | None
    params_up_total: int
    params_down_total: int


def _format_real(value: float | None) -> str:
    return "" if value is None else format(value, ".17g")


def emit_rows(rows: Iterable[ReportRow], path: str | Path, seed: int) -> None:
    """Write report rows as comma-separated text with a fixed header.

    Reals are formatted with 17 significant digits so emitted files are
    byte-deterministic and round-trip through parsing without loss.
    """
    lines = [f"# florasim-report schema={REPORT_SCHEMA} seed={seed}", ",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join(
                [
                    str(row.round),
                    row.strategy,
                    _format_real(row.global_loss),
                    _format_real(row.mean_client_loss),
                    _format_real(row.relative_noise),
                    str(row.params_up_total),
                    str(row.params_down_total),
                ]
            )
        )
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def emit_report(report, path: str | Path) -> None:
    """Serialize an ExperimentReport (anything with .to_rows() and .seed)."""
    emit_rows(report.to_rows(), path, seed=report.seed)


def read_report(path: str | Path) -> list[ReportRow]:
    """Parse a report file back into rows; inverse of emit for tabular fields."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read report from {path}: {exc}") from exc
    if len(lines) < 2 or not lines[0].startswith("# florasim-report"):
        raise ValueError(f"{path}: not a report file")
    if lines[1] != ",".join(REPORT_COLUMNS):
        raise ValueError(f"{path}: unexpected column header {lines[1]!r}")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        f = line.split(",")
        rows.append(
            ReportRow(
                round=int(f[0]),
                strategy=f[1],
                global_loss=float(f[2]),
                mean_client_loss=float(f[3]),
                relative_noise=None if f[4] == "" else float(f[4]),
                params_up_total=int(f[5]),
                params_down_total=int(f[6]),
            )
        )
    return rows
