"""Mark accumulation and voting-based block removal.

Every training instance contributes its gate marks to a per-block running
sum; each pruning iteration removes the k unpruned blocks with the lowest
accumulated marks until the survivor count reaches its target. Selection
depends only on the ordering of the sums, so summing and averaging pick the
same blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from blockprune.data import Dataset
from blockprune.errors import ConfigError, ContractViolation, PruningExhausted
from blockprune.netcore import BlockState, GateMask, GatedNetwork, NetworkSpec


class MarkLedger:
    """Per-block running mark sums over a fixed instance count.

    Entries exist only for blocks that were Active when the ledger was
    opened; pruned, fixed, and exempt blocks are absent rather than zero.
    """

    def __init__(self, sums: dict[int, float], count: int = 0):
        self.sums = dict(sums)
        self.count = count

    @classmethod
    def empty(cls, mask: GateMask) -> "MarkLedger":
        return cls({l: 0.0 for l in mask.active_indices()}, 0)

    def accumulate(self, marks: dict[int, torch.Tensor]) -> "MarkLedger":
        """Fold one batch of per-instance marks into the sums."""
        sizes = {int(m.numel()) for m in marks.values()}
        if len(sizes) > 1:
            raise ContractViolation(f"ragged mark batch: sizes {sorted(sizes)}")
        for l in sorted(marks):
            if l not in self.sums:
                raise ContractViolation(f"mark reported for block {l}, which is not active")
            self.sums[l] += float(marks[l].detach().double().sum())
        if marks:
            self.count += sizes.pop()
        return self

    def means(self) -> dict[int, float]:
        if self.count == 0:
            raise ContractViolation("ledger holds no instances")
        return {l: s / self.count for l, s in self.sums.items()}


@dataclass
class PruneState:
    """Progress of the pruning loop against its survivor-count target."""

    mask: GateMask
    gamma: float
    k: int
    total_blocks: int
    target_unpruned: int

    @classmethod
    def create(cls, mask: GateMask, gamma: float, k: int | None = None) -> "PruneState":
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"pruning ratio must lie in [0, 1), got {gamma}")
        n = len(mask)
        goal = math.floor(gamma * n)
        if k is None:
            k = max(1, math.ceil(goal / 3))  # default lands in two or three iterations
        if k < 1:
            raise ConfigError(f"per-iteration prune count must be >= 1, got {k}")
        return cls(mask=mask, gamma=gamma, k=k, total_blocks=n, target_unpruned=n - goal)


def pruning_done(state: PruneState) -> bool:
    return state.mask.unpruned_count() <= state.target_unpruned


def select_and_prune(state: PruneState, ledger: MarkLedger) -> tuple[PruneState, list[int]]:
    """Prune up to k lowest-mark prunable blocks (ties go to the lower index).

    The final iteration prunes fewer than k when that lands the survivor
    count exactly on target. Raises PruningExhausted when nothing prunable
    remains.
    """
    if ledger.count <= 0:
        raise ContractViolation("ledger holds no instances")
    candidates = state.mask.active_indices()
    if not candidates:
        raise PruningExhausted("no prunable block remains")
    missing = [l for l in candidates if l not in ledger.sums]
    if missing:
        raise ContractViolation(f"ledger has no marks for active blocks {missing}")
    budget = state.mask.unpruned_count() - state.target_unpruned
    take = min(state.k, budget, len(candidates))
    ranked = sorted(candidates, key=lambda l: (ledger.sums[l], l))
    pruned = ranked[:take]
    for l in pruned:
        state.mask.prune(l)
    return state, pruned


def collect_marks(
    net: GatedNetwork,
    mask: GateMask,
    dataset: Dataset,
    batch_size: int,
) -> MarkLedger:
    """Dedicated full-dataset evaluation sweep (no parameter updates,
    fixed-statistics normalization) feeding a fresh ledger."""
    ledger = MarkLedger.empty(mask)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for idx in _sequential_batches(len(dataset), batch_size):
            x, _ = dataset.tensors(idx)
            _, marks = net(x, mask)
            ledger.accumulate(marks)
    if was_training:
        net.train()
    return ledger


def _sequential_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield list(range(start, min(start + batch_size, n)))


def format_mark_dump(spec: NetworkSpec, mask: GateMask, ledger: MarkLedger | None) -> str:
    """Plain-text per-block table: index, stage, accumulated mark, state."""
    lines = ["block stage mark state"]
    for l in range(spec.num_blocks):
        state = mask.state(l)
        if ledger is not None and l in ledger.sums:
            mark = f"{ledger.sums[l]:.6f}"
        else:
            mark = "absent"
        lines.append(f"{l} {spec.stage_of(l)} {mark} {state.value}")
    return "\n".join(lines) + "\n"
