"""Three-stage training schedule with self-distillation between prune steps.

Stage 1 warms the gated network up on plain cross-entropy. Stage 2 loops:
snapshot the current model as teacher, sweep marks, hard-prune the weakest
blocks, then train under cross-entropy plus a temperature-softened KL term
against the (larger) teacher. Stage 3 fixes every survivor and fine-tunes.
The learning rate decays by a fixed factor on entering stages 2 and 3, and
again two thirds of the way through each stage-2 burst.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from blockprune.checkpoint import save_checkpoint
from blockprune.compact import CompactModel
from blockprune.data import Dataset, augmentation_rng, batches
from blockprune.errors import ConfigError, ContractViolation, PruningExhausted
from blockprune.netcore import BlockState, GateMask, GatedNetwork, snapshot_network
from blockprune.pruner import (
    PruneState,
    collect_marks,
    format_mark_dump,
    pruning_done,
    select_and_prune,
)


@dataclass(frozen=True)
class TrainConfig:
    e1: int = 5
    e2: int = 3
    e3: int = 5
    lr: float = 0.1
    lr_decay: float = 0.1
    stage2_decay_epoch: int | None = None  # default: two thirds into each burst
    momentum: float = 0.9
    weight_decay: float = 5e-4
    gamma: float = 0.0
    k: int | None = None
    tau: float = 3.0
    lam: float | None = None  # None resolves to tau**2
    batch_size: int = 128
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if min(self.e1, self.e2, self.e3) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"pruning ratio must lie in [0, 1), got {self.gamma}")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def resolved_lambda(self) -> float:
        return self.tau**2 if self.lam is None else self.lam

    def resolve(self) -> "TrainConfig":
        """Pin the distillation weight; unless overridden it must equal tau squared."""
        out = replace(self, lam=self.resolved_lambda)
        if self.lam is None:
            assert out.lam == out.tau**2
        return out

    @property
    def stage2_decay_point(self) -> int:
        return (
            self.stage2_decay_epoch
            if self.stage2_decay_epoch is not None
            else (2 * self.e2) // 3
        )


def stage1_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr


def stage2_lr(cfg: TrainConfig, epoch_in_iteration: int) -> float:
    base = cfg.lr * cfg.lr_decay
    if epoch_in_iteration >= cfg.stage2_decay_point:
        return base * cfg.lr_decay
    return base


def stage3_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay**2


# ---------------------------------------------------------------------------
# losses


def loss_stage1(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of softmaxed logits against integer labels."""
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    if int(labels.max()) >= logits.shape[1]:
        raise ContractViolation("label out of range for logit width")
    return F.cross_entropy(logits, labels)


def loss_kd(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Batch-mean KL(teacher || student) between temperature-softened distributions."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if student_logits.shape != teacher_logits.shape:
        raise ContractViolation("student and teacher logits must share a shape")
    log_s = F.log_softmax(student_logits / tau, dim=1)
    log_t = F.log_softmax(teacher_logits / tau, dim=1)
    return F.kl_div(log_s, log_t, reduction="batchmean", log_target=True)


def loss_stage2(ce: torch.Tensor, kd: torch.Tensor, lam: float) -> torch.Tensor:
    return ce + lam * kd


@dataclass
class TeacherSnapshot:
    """Frozen copy of network and mask from the previous pruning iteration."""

    net: GatedNetwork
    mask: GateMask

    @classmethod
    def capture(cls, net: GatedNetwork, mask: GateMask) -> "TeacherSnapshot":
        return cls(snapshot_network(net), mask.copy())

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            out, _ = self.net(x, self.mask)
        return out


# ---------------------------------------------------------------------------
# run log


class TrainLog:
    """Run-directory sink: append-only metrics lines, checkpoints, mark dumps.

    With no directory it still records the learning-rate trace in memory so
    schedules can be asserted against configuration.
    """

    METRICS_HEADER = "epoch,stage,lr,loss_ce,loss_kd,accuracy,unpruned_count"

    def __init__(self, run_dir: str | Path | None = None):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.lr_trace: list[tuple[int, int, float]] = []  # (stage, epoch, lr)
        self.checkpoints: dict[tuple[int, int], Path] = {}
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self.metrics_path = self.run_dir / "metrics.csv"
            if not self.metrics_path.exists():
                self.metrics_path.write_text(self.METRICS_HEADER + "\n")

    def epoch(
        self,
        epoch: int,
        stage: int,
        lr: float,
        loss_ce: float,
        loss_kd: float | None,
        accuracy: float,
        unpruned: int,
    ) -> None:
        self.lr_trace.append((stage, epoch, lr))
        if self.run_dir is None:
            return
        kd = "" if loss_kd is None else f"{loss_kd:.6f}"
        with open(self.metrics_path, "a") as fh:
            fh.write(f"{epoch},{stage},{lr:.6g},{loss_ce:.6f},{kd},{accuracy:.4f},{unpruned}\n")

    def checkpoint(
        self,
        net,
        mask: GateMask | None,
        stage: int,
        iteration: int,
        meta: dict | None = None,
    ) -> None:
        if self.run_dir is None:
            return
        path = self.run_dir / f"stage{stage}-iter{iteration}.ckpt"
        save_checkpoint(path, net, mask=mask, meta={"stage": stage, "iteration": iteration, **(meta or {})})
        self.checkpoints[(stage, iteration)] = path

    def mark_dump(self, text: str, iteration: int) -> None:
        if self.run_dir is None:
            return
        (self.run_dir / f"marks-iter{iteration}.txt").write_text(text)

    def event(self, message: str) -> None:
        if self.run_dir is not None:
            with open(self.run_dir / "events.log", "a") as fh:
                fh.write(message + "\n")


# ---------------------------------------------------------------------------
# training loops


def _sgd(net: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        net.parameters(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def _train_epoch(
    net: GatedNetwork,
    mask: GateMask,
    dataset: Dataset,
    cfg: TrainConfig,
    opt: torch.optim.Optimizer,
    lr: float,
    epoch_index: int,
    teacher: TeacherSnapshot | None = None,
) -> tuple[float, float | None, float]:
    """One pass over the data; returns (mean ce, mean kd or None, train accuracy)."""
    for group in opt.param_groups:
        group["lr"] = lr
    net.train()
    aug_rng = augmentation_rng(cfg.seed, epoch_index) if cfg.augment else None
    total_ce = total_kd = 0.0
    seen = correct = 0
    for idx in batches(dataset, cfg.batch_size, cfg.seed, epoch_index):
        x, y = dataset.tensors(idx, augment=cfg.augment, rng=aug_rng)
        logits, _ = net(x, mask)
        ce = loss_stage1(logits, y)
        if teacher is not None:
            kd = loss_kd(logits, teacher.logits(x), cfg.tau)
            loss = loss_stage2(ce, kd, cfg.resolved_lambda)
        else:
            kd = None
            loss = ce
        opt.zero_grad()
        loss.backward()
        opt.step()
        n = len(idx)
        seen += n
        total_ce += float(ce.detach()) * n
        if kd is not None:
            total_kd += float(kd.detach()) * n
        correct += int((logits.detach().argmax(dim=1) == y).sum())
    mean_kd = total_kd / seen if teacher is not None else None
    return total_ce / seen, mean_kd, correct / seen


def _require_data(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")


def run_stage1(
    net: GatedNetwork,
    mask: GateMask,
    dataset: Dataset,
    cfg: TrainConfig,
    log: TrainLog | None = None,
    epoch_offset: int = 0,
) -> GatedNetwork:
    """Warm-up: train every gate-controlled block on cross-entropy alone."""
    if mask.pruned_indices():
        raise ContractViolation("stage 1 expects no pruned blocks")
    for l in range(len(mask)):
        if l not in mask.exempt and mask.state(l) is not BlockState.ACTIVE:
            raise ContractViolation(f"stage 1 expects non-exempt block {l} to be active")
    log = log or TrainLog()
    if cfg.e1 > 0:
        _require_data(dataset)
    opt = _sgd(net, cfg)
    for e in range(cfg.e1):
        lr = stage1_lr(cfg, e)
        ce, _, acc = _train_epoch(net, mask, dataset, cfg, opt, lr, epoch_offset + e)
        log.epoch(epoch_offset + e, 1, lr, ce, None, acc, mask.unpruned_count())
    log.checkpoint(net, mask, stage=1, iteration=0, meta={"epoch_offset": epoch_offset + cfg.e1})
    return net


def run_stage2(
    net: GatedNetwork,
    mask: GateMask,
    dataset: Dataset,
    cfg: TrainConfig,
    log: TrainLog | None = None,
    epoch_offset: int = 0,
    mark_source=None,
) -> tuple[GatedNetwork, int, int]:
    """Iterative pruning with self-distillation.

    Each iteration: teacher <- current model, sweep marks over the training
    set, hard-prune the k weakest, then train e2 epochs against the teacher.
    `mark_source(net, mask)` overrides the sweep (used by dry runs). Returns
    (net, iterations run, next epoch offset).
    """
    log = log or TrainLog()
    state = PruneState.create(mask, cfg.gamma, cfg.k)
    epoch = epoch_offset
    iteration = 0
    while not pruning_done(state):
        teacher = TeacherSnapshot.capture(net, mask)
        if mark_source is not None:
            ledger = mark_source(net, mask)
        else:
            _require_data(dataset)
            ledger = collect_marks(net, mask, dataset, cfg.batch_size)
        try:
            state, pruned = select_and_prune(state, ledger)
        except PruningExhausted:
            done = state.total_blocks - mask.unpruned_count()
            warnings.warn(
                f"pruning exhausted after {done} blocks "
                f"(target was {state.total_blocks - state.target_unpruned}); stopping stage 2"
            )
            log.event(f"stage2: pruning exhausted after {done} blocks")
            break
        log.mark_dump(format_mark_dump(net.spec, mask, ledger), iteration)
        log.event(f"stage2 iter {iteration}: pruned blocks {pruned}")
        opt = _sgd(net, cfg)
        for e in range(cfg.e2):
            lr = stage2_lr(cfg, e)
            ce, kd, acc = _train_epoch(net, mask, dataset, cfg, opt, lr, epoch, teacher=teacher)
            log.epoch(epoch, 2, lr, ce, kd, acc, mask.unpruned_count())
            epoch += 1
        log.checkpoint(
            net,
            mask,
            stage=2,
            iteration=iteration,
            meta={"epoch_offset": epoch, "marks": {str(l): s for l, s in ledger.sums.items()}},
        )
        iteration += 1
    return net, iteration, epoch


def run_stage3(
    net: GatedNetwork,
    mask: GateMask,
    dataset: Dataset,
    cfg: TrainConfig,
    log: TrainLog | None = None,
    epoch_offset: int = 0,
) -> GatedNetwork:
    """Fix all survivors (gates bypassed) and fine-tune on cross-entropy."""
    log = log or TrainLog()
    mask.fix_unpruned()
    if cfg.e3 > 0:
        _require_data(dataset)
    opt = _sgd(net, cfg)
    for e in range(cfg.e3):
        lr = stage3_lr(cfg, e)
        ce, _, acc = _train_epoch(net, mask, dataset, cfg, opt, lr, epoch_offset + e)
        log.epoch(epoch_offset + e, 3, lr, ce, None, acc, mask.unpruned_count())
    log.checkpoint(net, mask, stage=3, iteration=0, meta={"epoch_offset": epoch_offset + cfg.e3})
    return net


def evaluate(model, dataset: Dataset, mask: GateMask | None = None, batch_size: int = 256) -> float:
    """Top-1 accuracy in fixed-statistics mode."""
    _require_data(dataset)
    if isinstance(model, CompactModel):
        module, forward = model.network, model.network
    elif isinstance(model, GatedNetwork):
        if mask is None:
            raise ConfigError("gated evaluation needs a mask")
        module, forward = model, (lambda x: model(x, mask)[0])
    else:
        module, forward = model, model
    if dataset.num_classes != module.spec.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model expects {module.spec.num_classes}"
        )
    was_training = module.training
    module.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            x, y = dataset.tensors(idx)
            logits = forward(x)
            correct += int((logits.argmax(dim=1) == y).sum())
    if was_training:
        module.train()
    return correct / len(dataset)
