"""Soft filter pruning over an exported compact model.

At every masking step the lowest-L2-norm output filters of each block's
first convolution are zeroed, together with that channel's normalization
shift and running mean so the channel is exactly silent in both train and
eval modes. The filters stay trainable (the channel scale is kept, so
gradients flow back) and may regrow between steps; only the final masking is
hardened into a structurally narrower model. The second convolution of each
block keeps its output width (it must match the residual add) and only
shrinks its input channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from blockprune.compact import (
    CompactModel,
    CompressionReport,
    PlainNetwork,
    classifier_flops,
    stem_flops,
)
from blockprune.data import Dataset, batches
from blockprune.errors import ConfigError
from blockprune.schedule import TrainConfig, loss_stage1, stage3_lr


@dataclass(frozen=True)
class SfpConfig:
    rate: float = 0.0
    epochs: int = 0
    cadence: int = 1  # epochs between re-masking

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"filter pruning rate must lie in [0, 1), got {self.rate}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")


@dataclass(frozen=True)
class FilterNorms:
    """L2 norm of each output filter of every prunable convolution, in block order."""

    per_block: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i, v in enumerate(self.per_block):
            if (v < 0).any():
                raise ConfigError(f"block {i}: norms must be non-negative")


def filter_norms(model: CompactModel) -> FilterNorms:
    out = []
    for block in model.network.blocks:
        w = block.conv1.weight.detach()
        out.append(w.reshape(w.shape[0], -1).norm(dim=1).numpy())
    return FilterNorms(tuple(out))


def _selection(norms: np.ndarray, rate: float) -> list[int]:
    count = math.floor(rate * norms.shape[0])
    order = np.argsort(norms, kind="stable")  # stable sort sends ties to the lower index
    return sorted(int(i) for i in order[:count])


def sfp_mask_step(model: CompactModel, cfg: SfpConfig) -> CompactModel:
    """Re-rank filters and zero out the weakest floor(rate * C_out) per block.

    Zeroing touches the filter weights plus the channel's normalization shift
    and running mean; the normalization scale is kept so a later gradient
    step can regrow the filter (soft pruning).
    """
    norms = filter_norms(model)
    zeroed: list[tuple[int, ...]] = []
    with torch.no_grad():
        for block, v in zip(model.network.blocks, norms.per_block):
            drop = _selection(v, cfg.rate)
            for c in drop:
                block.conv1.weight[c].zero_()
                block.bn1.bias[c].zero_()
                block.bn1.running_mean[c].zero_()
            zeroed.append(tuple(drop))
    model.sfp_zeroed = tuple(zeroed)
    return model


def sfp_finalize(model: CompactModel, cfg: SfpConfig) -> tuple[CompactModel, CompressionReport]:
    """Harden the soft mask: structurally remove the filters a final masking
    step selects, shrinking each block's internal width and the second
    convolution's input channels to match."""
    if all(math.floor(cfg.rate * m) == 0 for m in model.mid_channels):
        return model, CompressionReport.build(model.origin_spec, model)
    model = sfp_mask_step(model, cfg)
    keeps = [
        [c for c in range(mid) if c not in set(drop)]
        for mid, drop in zip(model.mid_channels, model.sfp_zeroed)
    ]
    narrowed = PlainNetwork(model.spec, tuple(len(k) for k in keeps))
    narrowed.stem.load_state_dict(model.network.stem.state_dict())
    narrowed.classifier.load_state_dict(model.network.classifier.state_dict())
    with torch.no_grad():
        for dst, src, keep in zip(narrowed.blocks, model.network.blocks, keeps):
            sel = torch.as_tensor(keep, dtype=torch.long)
            dst.conv1.weight.copy_(src.conv1.weight[sel])
            dst.bn1.weight.copy_(src.bn1.weight[sel])
            dst.bn1.bias.copy_(src.bn1.bias[sel])
            dst.bn1.running_mean.copy_(src.bn1.running_mean[sel])
            dst.bn1.running_var.copy_(src.bn1.running_var[sel])
            dst.conv2.weight.copy_(src.conv2.weight[:, sel])
            dst.bn2.load_state_dict(src.bn2.state_dict())
    narrowed.eval()
    final = CompactModel(
        spec=model.spec,
        network=narrowed,
        provenance=model.provenance,
        origin_spec=model.origin_spec,
        mid_channels=narrowed.mid_channels,
    )
    return final, CompressionReport.build(model.origin_spec, final)


def run_sfp(
    model: CompactModel,
    dataset: Dataset,
    cfg: SfpConfig,
    train_cfg: TrainConfig,
    epoch_offset: int = 0,
) -> tuple[CompactModel, CompressionReport]:
    """Fine-tune the compact model with periodic re-masking, then harden.

    Training continues from the exported weights at the final-stage learning
    rate; filters are re-ranked and re-zeroed every `cadence` epochs.
    """
    net = model.network
    opt = torch.optim.SGD(
        net.parameters(),
        lr=stage3_lr(train_cfg, 0),
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
    )
    sfp_mask_step(model, cfg)
    for e in range(cfg.epochs):
        net.train()
        for idx in batches(dataset, train_cfg.batch_size, train_cfg.seed, epoch_offset + e):
            x, y = dataset.tensors(idx)
            loss = loss_stage1(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if (e + 1) % cfg.cadence == 0:
            sfp_mask_step(model, cfg)
    net.eval()
    return sfp_finalize(model, cfg)


def sfp_convention_flops(model: CompactModel, rate: float) -> int:
    """Idealized composed-accounting estimate for comparison rows: treats both
    convolutions of every surviving block as filter-pruned at the rate,
    ignoring the residual-add width restriction that the structural numbers
    respect. Reported alongside the exact figures, never in their place."""
    spec = model.spec
    total = stem_flops(spec) + classifier_flops(spec)
    for block in spec.blocks:
        out = block.out_shape
        keep = out.channels - math.floor(rate * out.channels)
        conv1 = block.in_shape.channels * keep * 9 * out.height * out.width
        conv2 = keep * keep * 9 * out.height * out.width
        total += conv1 + conv2
    return total
