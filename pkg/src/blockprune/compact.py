"""Compact export and exact cost accounting.

FLOPs here means multiply-accumulate operations over convolution and fully
connected layers only; normalization, activations, pooling, and the
parameter-free shortcut are excluded, and one MAC counts as one FLOP. This
is the unique convention under which the stock three-stage baselines land on
their published totals, so treat it as load-bearing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from blockprune.errors import ContractViolation, SpecError
from blockprune.netcore import (
    BlockSpec,
    Classifier,
    GateMask,
    GatedNetwork,
    NetworkSpec,
    ResidualBlock,
    Stem,
)


class PlainNetwork(nn.Module):
    """Gate-free backbone: stem, residual blocks, classifier."""

    def __init__(self, spec: NetworkSpec, mid_channels: tuple[int, ...] | None = None):
        super().__init__()
        mids = mid_channels or tuple(b.out_shape.channels for b in spec.blocks)
        if len(mids) != spec.num_blocks:
            raise SpecError("mid_channels length must match block count")
        self.spec = spec
        self.mid_channels = tuple(mids)
        self.stem = Stem(spec.input_shape.channels, spec.stem_channels)
        self.blocks = nn.ModuleList(
            ResidualBlock(b, mid) for b, mid in zip(spec.blocks, mids)
        )
        self.classifier = Classifier(spec.feature_channels, spec.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        return self.classifier(h)


@dataclass
class CompactModel:
    """Exported network containing only surviving blocks, with no gate parameters.

    `provenance` maps each surviving block back to its index in `origin_spec`,
    which is kept for baseline accounting. `sfp_zeroed` holds the filter
    indices currently soft-masked per block, when a channel-pruning pass is
    in flight.
    """

    spec: NetworkSpec
    network: PlainNetwork
    provenance: tuple[int, ...]
    origin_spec: NetworkSpec
    mid_channels: tuple[int, ...]
    sfp_zeroed: tuple[tuple[int, ...], ...] | None = field(default=None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.network(x)


def export_compact(net: GatedNetwork, mask: GateMask) -> CompactModel:
    """Physically drop pruned blocks and all gates, copying surviving parameters.

    Requires a settled mask (every block Pruned or Fixed); exporting with a
    gate still in control would silently change semantics.
    """
    if len(mask) != net.spec.num_blocks:
        raise SpecError("mask does not cover the network")
    active = mask.active_indices()
    if active:
        raise ContractViolation(f"export before fixing: blocks {list(active)} still active")
    dropped = set(mask.pruned_indices())
    kept = tuple(i for i in range(net.spec.num_blocks) if i not in dropped)
    spec = net.spec.without_blocks(dropped)
    model = PlainNetwork(spec)
    model.stem.load_state_dict(net.stem.state_dict())
    model.classifier.load_state_dict(net.classifier.state_dict())
    for new_idx, old_idx in enumerate(kept):
        model.blocks[new_idx].load_state_dict(net.blocks[old_idx].state_dict())
    model.eval()
    return CompactModel(
        spec=spec,
        network=model,
        provenance=kept,
        origin_spec=net.spec,
        mid_channels=model.mid_channels,
    )


# ---------------------------------------------------------------------------
# cost model


def _structure(obj) -> tuple[NetworkSpec, tuple[int | None, ...]]:
    if isinstance(obj, NetworkSpec):
        return obj, (None,) * obj.num_blocks
    if isinstance(obj, CompactModel):
        return obj.spec, obj.mid_channels
    if isinstance(obj, PlainNetwork):
        return obj.spec, obj.mid_channels
    if isinstance(obj, GatedNetwork):
        return obj.spec, (None,) * obj.spec.num_blocks
    raise SpecError(f"cannot count costs of {type(obj).__name__}")


def stem_flops(spec: NetworkSpec) -> int:
    c_in = spec.input_shape.channels
    return c_in * spec.stem_channels * 9 * spec.input_shape.height * spec.input_shape.width


def block_flops(block: BlockSpec, mid: int | None = None) -> int:
    out = block.out_shape
    m = out.channels if mid is None else mid
    conv1 = block.in_shape.channels * m * 9 * out.height * out.width
    conv2 = m * out.channels * 9 * out.height * out.width
    return conv1 + conv2


def classifier_flops(spec: NetworkSpec) -> int:
    return spec.feature_channels * spec.num_classes


def count_flops(obj) -> int:
    """Total MACs of the backbone; gates never appear (they are removed at export)."""
    spec, mids = _structure(obj)
    total = stem_flops(spec) + classifier_flops(spec)
    for block, mid in zip(spec.blocks, mids):
        total += block_flops(block, mid)
    return total


def stem_params(spec: NetworkSpec) -> int:
    c_in, c_out = spec.input_shape.channels, spec.stem_channels
    return c_in * c_out * 9 + 2 * c_out


def block_params(block: BlockSpec, mid: int | None = None) -> int:
    out_c = block.out_shape.channels
    m = out_c if mid is None else mid
    conv1 = block.in_shape.channels * m * 9
    conv2 = m * out_c * 9
    return conv1 + conv2 + 2 * m + 2 * out_c  # convs plus both norm affine pairs


def classifier_params(spec: NetworkSpec) -> int:
    return spec.feature_channels * spec.num_classes + spec.num_classes


def count_params(obj) -> int:
    """Learnable scalars in conv, fully connected, and normalization layers."""
    spec, mids = _structure(obj)
    total = stem_params(spec) + classifier_params(spec)
    for block, mid in zip(spec.blocks, mids):
        total += block_params(block, mid)
    return total


@dataclass(frozen=True)
class CompressionReport:
    flops_baseline: int
    flops_pruned: int
    params_baseline: int
    params_pruned: int
    flops_drop_pct: float
    params_drop_pct: float

    @classmethod
    def build(cls, baseline, pruned) -> "CompressionReport":
        fb, fp = count_flops(baseline), count_flops(pruned)
        pb, pp = count_params(baseline), count_params(pruned)
        if fp > fb or pp > pb:
            raise ContractViolation("pruned model costs more than its baseline")
        return cls(
            flops_baseline=fb,
            flops_pruned=fp,
            params_baseline=pb,
            params_pruned=pp,
            flops_drop_pct=round((1 - fp / fb) * 100, 2),
            params_drop_pct=round((1 - pp / pb) * 100, 2),
        )

    def as_text(self, extra: dict | None = None) -> str:
        pairs = [
            ("flops_baseline", self.flops_baseline),
            ("flops_pruned", self.flops_pruned),
            ("flops_drop_pct", f"{self.flops_drop_pct:.2f}"),
            ("params_baseline", self.params_baseline),
            ("params_pruned", self.params_pruned),
            ("params_drop_pct", f"{self.params_drop_pct:.2f}"),
        ]
        pairs += list((extra or {}).items())
        return "\n".join(f"{k} = {v}" for k, v in pairs)

    CSV_HEADER = "method,arch,flops_baseline,flops_pruned,flops_drop_pct,params_baseline,params_pruned,params_drop_pct"

    def as_csv_row(self, method: str, arch: str) -> str:
        return (
            f"{method},{arch},{self.flops_baseline},{self.flops_pruned},"
            f"{self.flops_drop_pct:.2f},{self.params_baseline},{self.params_pruned},"
            f"{self.params_drop_pct:.2f}"
        )


def verify_equivalence(
    net: GatedNetwork,
    mask: GateMask,
    compact: CompactModel,
    inputs: torch.Tensor,
) -> float:
    """Max elementwise |logit difference| between the masked gated forward and
    the exported compact forward, over a batch of inputs."""
    if tuple(inputs.shape[1:]) != net.spec.input_shape.as_tuple():
        raise SpecError(f"inputs of shape {tuple(inputs.shape[1:])} do not fit the network")
    was_training = net.training
    net.eval()
    compact.network.eval()
    with torch.no_grad():
        gated_logits, _ = net(inputs, mask)
        compact_logits = compact.forward(inputs)
    if was_training:
        net.train()
    return float((gated_logits - compact_logits).abs().max())
