"""Block-structured gated network: structure types, masks, and forward passes.

A network is a stem convolution, an ordered list of residual blocks, and a
global-average-pool classifier. Every block carries a gating module that
scores it with a mark in (0, 1); a per-block mask state decides whether the
block runs gated (soft blend of block output and its input), runs plainly,
or is skipped entirely.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from blockprune.errors import ContractViolation, SpecError

# ---------------------------------------------------------------------------
# structure types


@dataclass(frozen=True)
class LayerShape:
    """Channel-first feature-map shape."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            if getattr(self, name) < 1:
                raise SpecError(f"LayerShape.{name} must be >= 1, got {getattr(self, name)}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


class BlockKind(Enum):
    BASIC_RESIDUAL = "basic_residual"
    STEM = "stem"
    CLASSIFIER = "classifier"


class Shortcut(Enum):
    IDENTITY = "identity"
    PAD_DOWNSAMPLE = "pad_downsample"


@dataclass(frozen=True)
class BlockSpec:
    """One residual block position in the backbone."""

    index: int
    in_shape: LayerShape
    out_shape: LayerShape
    kind: BlockKind = BlockKind.BASIC_RESIDUAL
    stride: int = 1
    shortcut: Shortcut = Shortcut.IDENTITY

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise SpecError(f"block {self.index}: stride must be 1 or 2, got {self.stride}")
        halves = (
            self.out_shape.height * 2 == self.in_shape.height
            and self.out_shape.width * 2 == self.in_shape.width
        )
        if (self.stride == 2) != halves:
            raise SpecError(
                f"block {self.index}: stride {self.stride} inconsistent with shapes "
                f"{self.in_shape.as_tuple()} -> {self.out_shape.as_tuple()}"
            )
        if (self.shortcut is Shortcut.IDENTITY) != (self.in_shape == self.out_shape):
            raise SpecError(
                f"block {self.index}: shortcut {self.shortcut.value} inconsistent with shapes "
                f"{self.in_shape.as_tuple()} -> {self.out_shape.as_tuple()}"
            )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "in_shape": self.in_shape.as_tuple(),
            "out_shape": self.out_shape.as_tuple(),
            "kind": self.kind.value,
            "stride": self.stride,
            "shortcut": self.shortcut.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(
            index=d["index"],
            in_shape=LayerShape(*d["in_shape"]),
            out_shape=LayerShape(*d["out_shape"]),
            kind=BlockKind(d["kind"]),
            stride=d["stride"],
            shortcut=Shortcut(d["shortcut"]),
        )


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative backbone description, excluding stem and classifier."""

    blocks: tuple[BlockSpec, ...]
    num_classes: int
    input_shape: LayerShape

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise SpecError("NetworkSpec needs at least one block")
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        for i, b in enumerate(self.blocks):
            if b.index != i:
                raise SpecError(f"block at position {i} has index {b.index}")
            if b.kind is not BlockKind.BASIC_RESIDUAL:
                raise SpecError(f"block {i}: backbone blocks must be basic_residual")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_shape != b.in_shape:
                raise SpecError(
                    f"blocks {a.index} -> {b.index}: shape mismatch "
                    f"{a.out_shape.as_tuple()} vs {b.in_shape.as_tuple()}"
                )
        if (self.input_shape.height, self.input_shape.width) != (
            self.blocks[0].in_shape.height,
            self.blocks[0].in_shape.width,
        ):
            raise SpecError("stem preserves spatial dims: input and first block must agree")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def stem_channels(self) -> int:
        return self.blocks[0].in_shape.channels

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_shape.channels

    def downsample_indices(self) -> tuple[int, ...]:
        return tuple(b.index for b in self.blocks if b.shortcut is Shortcut.PAD_DOWNSAMPLE)

    def stage_of(self, index: int) -> int:
        """1-based stage number; a stage starts at each downsampling block."""
        return 1 + sum(1 for b in self.blocks[: index + 1] if b.shortcut is Shortcut.PAD_DOWNSAMPLE)

    def without_blocks(self, drop: set[int]) -> "NetworkSpec":
        kept = [b for b in self.blocks if b.index not in drop]
        reindexed = tuple(replace(b, index=i) for i, b in enumerate(kept))
        return NetworkSpec(reindexed, self.num_classes, self.input_shape)

    def to_dict(self) -> dict:
        return {
            "blocks": [b.to_dict() for b in self.blocks],
            "num_classes": self.num_classes,
            "input_shape": self.input_shape.as_tuple(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            blocks=tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            num_classes=d["num_classes"],
            input_shape=LayerShape(*d["input_shape"]),
        )


class BlockState(Enum):
    ACTIVE = "active"
    PRUNED = "pruned"
    FIXED = "fixed"


class GateMask:
    """Per-block hard state plus the set of never-prunable blocks.

    Pruned is absorbing: once a block is pruned it can only leave that state
    by being dropped at export. Exempt blocks are held at Fixed.
    """

    def __init__(self, states: list[BlockState], exempt: frozenset[int]):
        for l in exempt:
            if not 0 <= l < len(states):
                raise SpecError(f"exempt index {l} out of range")
            if states[l] is BlockState.PRUNED:
                raise SpecError(f"exempt block {l} cannot be pruned")
        self._states = list(states)
        self.exempt = frozenset(exempt)

    @classmethod
    def initial(cls, spec: NetworkSpec) -> "GateMask":
        """All blocks gate-controlled except downsampling ones, which are exempt
        (their skipped path has no defined shape) and held at Fixed."""
        exempt = frozenset(spec.downsample_indices())
        states = [
            BlockState.FIXED if i in exempt else BlockState.ACTIVE
            for i in range(spec.num_blocks)
        ]
        return cls(states, exempt)

    def __len__(self) -> int:
        return len(self._states)

    def state(self, index: int) -> BlockState:
        return self._states[index]

    @property
    def states(self) -> tuple[BlockState, ...]:
        return tuple(self._states)

    def prune(self, index: int) -> None:
        if index in self.exempt:
            raise ContractViolation(f"block {index} is exempt and cannot be pruned")
        if self._states[index] is not BlockState.ACTIVE:
            raise ContractViolation(
                f"block {index} is {self._states[index].value}, only active blocks are prunable"
            )
        self._states[index] = BlockState.PRUNED

    def fix_unpruned(self) -> None:
        self._states = [
            s if s is BlockState.PRUNED else BlockState.FIXED for s in self._states
        ]

    def active_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self._states) if s is BlockState.ACTIVE)

    def pruned_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self._states) if s is BlockState.PRUNED)

    def unpruned_count(self) -> int:
        return sum(1 for s in self._states if s is not BlockState.PRUNED)

    def all_settled(self) -> bool:
        return all(s is not BlockState.ACTIVE for s in self._states)

    def copy(self) -> "GateMask":
        return GateMask(list(self._states), self.exempt)

    def to_dict(self) -> dict:
        return {
            "states": [s.value for s in self._states],
            "exempt": sorted(self.exempt),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateMask":
        return cls([BlockState(s) for s in d["states"]], frozenset(d["exempt"]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GateMask)
            and self._states == other._states
            and self.exempt == other.exempt
        )


@dataclass
class ActivationTrace:
    """Intermediate tensors of one forward pass (skipped blocks record None)."""

    block_inputs: list[torch.Tensor]
    block_outputs: list[torch.Tensor | None]
    feature: torch.Tensor
    logits: torch.Tensor


# ---------------------------------------------------------------------------
# torch modules


def _pad_downsample(x: torch.Tensor, out_channels: int) -> torch.Tensor:
    # parameter-free shortcut: stride-2 subsample, zero-pad new channels at the end
    x = x[:, :, ::2, ::2]
    extra = out_channels - x.size(1)
    return F.pad(x, (0, 0, 0, 0, 0, extra))


class ResidualBlock(nn.Module):
    """conv3x3-BN-ReLU, conv3x3-BN, shortcut add, ReLU.

    `mid_channels` narrows the first convolution's output (and the second's
    input); the block's external shapes are unchanged.
    """

    def __init__(self, spec: BlockSpec, mid_channels: int | None = None):
        super().__init__()
        in_c = spec.in_shape.channels
        out_c = spec.out_shape.channels
        mid = out_c if mid_channels is None else mid_channels
        if not 1 <= mid <= out_c:
            raise SpecError(f"block {spec.index}: mid_channels {mid} out of range")
        self.spec = spec
        self.mid_channels = mid
        self.conv1 = nn.Conv2d(in_c, mid, 3, stride=spec.stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, out_c, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.spec.shortcut is Shortcut.PAD_DOWNSAMPLE:
            s = _pad_downsample(x, self.spec.out_shape.channels)
        else:
            s = x
        return F.relu(y + s)


class Stem(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


class Classifier(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.mean(dim=(2, 3)))


def gated_block_step(
    block: ResidualBlock,
    x: torch.Tensor,
    mark: torch.Tensor | float | None,
    state: BlockState,
    block_out: torch.Tensor | None = None,
) -> torch.Tensor:
    """Advance the residual stream across one block under its mask state.

    Active blends the block output with its input by the mark; Pruned passes
    the input through untouched; Fixed runs the block unconditionally.
    `block_out` supplies an already-computed block output so callers that need
    it for other purposes do not evaluate the block twice.
    """
    if state is BlockState.PRUNED:
        if block.spec.shortcut is Shortcut.PAD_DOWNSAMPLE:
            raise ContractViolation(
                f"block {block.spec.index}: pruned downsampling block has no identity path"
            )
        return x
    y = block(x) if block_out is None else block_out
    if state is BlockState.FIXED:
        return y
    if mark is None:
        raise ContractViolation(f"block {block.spec.index}: active block needs a mark")
    if isinstance(mark, torch.Tensor) and mark.dim() == 1:
        mark = mark.view(-1, 1, 1, 1)
    return y * mark + x * (1 - mark)


class GatedNetwork(nn.Module):
    """Backbone with one gating module per block.

    Forward returns (logits, marks) where marks maps block index -> per-instance
    mark tensor, with entries only for blocks evaluated in the Active state.
    """

    def __init__(self, spec: NetworkSpec, gates: nn.Module):
        super().__init__()
        self.spec = spec
        self.stem = Stem(spec.input_shape.channels, spec.stem_channels)
        self.blocks = nn.ModuleList(ResidualBlock(b) for b in spec.blocks)
        self.gates = gates
        self.classifier = Classifier(spec.feature_channels, spec.num_classes)

    def forward(
        self,
        x: torch.Tensor,
        mask: GateMask,
        trace: bool = False,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]] | tuple[
        torch.Tensor, dict[int, torch.Tensor], ActivationTrace
    ]:
        if tuple(x.shape[1:]) != self.spec.input_shape.as_tuple():
            raise SpecError(
                f"input shape {tuple(x.shape[1:])} does not match "
                f"spec {self.spec.input_shape.as_tuple()}"
            )
        if len(mask) != self.spec.num_blocks:
            raise SpecError(f"mask covers {len(mask)} blocks, network has {self.spec.num_blocks}")
        h = self.stem(x)
        marks: dict[int, torch.Tensor] = {}
        inputs, outputs = [], []
        gate_state = self.gates.begin(x.size(0), x.device)
        for l, block in enumerate(self.blocks):
            state = mask.state(l)
            if trace:
                inputs.append(h)
            mark = None
            if state is BlockState.ACTIVE:
                mark, gate_state = self.gates.step(l, h, gate_state)
                marks[l] = mark
            out = block(h) if state is not BlockState.PRUNED else None
            if trace:
                outputs.append(out)
            h = gated_block_step(block, h, mark, state, block_out=out)
        logits = self.classifier(h)
        if trace:
            return logits, marks, ActivationTrace(inputs, outputs, h, logits)
        return logits, marks


# ---------------------------------------------------------------------------
# construction


def _seeded_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)

    def rand_like(p: torch.Tensor) -> torch.Tensor:
        return torch.rand(p.shape, generator=gen, dtype=p.dtype)

    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_out)
                )
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.copy_((rand_like(m.weight) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.copy_((rand_like(m.bias) * 2 - 1) * bound)
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
        elif isinstance(m, nn.LSTMCell):
            bound = 1.0 / math.sqrt(m.hidden_size)
            for p in m.parameters():
                with torch.no_grad():
                    p.copy_((rand_like(p) * 2 - 1) * bound)


def build_network(
    spec: NetworkSpec,
    seed: int,
    gate: str = "conv",
    conv_gate=None,
    recur_gate=None,
) -> GatedNetwork:
    """Build a gated network with deterministic parameter initialization.

    `gate` selects the gating family ("conv" or "recur"); the optional spec
    objects override the gate defaults.
    """
    from blockprune import gates as gates_mod

    if gate == "conv":
        bank = gates_mod.ConvGateBank(spec, conv_gate or gates_mod.ConvGateSpec())
    elif gate == "recur":
        bank = gates_mod.RecurGateBank(spec, recur_gate or gates_mod.RecurGateSpec())
    else:
        raise SpecError(f"unknown gate type {gate!r} (expected 'conv' or 'recur')")
    net = GatedNetwork(spec, bank)
    _seeded_init(net, seed)
    return net


def snapshot_network(net: GatedNetwork) -> GatedNetwork:
    """Deep copy with gradients disabled, for use as a frozen teacher."""
    frozen = copy.deepcopy(net)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


# ---------------------------------------------------------------------------
# stock architectures

CIFAR_WIDTHS = (16, 32, 64)


def cifar_resnet_spec(depth: int, num_classes: int = 10, image_size: int = 32) -> NetworkSpec:
    """Three-stage residual spec for small square images.

    Depth must be 6n+2 (20/32/56/110); each stage holds n blocks and the
    first block of stages 2 and 3 downsamples with a parameter-free shortcut.
    """
    if (depth - 2) % 6 != 0:
        raise SpecError(f"depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    blocks: list[BlockSpec] = []
    size = image_size
    for stage, width in enumerate(CIFAR_WIDTHS):
        for i in range(n):
            if stage > 0 and i == 0:
                in_shape = LayerShape(CIFAR_WIDTHS[stage - 1], size, size)
                size //= 2
                out_shape = LayerShape(width, size, size)
                blocks.append(
                    BlockSpec(
                        index=len(blocks),
                        in_shape=in_shape,
                        out_shape=out_shape,
                        stride=2,
                        shortcut=Shortcut.PAD_DOWNSAMPLE,
                    )
                )
            else:
                shape = LayerShape(width, size, size)
                blocks.append(BlockSpec(index=len(blocks), in_shape=shape, out_shape=shape))
    return NetworkSpec(tuple(blocks), num_classes, LayerShape(3, image_size, image_size))


def micro_spec(
    num_blocks: int = 9,
    channels: int = 8,
    image_size: int = 16,
    num_classes: int = 4,
) -> NetworkSpec:
    """Single-width desk-scale spec: every block keeps shape, so all are prunable."""
    shape = LayerShape(channels, image_size, image_size)
    blocks = tuple(
        BlockSpec(index=i, in_shape=shape, out_shape=shape) for i in range(num_blocks)
    )
    return NetworkSpec(blocks, num_classes, LayerShape(3, image_size, image_size))


ARCHITECTURES = {
    "rn20": lambda num_classes, image_size=32: cifar_resnet_spec(20, num_classes, image_size),
    "rn32": lambda num_classes, image_size=32: cifar_resnet_spec(32, num_classes, image_size),
    "rn56": lambda num_classes, image_size=32: cifar_resnet_spec(56, num_classes, image_size),
    "rn110": lambda num_classes, image_size=32: cifar_resnet_spec(110, num_classes, image_size),
    "micro": lambda num_classes, image_size=16: micro_spec(
        num_classes=num_classes, image_size=image_size
    ),
}
