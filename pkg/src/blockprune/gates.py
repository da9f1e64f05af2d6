"""Gating modules that score each block with an importance mark in (0, 1).

Two families: a per-block feed-forward gate (two strided convolutions, pool,
linear head) and a lighter recurrent gate (per-block 1x1 projection feeding
one LSTM cell shared across the whole network). Both end in a sigmoid, so
marks live strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from blockprune.errors import ContractViolation, SpecError
from blockprune.netcore import LayerShape, NetworkSpec


@dataclass(frozen=True)
class ConvGateSpec:
    reduce_channels: int = 16
    conv_strides: tuple[int, int] = (2, 2)
    fc_in: int | None = None  # defaults to reduce_channels

    def __post_init__(self):
        if self.reduce_channels < 1:
            raise SpecError("reduce_channels must be >= 1")
        if any(s < 1 for s in self.conv_strides):
            raise SpecError("conv_strides must be positive")
        if self.fc_in is not None and self.fc_in != self.reduce_channels:
            raise SpecError("fc_in must equal reduce_channels (head follows global pooling)")

    def to_dict(self) -> dict:
        return {"reduce_channels": self.reduce_channels, "conv_strides": list(self.conv_strides)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvGateSpec":
        return cls(d["reduce_channels"], tuple(d["conv_strides"]))


@dataclass(frozen=True)
class RecurGateSpec:
    embed_dim: int = 16
    hidden_dim: int = 10

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise SpecError("embed_dim and hidden_dim must be >= 1")

    def to_dict(self) -> dict:
        return {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "RecurGateSpec":
        return cls(d["embed_dim"], d["hidden_dim"])


@dataclass(frozen=True)
class GateOutput:
    """A single validated importance mark."""

    mark: float

    def __post_init__(self):
        if not 0.0 < self.mark < 1.0:
            raise ContractViolation(f"mark must lie in (0, 1), got {self.mark}")


class ConvGate(nn.Module):
    """conv3x3(s)-BN-ReLU twice, global average pool, scalar head, sigmoid."""

    def __init__(self, in_shape: LayerShape, spec: ConvGateSpec):
        super().__init__()
        s1, s2 = spec.conv_strides
        if in_shape.height < s1 * s2 or in_shape.width < s1 * s2:
            raise SpecError(
                f"gate input {in_shape.as_tuple()} too small for strides {spec.conv_strides}"
            )
        c = spec.reduce_channels
        self.conv1 = nn.Conv2d(in_shape.channels, c, 3, stride=s1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, 3, stride=s2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c)
        self.fc = nn.Linear(spec.fc_in or c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        return torch.sigmoid(self.fc(y.mean(dim=(2, 3)))).squeeze(1)


class ConvGateBank(nn.Module):
    """One independent feed-forward gate per block; no cross-block state."""

    gate_type = "conv"

    def __init__(self, spec: NetworkSpec, gate_spec: ConvGateSpec):
        super().__init__()
        self.gate_spec = gate_spec
        self.gates = nn.ModuleList(ConvGate(b.in_shape, gate_spec) for b in spec.blocks)

    def begin(self, batch_size: int, device) -> None:
        return None

    def step(self, index: int, x: torch.Tensor, state) -> tuple[torch.Tensor, None]:
        return self.gates[index](x), None


class RecurGateBank(nn.Module):
    """Per-block pooled projections into one LSTM cell shared by the network.

    The recurrent state belongs to a single forward pass: `begin` returns a
    fresh zero state and `step` advances it left to right, so a block's mark
    can only depend on earlier blocks.
    """

    gate_type = "recur"

    def __init__(self, spec: NetworkSpec, gate_spec: RecurGateSpec):
        super().__init__()
        self.gate_spec = gate_spec
        self.embeds = nn.ModuleList(
            nn.Conv2d(b.in_shape.channels, gate_spec.embed_dim, 1) for b in spec.blocks
        )
        self.cell = nn.LSTMCell(gate_spec.embed_dim, gate_spec.hidden_dim)
        self.head = nn.Linear(gate_spec.hidden_dim, 1)

    def begin(self, batch_size: int, device) -> tuple[torch.Tensor, torch.Tensor]:
        zeros = torch.zeros(
            batch_size,
            self.gate_spec.hidden_dim,
            device=device,
            dtype=self.head.weight.dtype,
        )
        return zeros, zeros.clone()

    def step(
        self,
        index: int,
        x: torch.Tensor,
        state: tuple[torch.Tensor, torch.Tensor],
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        h, c = state
        if h.shape[1] != self.gate_spec.hidden_dim or c.shape[1] != self.gate_spec.hidden_dim:
            raise ContractViolation(
                f"recurrent state width {h.shape[1]} != hidden_dim {self.gate_spec.hidden_dim}"
            )
        e = self.embeds[index](x.mean(dim=(2, 3), keepdim=True)).flatten(1)
        h, c = self.cell(e, (h, c))
        mark = torch.sigmoid(self.head(h)).squeeze(1)
        return mark, (h, c)


def conv_gate_forward(gate: ConvGate, x: torch.Tensor) -> torch.Tensor:
    """Per-instance marks for one block; codomain (0, 1)."""
    return gate(x)


def recur_gate_forward(
    bank: RecurGateBank,
    index: int,
    x: torch.Tensor,
    hidden: tuple[torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """One recurrent gating step; returns marks and the advanced hidden state."""
    return bank.step(index, x, hidden)
