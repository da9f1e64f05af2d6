"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic ``BPCK``
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length H
    bytes 16..    H bytes of canonical UTF-8 JSON (sorted keys, no spaces)
    then          tensor payload: for each entry of header["tensors"], in
                  order, prod(shape) little-endian IEEE-754 float32 values

The header carries the network structure, the mask states for gated models,
and the tensor name/shape table; the payload carries every float tensor of
the model state (parameters and normalization statistics) in declared order.
Integer bookkeeping buffers are not stored. Save/load round-trips are
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from blockprune.compact import CompactModel, PlainNetwork
from blockprune.errors import CheckpointError
from blockprune.gates import ConvGateBank, ConvGateSpec, RecurGateBank, RecurGateSpec
from blockprune.netcore import GateMask, GatedNetwork, NetworkSpec

MAGIC = b"BPCK"
VERSION = 1


def _float_entries(module: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [
        (name, tensor)
        for name, tensor in module.state_dict().items()
        if tensor.dtype == torch.float32
    ]


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model, mask: GateMask | None = None, meta: dict | None = None) -> None:
    """Serialize a gated network (with its mask) or a compact model."""
    if isinstance(model, GatedNetwork):
        if mask is None:
            raise CheckpointError("gated checkpoints require a mask")
        module = model
        header = {
            "kind": "gated",
            "spec": model.spec.to_dict(),
            "mask": mask.to_dict(),
            "gate": {"type": model.gates.gate_type, **model.gates.gate_spec.to_dict()},
        }
    elif isinstance(model, CompactModel):
        module = model.network
        header = {
            "kind": "compact",
            "spec": model.spec.to_dict(),
            "origin_spec": model.origin_spec.to_dict(),
            "provenance": list(model.provenance),
            "mid_channels": list(model.mid_channels),
        }
    else:
        raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")
    entries = _float_entries(module)
    header["tensors"] = [[name, list(t.shape)] for name, t in entries]
    header["meta"] = meta or {}
    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, tensor in entries:
            fh.write(tensor.detach().numpy().astype("<f4", copy=False).tobytes())


@dataclass
class LoadedCheckpoint:
    kind: str  # "gated" | "compact"
    network: GatedNetwork | None
    mask: GateMask | None
    compact: CompactModel | None
    meta: dict

    @property
    def model(self):
        return self.network if self.kind == "gated" else self.compact


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = int.from_bytes(raw[8:16], "little")
    if 16 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    kind = header.get("kind")
    if kind == "gated":
        spec = NetworkSpec.from_dict(header["spec"])
        gate = dict(header["gate"])
        gate_type = gate.pop("type")
        if gate_type == "conv":
            bank = ConvGateBank(spec, ConvGateSpec.from_dict(gate))
        elif gate_type == "recur":
            bank = RecurGateBank(spec, RecurGateSpec.from_dict(gate))
        else:
            raise CheckpointError(f"{path}: unknown gate type {gate_type!r}")
        module = GatedNetwork(spec, bank)
        mask = GateMask.from_dict(header["mask"])
        result = LoadedCheckpoint("gated", module, mask, None, header.get("meta", {}))
    elif kind == "compact":
        spec = NetworkSpec.from_dict(header["spec"])
        origin = NetworkSpec.from_dict(header["origin_spec"])
        mids = tuple(header["mid_channels"])
        module = PlainNetwork(spec, mids)
        compact = CompactModel(
            spec=spec,
            network=module,
            provenance=tuple(header["provenance"]),
            origin_spec=origin,
            mid_channels=mids,
        )
        result = LoadedCheckpoint("compact", None, None, compact, header.get("meta", {}))
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")

    _load_payload(path, raw[16 + header_len :], header["tensors"], module)
    module.eval()
    return result


def _load_payload(path, payload: bytes, table: list, module: torch.nn.Module) -> None:
    expected = {name: tensor for name, tensor in _float_entries(module)}
    listed = [name for name, _ in table]
    if sorted(listed) != sorted(expected):
        raise CheckpointError(f"{path}: tensor table does not match the declared structure")
    offset = 0
    state: dict[str, torch.Tensor] = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload at {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        if tuple(shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: tensor {name!r} has unexpected shape {shape}")
        state[name] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    module.load_state_dict(state, strict=False)  # integer bookkeeping buffers keep defaults
