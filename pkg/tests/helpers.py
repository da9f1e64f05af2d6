"""Shared test utilities: independent straight-line oracles and tiny spec builders."""

from __future__ import annotations

import numpy as np
import torch

from blockprune.netcore import BlockSpec, LayerShape, NetworkSpec, Shortcut


def staged_spec(
    blocks_per_stage: int = 2,
    widths: tuple[int, ...] = (8, 16, 32),
    image_size: int = 16,
    num_classes: int = 4,
) -> NetworkSpec:
    """Small multi-stage spec with downsampling (hence exempt) stage openers."""
    blocks: list[BlockSpec] = []
    size = image_size
    for stage, width in enumerate(widths):
        for i in range(blocks_per_stage):
            if stage > 0 and i == 0:
                in_shape = LayerShape(widths[stage - 1], size, size)
                size //= 2
                blocks.append(
                    BlockSpec(
                        index=len(blocks),
                        in_shape=in_shape,
                        out_shape=LayerShape(width, size, size),
                        stride=2,
                        shortcut=Shortcut.PAD_DOWNSAMPLE,
                    )
                )
            else:
                shape = LayerShape(width, size, size)
                blocks.append(BlockSpec(index=len(blocks), in_shape=shape, out_shape=shape))
    return NetworkSpec(tuple(blocks), num_classes, LayerShape(3, image_size, image_size))


def np_conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Loop-based 2d cross-correlation oracle; x (C,H,W), w (O,C,kh,kw)."""
    c, h, wd = x.shape
    out_c, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((out_c, oh, ow), dtype=np.float64)
    for o in range(out_c):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[o, i, j] = float((patch * w[o]).sum())
    return out


def np_batchnorm_eval(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    shape = (-1,) + (1,) * (x.ndim - 1)
    return (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * weight.reshape(
        shape
    ) + bias.reshape(shape)


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_lstm_cell_step(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """Single LSTM cell step with gate order (input, forget, cell, output)."""
    gates = w_ih @ x + b_ih + w_hh @ h + b_hh
    hid = h.shape[0]
    i = np_sigmoid(gates[0:hid])
    f = np_sigmoid(gates[hid : 2 * hid])
    g = np.tanh(gates[2 * hid : 3 * hid])
    o = np_sigmoid(gates[3 * hid : 4 * hid])
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return h_next, c_next


def zero_module(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def params_vector(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1).clone() for p in module.parameters()])


def state_bytes(module: torch.nn.Module) -> bytes:
    return b"".join(
        t.detach().numpy().tobytes()
        for t in module.state_dict().values()
        if t.dtype == torch.float32
    )
