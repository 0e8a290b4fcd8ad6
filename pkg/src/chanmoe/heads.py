"""Task heads: a small 2-D CNN for channel maps, an MLP for vectors and scalars."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError
from .tasks import RECONSTRUCTION_TASKS, TaskId


@dataclass(frozen=True)
class HeadSpec:
    """``out_shape`` is ``(tokens, K, 2N)`` for conv heads and ``(n_out,)`` for dense heads."""

    task: TaskId
    out_shape: Tuple[int, ...]
    token_len: int = 16
    model_dim: int = 128
    map_width: int = 16
    channels: int = 16
    kernel_size: int = 3
    layers: int = 3

    @property
    def kind(self) -> str:
        return "conv" if self.task in RECONSTRUCTION_TASKS else "dense"

    def __post_init__(self):
        if self.kind == "conv" and self.model_dim % self.map_width:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by map width {self.map_width}")
        if self.layers < 1:
            raise ConfigurationError("a head needs at least one layer")


class ConvHead(nn.Module):
    """Treat ``[L, D]`` as a ``D/W``-channel ``L x W`` map, convolve, project to the label grid."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        c_map = spec.model_dim // spec.map_width
        widths = [c_map] + [spec.channels] * (spec.layers - 1) + [c_map]
        pad = spec.kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, spec.kernel_size, padding=pad) for a, b in zip(widths[:-1], widths[1:]))
        out_tokens, *grid = spec.out_shape
        self.feature = nn.Linear(spec.model_dim, int(np.prod(grid)))
        self.token = nn.Linear(spec.token_len, out_tokens)

    def forward(self, x):
        B, L, D = x.shape
        W = self.spec.map_width
        h = x.reshape(B, L, D // W, W).permute(0, 2, 1, 3)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.gelu(h)
        h = h.permute(0, 2, 1, 3).reshape(B, L, D)
        h = self.feature(h)
        h = self.token(h.transpose(1, 2)).transpose(1, 2)
        return h.reshape(B, *self.spec.out_shape)


class DenseHead(nn.Module):
    """Flatten, ``layers`` GELU dense layers of width ``model_dim``, final linear."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        dims = [spec.token_len * spec.model_dim] + [spec.model_dim] * spec.layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(spec.model_dim, int(np.prod(spec.out_shape)))

    def forward(self, x):
        h = x.flatten(1)
        for layer in self.hidden:
            h = F.gelu(layer(h))
        y = self.out(h)
        return y.squeeze(-1) if self.spec.out_shape == (1,) else y


def build_head(spec: HeadSpec) -> nn.Module:
    return ConvHead(spec) if spec.kind == "conv" else DenseHead(spec)


def head_forward(head: nn.Module, x):
    if x.dim() != 3 or x.shape[1:] != (head.spec.token_len, head.spec.model_dim):
        raise ShapeError(f"head expects [B, {head.spec.token_len}, {head.spec.model_dim}], got {tuple(x.shape)}")
    return head(x)
