"""Per-task preprocessing and the multi-task input/output adapters."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError
from .tasks import RECONSTRUCTION_TASKS, SNAPSHOT_TASKS, TaskId, as_task


@lru_cache(maxsize=None)
def _dft(n: int, dtype: torch.dtype) -> torch.Tensor:
    m = torch.arange(n, dtype=torch.float64)
    mat = torch.exp(-2j * torch.pi * torch.outer(m, m) / n) / np.sqrt(n)
    return mat.to(dtype)


def dft_matrix(n: int, dtype: torch.dtype = torch.complex64) -> torch.Tensor:
    """Unitary ``n``-point DFT matrix, ``F[m, k] = exp(-2j*pi*m*k/n) / sqrt(n)``."""
    return _dft(n, dtype)


def preprocess(task, x) -> torch.Tensor:
    """Tokenize a task input.

    ``x`` is ``[..., T, K, N]`` complex or ``[..., T, K, 2N]`` real-stacked.
    CE/CP/PF flatten subcarrier and antenna features per timestamp; BF/DE/PE
    first move the antenna axis to the angle domain (right-multiplication by
    the DFT matrix). Real/imaginary stacking happens last, so the result is
    ``[..., T, K * 2N]`` real.
    """
    task = as_task(task)
    x = torch.as_tensor(x)
    if x.dim() < 3:
        raise ShapeError(f"task input must have at least 3 dims, got {tuple(x.shape)}")
    if not x.is_complex():
        half = x.shape[-1] // 2
        x = torch.complex(x[..., :half], x[..., half:])
    if task in SNAPSHOT_TASKS:
        x = x @ dft_matrix(x.shape[-1], x.dtype)
    elif task not in RECONSTRUCTION_TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    x = torch.cat([x.real, x.imag], dim=-1)
    return x.flatten(start_dim=-2)


@dataclass(frozen=True)
class AdapterSpec:
    task: TaskId
    in_tokens: int
    in_features: int
    token_len: int = 16
    model_dim: int = 128
    res_blocks_per_stage: int = 4
    kernel_size: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.token_len < 1 or self.model_dim < 1:
            raise ConfigurationError("token_len and model_dim must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        if self.stride != 1:
            raise ConfigurationError("residual blocks need stride 1 to preserve shape")


class ResBlock(nn.Module):
    """``x + Conv(ReLU(Conv(x)))`` on channel-first tokens ``[B, D, L]``."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=pad)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class TaskAdapter(nn.Module):
    """Linear alignment on both axes followed by ``Res(GELU(Res(.)))``.

    With ``residual=False`` only the two-axis linear alignment remains; the
    ablations use this as the "single linear projection" replacement.
    """

    def __init__(self, spec: AdapterSpec, residual: bool = True):
        super().__init__()
        self.spec = spec
        self.feature = nn.Linear(spec.in_features, spec.model_dim)
        self.token = nn.Linear(spec.in_tokens, spec.token_len)
        self.residual = residual
        if residual:
            n = spec.res_blocks_per_stage
            self.res_in = nn.Sequential(*[ResBlock(spec.model_dim, spec.kernel_size) for _ in range(n)])
            self.res_out = nn.Sequential(*[ResBlock(spec.model_dim, spec.kernel_size) for _ in range(n)])

    def forward(self, x):
        if x.shape[-2:] != (self.spec.in_tokens, self.spec.in_features):
            raise ShapeError(f"{self.spec.task} adapter expects [*, {self.spec.in_tokens}, "
                             f"{self.spec.in_features}], got {tuple(x.shape)}")
        x = self.feature(x)
        x = self.token(x.transpose(-1, -2)).transpose(-1, -2)
        if not self.residual:
            return x
        # The residual stages run channel-first, the layout Conv1d wants.
        h = self.res_out(F.gelu(self.res_in(x.transpose(1, 2).contiguous())))
        return h.transpose(1, 2).contiguous()
