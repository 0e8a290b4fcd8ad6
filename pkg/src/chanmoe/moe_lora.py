"""
LoRA and task-gated mixture-of-LoRA-experts wrappers for frozen linear layers.

A wrapped layer computes

    y = W0 x + b + (alpha / r) * sum_k w_k B_k A_k x,   w = softmax(G[:, task])

where ``G`` is a single linear gate over the one-hot task identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .exceptions import ConfigurationError, ShapeError
from .tasks import TASKS, TaskId, as_task

TaskLike = Union[int, str, TaskId]


def task_index(task: TaskLike) -> int:
    if isinstance(task, (int, np.integer)) and not isinstance(task, bool):
        return int(task)
    return as_task(task).index


@dataclass
class LoraFactors:
    """Low-rank pair ``A [r, d_in]``, ``B [d_out, r]`` with scaling ``alpha / r``."""

    A: torch.Tensor
    B: torch.Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("LoRA alpha must be positive")
        if tuple(self.A.shape[:1]) != (self.rank,) or self.B.shape[-1] != self.rank:
            raise ShapeError(f"factor shapes {tuple(self.A.shape)}, {tuple(self.B.shape)} "
                             f"inconsistent with rank {self.rank}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int = 8, alpha: Optional[float] = None,
             std: float = 0.01, generator=None) -> "LoraFactors":
        A = torch.randn(rank, d_in, generator=generator) * std
        return cls(A, torch.zeros(d_out, rank), rank, 2.0 * rank if alpha is None else alpha)


def lora_delta(f: LoraFactors) -> torch.Tensor:
    """Dense update ``(alpha / r) B A``."""
    return (f.alpha / f.rank) * (f.B @ f.A)


class MoeLoraLinear(nn.Module):
    """Frozen ``nn.Linear`` plus ``n_experts`` LoRA pairs mixed by a task gate."""

    task_conditioned = True

    def __init__(self, base: nn.Linear, n_experts: int = 8, rank: int = 8,
                 alpha: Optional[float] = None, n_tasks: int = len(TASKS),
                 init_std: float = 0.01):
        super().__init__()
        if n_experts < 1 or rank < 1:
            raise ConfigurationError("n_experts and rank must be >= 1")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        d_out, d_in = base.weight.shape
        dtype = base.weight.dtype
        self.rank = rank
        self.alpha = 2.0 * rank if alpha is None else float(alpha)
        self.A = nn.ParameterList(
            [nn.Parameter(torch.randn(rank, d_in, dtype=dtype) * init_std) for _ in range(n_experts)])
        self.B = nn.ParameterList(
            [nn.Parameter(torch.zeros(d_out, rank, dtype=dtype)) for _ in range(n_experts)])
        self.gate = nn.Parameter(torch.zeros(n_experts, n_tasks, dtype=dtype))

    @property
    def n_experts(self) -> int:
        return len(self.A)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def gate_weights(self, task: TaskLike) -> torch.Tensor:
        return torch.softmax(self.gate[:, task_index(task)], dim=0)

    def forward(self, x, task: TaskLike):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        y = self.base(x)
        if not self.lora_active:
            return y
        omega = self.gate_weights(task)
        A = torch.stack(tuple(self.A))  # [E, r, d_in]
        B = torch.stack(tuple(self.B))  # [E, d_out, r]
        # Factor-first: A_k x, then B_k (.), never forming the dense update.
        h = torch.einsum("...i,eri->...er", x, A) * omega[:, None]
        return y + self.scaling * torch.einsum("...er,eor->...o", h, B)

    @property
    def lora_active(self) -> bool:
        """False only when every B is frozen at zero, so the update is exactly zero and can be skipped."""
        return any(B.requires_grad or bool(B.any()) for B in self.B)

    def factors(self, k: int) -> LoraFactors:
        return LoraFactors(self.A[k], self.B[k], self.rank, self.alpha)

    def merge_for_task(self, task: TaskLike) -> torch.Tensor:
        """Dense ``(alpha / r) sum_k w_k B_k A_k`` for one task."""
        omega = self.gate_weights(task)
        return sum(omega[k] * lora_delta(self.factors(k)) for k in range(self.n_experts))

    def lora_parameters(self) -> List[nn.Parameter]:
        return list(self.A) + list(self.B) + [self.gate]


def gate_weights(layer: MoeLoraLinear, task: TaskLike) -> torch.Tensor:
    return layer.gate_weights(task)


def moe_forward(layer: MoeLoraLinear, x, task: TaskLike):
    return layer(x, task)


def merge_for_task(layer: MoeLoraLinear, task: TaskLike) -> torch.Tensor:
    return layer.merge_for_task(task)


def call_linear(layer: nn.Module, x, task=None):
    """Apply a plain or task-conditioned linear layer."""
    if getattr(layer, "task_conditioned", False):
        if task is None:
            raise ConfigurationError("task-conditioned layer called without a task")
        return layer(x, task)
    return layer(x)


def ffn_linears(backbone: nn.Module):
    """``(block_index, name, parent_module)`` for each FFN projection."""
    for b, block in enumerate(backbone.blocks):
        for name in ("fc_in", "fc_out"):
            yield b, name, block.ffn


def inject(backbone: nn.Module, n_experts: int = 8, rank: int = 8,
           alpha: Optional[float] = None, n_tasks: int = len(TASKS),
           init_std: float = 0.01, seed: Optional[int] = None) -> List[str]:
    """Wrap both FFN projections of every block with :class:`MoeLoraLinear`.

    Attention, embeddings and norms are left untouched. Returns the wrapped
    layer names. Raises :class:`ConfigurationError` on double injection.
    """
    if any(isinstance(m, MoeLoraLinear) for m in backbone.modules()):
        raise ConfigurationError("backbone already carries MoE-LoRA layers")
    if seed is not None:
        torch.manual_seed(seed)
    wrapped = []
    for b, name, parent in ffn_linears(backbone):
        base = getattr(parent, name)
        setattr(parent, name, MoeLoraLinear(base, n_experts, rank, alpha, n_tasks, init_std))
        wrapped.append(f"{b}.{name}")
    return wrapped


def moe_layers(model: nn.Module):
    """``(name, layer)`` for every MoE-LoRA layer, in block order."""
    backbone = getattr(model, "backbone", model)
    if not hasattr(backbone, "blocks"):
        return []
    out = []
    for b, name, parent in ffn_linears(backbone):
        layer = getattr(parent, name)
        if isinstance(layer, MoeLoraLinear):
            out.append((f"{b}.{name}", layer))
    return out


def moe_parameter_formula(dims: Iterable[Sequence[int]], n_experts: int, rank: int,
                          n_tasks: int = len(TASKS)) -> int:
    """Closed-form count: ``sum over layers of E*r*(d_in + d_out) + E*n_tasks``."""
    return sum(n_experts * rank * (d_in + d_out) + n_experts * n_tasks for d_in, d_out in dims)


@dataclass
class ExpertWeightRecord:
    layer: str
    task: TaskId
    omega: np.ndarray


def export_expert_weights(model: nn.Module) -> List[ExpertWeightRecord]:
    records = []
    with torch.no_grad():
        for name, layer in moe_layers(model):
            for task in TASKS:
                omega = layer.gate_weights(task).detach().cpu().double().numpy()
                records.append(ExpertWeightRecord(name, task, omega))
    return records


def write_expert_table(records: Sequence[ExpertWeightRecord], path) -> Path:
    """Tab-separated ``layer, task, w_0 .. w_{E-1}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(records[0].omega) if records else 0
    with open(path, "w", newline="") as fh:
        fh.write("# schema: expert-weights v1\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["layer", "task"] + [f"w_{k}" for k in range(n)])
        for r in records:
            writer.writerow([r.layer, r.task.value] + [f"{w:.9g}" for w in r.omega])
    return path


def read_expert_table(path) -> List[ExpertWeightRecord]:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows, delimiter="\t")
    next(reader)
    return [ExpertWeightRecord(r[0], TaskId(r[1]), np.asarray(r[2:], dtype=float)) for r in reader]
