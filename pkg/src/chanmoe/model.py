"""Assembly of adapters, shared backbone, MoE-LoRA and heads into one multi-task model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .adapters import AdapterSpec, TaskAdapter, preprocess
from .backbone import Backbone, BackboneConfig
from .channel_sim import ScenarioConfig
from .exceptions import ConfigurationError, LoadError
from .heads import HeadSpec, build_head, head_forward
from .moe_lora import MoeLoraLinear, inject
from .tasks import SCALAR_TASKS, TASKS, DatasetConfig, TaskId, as_task


@dataclass(frozen=True)
class TaskShape:
    """Raw input shape ``(T, K, 2N)`` and label shape for one task."""

    input_shape: Tuple[int, int, int]
    output_shape: Tuple[int, ...]

    @property
    def in_tokens(self) -> int:
        return self.input_shape[0]

    @property
    def in_features(self) -> int:
        return self.input_shape[1] * self.input_shape[2]


def task_shapes(cfg: ScenarioConfig, dcfg: DatasetConfig) -> Dict[TaskId, TaskShape]:
    K, n2 = cfg.subcarriers, 2 * cfg.sub6_antennas
    T, P = dcfg.history, dcfg.horizon
    return {
        TaskId.CE: TaskShape((T, K // dcfg.comb_step, n2), (T, K, n2)),
        TaskId.CP: TaskShape((T, K, n2), (P, K, n2)),
        TaskId.PF: TaskShape((T, K // 2, n2), (T, K // 2, n2)),
        TaskId.BF: TaskShape((1, K, n2), (dcfg.codebook_size,)),
        TaskId.DE: TaskShape((1, K, n2), (1,)),
        TaskId.PE: TaskShape((1, K, n2), (1,)),
    }


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 128
    token_len: int = 16
    n_layers: int = 2
    n_heads: int = 4
    causal: bool = False
    res_blocks_per_stage: int = 4
    kernel_size: int = 3
    n_experts: int = 8
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    head_map_width: int = 16
    head_channels: int = 16
    head_layers: int = 3
    use_adapter_in: bool = True
    use_adapter_out: bool = True
    use_backbone: bool = True
    use_lora: bool = True
    seed: int = 0

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(model_dim=self.model_dim, n_layers=self.n_layers, n_heads=self.n_heads,
                              max_tokens=self.token_len, causal=self.causal, seed=self.seed)


ABLATIONS = {
    "full": {},
    "no-adapter-in": {"use_adapter_in": False},
    "no-adapter-out": {"use_adapter_out": False},
    "no-adapters": {"use_adapter_in": False, "use_adapter_out": False},
    "no-backbone": {"use_backbone": False, "use_lora": False},
    "frozen-no-lora": {"use_lora": False},
}


def ablation_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; choose from {sorted(ABLATIONS)}")
    return dataclasses.replace(base, **ABLATIONS[variant])


class Identity(nn.Module):
    def forward(self, x, task=None):
        return x


class MultiTaskModel(nn.Module):
    """Per-task adapters and heads around one shared frozen backbone."""

    def __init__(self, cfg: ModelConfig, shapes: Dict[TaskId, TaskShape]):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.shapes = dict(shapes)
        L, D = cfg.token_len, cfg.model_dim
        self.adapter_in = nn.ModuleDict()
        self.adapter_out = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for task in TASKS:
            s = shapes[task]
            self.adapter_in[task.value] = TaskAdapter(
                AdapterSpec(task, s.in_tokens, s.in_features, L, D, cfg.res_blocks_per_stage, cfg.kernel_size),
                residual=cfg.use_adapter_in)
            self.adapter_out[task.value] = TaskAdapter(
                AdapterSpec(task, L, D, L, D, cfg.res_blocks_per_stage, cfg.kernel_size),
                residual=cfg.use_adapter_out)
            self.heads[task.value] = build_head(HeadSpec(
                task, s.output_shape, L, D, cfg.head_map_width, cfg.head_channels, cfg.kernel_size,
                cfg.head_layers))
        if cfg.use_backbone:
            self.backbone = Backbone(cfg.backbone_config())
            if cfg.use_lora:
                inject(self.backbone, cfg.n_experts, cfg.lora_rank, cfg.lora_alpha, len(TASKS))
        else:
            self.backbone = Identity()

    def forward(self, x, task):
        """``x`` is the raw task input ``[B, T, K, 2N]`` (real-stacked)."""
        return self.forward_tokens(self.embed(x, task), task)

    def embed(self, x, task):
        """Preprocessing and input adapter: ``[B, L, D]`` tokens."""
        task = as_task(task)
        return self.adapter_in[task.value](preprocess(task, x))

    def forward_tokens(self, h, task):
        """Everything after the input adapter."""
        task = as_task(task)
        h = self.adapter_out[task.value](self.backbone(h, task))
        return head_forward(self.heads[task.value], h)

    def pipeline(self, task) -> "TaskPipeline":
        return TaskPipeline(self, as_task(task))

    # -- parameter groups ------------------------------------------------
    def lora_parameters(self):
        return [p for m in self.modules() if isinstance(m, MoeLoraLinear) for p in m.lora_parameters()]

    def stage_parameters(self, stage: int, train_output_adapter: bool = False):
        heads = list(self.heads.parameters())
        if stage == 1:
            return list(self.adapter_in.parameters()) + list(self.adapter_out.parameters()) + heads
        if stage == 2:
            extra = list(self.adapter_out.parameters()) if train_output_adapter else []
            return self.lora_parameters() + extra + heads
        raise ConfigurationError(f"stage must be 1 or 2, got {stage}")

    def set_stage(self, stage: int, train_output_adapter: bool = False):
        """Mark exactly the stage's parameters trainable; the backbone base stays frozen."""
        for p in self.parameters():
            p.requires_grad_(False)
        params = self.stage_parameters(stage, train_output_adapter)
        for p in params:
            p.requires_grad_(True)
        return params


class TaskPipeline(nn.Module):
    """Callable view of the model for one task; ``backbone`` is the shared instance."""

    def __init__(self, model: MultiTaskModel, task: TaskId):
        super().__init__()
        self.task = task
        self.adapter_in = model.adapter_in[task.value]
        self.backbone = model.backbone
        self.adapter_out = model.adapter_out[task.value]
        self.head = model.heads[task.value]

    def forward(self, x):
        h = self.adapter_in(preprocess(self.task, x))
        h = self.adapter_out(self.backbone(h, self.task))
        return head_forward(self.head, h)


# ---------------------------------------------------------------------------
# Checkpoint naming
# ---------------------------------------------------------------------------

def _ckpt_name(key: str) -> str:
    parts = key.split(".")
    if parts[0] == "heads":
        return ".".join(["head"] + parts[1:])
    if parts[0] == "backbone" and "ffn" in parts and ("A" in parts or "B" in parts or parts[-1] == "gate"):
        # backbone.blocks.{b}.ffn.{fc}.{A|B}.{k} -> moe.{b}.{fc}.{A|B}.{k}
        return ".".join(["moe", parts[2]] + parts[4:])
    if parts[0] == "backbone":
        return key.replace(".base.", ".")
    return key


def checkpoint_tensors(model: MultiTaskModel) -> Dict[str, np.ndarray]:
    return {_ckpt_name(k): v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_checkpoint_tensors(model: MultiTaskModel, tensors: Dict[str, np.ndarray], strict: bool = True):
    state = model.state_dict()
    lookup = {_ckpt_name(k): k for k in state}
    missing = sorted(set(lookup) - set(tensors))
    if strict and missing:
        raise LoadError("checkpoint missing tensors: " + ", ".join(missing))
    new_state = {}
    for name, key in lookup.items():
        if name in tensors:
            arr = np.asarray(tensors[name])
            if tuple(arr.shape) != tuple(state[key].shape):
                raise LoadError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[key].shape)}")
            new_state[key] = torch.from_numpy(arr.copy()).to(state[key].dtype)
        else:
            new_state[key] = state[key]
    model.load_state_dict(new_state)
    return model


def is_scalar_task(task) -> bool:
    return as_task(task) in SCALAR_TASKS
