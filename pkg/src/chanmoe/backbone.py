"""Frozen pre-norm transformer backbone and its weight archive."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import storage
from .exceptions import ConfigurationError, LoadError, ShapeError
from .moe_lora import MoeLoraLinear, call_linear


@dataclass(frozen=True)
class BackboneConfig:
    model_dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_tokens: int = 16
    causal: bool = False
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)
        shape = (B, L, self.n_heads, D // self.n_heads)
        q, k, v = (t.reshape(shape).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        return self.proj(y.transpose(1, 2).reshape(B, L, D))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc_in = nn.Linear(dim, hidden)
        self.fc_out = nn.Linear(hidden, dim)

    def forward(self, x, task=None):
        return call_linear(self.fc_out, F.gelu(call_linear(self.fc_in, x, task)), task)


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_dim)
        self.attn = SelfAttention(cfg.model_dim, cfg.n_heads, cfg.causal)
        self.ln2 = nn.LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_mult * cfg.model_dim)

    def forward(self, x, task=None):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x), task)


class Backbone(nn.Module):
    """GPT-2 style stack applied to pre-embedded token features ``[B, L, D]``.

    All base weights are frozen after construction. Positional embeddings
    are learned vectors added to the incoming tokens.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.pos = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.model_dim))
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self._init(cfg)
        self.freeze()

    def _init(self, cfg: BackboneConfig):
        g = torch.Generator().manual_seed(cfg.seed)
        proj_std = cfg.init_std / math.sqrt(2 * cfg.n_layers)
        with torch.no_grad():
            self.pos.normal_(0.0, cfg.init_std, generator=g)
            for name, m in self.named_modules():
                if isinstance(m, nn.Linear):
                    std = proj_std if name.endswith(("proj", "fc_out")) else cfg.init_std
                    m.weight.normal_(0.0, std, generator=g)
                    m.bias.zero_()

    def freeze(self):
        for name, p in self.named_parameters():
            if not _is_lora_name(name):
                p.requires_grad_(False)
        return self

    def forward(self, x, task=None):
        if x.dim() != 3 or x.shape[-1] != self.cfg.model_dim or x.shape[1] > self.cfg.max_tokens:
            raise ShapeError(f"backbone expects [B, <= {self.cfg.max_tokens}, {self.cfg.model_dim}], "
                             f"got {tuple(x.shape)}")
        x = x + self.pos[: x.shape[1]]
        for block in self.blocks:
            x = block(x, task)
        return self.ln_f(x)

    def attention_maps(self, x) -> List[torch.Tensor]:
        """Per-block attention probabilities ``[B, heads, L, L]`` (no LoRA effect)."""
        maps = []
        x = x + self.pos[: x.shape[1]]
        for block in self.blocks:
            h = block.ln1(x)
            B, L, D = h.shape
            q, k, _ = block.attn.qkv(h).split(D, dim=-1)
            nh = block.attn.n_heads
            q = q.reshape(B, L, nh, -1).transpose(1, 2)
            k = k.reshape(B, L, nh, -1).transpose(1, 2)
            s = q @ k.transpose(-1, -2) / math.sqrt(D // nh)
            if block.attn.causal:
                s = s.masked_fill(torch.ones(L, L, dtype=torch.bool).triu(1), float("-inf"))
            maps.append(torch.softmax(s, dim=-1))
            x = block(x)
        return maps


def _is_lora_name(name: str) -> bool:
    parts = name.split(".")
    return "A" in parts or "B" in parts or parts[-1] == "gate"


def base_state(backbone: Backbone) -> Dict[str, torch.Tensor]:
    """Frozen base weights under their un-wrapped names (``...fc_in.weight``)."""
    out = {}
    for name, t in backbone.state_dict().items():
        if _is_lora_name(name):
            continue
        out[name.replace(".base.", ".")] = t
    return out


def save_pretrained(backbone: Backbone, path) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in base_state(backbone).items()}
    meta = {"kind": "backbone", "config": backbone.cfg.__dict__}
    storage.save_named(path, tensors, meta)


def load_pretrained(cfg: BackboneConfig, path) -> Tuple[Backbone, List[str]]:
    """Build a backbone and fill it from an archive.

    Archive blocks beyond ``cfg.n_layers`` are skipped (only the first
    layers are deployed); each skipped name is reported in the returned
    warning list. Missing names or mismatched shapes raise
    :class:`LoadError` listing every offender.
    """
    tensors, _ = storage.load_named(path)
    backbone = Backbone(cfg)
    expected = base_state(backbone)
    missing = sorted(set(expected) - set(tensors))
    bad_shape = sorted(f"{k}: archive {list(tensors[k].shape)} vs model {list(expected[k].shape)}"
                       for k in expected if k in tensors and tuple(tensors[k].shape) != tuple(expected[k].shape))
    if missing or bad_shape:
        raise LoadError("pretrained archive incompatible; missing: " + ", ".join(missing)
                        + ("; shape mismatch: " + ", ".join(bad_shape) if bad_shape else ""))
    warnings = [f"unused archive tensor {k}" for k in sorted(set(tensors) - set(expected))]
    with torch.no_grad():
        for k, t in expected.items():
            t.copy_(torch.from_numpy(np.asarray(tensors[k])).to(t.dtype))
    backbone.freeze()
    return backbone, warnings


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def has_moe(backbone: nn.Module) -> bool:
    return any(isinstance(m, MoeLoraLinear) for m in backbone.modules())
