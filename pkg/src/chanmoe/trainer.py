"""Two-stage multi-task training with dynamic weight averaging."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import storage
from .evaluator import evaluate
from .exceptions import ConfigurationError, LoadError, TrainingError
from .model import MultiTaskModel, checkpoint_tensors, load_checkpoint_tensors
from .tasks import RECONSTRUCTION_TASKS, TASKS, TaskId, TaskSplit, as_task

EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 6
    cosine_period: Optional[int] = None  # None: epochs - warmup_epochs
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    dwa_temperature: float = 2.0
    seed: int = 0
    train_output_adapter_stage2: bool = False
    eval_batch_size: int = 256
    threads: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigurationError("need 0 < lr_min < lr_max")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < epochs")
        if self.period < 1:
            raise ConfigurationError("cosine period must be >= 1")
        if self.dwa_temperature <= 0:
            raise ConfigurationError("DWA temperature must be positive")

    @property
    def period(self) -> int:
        if self.cosine_period is not None:
            return self.cosine_period
        return max(1, self.epochs - self.warmup_epochs)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Linear ramp ``lr_min -> lr_max`` over the warmup, then cosine decay to ``lr_min``.

    The cosine half-period is ``cfg.period`` epochs; later epochs stay at ``lr_min``.
    """
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * epoch / cfg.warmup_epochs
    e = min(epoch - cfg.warmup_epochs, cfg.period)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * e / cfg.period))


def dwa_weights(history: Sequence[Sequence[float]], temperature: float = 2.0) -> np.ndarray:
    """Dynamic weight averaging from the per-task mean losses of past epochs.

    ``w_n = N * softmax(r / T)`` with ``r_n = L_n(e-1) / L_n(e-2)``. Uniform
    weights are returned until two epochs exist, or when any of the last
    two losses is non-positive or non-finite.
    """
    if temperature <= 0:
        raise ConfigurationError("DWA temperature must be positive")
    if len(history) < 2:
        n = len(history[-1]) if history else len(TASKS)
        return np.ones(n)
    prev2 = np.asarray(history[-2], dtype=float)
    prev1 = np.asarray(history[-1], dtype=float)
    if not (np.all(np.isfinite(prev1)) and np.all(np.isfinite(prev2))
            and np.all(prev1 > 0) and np.all(prev2 > 0)):
        return np.ones(len(prev1))
    r = prev1 / prev2 / temperature
    e = np.exp(r - r.max())
    return len(r) * e / e.sum()


def task_loss(task, pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Cross-entropy for BF, per-sample NMSE for channel maps, batch NMSE for scalars."""
    task = as_task(task)
    if task == TaskId.BF:
        return F.cross_entropy(pred, label)
    if task in RECONSTRUCTION_TASKS:
        dims = tuple(range(1, pred.dim()))
        err = ((pred - label) ** 2).sum(dim=dims)
        ref = (label ** 2).sum(dim=dims)
        return (err / (ref + EPS)).mean()
    return ((pred - label) ** 2).sum() / ((label ** 2).sum() + EPS)


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: dict

    def save(self, path) -> Path:
        storage.save_named(path, self.tensors, self.metadata)
        return Path(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            tensors, meta = storage.load_named(path)
        except (OSError, KeyError, ValueError) as exc:
            raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls(tensors, meta)


@dataclass
class EpochLog:
    stage: int
    epoch: int
    lr: float
    losses: Dict[str, float]
    weights: Dict[str, float]
    val_avg: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _tensor(x: np.ndarray, dtype) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(x))
    return t if t.dtype == torch.int64 else t.to(dtype)


def _val_avg(model, val, cfg: TrainConfig, tasks) -> float:
    report = evaluate(model, val, se_cfg=None, batch_size=cfg.eval_batch_size, tasks=tasks)
    if len(tasks) == len(TASKS):
        return report.avg
    return float(np.mean([1 - m["top1"] if "top1" in m else next(iter(m.values()))
                          for m in report.metrics.values()]))


def train_stage(model: MultiTaskModel, train: Mapping[TaskId, TaskSplit], val: Mapping[TaskId, TaskSplit],
                cfg: TrainConfig, stage: int, log: Optional[Callable[[EpochLog], None]] = None,
                tasks: Sequence[TaskId] = TASKS) -> Tuple[MultiTaskModel, List[EpochLog]]:
    """Train one stage in place and restore the epoch with the best validation average.

    For stage 2 the starting weights compete too and are logged as epoch -1.

    Each optimizer step sums the DWA-weighted losses of one mini-batch from
    every task; an epoch ends once the largest task's training set is
    exhausted (smaller sets wrap around).
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed + 1000 * stage)
    rng = np.random.default_rng([cfg.seed, stage])
    params = model.set_stage(stage, cfg.train_output_adapter_stage2)
    if not params:
        raise ConfigurationError(f"stage {stage} has no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr_max, betas=cfg.betas, fused=True)
    dtype = next(model.parameters()).dtype
    tasks = [as_task(t) for t in tasks]
    data = {t: (_tensor(train[t].inputs, dtype), _tensor(train[t].labels, dtype)) for t in tasks}
    # A frozen input adapter is deterministic, so its outputs are computed once.
    cached = not any(p.requires_grad for p in model.adapter_in.parameters())
    if cached:
        model.eval()
        with torch.no_grad():
            data = {t: (torch.cat([model.embed(x[i:i + cfg.eval_batch_size], t)
                                   for i in range(0, len(x), cfg.eval_batch_size)]), y)
                    for t, (x, y) in data.items()}
    forward = model.forward_tokens if cached else model.forward
    n_rounds = max(math.ceil(len(train[t]) / cfg.batch_size) for t in tasks)

    history: List[List[float]] = []
    logs: List[EpochLog] = []
    best_avg, best_state = math.inf, None
    if stage > 1:
        # A later stage starts from trained weights; keep them unless an epoch beats them.
        best_avg = _val_avg(model, val, cfg, tasks)
        best_state = copy.deepcopy(model.state_dict())
        logs.append(EpochLog(stage, -1, 0.0, {}, {}, best_avg, 0.0))
        if log is not None:
            log(logs[-1])
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        w = dwa_weights(history, cfg.dwa_temperature) if history else np.ones(len(tasks))
        order = {t: _batches(len(train[t]), cfg.batch_size, rng) for t in tasks}
        sums = np.zeros(len(tasks))
        counts = np.zeros(len(tasks))
        model.train()
        for r in range(n_rounds):
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for i, task in enumerate(tasks):
                rows = order[task][r % len(order[task])]
                x, y = data[task]
                loss = task_loss(task, forward(x[rows], task), y[rows])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss for task {task.value} at stage {stage}, "
                                        f"epoch {epoch}, batch {r}")
                total = total + float(w[i]) * loss
                sums[i] += loss.item()
                counts[i] += 1
            total.backward()
            opt.step()
        mean_losses = sums / counts
        history.append(list(mean_losses))

        val_avg = _val_avg(model, val, cfg, tasks)
        entry = EpochLog(stage, epoch, lr, {t.value: float(l) for t, l in zip(tasks, mean_losses)},
                         {t.value: float(x) for t, x in zip(tasks, w)}, float(val_avg),
                         time.perf_counter() - t0)
        logs.append(entry)
        if log is not None:
            log(entry)
        if val_avg < best_avg:
            best_avg = val_avg
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, logs


def make_checkpoint(model: MultiTaskModel, stage: int, logs: Sequence[EpochLog], extra: Optional[dict] = None
                    ) -> Checkpoint:
    best = min(logs, key=lambda e: e.val_avg) if logs else None
    meta = {
        "kind": "multitask-checkpoint",
        "stage": stage,
        "model_config": dataclasses.asdict(model.cfg),
        "best_epoch": None if best is None else best.epoch,
        "best_val_avg": None if best is None else best.val_avg,
    }
    meta.update(extra or {})
    return Checkpoint(checkpoint_tensors(model), meta)


def train_two_stage(model: MultiTaskModel, train: Mapping[TaskId, TaskSplit], val: Mapping[TaskId, TaskSplit],
                    cfg: TrainConfig, stages: Sequence[int] = (1, 2),
                    log: Optional[Callable[[EpochLog], None]] = None) -> Tuple[MultiTaskModel, List[EpochLog]]:
    logs: List[EpochLog] = []
    # Without MoE-LoRA layers, stage 2 reduces to fine-tuning the heads.
    for stage in stages:
        _, stage_logs = train_stage(model, train, val, cfg, stage, log)
        logs.extend(stage_logs)
    return model, logs


def restore(model: MultiTaskModel, ckpt: Checkpoint) -> MultiTaskModel:
    return load_checkpoint_tensors(model, ckpt.tensors)


def jsonl_logger(fh: TextIO) -> Callable[[EpochLog], None]:
    def _log(entry: EpochLog):
        fh.write(entry.to_json() + "\n")
        fh.flush()
    return _log
