"""Metrics, classical baselines, expert-weight analysis, ablations and efficiency numbers."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .exceptions import ConfigurationError, ShapeError
from .moe_lora import ExpertWeightRecord
from .signal_ops import (Codebook, SeConfig, codebook_baseline_bf, codebook_se, dft_codebook)
from .tasks import (RECONSTRUCTION_TASKS, TASKS, TaskId, TaskSplit, as_task, to_complex)

EPS = 1e-12

# Metric used for each task inside the average score.
PRIMARY_METRIC = {TaskId.CE: "nmse", TaskId.CP: "nmse", TaskId.PF: "nmse",
                  TaskId.BF: "top1", TaskId.DE: "mae", TaskId.PE: "nmse"}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def nmse(pred, truth, per_sample: bool = True) -> float:
    """``||pred - truth||^2 / ||truth||^2``.

    Arrays with a leading batch axis are scored per sample and averaged
    (``per_sample=True``); otherwise the ratio of totals is returned.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    err = np.abs(pred - truth) ** 2
    ref = np.abs(truth) ** 2
    if per_sample and pred.ndim > 1:
        axes = tuple(range(1, pred.ndim))
        return float(np.mean(err.sum(axis=axes) / (ref.sum(axis=axes) + EPS)))
    return float(err.sum() / (ref.sum() + EPS))


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def top1(logits, labels) -> float:
    logits, labels = np.asarray(logits), np.asarray(labels)
    pred = logits if logits.ndim == labels.ndim else np.argmax(logits, axis=-1)
    return float(np.mean(pred == labels))


def avg_metric(metrics: Mapping) -> float:
    """Mean of the six task scores, with BF entering as ``1 - accuracy``.

    ``metrics`` maps task -> ``{metric name: value}`` or task -> value of the
    task's primary metric.
    """
    terms = []
    for task in TASKS:
        entry = metrics.get(task, metrics.get(task.value)) if isinstance(metrics, Mapping) else None
        if entry is None:
            raise ConfigurationError(f"missing metric for task {task.value}")
        value = entry[PRIMARY_METRIC[task]] if isinstance(entry, Mapping) else float(entry)
        terms.append(1.0 - value if task == TaskId.BF else value)
    return float(np.mean(terms))


def _mean_se_reconstruction(pred: np.ndarray, truth: np.ndarray, cfg: SeConfig) -> np.ndarray:
    """Per-sample SE per subcarrier when beamforming with the estimate's matched filter."""
    norm = np.linalg.norm(pred, axis=-1, keepdims=True)
    w = np.divide(pred, norm, out=np.zeros_like(pred), where=norm > 0)
    gains = np.abs(np.sum(truth.conj() * w, axis=-1)) ** 2
    se = np.log2(1.0 + gains / cfg.noise_power)
    return se.reshape(se.shape[0], -1).mean(axis=1)


def _perfect_se_reconstruction(truth: np.ndarray, cfg: SeConfig) -> np.ndarray:
    gains = np.sum(np.abs(truth) ** 2, axis=-1)
    se = np.log2(1.0 + gains / cfg.noise_power)
    return se.reshape(se.shape[0], -1).mean(axis=1)


def se_eval(task, pred, truth, cfg: SeConfig = SeConfig(), codebook: Optional[Codebook] = None,
            per_sample: bool = False):
    """Spectral efficiency achieved by a prediction, averaged over subcarriers.

    CE/CP/PF: ``pred``/``truth`` are complex channels ``[n, ..., N]`` and the
    beam is the matched filter of the prediction. BF: ``pred`` holds beam
    indices ``[n]``, ``truth`` the mmWave channels ``[n, K, N]``.
    Returns ``(mean SE, mean SE with perfect knowledge)``.
    """
    task = as_task(task)
    if task in RECONSTRUCTION_TASKS:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
        got, best = _mean_se_reconstruction(pred, truth, cfg), _perfect_se_reconstruction(truth, cfg)
    elif task == TaskId.BF:
        if codebook is None:
            raise ConfigurationError("BF spectral efficiency needs the codebook")
        truth = np.asarray(truth).reshape(len(pred), -1, codebook.n_antennas)
        K = truth.shape[1]
        all_se = np.stack([codebook_se(h, codebook, cfg) for h in truth]) / K
        got = all_se[np.arange(len(pred)), np.asarray(pred, dtype=int)]
        best = all_se.max(axis=1)
    else:
        raise ConfigurationError(f"spectral efficiency is not defined for {task.value}")
    if per_sample:
        return got, best
    return float(np.mean(got)), float(np.mean(best))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    metrics: Dict[TaskId, Dict[str, float]]
    metadata: dict = field(default_factory=dict)

    @property
    def avg(self) -> float:
        return avg_metric(self.metrics)

    def rows(self) -> List[List[str]]:
        rows = []
        for task in TASKS:
            for name, value in sorted(self.metrics.get(task, {}).items()):
                rows.append([self.method, task.value, name, f"{value:.10g}"])
        if all(t in self.metrics for t in TASKS):
            rows.append([self.method, "ALL", "avg", f"{self.avg:.10g}"])
        return rows


def write_report(reports: Sequence[MetricReport], path, metadata: Optional[dict] = None) -> Path:
    """TSV with a schema line, a metadata line and ``method, task, metric, value`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# schema: metrics v1\n")
        for k, v in sorted((metadata or {}).items()):
            fh.write(f"# {k}: {v}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["method", "task", "metric", "value"])
        for report in reports:
            writer.writerows(report.rows())
    return path


def read_report(path) -> Dict[str, Dict[str, Dict[str, float]]]:
    out: Dict[str, Dict[str, Dict[str, float]]] = {}
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows, delimiter="\t")
    next(reader)
    for method, task, metric, value in reader:
        out.setdefault(method, {}).setdefault(task, {})[metric] = float(value)
    return out


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def predict(model, task, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    task = as_task(task)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = torch.as_tensor(inputs[i:i + batch_size], dtype=dtype)
            outs.append(model(x, task).cpu().numpy())
    model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0,))


def score_task(task, pred: np.ndarray, split: TaskSplit, se_cfg: Optional[SeConfig] = None,
               codebook: Optional[Codebook] = None) -> Dict[str, float]:
    """Metrics for one task given raw predictions (logits for BF)."""
    task = as_task(task)
    out: Dict[str, float] = {}
    if task in RECONSTRUCTION_TASKS:
        out["nmse"] = nmse(pred, split.labels)
        if se_cfg is not None:
            out["se"], out["se_max"] = se_eval(task, to_complex(pred), to_complex(split.labels), se_cfg)
    elif task == TaskId.BF:
        beams = pred if pred.ndim == 1 else np.argmax(pred, axis=-1)
        out["top1"] = top1(beams, split.labels)
        if se_cfg is not None and split.aux is not None:
            cb = codebook or dft_codebook(split.aux.shape[-1], pred.shape[-1] if pred.ndim > 1 else 256)
            out["se"], out["se_max"] = se_eval(task, beams, split.aux, se_cfg, cb)
    elif task == TaskId.DE:
        out["mae"] = mae(pred, split.labels)
    else:
        out["nmse"] = nmse(pred, split.labels, per_sample=False)
        out["mae"] = mae(pred, split.labels)
    return out


def evaluate(model, splits: Mapping[TaskId, TaskSplit], se_cfg: Optional[SeConfig] = SeConfig(),
             batch_size: int = 256, method: str = "model",
             tasks: Sequence[TaskId] = TASKS) -> MetricReport:
    metrics = {}
    for task in tasks:
        split = splits[task]
        metrics[task] = score_task(task, predict(model, task, split.inputs, batch_size), split, se_cfg)
    return MetricReport(method, metrics)


# ---------------------------------------------------------------------------
# Classical baselines
# ---------------------------------------------------------------------------

def interpolate_comb(pilots: np.ndarray, n_sub: int, comb_step: int, axis: int = -2) -> np.ndarray:
    """Linear interpolation over a comb of pilots at ``0, step, 2*step, ...``.

    Subcarriers past the last pilot hold its value. Works on complex or
    real-stacked arrays (the operation is linear and acts per entry).
    """
    x = np.moveaxis(np.asarray(pilots), axis, -1)
    pos = np.arange(x.shape[-1]) * comb_step
    k = np.arange(n_sub)
    j = np.clip(np.searchsorted(pos, k, side="right") - 1, 0, len(pos) - 1)
    j1 = np.minimum(j + 1, len(pos) - 1)
    frac = np.where(j1 > j, (k - pos[j]) / comb_step, 0.0)
    out = x[..., j] * (1 - frac) + x[..., j1] * frac
    return np.moveaxis(out, -1, axis)


def baseline_bi(task, inputs: np.ndarray, horizon: int = 4, comb_step: int = 4,
                n_sub: Optional[int] = None) -> np.ndarray:
    """Classical interpolation/extrapolation predictors on ``[n, T, K, 2N]`` inputs.

    CE: linear interpolation across the pilot comb. CP: linear extrapolation
    from the last two timestamps. PF: the highest observed subcarrier
    repeated over the predicted band.
    """
    task = as_task(task)
    x = np.asarray(inputs)
    if task == TaskId.CE:
        return interpolate_comb(x, n_sub or x.shape[-2] * comb_step, comb_step, axis=-2)
    if task == TaskId.CP:
        last, prev = x[..., -1:, :, :], x[..., -2:-1, :, :]
        steps = np.arange(1, horizon + 1).reshape(-1, 1, 1)
        return last + steps * (last - prev)
    if task == TaskId.PF:
        return np.repeat(x[..., -1:, :], n_sub or x.shape[-2], axis=-2)
    raise ConfigurationError(f"no interpolation baseline for {task.value}")


def baseline_codebook(inputs: np.ndarray, n_beams: int = 256, mm_antennas: int = 64,
                      d_v: float = 0.5, se_cfg: SeConfig = SeConfig()) -> np.ndarray:
    """Sub-6G beam sweep mapped onto the mmWave grid, for ``[n, 1, K, 2N]`` inputs."""
    H = to_complex(np.asarray(inputs))
    cb_sub = dft_codebook(H.shape[-1], n_beams, d_v)
    cb_mm = dft_codebook(mm_antennas, n_beams, d_v)
    return np.asarray([codebook_baseline_bf(h[0], cb_sub, cb_mm, se_cfg) for h in H], dtype=np.int64)


def baseline_report(splits: Mapping[TaskId, TaskSplit], train: Mapping[TaskId, TaskSplit],
                    horizon: int = 4, comb_step: int = 4, se_cfg: Optional[SeConfig] = SeConfig()
                    ) -> MetricReport:
    """Interpolation baselines for CE/CP/PF, codebook sweep for BF, training mean for DE/PE."""
    metrics = {}
    for task in RECONSTRUCTION_TASKS:
        s = splits[task]
        pred = baseline_bi(task, s.inputs, horizon, comb_step, n_sub=s.labels.shape[-2])
        metrics[task] = score_task(task, pred, s, se_cfg)
    bf = splits[TaskId.BF]
    mm_antennas = bf.aux.shape[-1] if bf.aux is not None else 64
    beams = baseline_codebook(bf.inputs, mm_antennas=mm_antennas)
    metrics[TaskId.BF] = score_task(TaskId.BF, beams, bf, se_cfg,
                                    dft_codebook(mm_antennas, 256) if bf.aux is not None else None)
    for task in (TaskId.DE, TaskId.PE):
        mean = float(np.mean(train[task].labels))
        metrics[task] = score_task(task, np.full(len(splits[task]), mean), splits[task])
    return MetricReport("baseline", metrics)


def ls_report(splits: Mapping[TaskId, TaskSplit], comb_step: int = 4) -> Dict[str, float]:
    """Error of the raw pilot LS estimates against the true channel at the pilot positions."""
    ce = splits[TaskId.CE]
    truth = ce.labels[..., ::comb_step, :]
    return {"nmse": nmse(ce.inputs, truth)}


# ---------------------------------------------------------------------------
# Expert analysis
# ---------------------------------------------------------------------------

def pearson_matrix(records: Sequence[ExpertWeightRecord], layer: str) -> np.ndarray:
    """6 x 6 Pearson correlation of the tasks' expert-weight vectors in one layer.

    A task whose weight vector has zero variance gets NaN off-diagonal
    entries (correlation undefined); the diagonal is always 1.
    """
    by_task = {r.task: np.asarray(r.omega, dtype=float) for r in records if r.layer == layer}
    if set(by_task) != set(TASKS):
        raise ConfigurationError(f"layer {layer!r} lacks weights for some tasks")
    W = np.stack([by_task[t] for t in TASKS])
    C = W - W.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(C, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        R = (C @ C.T) / np.outer(norms, norms)
    R[norms == 0, :] = np.nan
    R[:, norms == 0] = np.nan
    R = np.clip(R, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return (R + R.T) / 2


def write_matrix(matrix: np.ndarray, path, labels: Sequence[str] = tuple(t.value for t in TASKS),
                 schema: str = "pearson v1") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow([""] + list(labels))
        for name, row in zip(labels, matrix):
            writer.writerow([name] + [f"{v:.6f}" for v in row])
    return path


# ---------------------------------------------------------------------------
# Ablation table and efficiency
# ---------------------------------------------------------------------------

def loss_increase_ratio(variant_avg: float, full_avg: float) -> float:
    return (variant_avg - full_avg) / full_avg


def ablation_table(results: Mapping[str, MetricReport]) -> List[dict]:
    full = results["full"].avg
    rows = []
    for name, report in results.items():
        row = {"variant": name, "avg": report.avg,
               "increase_ratio": loss_increase_ratio(report.avg, full)}
        for task in TASKS:
            row[task.value] = report.metrics[task][PRIMARY_METRIC[task]]
        rows.append(row)
    return rows


def write_ablation_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["variant"] + [t.value for t in TASKS] + ["avg", "increase_ratio"]
    with open(path, "w", newline="") as fh:
        fh.write("# schema: ablation v1\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["variant"]] + [f"{r[c]:.6g}" for c in cols[1:]])
    return path


def parameter_breakdown(model) -> Dict[str, int]:
    """Parameter counts enumerated from the model's tensors."""
    def count(params):
        return int(sum(p.numel() for p in params))
    lora = count(model.lora_parameters())
    backbone_total = count(model.backbone.parameters())
    return {
        "adapter_in": count(model.adapter_in.parameters()),
        "adapter_out": count(model.adapter_out.parameters()),
        "heads": count(model.heads.parameters()),
        "moe_lora": lora,
        "backbone_frozen": backbone_total - lora,
        "total": count(model.parameters()),
        "trainable_stage1": count(model.stage_parameters(1)),
        "trainable_stage2": count(model.stage_parameters(2)),
    }


def efficiency_report(model, splits: Mapping[TaskId, TaskSplit], batch_size: int = 64,
                      repeats: int = 10, warmup: int = 2) -> Dict[str, float]:
    """Parameter counts plus median per-task inference time over ``repeats`` runs.

    Timings are wall-clock on the current device and thread settings.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    report: Dict[str, float] = dict(parameter_breakdown(model))
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for task in TASKS:
            x = torch.as_tensor(splits[task].inputs[:batch_size], dtype=dtype)
            for _ in range(warmup):
                model(x, task)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model(x, task)
                times.append(time.perf_counter() - t0)
            report[f"infer_ms_{task.value}"] = 1e3 * float(np.median(times))
            report[f"infer_batch_{task.value}"] = int(x.shape[0])
    report["timing_repeats"] = repeats
    return report
