"""
Six channel-associated tasks built from dual-band CSI.

Complex channels are encoded as real arrays by stacking real and imaginary
parts along the last (antenna) axis, doubling it.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import storage
from .channel_sim import (CsiTensor, ScenarioConfig, add_awgn, derive_labels,
                          make_dual_band, sample_paths)
from .exceptions import ConfigurationError
from .signal_ops import Codebook, SeConfig, best_beam, dft_codebook, ls_estimate


class TaskId(str, Enum):
    CE = "CE"  # channel estimation
    CP = "CP"  # temporal channel prediction
    PF = "PF"  # frequency-domain channel prediction
    BF = "BF"  # sub-6G assisted mmWave beamforming
    DE = "DE"  # distance estimation
    PE = "PE"  # path loss estimation

    def __str__(self):
        return self.value

    @property
    def index(self) -> int:
        return TASKS.index(self)


TASKS: Tuple[TaskId, ...] = tuple(TaskId)
TASK_GROUPS = {
    "channel_reconstruction": (TaskId.CE, TaskId.CP, TaskId.PF),
    "beam_management": (TaskId.BF,),
    "radio_environment_mining": (TaskId.DE, TaskId.PE),
}
RECONSTRUCTION_TASKS = TASK_GROUPS["channel_reconstruction"]
SNAPSHOT_TASKS = (TaskId.BF, TaskId.DE, TaskId.PE)
SCALAR_TASKS = TASK_GROUPS["radio_environment_mining"]
SPLITS = ("train", "val", "test")

ArrayLike = Union[np.ndarray, CsiTensor]


def as_task(task) -> TaskId:
    try:
        return task if isinstance(task, TaskId) else TaskId(str(task))
    except ValueError:
        raise ConfigurationError(f"unknown task {task!r}") from None


def to_real(x: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts along the last axis."""
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag], axis=-1)


def to_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    half = x.shape[-1] // 2
    return x[..., :half] + 1j * x[..., half:]


def _data(H: ArrayLike) -> np.ndarray:
    return H.data if isinstance(H, CsiTensor) else np.asarray(H)


@dataclass(eq=False)
class TaskSample:
    task: TaskId
    input: np.ndarray
    label: Union[np.ndarray, int, float]
    index: int = -1
    aux: Optional[np.ndarray] = None


def build_ce(H: ArrayLike, observed: Optional[ArrayLike] = None, history: int = 16,
             comb_step: int = 4) -> TaskSample:
    """Comb-pilot channel estimation: every ``comb_step``-th subcarrier -> full grid."""
    H = _data(H)
    obs = H if observed is None else _data(observed)
    if H.shape[1] % comb_step:
        raise ConfigurationError(f"{H.shape[1]} subcarriers not divisible by comb step {comb_step}")
    return TaskSample(TaskId.CE, to_real(obs[:history, ::comb_step]), to_real(H[:history]))


def build_cp(H: ArrayLike, observed: Optional[ArrayLike] = None, history: int = 16,
             horizon: int = 4) -> TaskSample:
    """Temporal prediction: ``history`` past timestamps -> next ``horizon``."""
    H = _data(H)
    obs = H if observed is None else _data(observed)
    if H.shape[0] < history + horizon:
        raise ConfigurationError(
            f"need {history + horizon} timestamps for prediction, have {H.shape[0]}")
    return TaskSample(TaskId.CP, to_real(obs[:history]), to_real(H[history:history + horizon]))


def build_pf(H: ArrayLike, observed: Optional[ArrayLike] = None, history: int = 16) -> TaskSample:
    """Frequency prediction: lower half of the subcarriers -> disjoint upper half."""
    H = _data(H)
    obs = H if observed is None else _data(observed)
    K = H.shape[1]
    if K % 2:
        raise ConfigurationError(f"frequency prediction needs an even subcarrier count, got {K}")
    return TaskSample(TaskId.PF, to_real(obs[:history, :K // 2]), to_real(H[:history, K // 2:]))


def build_bf(H_sub6_snapshot: ArrayLike, H_mm: ArrayLike, cb: Codebook,
             cfg: SeConfig = SeConfig()) -> TaskSample:
    """Sub-6G snapshot -> index of the best mmWave codeword."""
    sub6 = _data(H_sub6_snapshot)
    mm = _data(H_mm)
    label, _ = best_beam(mm[0], cb, cfg)
    return TaskSample(TaskId.BF, to_real(sub6[:1]), label, aux=mm[:1])


@dataclass(frozen=True)
class MinMax:
    """Affine map of ``[lo, hi]`` onto ``[0, 1]``."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, values) -> "MinMax":
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            raise ConfigurationError("degenerate normalization range (max == min)")
        return cls(lo, hi)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo)

    def inverse(self, y):
        return np.asarray(y, dtype=float) * (self.hi - self.lo) + self.lo


def _scalar_sample(task, H_snapshot, value, scaler):
    label = float(value) if scaler is None else float(scaler.transform(value))
    return TaskSample(task, to_real(_data(H_snapshot)[:1]), label)


def build_de(H_snapshot: ArrayLike, x_d: float, scaler: Optional[MinMax] = None) -> TaskSample:
    return _scalar_sample(TaskId.DE, H_snapshot, x_d, scaler)


def build_pe(H_snapshot: ArrayLike, x_pl: float, scaler: Optional[MinMax] = None) -> TaskSample:
    return _scalar_sample(TaskId.PE, H_snapshot, x_pl, scaler)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Dataset-level settings.

    ``input_snr_db`` is the SNR of the uplink LS pilot estimates that form
    every task input (``None`` = noiseless inputs). Labels are always clean.
    """

    n_total: int = 2000
    split_fractions: Tuple[float, float, float] = (0.75, 0.08, 0.17)
    seed: int = 0
    input_snr_db: Optional[float] = 10.0
    history: int = 16
    horizon: int = 4
    comb_step: int = 4
    codebook_size: int = 256
    label_snr_db: float = 10.0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError("split fractions must be three values summing to 1")
        if self.n_total < 1:
            raise ConfigurationError("n_total must be positive")

    def split_counts(self) -> Dict[str, int]:
        n_train = int(round(self.split_fractions[0] * self.n_total))
        n_val = int(round(self.split_fractions[1] * self.n_total))
        return {"train": n_train, "val": n_val, "test": self.n_total - n_train - n_val}

    def split_ranges(self) -> Dict[str, range]:
        counts = self.split_counts()
        a, b = counts["train"], counts["train"] + counts["val"]
        return {"train": range(0, a), "val": range(a, b), "test": range(b, self.n_total)}


@dataclass(frozen=True)
class NormalizationStats:
    """Statistics fitted on the training split only.

    ``snapshot_scale`` divides the DE/PE inputs (which keep absolute power,
    since path loss is their signal); the other tasks are scaled per sample
    by the RMS of their own input.
    """

    snapshot_scale: float
    distance: MinMax
    path_loss: MinMax

    def to_dict(self) -> dict:
        return {"snapshot_scale": self.snapshot_scale,
                "distance": [self.distance.lo, self.distance.hi],
                "path_loss": [self.path_loss.lo, self.path_loss.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(float(d["snapshot_scale"]), MinMax(*d["distance"]), MinMax(*d["path_loss"]))

    def digest(self) -> str:
        return storage.content_hash(self.to_dict())


@dataclass(eq=False)
class TaskSplit:
    """Stacked arrays for one task on one split."""

    task: TaskId
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    aux: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    def samples(self) -> List[TaskSample]:
        out = []
        for i in range(len(self)):
            label = self.labels[i]
            label = label.item() if np.ndim(label) == 0 else label
            aux = None if self.aux is None else self.aux[i]
            out.append(TaskSample(self.task, self.inputs[i], label, int(self.indices[i]), aux))
        return out

    def subset(self, rows) -> "TaskSplit":
        rows = np.asarray(rows)
        aux = None if self.aux is None else self.aux[rows]
        return TaskSplit(self.task, self.inputs[rows], self.labels[rows], self.indices[rows], aux)


@dataclass(eq=False)
class DatasetBundle:
    splits: Dict[str, Dict[TaskId, TaskSplit]]
    stats: NormalizationStats
    manifest: dict

    def samples(self, split: str, task) -> List[TaskSample]:
        return self.splits[split][as_task(task)].samples()

    @property
    def manifest_hash(self) -> str:
        return storage.content_hash(self.manifest)

    def fraction(self, fraction: float, seed: int = 0) -> "DatasetBundle":
        """Copy whose training split keeps only ``fraction`` of the samples."""
        train = self.splits["train"]
        n = len(next(iter(train.values())))
        keep = max(1, int(round(fraction * n)))
        rows = np.sort(np.random.default_rng(seed).permutation(n)[:keep])
        splits = dict(self.splits)
        splits["train"] = {t: s.subset(rows) for t, s in train.items()}
        manifest = dict(self.manifest, train_fraction=fraction)
        return DatasetBundle(splits, self.stats, manifest)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _raw_sample(cfg: ScenarioConfig, dcfg: DatasetConfig, index: int) -> dict:
    rng = np.random.default_rng([dcfg.seed, index])
    paths = sample_paths(cfg, rng)
    sub6, mm = make_dual_band(paths, cfg)
    H = sub6.data
    # Uplink LS estimate from unit-modulus QPSK pilots.
    pilots = np.exp(1j * np.pi / 4 * (2 * rng.integers(0, 4, H.shape) + 1))
    observed = ls_estimate(add_awgn(H * pilots, dcfg.input_snr_db, rng), pilots)
    x_d, x_pl = derive_labels(paths)
    return {"H": H, "observed": observed, "mm": mm.data, "x_d": x_d, "x_pl": x_pl}


def _raw_chunk(args):
    cfg, dcfg, indices = args
    return [_raw_sample(cfg, dcfg, i) for i in indices]


def _generate_raw(cfg, dcfg) -> List[dict]:
    indices = list(range(dcfg.n_total))
    if dcfg.workers <= 1:
        return _raw_chunk((cfg, dcfg, indices))
    chunks = [indices[i::dcfg.workers] for i in range(dcfg.workers)]
    with ProcessPoolExecutor(dcfg.workers) as pool:
        parts = list(pool.map(_raw_chunk, [(cfg, dcfg, c) for c in chunks]))
    raw = [None] * dcfg.n_total
    for chunk, part in zip(chunks, parts):
        for i, r in zip(chunk, part):
            raw[i] = r
    return raw


def fit_stats(raw: Sequence[dict], train_rows: Sequence[int]) -> NormalizationStats:
    train = [raw[i] for i in train_rows]
    scale = float(np.sqrt(np.mean([np.mean(np.abs(r["observed"][0]) ** 2) for r in train])))
    return NormalizationStats(
        snapshot_scale=scale,
        distance=MinMax.fit([r["x_d"] for r in train]),
        path_loss=MinMax.fit([r["x_pl"] for r in train]),
    )


def _task_samples(r: dict, stats: NormalizationStats, dcfg: DatasetConfig,
                  cb: Codebook) -> Dict[TaskId, TaskSample]:
    H, obs = r["H"], r["observed"]
    out = {}
    for builder, region in (
        (lambda h, o: build_ce(h, o, dcfg.history, dcfg.comb_step), obs[:dcfg.history, ::dcfg.comb_step]),
        (lambda h, o: build_cp(h, o, dcfg.history, dcfg.horizon), obs[:dcfg.history]),
        (lambda h, o: build_pf(h, o, dcfg.history), obs[:dcfg.history, :H.shape[1] // 2]),
    ):
        s = _rms(region)
        sample = builder(H / s, obs / s)
        out[sample.task] = sample
    snapshot = obs[:1]
    mm = r["mm"] / _rms(r["mm"])
    out[TaskId.BF] = build_bf(snapshot / _rms(snapshot), mm, cb, SeConfig(dcfg.label_snr_db))
    global_snapshot = snapshot / stats.snapshot_scale
    out[TaskId.DE] = build_de(global_snapshot, r["x_d"], stats.distance)
    out[TaskId.PE] = build_pe(global_snapshot, r["x_pl"], stats.path_loss)
    return out


def generate_dataset(cfg: ScenarioConfig, dcfg: DatasetConfig = DatasetConfig()) -> DatasetBundle:
    """Draw ``n_total`` dual-band realizations and build all six tasks for each.

    Sample ``i`` uses the random stream seeded by ``(dcfg.seed, i)``;
    splits are contiguous index ranges, so no index is shared.
    """
    raw = _generate_raw(cfg, dcfg)
    ranges = dcfg.split_ranges()
    stats = fit_stats(raw, ranges["train"])
    cb = dft_codebook(cfg.mm_antennas, dcfg.codebook_size, cfg.antenna_spacing)

    splits: Dict[str, Dict[TaskId, TaskSplit]] = {}
    for split, rows in ranges.items():
        per_task: Dict[TaskId, list] = {t: [] for t in TASKS}
        for i in rows:
            for task, sample in _task_samples(raw[i], stats, dcfg, cb).items():
                sample.index = i
                per_task[task].append(sample)
        splits[split] = {t: _stack(t, per_task[t], rows) for t in TASKS}

    manifest = {
        "format_version": storage.FORMAT_VERSION,
        "scenario": dataclasses.asdict(cfg),
        "dataset": dataclasses.asdict(dcfg),
        "seed": dcfg.seed,
        "counts": dcfg.split_counts(),
        "normalization": stats.to_dict(),
        "normalization_hash": stats.digest(),
    }
    manifest["dataset"].pop("workers")
    manifest["config_hash"] = storage.content_hash({k: manifest[k] for k in ("scenario", "dataset")})
    return DatasetBundle(splits, stats, manifest)


def _stack(task: TaskId, samples: List[TaskSample], rows) -> TaskSplit:
    indices = np.asarray(list(rows), dtype=np.int64)
    if not samples:
        return TaskSplit(task, np.zeros((0,)), np.zeros((0,)), indices)
    inputs = np.stack([s.input for s in samples]).astype(np.float32)
    if task == TaskId.BF:
        labels = np.asarray([s.label for s in samples], dtype=np.int64)
        aux = np.stack([s.aux for s in samples]).astype(np.complex64)
        return TaskSplit(task, inputs, labels, indices, aux)
    if task in SCALAR_TASKS:
        labels = np.asarray([s.label for s in samples], dtype=np.float32)
    else:
        labels = np.stack([s.label for s in samples]).astype(np.float32)
    return TaskSplit(task, inputs, labels, indices)


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------

def save_dataset(bundle: DatasetBundle, out_dir) -> Path:
    """Write ``manifest.json`` plus one ``{split}/{task}.wm4d`` file per task and split.

    Each task file holds the records ``inputs, labels, indices`` and, for
    BF, the normalized mmWave channels.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, tasks in bundle.splits.items():
        for task, ts in tasks.items():
            rel = f"{split}/{task.value}.wm4d"
            arrays = [ts.inputs, ts.labels, ts.indices] + ([ts.aux] if ts.aux is not None else [])
            storage.save_tensors(out_dir / rel, arrays)
            files[rel] = len(ts)
    manifest = dict(bundle.manifest, files=files)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def load_dataset(data_dir) -> DatasetBundle:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    splits: Dict[str, Dict[TaskId, TaskSplit]] = {}
    for split in SPLITS:
        splits[split] = {}
        for task in TASKS:
            arrays = storage.load_tensors(data_dir / split / f"{task.value}.wm4d")
            aux = arrays[3] if len(arrays) > 3 else None
            splits[split][task] = TaskSplit(task, arrays[0], arrays[1], arrays[2], aux)
    manifest.pop("files", None)
    stats = NormalizationStats.from_dict(manifest["normalization"])
    return DatasetBundle(splits, stats, manifest)
