"""Simulate one dual-band user, look at its channel, then build a small task dataset.

Run: python3 demos/01_channel_and_tasks.py
"""

import numpy as np

from chanmoe.channel_sim import ScenarioConfig, derive_labels, make_dual_band, sample_paths
from chanmoe.evaluator import baseline_report
from chanmoe.signal_ops import best_beam, dft_codebook
from chanmoe.tasks import TASKS, DatasetConfig, generate_dataset

cfg = ScenarioConfig()
paths = sample_paths(cfg, rng=1)
sub6, mm = make_dual_band(paths, cfg)
x_d, x_pl = derive_labels(paths)
print(f"{paths.n_paths} paths, UE at {x_d:.1f} m, main-path loss {x_pl:.1f} dB")
print("sub-6G CSI", sub6.data.shape, " mmWave snapshot", mm.data.shape)

# Power per subcarrier shows the frequency selectivity the CE/PF tasks must learn.
power = np.mean(np.abs(sub6.data[0]) ** 2, axis=-1)
print("sub-6G power across subcarriers (first 8):", np.round(power[:8] / power.mean(), 2))

cb = dft_codebook(cfg.antennas("mm"), 256)
beam, se = best_beam(mm.data[0], cb)
print(f"best mmWave beam {beam} with {se / cfg.subcarriers:.2f} bit/s/Hz per subcarrier")

bundle = generate_dataset(cfg, DatasetConfig(n_total=120))
for task in TASKS:
    split = bundle.splits["train"][task]
    print(f"{task.value}: inputs {split.inputs.shape[1:]} -> labels {split.labels.shape[1:]}")

report = baseline_report(bundle.splits["test"], bundle.splits["train"])
for task, metrics in report.metrics.items():
    print(task.value, {k: round(v, 4) for k, v in metrics.items()})
print("baseline average metric:", round(report.avg, 3))
