"""Two-stage training on a small dataset, compared against the classical baselines.

Stage 1 fits adapters and heads around the frozen backbone; stage 2 tunes
only the MoE-LoRA experts and heads. Defaults finish in a few minutes on one
core; raise --samples/--epochs for the full desk run.

Run: python3 demos/03_two_stage_training.py --samples 400 --epochs 4
"""

import argparse

import numpy as np

from chanmoe.channel_sim import ScenarioConfig
from chanmoe.evaluator import baseline_report, evaluate, parameter_breakdown, pearson_matrix
from chanmoe.model import ModelConfig, MultiTaskModel, task_shapes
from chanmoe.moe_lora import export_expert_weights, moe_layers
from chanmoe.tasks import TASKS, DatasetConfig, generate_dataset
from chanmoe.trainer import TrainConfig, train_two_stage

parser = argparse.ArgumentParser()
parser.add_argument("--samples", type=int, default=400)
parser.add_argument("--epochs", type=int, default=4)
args = parser.parse_args()

scenario, dcfg = ScenarioConfig(), DatasetConfig(n_total=args.samples)
bundle = generate_dataset(scenario, dcfg)
model = MultiTaskModel(ModelConfig(), task_shapes(scenario, dcfg))
print({k: v for k, v in parameter_breakdown(model).items() if k.startswith(("trainable", "total"))})


def show(entry):
    losses = " ".join(f"{k}={v:.3f}" for k, v in entry.losses.items())
    print(f"stage {entry.stage} epoch {entry.epoch:2d} val avg {entry.val_avg:.4f} {losses}")


cfg = TrainConfig(epochs=args.epochs, warmup_epochs=max(1, args.epochs // 5), threads=1)
train_two_stage(model, bundle.splits["train"], bundle.splits["val"], cfg, log=show)

test, train = bundle.splits["test"], bundle.splits["train"]
ours, base = evaluate(model, test), baseline_report(test, train)
print(f"{'task':5s}{'model':>10s}{'baseline':>10s}")
for task in TASKS:
    key = {"BF": "top1", "DE": "mae"}.get(task.value, "nmse")
    print(f"{task.value:5s}{ours.metrics[task][key]:10.4f}{base.metrics[task][key]:10.4f}  ({key})")
print(f"average metric: model {ours.avg:.4f}, baseline {base.avg:.4f}")

records = export_expert_weights(model)
name = moe_layers(model)[0][0]
print(f"task correlation of expert weights in layer {name}:")
print(np.round(pearson_matrix(records, name), 2))
