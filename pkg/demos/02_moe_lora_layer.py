"""A single MoE-LoRA layer: zero-init behaviour, task gates and merged weights.

Run: python3 demos/02_moe_lora_layer.py
"""

import torch
import torch.nn as nn

from chanmoe.moe_lora import MoeLoraLinear, merge_for_task, moe_parameter_formula
from chanmoe.tasks import TASKS

torch.manual_seed(0)
base = nn.Linear(32, 64)
layer = MoeLoraLinear(base, n_experts=4, rank=2)
x = torch.randn(5, 32)

# B starts at zero, so the wrapped layer is exactly the frozen one.
print("max |layer - base| at init:", (layer(x, "CE") - base(x)).abs().max().item())

with torch.no_grad():
    for B in layer.B:
        B.normal_(0, 0.1)
    layer.gate.normal_(0, 2.0)

for task in TASKS:
    w = layer.gate_weights(task).detach()
    print(f"{task.value} expert weights {[round(v, 3) for v in w.tolist()]}")

merged = base.weight + merge_for_task(layer, "BF")
ok = torch.allclose(x @ merged.T + base.bias, layer(x, "BF"), atol=1e-6)
print("W0 + merged BF update matches the factored forward:", ok)

trainable = sum(p.numel() for p in layer.parameters() if p.requires_grad)
print("trainable", trainable, "formula", moe_parameter_formula([(32, 64)], 4, 2), "frozen",
      sum(p.numel() for p in base.parameters()))
