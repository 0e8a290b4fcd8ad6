import numpy as np
import pytest
import torch

from chanmoe.model import ModelConfig, MultiTaskModel, TaskShape
from chanmoe.tasks import TaskId

# Miniature task geometry: 4 timestamps, 8 subcarriers, 2 antennas.
TINY_SHAPES = {
    TaskId.CE: TaskShape((4, 2, 4), (4, 8, 4)),
    TaskId.CP: TaskShape((4, 8, 4), (2, 8, 4)),
    TaskId.PF: TaskShape((4, 4, 4), (4, 4, 4)),
    TaskId.BF: TaskShape((1, 8, 4), (16,)),
    TaskId.DE: TaskShape((1, 8, 4), (1,)),
    TaskId.PE: TaskShape((1, 8, 4), (1,)),
}

# (criterion, passed, detail) tuples filled by test_acceptance.py.
ACCEPTANCE = []

TINY_CFG = ModelConfig(model_dim=16, token_len=4, n_layers=1, n_heads=2, res_blocks_per_stage=1,
                       n_experts=2, lora_rank=2, head_map_width=4, head_channels=4)


def tiny_model(**overrides) -> MultiTaskModel:
    import dataclasses
    return MultiTaskModel(dataclasses.replace(TINY_CFG, **overrides), TINY_SHAPES)


def tiny_batch(task, n=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, *TINY_SHAPES[TaskId(task)].input_shape, generator=g, dtype=dtype)


def finite_difference(loss_fn, param: torch.Tensor, eps=1e-5, coords=None):
    """Central differences of ``loss_fn()`` w.r.t. selected entries of ``param``."""
    flat = param.data.view(-1)
    coords = range(flat.numel()) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i].item()
        flat[i] = old + eps
        up = loss_fn().item()
        flat[i] = old - eps
        down = loss_fn().item()
        flat[i] = old
        out.append((up - down) / (2 * eps))
    return np.array(out)


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def tiny_splits(n=12, seed=0):
    """Random data with the miniature geometry; labels depend smoothly on inputs."""
    from chanmoe.tasks import TaskSplit
    rng = np.random.default_rng(seed)
    out = {}
    for task, shape in TINY_SHAPES.items():
        x = rng.normal(size=(n, *shape.input_shape)).astype(np.float32)
        if task == TaskId.BF:
            y = (np.abs(x.reshape(n, -1)).argmax(axis=1) % shape.output_shape[0]).astype(np.int64)
        elif shape.output_shape == (1,):
            y = (1 / (1 + np.exp(-x.reshape(n, -1).mean(axis=1) * 4))).astype(np.float32)
        else:
            proj = rng.normal(size=(int(np.prod(shape.input_shape)), int(np.prod(shape.output_shape))))
            y = (x.reshape(n, -1) @ proj / 10).reshape(n, *shape.output_shape).astype(np.float32)
        out[task] = TaskSplit(task, x, y, np.arange(n))
    return out


@pytest.fixture(scope="session")
def desk200():
    from chanmoe.channel_sim import ScenarioConfig
    from chanmoe.tasks import DatasetConfig, generate_dataset
    return generate_dataset(ScenarioConfig(), DatasetConfig(n_total=200))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
