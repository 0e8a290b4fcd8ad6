"""Command-line entry point.

Every verb writes into a run directory (or dataset directory) and embeds
the configuration hash and root seed in what it writes. Failures print a
single JSON error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import storage
from .config import RunConfig, apply_overrides, load_config, save_config
from .evaluator import (PRIMARY_METRIC, MetricReport, ablation_table, baseline_report, efficiency_report, evaluate,
                        ls_report, pearson_matrix, read_report, write_ablation_table, write_matrix,
                        write_report)
from .exceptions import (ConfigurationError, DomainError, LoadError, ShapeError, StatsMismatchError,
                         TrainingError)
from .model import ABLATIONS, MultiTaskModel, ablation_config, task_shapes
from .moe_lora import export_expert_weights, moe_layers, write_expert_table
from .tasks import TASKS, DatasetBundle, TaskId, generate_dataset, load_dataset, save_dataset
from .trainer import Checkpoint, make_checkpoint, restore, train_stage, train_two_stage, jsonl_logger

CACHE_ENV = "WM4_CACHE_DIR"

EXIT_CODES = {ConfigurationError: 2, StatsMismatchError: 3, LoadError: 4, FileNotFoundError: 4,
              TrainingError: 5, ShapeError: 6, DomainError: 6}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _run_manifest(run_dir: Path, cfg: RunConfig, command: str, extra: Optional[dict] = None) -> Path:
    """Record provenance for ``command`` in ``run_dir/manifest.json``."""
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({"config_hash": cfg.hash, "seed": cfg.seed, "config": cfg.to_dict()})
    manifest.setdefault("commands", {})[command] = extra or {}
    return _write_json(path, manifest)


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed}


def default_data_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "chanmoe"))
    key = storage.content_hash({"scenario": cfg.to_dict()["scenario"], "dataset": cfg.to_dict()["dataset"]})
    return root / f"dataset-{key}"


def _load_data(data_dir: Optional[str], cfg: Optional[RunConfig] = None) -> DatasetBundle:
    path = Path(data_dir) if data_dir else (default_data_dir(cfg) if cfg else None)
    if path is None or not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {path}; run gen-data first")
    return load_dataset(path)


def build_model(cfg: RunConfig) -> MultiTaskModel:
    return MultiTaskModel(cfg.model, task_shapes(cfg.scenario, cfg.dataset))


def _config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    if "run_config" not in ckpt.metadata:
        raise LoadError("checkpoint lacks its run configuration")
    return RunConfig.from_dict(ckpt.metadata["run_config"])


def load_model(checkpoint: str):
    ckpt = Checkpoint.load(checkpoint)
    cfg = _config_from_checkpoint(ckpt)
    return restore(build_model(cfg), ckpt), ckpt, cfg


def check_stats(ckpt: Checkpoint, bundle: DatasetBundle) -> None:
    want = ckpt.metadata.get("normalization_hash")
    have = bundle.manifest.get("normalization_hash")
    if want != have:
        raise StatsMismatchError(
            f"checkpoint normalization {want} differs from dataset normalization {have}; refusing to evaluate")


def _checkpoint_meta(cfg: RunConfig, bundle: DatasetBundle, **extra) -> dict:
    meta = {"run_config": cfg.to_dict(), **_provenance(cfg),
            "normalization_hash": bundle.manifest["normalization_hash"],
            "normalization": bundle.manifest["normalization"],
            "dataset_hash": bundle.manifest_hash}
    meta.update(extra)
    return meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_dir: Optional[str] = None) -> Path:
    out = Path(out_dir) if out_dir else default_data_dir(cfg)
    bundle = generate_dataset(cfg.scenario, cfg.dataset)
    save_dataset(bundle, out)
    return out


def cmd_train(cfg: RunConfig, data_dir: Optional[str], out_dir: str, stage: str = "both",
              init: Optional[str] = None) -> Path:
    run = Path(out_dir)
    bundle = _load_data(data_dir, cfg)
    model = build_model(cfg)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[stage]
    if stages == (2,):
        init = init or str(run / "checkpoints" / "stage1.wm4c")
        ckpt = Checkpoint.load(init)
        check_stats(ckpt, bundle)
        restore(model, ckpt)
    save_config(cfg, run / "config.json")
    with open(run / "train.log", "a") as fh:
        log = jsonl_logger(fh)
        for s in stages:
            _, logs = train_stage(model, bundle.splits["train"], bundle.splits["val"], cfg.train, s, log)
            make_checkpoint(model, s, logs, _checkpoint_meta(cfg, bundle)).save(
                run / "checkpoints" / f"stage{s}.wm4c")
    _run_manifest(run, cfg, "train", {"stages": list(stages), "dataset_hash": bundle.manifest_hash})
    return run / "checkpoints" / f"stage{stages[-1]}.wm4c"


def cmd_eval(checkpoint: str, data_dir: Optional[str], out: Optional[str] = None) -> MetricReport:
    model, ckpt, cfg = load_model(checkpoint)
    bundle = _load_data(data_dir, cfg)
    check_stats(ckpt, bundle)
    report = evaluate(model, bundle.splits["test"], cfg.eval.se_config(), cfg.eval.batch_size,
                      method=f"model-stage{ckpt.metadata.get('stage')}")
    report.metadata = {**_provenance(cfg), "checkpoint": Path(checkpoint).name,
                       "dataset_hash": bundle.manifest_hash}
    path = Path(out) if out else Path(checkpoint).parent.parent / "reports" / "overall.tsv"
    write_report([report], path, report.metadata)
    return report


def cmd_baseline(data_dir: Optional[str], method: str = "bi", out: Optional[str] = None,
                 cfg: Optional[RunConfig] = None) -> Dict[str, Dict[str, float]]:
    cfg = cfg or RunConfig()
    bundle = _load_data(data_dir, cfg)
    test = bundle.splits["test"]
    dcfg = bundle.manifest["dataset"]
    if method == "ls":
        report = MetricReport("ls", {TaskId.CE: ls_report(test, dcfg["comb_step"])})
    elif method in ("bi", "codebook"):
        report = baseline_report(test, bundle.splits["train"], dcfg["horizon"], dcfg["comb_step"],
                                 cfg.eval.se_config())
        report.method = method
        if method == "codebook":
            report.metrics = {TaskId.BF: report.metrics[TaskId.BF]}
    else:
        raise ConfigurationError(f"unknown baseline method {method!r}")
    meta = {"dataset_hash": bundle.manifest_hash, "seed": bundle.manifest["seed"],
            "config_hash": bundle.manifest["config_hash"]}
    path = Path(out) if out else Path(data_dir or default_data_dir(cfg)) / f"baseline_{method}.tsv"
    write_report([report], path, meta)
    return {t.value: m for t, m in report.metrics.items()}


def cmd_ablate(cfg: RunConfig, data_dir: Optional[str], out_dir: str,
               variants: Sequence[str] = tuple(ABLATIONS)) -> List[dict]:
    """Train and evaluate each architecture variant under the same protocol.

    ``eval.ablation_samples`` / ``eval.ablation_epochs`` set the reduced
    desk preset; ``null`` samples and the full epoch count give the full run.
    """
    run = Path(out_dir)
    bundle = _load_data(data_dir, cfg)
    train = bundle.splits["train"]
    if cfg.eval.ablation_samples:
        n = len(next(iter(train.values())))
        train = bundle.fraction(min(1.0, cfg.eval.ablation_samples / n), seed=cfg.seed).splits["train"]
    epochs = cfg.eval.ablation_epochs
    warmup = min(cfg.train.warmup_epochs, max(1, epochs // 5), epochs - 1)
    tcfg = dataclasses.replace(cfg.train, epochs=epochs, warmup_epochs=warmup,
                               cosine_period=None)
    if "full" not in variants:
        variants = ("full",) + tuple(variants)
    results = {}
    for variant in variants:
        model = MultiTaskModel(ablation_config(cfg.model, variant), task_shapes(cfg.scenario, cfg.dataset))
        train_two_stage(model, train, bundle.splits["val"], tcfg)
        results[variant] = evaluate(model, bundle.splits["test"], None, cfg.eval.batch_size, method=variant)
    rows = ablation_table(results)
    write_ablation_table(rows, run / "reports" / "ablation.tsv")
    _run_manifest(run, cfg, "ablate", {"variants": list(variants), "epochs": tcfg.epochs,
                                       "train_samples": len(next(iter(train.values())))})
    return rows


def _layer_names(model, layers: Optional[Sequence[str]], seed: int) -> List[str]:
    names = [name for name, _ in moe_layers(model)]
    if not names:
        raise ConfigurationError("model has no MoE-LoRA layers")
    if not layers:
        rng = np.random.default_rng(seed)
        return [names[i] for i in sorted(rng.choice(len(names), size=min(2, len(names)), replace=False))]
    out = []
    for layer in layers:
        if str(layer).isdigit():
            if int(layer) >= len(names):
                raise ConfigurationError(f"layer index {layer} out of range (0..{len(names) - 1})")
            out.append(names[int(layer)])
        elif layer in names:
            out.append(layer)
        else:
            raise ConfigurationError(f"unknown layer {layer!r}; available: {names}")
    return out


def cmd_analyze_experts(checkpoint: str, layers: Optional[Sequence[str]] = None, seed: int = 0,
                        out_dir: Optional[str] = None) -> Dict[str, np.ndarray]:
    model, ckpt, cfg = load_model(checkpoint)
    out = Path(out_dir) if out_dir else Path(checkpoint).parent.parent / "reports"
    records = export_expert_weights(model)
    write_expert_table(records, out / "expert_weights.tsv")
    matrices = {}
    for name in _layer_names(model, layers, seed):
        matrices[name] = pearson_matrix(records, name)
        write_matrix(matrices[name], out / f"pearson_{name}.tsv")
    return matrices


def cmd_finetune(checkpoint: str, data_dir: Optional[str], out_dir: str, fraction: float = 0.1,
                 overrides: Sequence[str] = ()) -> Path:
    """Two-stage adaptation of a trained model on a fraction of another dataset."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("fraction must be in (0, 1]")
    model, _, cfg = load_model(checkpoint)
    if overrides:
        cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), overrides))
    bundle = _load_data(data_dir, cfg)
    small = bundle.fraction(fraction, seed=cfg.seed)
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "finetune.log", "a") as fh:
        train_two_stage(model, small.splits["train"], small.splits["val"], cfg.train, log=jsonl_logger(fh))
    path = run / "checkpoints" / "finetuned.wm4c"
    make_checkpoint(model, 2, [], _checkpoint_meta(cfg, bundle, fraction=fraction,
                                                   source_checkpoint=Path(checkpoint).name)).save(path)
    report = evaluate(model, bundle.splits["test"], cfg.eval.se_config(), cfg.eval.batch_size, method="finetuned")
    write_report([report], run / "reports" / "finetune.tsv", {**_provenance(cfg), "fraction": fraction})
    _run_manifest(run, cfg, "finetune", {"fraction": fraction, "dataset_hash": bundle.manifest_hash})
    return path


def cmd_efficiency(checkpoint: str, data_dir: Optional[str], out: Optional[str] = None) -> dict:
    model, ckpt, cfg = load_model(checkpoint)
    bundle = _load_data(data_dir, cfg)
    rep = efficiency_report(model, bundle.splits["test"], cfg.train.batch_size, cfg.eval.timing_repeats)
    path = Path(out) if out else Path(checkpoint).parent.parent / "reports" / "efficiency.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# schema: efficiency v1\n")
        fh.write(f"# config_hash: {cfg.hash}\n# seed: {cfg.seed}\n")
        fh.write("quantity\tvalue\n")
        for k, v in rep.items():
            fh.write(f"{k}\t{v:.6g}\n" if isinstance(v, float) else f"{k}\t{v}\n")
    return rep


def cmd_report(run_dir: str) -> Path:
    """Collect every metrics table under ``run_dir/reports`` into ``summary.tsv``."""
    reports = Path(run_dir) / "reports"
    if not reports.is_dir():
        raise FileNotFoundError(f"no reports directory in {run_dir}")
    lines = ["# schema: summary v1"]
    manifest = Path(run_dir) / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        lines.append(f"# config_hash: {m.get('config_hash')}")
        lines.append(f"# seed: {m.get('seed')}")
    lines.append("\t".join(["source", "method"] + [t.value for t in TASKS] + ["avg"]))
    for path in sorted(reports.glob("*.tsv")):
        with open(path) as fh:
            if "metrics v1" not in fh.readline():
                continue
        for method, per_task in read_report(path).items():
            vals = [per_task.get(t.value, {}).get(PRIMARY_METRIC[t]) for t in TASKS]
            avg = per_task.get("ALL", {}).get("avg")
            cells = ["" if v is None else f"{v:.4g}" for v in vals + [avg]]
            lines.append("\t".join([path.name, method] + cells))
    out = reports / "summary.tsv"
    out.write_text("\n".join(lines) + "\n")
    return out


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chanmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file; --section.key value overrides follow")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate a dual-band multi-task dataset"))
    sp.add_argument("--out", help=f"dataset directory (default: under ${CACHE_ENV})")

    sp = with_config(sub.add_parser("train", help="two-stage training"))
    sp.add_argument("--data")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--stage", choices=["1", "2", "both"], default="both")
    sp.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")

    sp = with_config(sub.add_parser("baseline", help="non-learned baselines"))
    sp.add_argument("--data")
    sp.add_argument("--method", choices=["bi", "codebook", "ls"], default="bi")
    sp.add_argument("--out")

    sp = with_config(sub.add_parser("ablate", help="architecture ablations"))
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", nargs="+", choices=sorted(ABLATIONS), default=list(ABLATIONS))

    sp = sub.add_parser("analyze-experts", help="expert weights and Pearson matrices")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", action="append", help="MoE layer index or name; repeatable")
    sp.add_argument("--seed", type=int, default=0, help="seed for picking layers when --layer is absent")
    sp.add_argument("--out")

    sp = sub.add_parser("finetune", help="few-shot adaptation on another dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fraction", type=float, default=0.1)

    sp = sub.add_parser("efficiency", help="parameter counts and inference timing")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")

    sp = sub.add_parser("report", help="summarize the reports of a run directory")
    sp.add_argument("--run", required=True)
    return p


def run(argv: Sequence[str]):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("gen-data", "train", "baseline", "ablate", "finetune"):
        raise ConfigurationError(f"unexpected arguments: {extra}")
    needs_cfg = args.command in ("gen-data", "train", "baseline", "ablate")
    cfg = load_config(getattr(args, "config", None), extra) if needs_cfg else None
    c = args.command
    if c == "gen-data":
        out = cmd_gen_data(cfg, args.out)
        return {"dataset": str(out), **_provenance(cfg)}
    if c == "train":
        return {"checkpoint": str(cmd_train(cfg, args.data, args.out, args.stage, args.init)), **_provenance(cfg)}
    if c == "eval":
        report = cmd_eval(args.checkpoint, args.data, args.out)
        return {"avg": report.avg, **report.metadata}
    if c == "baseline":
        return {"method": args.method, "metrics": cmd_baseline(args.data, args.method, args.out, cfg)}
    if c == "ablate":
        rows = cmd_ablate(cfg, args.data, args.out, args.variants)
        return {"ablation": [{k: r[k] for k in ("variant", "avg", "increase_ratio")} for r in rows],
                **_provenance(cfg)}
    if c == "analyze-experts":
        mats = cmd_analyze_experts(args.checkpoint, args.layer, args.seed, args.out)
        return {"layers": sorted(mats)}
    if c == "finetune":
        return {"checkpoint": str(cmd_finetune(args.checkpoint, args.data, args.out, args.fraction, extra))}
    if c == "efficiency":
        return cmd_efficiency(args.checkpoint, args.data, args.out)
    if c == "report":
        return {"summary": str(cmd_report(args.run))}
    raise ConfigurationError(f"unknown command {c}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        result = run(argv)
    except SystemExit as exc:  # argparse usage errors
        if exc.code in (0, None):
            return 0
        print(json.dumps({"status": "error", "error": "UsageError", "message": "invalid arguments",
                          "argv": argv}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = next((v for k, v in EXIT_CODES.items() if isinstance(exc, k)), 1)
        print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc),
                          "command": argv[0] if argv else None}), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
