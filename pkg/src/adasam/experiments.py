"""Experiment harnesses: label-budget sweep, adapter-rank ablation, timing."""

from __future__ import annotations

import json
import statistics
import time
import traceback
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .evaluation import evaluate_split, predict_mask
from .model import AdaSamModel, ModelConfig, count_parameters, load_checkpoint
from .phantom import LABEL_NAMES, DatasetManifest, load_image
from .training import BEST_CHECKPOINT, TrainConfig, fit

# best DSC by adapter rank reported for the full-scale (pretrained-backbone,
# clinical-data) configuration; context only, never asserted at phantom scale
FULL_SCALE_REFERENCE_DSC = {2: 0.84, 4: 0.85, 6: 0.86, 8: 0.91}


@dataclass
class ExperimentGrid:
    budgets: tuple[int, ...] = (0, 5, 50, 100)
    seeds: tuple[int, ...] = (0, 1, 2)
    ranks: tuple[int, ...] = (2, 4, 6, 8)

    def __post_init__(self) -> None:
        if not self.budgets or not self.seeds or not self.ranks:
            raise ValueError("grid lists must be nonempty")
        self.budgets = tuple(int(b) for b in self.budgets)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ranks = tuple(int(r) for r in self.ranks)


def _mean_std(values: list[float]) -> dict[str, float]:
    clean = [v for v in values if v == v]  # drop NaN
    if not clean:
        return {"mean": float("nan"), "stdev": float("nan"), "n": 0}
    mean = statistics.fmean(clean)
    stdev = statistics.pstdev(clean) if len(clean) > 1 else 0.0
    return {"mean": mean, "stdev": stdev, "n": len(clean)}


def _train_and_eval(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir: Path,
) -> dict:
    model = AdaSamModel(model_config)
    fit(model, manifest, train_config, run_dir)
    best = load_checkpoint(run_dir / BEST_CHECKPOINT)
    auto = evaluate_split(
        manifest=manifest, model=best, split="test",
        tau=train_config.tau, pad=train_config.pad, prompt_mode="auto",
    )
    baseline = evaluate_split(
        manifest=manifest, model=best, split="test",
        tau=train_config.tau, pad=train_config.pad, prompt_mode="full_box",
    )
    auto.save(run_dir / "test_auto.json")
    baseline.save(run_dir / "test_full_box.json")
    return {
        "auto": auto.to_dict(),
        "full_box": baseline.to_dict(),
    }


def label_budget_experiment(
    grid: ExperimentGrid,
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Path | str,
) -> dict:
    """Train one model per (budget, seed) and tabulate test DSC for the
    self-prompting path next to the full-image-box baseline.

    Failed cells are recorded with their traceback and the rest of the table
    still completes; the partial table is rewritten after every cell.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table: dict = {
        "grid": asdict(grid),
        "model_config": asdict(model_config),
        "train_config": asdict(train_config),
        "cells": [],
        "rows": {},
    }
    for budget in grid.budgets:
        for seed in grid.seeds:
            run_dir = out_dir / f"budget{budget}_seed{seed}"
            cell: dict = {"budget": budget, "seed": seed, "dir": str(run_dir)}
            try:
                cfg = replace(train_config, label_budget=budget, seed=seed)
                mcfg = replace(model_config, seed=seed)
                cell["result"] = _train_and_eval(manifest, mcfg, cfg, run_dir)
            except Exception as exc:  # keep partial results on any cell failure
                cell["error"] = f"{type(exc).__name__}: {exc}"
                cell["traceback"] = traceback.format_exc()
            table["cells"].append(cell)
            table["rows"] = _budget_rows(table["cells"])
            (out_dir / "budget_table.json").write_text(
                json.dumps(table, indent=2, sort_keys=True) + "\n"
            )
    return table


def _budget_rows(cells: list[dict]) -> dict:
    rows: dict = {}
    budgets = sorted({c["budget"] for c in cells})
    for budget in budgets:
        ok = [c for c in cells if c["budget"] == budget and "result" in c]
        row: dict = {"n_runs": len(ok)}
        for mode in ("auto", "full_box"):
            overall = [c["result"][mode]["overall"]["mean"] for c in ok]
            row[mode] = {"overall": _mean_std(overall)}
            for label, name in LABEL_NAMES.items():
                vals = [c["result"][mode]["per_label"][str(label)]["mean"] for c in ok]
                row[mode][name] = _mean_std(vals)
        rows[str(budget)] = row
    return rows


def format_budget_table(table: dict) -> str:
    lines = [
        f"{'budget':>8} {'self-prompt':>22} {'full-box baseline':>22}",
    ]
    for budget, row in sorted(table["rows"].items(), key=lambda kv: int(kv[0])):
        a = row["auto"]["overall"]
        b = row["full_box"]["overall"]
        lines.append(
            f"{budget:>8} {a['mean']:>13.3f}({a['stdev']:.3f}) {b['mean']:>13.3f}({b['stdev']:.3f})"
        )
    return "\n".join(lines)


def lora_rank_ablation(
    ranks: tuple[int, ...],
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Path | str,
) -> dict:
    """Train once per adapter rank at a fixed budget; report test DSC plus
    parameter counts per rank."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table: dict = {
        "budget": train_config.label_budget,
        "train_config": asdict(train_config),
        "model_config": asdict(model_config),
        "full_scale_reference_dsc": {str(k): v for k, v in FULL_SCALE_REFERENCE_DSC.items()},
        "rows": [],
    }
    for rank in ranks:
        run_dir = out_dir / f"rank{rank}"
        mcfg = replace(model_config, lora_rank=int(rank), lora_alpha=None)
        model = AdaSamModel(mcfg)
        total, trainable = count_parameters(model)
        row: dict = {
            "rank": int(rank),
            "params_total": total,
            "params_trainable": trainable,
            "trainable_fraction": trainable / total,
        }
        try:
            result = _train_and_eval(manifest, mcfg, train_config, run_dir)
            row["test_dsc"] = result["auto"]["overall"]
            row["per_label"] = result["auto"]["per_label"]
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            row["traceback"] = traceback.format_exc()
        table["rows"].append(row)
        (out_dir / "rank_table.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def timing_report(model, manifest: DatasetManifest, split: str = "test", tau: float = 0.5,
                  pad: int = 4, repeats: int = 2) -> dict:
    """Wall-clock per-slice latency for the full prompt+decode path, image
    load included. Runs the split `repeats` times so run-to-run variance is
    visible in the report."""
    model.eval()
    records = manifest.split_records(split)
    passes = []
    for _ in range(max(1, repeats)):
        samples = []
        for record in records:
            start = time.perf_counter()
            image = load_image(manifest.image_path(record))
            predict_mask(model, image, tau=tau, pad=pad)
            samples.append((time.perf_counter() - start) * 1000.0)
        passes.append(samples)
    flat = [s for run in passes for s in run]
    return {
        "split": split,
        "n_slices": len(records),
        "repeats": len(passes),
        "mean_ms": statistics.fmean(flat) if flat else float("nan"),
        "median_ms": statistics.median(flat) if flat else float("nan"),
        "stdev_ms": statistics.pstdev(flat) if len(flat) > 1 else 0.0,
        "per_pass_mean_ms": [statistics.fmean(run) for run in passes if run],
        "samples_ms": passes,
    }
