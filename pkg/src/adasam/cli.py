"""Command-line entry point: data generation, training, inference, prompting,
evaluation, experiments, ablation, and the SegEx session lifecycle.

Settings resolve as flags > environment > config file > built-in defaults,
and every output artifact embeds the resolved configuration plus the tool
version.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__

TOOL = {"name": "adasam", "version": __version__}
ENV_DATA_DIR = "ADASAM_DATA_DIR"


def _provenance(resolved: dict) -> dict:
    return {"tool": dict(TOOL), "resolved_config": dict(resolved)}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: CLI flags > environment > --config file > defaults."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        file_config = json.loads(Path(config_path).read_text())
        unknown = set(file_config) - set(resolved)
        if unknown:
            raise SystemExit(f"config file sets unknown keys: {sorted(unknown)}")
        resolved.update(file_config)
    if "data" in resolved and os.environ.get(ENV_DATA_DIR):
        resolved["data"] = os.environ[ENV_DATA_DIR]
    given = {k: v for k, v in vars(args).items() if k in resolved}
    resolved.update(given)
    return resolved


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _model_config(resolved: dict):
    from .model import ModelConfig

    return ModelConfig(
        image_size=resolved["size"],
        patch_size=resolved["patch"],
        embed_dim=resolved["embed_dim"],
        depth=resolved["depth"],
        heads=resolved["heads"],
        decoder_dim=resolved["decoder_dim"],
        lora_rank=resolved["rank"],
        lora_alpha=resolved["alpha"],
        seed=resolved["seed"],
    )


def _train_config(resolved: dict, budget: int):
    from .training import TrainConfig

    return TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        label_budget=budget,
        seed=resolved["seed"],
        tau=resolved["tau"],
        pad=resolved["pad"],
        gamma_focus=resolved["gamma"],
        lambda_seg=resolved["lambda_seg"],
    )


MODEL_DEFAULTS = {
    "size": 256,
    "patch": 16,
    "embed_dim": 192,
    "depth": 6,
    "heads": 6,
    "decoder_dim": None,
    "rank": 8,
    "alpha": None,
}

TRAIN_DEFAULTS = {
    "epochs": 10,
    "batch_size": 8,
    "lr": 1e-3,
    "tau": 0.5,
    "pad": 4,
    "gamma": 2.0,
    "lambda_seg": 1.0,
    "seed": 0,
}


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--size", type=int, help="image size")
    parser.add_argument("--patch", type=int, help="patch size")
    parser.add_argument("--embed-dim", dest="embed_dim", type=int)
    parser.add_argument("--depth", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--decoder-dim", dest="decoder_dim", type=int)
    parser.add_argument("--rank", type=int, help="adapter rank (0 disables)")
    parser.add_argument("--alpha", type=float, help="adapter scaling (default 2*rank)")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--pad", type=int)
    parser.add_argument("--gamma", type=float, help="focal focusing exponent")
    parser.add_argument("--lambda-seg", dest="lambda_seg", type=float)
    parser.add_argument("--seed", type=int)


def cmd_gen_data(args: argparse.Namespace) -> int:
    from .phantom import PhantomConfig, build_dataset

    defaults = {
        "out": None, "n_train": 150, "n_val": 10, "n_test": 50,
        "seed": 0, "noise": 0.03, "size": 256, "clutter": False,
        "class_mix": "0.1,0.3,0.3,0.3",
    }
    resolved = _resolve(args, defaults)
    if resolved["out"] is None:
        raise SystemExit("gen-data requires --out")
    mix = tuple(float(x) for x in str(resolved["class_mix"]).split(","))
    config = PhantomConfig(
        image_size=resolved["size"],
        n_train=resolved["n_train"],
        n_val=resolved["n_val"],
        n_test=resolved["n_test"],
        noise_sigma=resolved["noise"],
        class_mix=mix,
        clutter=resolved["clutter"],
        seed=resolved["seed"],
    )
    manifest = build_dataset(config, resolved["out"])
    _write_json(Path(resolved["out"]) / "run_config.json", _provenance(resolved))
    print(json.dumps({"records": len(manifest.records), "out": str(resolved["out"]), **TOOL}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .model import AdaSamModel
    from .phantom import DatasetManifest
    from .training import fit

    defaults = {"data": None, "out": None, "budget": "0", **TRAIN_DEFAULTS, **MODEL_DEFAULTS}
    resolved = _resolve(args, defaults)
    if not resolved["data"] or not resolved["out"]:
        raise SystemExit("train requires --data and --out")
    manifest = DatasetManifest.load(resolved["data"])
    resolved["size"] = manifest.config.image_size
    train_size = len(manifest.split_records("train"))
    budget = train_size if str(resolved["budget"]) == "all" else int(resolved["budget"])
    model = AdaSamModel(_model_config(resolved))
    report = fit(model, manifest, _train_config(resolved, budget), resolved["out"])
    report["provenance"] = _provenance(resolved)
    _write_json(Path(resolved["out"]) / "training_report.json", report)
    print(json.dumps({"best_val_dsc": report["best_val_dsc"], "checkpoint": report["checkpoint"]}))
    return 0


def cmd_prompt(args: argparse.Namespace) -> int:
    from .model import load_checkpoint
    from .phantom import load_image
    from .prompting import generate_prompt

    defaults = {"ckpt": None, "image": None, "tau": 0.5, "pad": 4, "overlay": None}
    resolved = _resolve(args, defaults)
    if not resolved["ckpt"] or not resolved["image"]:
        raise SystemExit("prompt requires --ckpt and --image")
    model = load_checkpoint(resolved["ckpt"])
    image = load_image(resolved["image"])
    box, predicted = generate_prompt(model, image, tau=resolved["tau"], pad=resolved["pad"])
    result = {
        "box": list(box.as_tuple()) if box else None,
        "class": predicted,
        **_provenance(resolved),
    }
    if resolved["overlay"] and box is not None:
        from PIL import Image, ImageDraw

        rgb = Image.open(resolved["image"]).convert("RGB")
        draw = ImageDraw.Draw(rgb)
        draw.rectangle([box.x_min, box.y_min, box.x_max - 1, box.y_max - 1], outline=(255, 60, 60))
        rgb.save(resolved["overlay"])
    print(json.dumps(result))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    from .evaluation import predict_mask
    from .model import load_checkpoint
    from .phantom import load_image, save_mask

    defaults = {"ckpt": None, "image": None, "out": None, "tau": 0.5, "pad": 4}
    resolved = _resolve(args, defaults)
    if not resolved["ckpt"] or not resolved["image"] or not resolved["out"]:
        raise SystemExit("infer requires --ckpt, --image and --out")
    model = load_checkpoint(resolved["ckpt"])
    image = load_image(resolved["image"])
    mask, box, predicted = predict_mask(model, image, tau=resolved["tau"], pad=resolved["pad"])
    save_mask(mask, resolved["out"])
    print(json.dumps({
        "out": str(resolved["out"]),
        "class": predicted,
        "box": list(box.as_tuple()) if box else None,
        **_provenance(resolved),
    }))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .evaluation import evaluate_split, predict_mask
    from .model import load_checkpoint
    from .phantom import DatasetManifest, load_image, save_mask

    defaults = {
        "ckpt": None, "data": None, "split": "test", "tau": 0.5, "pad": 4,
        "prompt_mode": "auto", "out": None, "pred_out": None,
    }
    resolved = _resolve(args, defaults)
    if not resolved["ckpt"] or not resolved["data"]:
        raise SystemExit("eval requires --ckpt and --data")
    model = load_checkpoint(resolved["ckpt"])
    manifest = DatasetManifest.load(resolved["data"])
    report = evaluate_split(
        model, manifest, resolved["split"], tau=resolved["tau"], pad=resolved["pad"],
        prompt_mode=resolved["prompt_mode"],
    )
    payload = {**report.to_dict(), **_provenance(resolved)}
    if resolved["out"]:
        _write_json(Path(resolved["out"]), payload)
    if resolved["pred_out"]:
        pred_dir = Path(resolved["pred_out"])
        pred_dir.mkdir(parents=True, exist_ok=True)
        for record in manifest.split_records(resolved["split"]):
            mask, _, _ = predict_mask(
                model, load_image(manifest.image_path(record)),
                tau=resolved["tau"], pad=resolved["pad"], prompt_mode=resolved["prompt_mode"],
            )
            save_mask(mask, pred_dir / f"{record.id}.png")
    print(json.dumps({"overall": report.overall, "split": resolved["split"]}))
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    from .experiments import ExperimentGrid, format_budget_table, label_budget_experiment
    from .phantom import DatasetManifest

    defaults = {
        "data": None, "out": None, "budgets": "0,5,50,100", "seeds": "0,1,2",
        **TRAIN_DEFAULTS, **MODEL_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["data"] or not resolved["out"]:
        raise SystemExit("experiment requires --data and --out")
    manifest = DatasetManifest.load(resolved["data"])
    resolved["size"] = manifest.config.image_size
    grid = ExperimentGrid(
        budgets=tuple(int(b) for b in str(resolved["budgets"]).split(",")),
        seeds=tuple(int(s) for s in str(resolved["seeds"]).split(",")),
    )
    table = label_budget_experiment(
        grid, manifest, _model_config(resolved), _train_config(resolved, 0), resolved["out"]
    )
    table["provenance"] = _provenance(resolved)
    _write_json(Path(resolved["out"]) / "budget_table.json", table)
    print(format_budget_table(table))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from .experiments import lora_rank_ablation
    from .phantom import DatasetManifest

    defaults = {
        "data": None, "out": None, "ranks": "2,4,6,8", "budget": "50",
        **TRAIN_DEFAULTS, **MODEL_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    if not resolved["data"] or not resolved["out"]:
        raise SystemExit("ablate requires --data and --out")
    manifest = DatasetManifest.load(resolved["data"])
    resolved["size"] = manifest.config.image_size
    ranks = tuple(int(r) for r in str(resolved["ranks"]).split(","))
    train_size = len(manifest.split_records("train"))
    budget = train_size if str(resolved["budget"]) == "all" else int(resolved["budget"])
    table = lora_rank_ablation(
        ranks, manifest, _model_config(resolved), _train_config(resolved, budget), resolved["out"]
    )
    table["provenance"] = _provenance(resolved)
    _write_json(Path(resolved["out"]) / "rank_table.json", table)
    for row in table["rows"]:
        dsc = row.get("test_dsc", {}).get("mean")
        print(f"rank {row['rank']}: trainable={row['params_trainable']} "
              f"dsc={dsc if dsc is None else round(dsc, 3)}")
    return 0


def cmd_timing(args: argparse.Namespace) -> int:
    from .experiments import timing_report
    from .model import load_checkpoint
    from .phantom import DatasetManifest

    defaults = {"ckpt": None, "data": None, "split": "test", "tau": 0.5, "pad": 4, "out": None}
    resolved = _resolve(args, defaults)
    if not resolved["ckpt"] or not resolved["data"]:
        raise SystemExit("timing requires --ckpt and --data")
    model = load_checkpoint(resolved["ckpt"])
    manifest = DatasetManifest.load(resolved["data"])
    report = timing_report(model, manifest, split=resolved["split"], tau=resolved["tau"], pad=resolved["pad"])
    report["provenance"] = _provenance(resolved)
    if resolved["out"]:
        _write_json(Path(resolved["out"]), report)
    print(json.dumps({"mean_ms": report["mean_ms"], "median_ms": report["median_ms"]}))
    return 0


def _load_mask_dir(directory: Path) -> dict:
    from .phantom import load_mask

    masks = {}
    for path in sorted(Path(directory).glob("*.png")):
        masks[path.stem] = load_mask(path)
    if not masks:
        raise SystemExit(f"no .png masks found under {directory}")
    return masks


def cmd_segex_build(args: argparse.Namespace) -> int:
    from .phantom import load_image
    from .segex import ObserverSpec, build_session
    from .segex.session import _opaque_id

    import numpy as np

    defaults = {
        "gt": None, "pred": None, "out": None, "seed": 0, "images": None,
        "observers": "observer1,observer2", "llm_observer": False,
    }
    resolved = _resolve(args, defaults)
    if not resolved["gt"] or not resolved["pred"] or not resolved["out"]:
        raise SystemExit("segex build requires --gt, --pred and --out")
    gt = _load_mask_dir(Path(resolved["gt"]))
    pred = _load_mask_dir(Path(resolved["pred"]))
    images = None
    if resolved["images"]:
        images = {
            p.stem: load_image(p) for p in sorted(Path(resolved["images"]).glob("*.png"))
        }
    token_rng = np.random.default_rng([resolved["seed"], 99])
    observers = [
        ObserverSpec(id=name.strip(), token=_opaque_id(token_rng))
        for name in str(resolved["observers"]).split(",") if name.strip()
    ]
    if resolved["llm_observer"]:
        observers.append(
            ObserverSpec(id="llm", token=_opaque_id(token_rng), include_image=False)
        )
    session = build_session(gt, pred, resolved["seed"], observers, resolved["out"], images=images)
    _write_json(Path(resolved["out"]) / "run_config.json", _provenance(resolved))
    print(json.dumps({
        "session": session.session_id,
        "items": len(session.items),
        "observers": {o.id: o.token for o in session.observers},
    }))
    return 0


def cmd_segex_serve(args: argparse.Namespace) -> int:
    from .segex.service import make_server
    from .segex.session import load_session

    defaults = {"session": None, "port": 8750, "key": None, "ui": None}
    resolved = _resolve(args, defaults)
    if not resolved["session"]:
        raise SystemExit("segex serve requires --session")
    session = load_session(resolved["session"])
    server = make_server(session, port=int(resolved["port"]), key_path=resolved["key"], ui_dir=resolved["ui"])
    print(json.dumps({
        "session": session.session_id,
        "url": f"http://{server.server_address[0]}:{server.server_address[1]}",
        "observers": {o.id: o.token for o in session.observers},
        "report_enabled": resolved["key"] is not None,
    }), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_segex_report(args: argparse.Namespace) -> int:
    from .evaluation import DscReport
    from .phantom import LABEL_NAMES
    from .segex.session import aggregate, load_session

    defaults = {"session": None, "key": None, "dsc": None, "out": None}
    resolved = _resolve(args, defaults)
    if not resolved["session"]:
        raise SystemExit("segex report requires --session")
    session = load_session(resolved["session"])
    dsc_by_muscle = None
    if resolved["dsc"]:
        eval_report = DscReport.load(resolved["dsc"])
        dsc_by_muscle = {
            LABEL_NAMES[label]: stats["mean"] for label, stats in eval_report.per_label.items()
        }
    report = aggregate(session, key_path=resolved["key"], dsc_by_muscle=dsc_by_muscle)
    report["provenance"] = _provenance(resolved)
    if resolved["out"]:
        _write_json(Path(resolved["out"]), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_segex_llm(args: argparse.Namespace) -> int:
    from .segex.llm import HttpBackend, MockBackend, llm_observe
    from .segex.session import load_session

    defaults = {"session": None, "backend": "mock", "observer": "llm", "skip": "SD"}
    resolved = _resolve(args, defaults)
    if not resolved["session"]:
        raise SystemExit("segex llm requires --session")
    session = load_session(resolved["session"])
    backend_name = str(resolved["backend"])
    if backend_name == "mock":
        backend = MockBackend()
    elif backend_name == "live":
        url = os.environ.get("ADASAM_LLM_URL")
        if not url:
            raise SystemExit("--backend live requires ADASAM_LLM_URL to point at the text backend")
        backend = HttpBackend(url)
    else:
        backend = HttpBackend(backend_name)
    skip = tuple(s for s in str(resolved["skip"]).split(",") if s)
    ratings, quarantined = llm_observe(session, backend, resolved["observer"], skip=skip)
    print(json.dumps({"rated": len(ratings), "quarantined": len(quarantined)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adasam",
        description="Self-prompting multitask segmentation on synthetic thigh phantoms.",
    )
    parser.add_argument("--version", action="version", version=f"adasam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.set_defaults(**{})

    p = sub.add_parser("gen-data", help="generate a phantom dataset", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--out")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--class-mix", dest="class_mix")
    p.add_argument("--clutter", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a dataset", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--budget", help="labeled-slice budget (integer or 'all')")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prompt", help="derive the box prompt for one image", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--tau", type=float)
    p.add_argument("--pad", type=int)
    p.add_argument("--overlay", help="write a box overlay image here")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("infer", help="predict a mask for one image", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--tau", type=float)
    p.add_argument("--pad", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--tau", type=float)
    p.add_argument("--pad", type=int)
    p.add_argument("--prompt-mode", dest="prompt_mode", choices=("auto", "full_box"))
    p.add_argument("--out")
    p.add_argument("--pred-out", dest="pred_out", help="dump predicted masks to this directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="label-budget sweep with baseline column", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--budgets")
    p.add_argument("--seeds")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", help="adapter-rank ablation", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--ranks")
    p.add_argument("--budget")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("timing", help="per-image latency of the full pipeline", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("segex", help="blinded expert assessment")
    segex_sub = p.add_subparsers(dest="segex_command", required=True)

    q = segex_sub.add_parser("build", help="build a blinded session from mask dirs", argument_default=argparse.SUPPRESS)
    common(q)
    q.add_argument("--gt", help="directory of reference masks")
    q.add_argument("--pred", help="directory of model masks")
    q.add_argument("--images", help="directory of underlying images (for overlays)")
    q.add_argument("--out")
    q.add_argument("--seed", type=int)
    q.add_argument("--observers", help="comma-separated human observer ids")
    q.add_argument("--llm-observer", dest="llm_observer", action="store_true")
    q.set_defaults(func=cmd_segex_build)

    q = segex_sub.add_parser("serve", help="serve the rating API/UI", argument_default=argparse.SUPPRESS)
    common(q)
    q.add_argument("--session")
    q.add_argument("--port", type=int)
    q.add_argument("--key", help="sealed key file; enables the report endpoint")
    q.add_argument("--ui", help="static directory with the rater frontend")
    q.set_defaults(func=cmd_segex_serve)

    q = segex_sub.add_parser("report", help="aggregate scores (requires key)", argument_default=argparse.SUPPRESS)
    common(q)
    q.add_argument("--session")
    q.add_argument("--key")
    q.add_argument("--dsc", help="evaluation report to join per-muscle DSC from")
    q.add_argument("--out")
    q.set_defaults(func=cmd_segex_report)

    q = segex_sub.add_parser("llm", help="run the machine observer", argument_default=argparse.SUPPRESS)
    common(q)
    q.add_argument("--session")
    q.add_argument("--backend", help="'mock' or a backend URL")
    q.add_argument("--observer")
    q.add_argument("--skip", help="comma-separated criteria to exclude")
    q.set_defaults(func=cmd_segex_llm)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # structured failure for scripting
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
