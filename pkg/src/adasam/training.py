"""Multitask semi-supervised training: labeled-slice selection and the
self-feedback train step in which segmentation gradients flow through the
shared LoRA-adapted encoder that the classifier reads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluation import evaluate_split
from .losses import FocalParams, LossWeights, dice_loss, focal_loss, mtl_loss
from .model import AdaSamModel, save_checkpoint
from .phantom import DatasetManifest, load_image, load_mask
from .prompting import (
    BBoxPrompt,
    cam_batch,
    cam_to_bbox,
    dominant_components,
    mask_to_bbox,
    threshold_cam,
)

REPORT_NAME = "training_report.json"
BEST_CHECKPOINT = "best"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    label_budget: int = 0
    seed: int = 0
    tau: float = 0.5
    pad: int = 4
    gamma_focus: float = 2.0
    alpha: tuple[float, ...] | None = None
    lambda_seg: float = 1.0
    grad_clip: float = 1.0
    cache_prompts: bool = False
    two_pass: bool = False
    augment_replay: bool = True
    augment_stream: bool = True
    max_shift: int = 6
    head_lr_scale: float = 4.0
    head_weight_decay: float = 0.02
    box_gate: float = 2.0
    seg_warmup_epochs: int = 3
    box_jitter: int = 8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.label_budget < 0:
            raise ValueError("label_budget must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class TrainState:
    labeled_ids: frozenset[str]
    focal: FocalParams
    weights: LossWeights
    optimizer: torch.optim.Optimizer
    jitter_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    step: int = 0
    running: dict[str, float] = field(default_factory=dict)
    last: dict[str, float] = field(default_factory=dict)
    fallback_prompts: int = 0
    prompt_cache: dict[str, object] = field(default_factory=dict)
    accuracy_log: list[float] = field(default_factory=list)
    # the dice term waits until the shared features stop moving fast, else the
    # decoder chases early classifier-driven feature drift into a flood basin
    seg_enabled: bool = True

    def update_running(self, values: dict[str, float], momentum: float = 0.9) -> None:
        self.last = dict(values)
        for key, value in values.items():
            if key in self.running:
                self.running[key] = momentum * self.running[key] + (1 - momentum) * value
            else:
                self.running[key] = value


def select_labeled(manifest: DatasetManifest, budget: int, seed: int) -> tuple[str, ...]:
    """Pick which train slices keep their segmentation labels.

    With budget >= number of distinct train classes, every present class gets
    at least one seeded-uniform pick and the rest fill uniformly without
    replacement; with a smaller budget, classes are covered rarest-first.
    """
    train = manifest.split_records("train")
    if budget > len(train):
        raise ValueError(f"label budget {budget} exceeds train size {len(train)}")
    if budget == 0:
        return ()
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for record in train:
        by_class.setdefault(record.slice_class, []).append(record.id)

    # rarest class first; ties broken by class index for determinism
    rarity_order = sorted(by_class, key=lambda c: (len(by_class[c]), c))
    selected: list[str] = []
    if budget >= len(by_class):
        for cls in rarity_order:
            ids = by_class[cls]
            selected.append(ids[int(rng.integers(len(ids)))])
        pool = sorted(set(r.id for r in train) - set(selected))
        extra = budget - len(selected)
        if extra > 0:
            picks = rng.choice(len(pool), size=extra, replace=False)
            selected.extend(pool[int(i)] for i in picks)
    else:
        for cls in rarity_order[:budget]:
            ids = by_class[cls]
            selected.append(ids[int(rng.integers(len(ids)))])
    return tuple(sorted(selected))


def inverse_frequency_alpha(manifest: DatasetManifest, n_classes: int) -> tuple[float, ...]:
    """Per-class focal weights proportional to inverse train frequency,
    normalized to mean 1; classes absent from the split get weight 1."""
    counts = np.zeros(n_classes, dtype=np.float64)
    for record in manifest.split_records("train"):
        counts[record.slice_class] += 1
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    present = weights > 0
    if present.any():
        weights[present] *= present.sum() / weights[present].sum()
    weights[~present] = 1.0
    return tuple(float(w) for w in weights)


def init_train_state(model: AdaSamModel, manifest: DatasetManifest, config: TrainConfig) -> TrainState:
    labeled = frozenset(select_labeled(manifest, config.label_budget, config.seed))
    alpha = config.alpha or inverse_frequency_alpha(manifest, model.config.n_classes)
    head = set(model.cls_head.parameters())
    rest = [p for p in model.parameters() if p.requires_grad and p not in head]
    groups = [
        {"params": rest, "lr": config.lr},
        # the linear head rides a larger rate (it must localize fast enough to
        # hand usable prompts to the segmentation branch within a few epochs)
        # and carries weight decay: once the classes separate, the focal loss
        # goes silent and only decay prunes the evidence directions the
        # decision never needed, which is what keeps activation maps tight
        {
            "params": list(head),
            "lr": config.lr * config.head_lr_scale,
            "weight_decay": config.head_weight_decay,
        },
    ]
    return TrainState(
        labeled_ids=labeled,
        focal=FocalParams(alpha=alpha, gamma=config.gamma_focus),
        weights=LossWeights(lambda_seg=config.lambda_seg),
        optimizer=torch.optim.Adam(groups),
        jitter_rng=np.random.default_rng([config.seed, 777]),
    )


def _box_area(box) -> int:
    return (box.x_max - box.x_min) * (box.y_max - box.y_min)


def _jitter_box(box: BBoxPrompt, rng: np.random.Generator, amount: int, size: int) -> BBoxPrompt:
    """Expand each box side by an independent random offset (training-time
    augmentation). The decoder then also sees crops whose margins hold empty
    anatomy zones, which is what loose self-prompted boxes look like at
    inference."""
    if amount <= 0:
        return box
    grow = rng.integers(0, amount + 1, size=4)
    return BBoxPrompt(
        x_min=max(0, box.x_min - int(grow[0])),
        y_min=max(0, box.y_min - int(grow[1])),
        x_max=min(size, box.x_max + int(grow[2])),
        y_max=min(size, box.y_max + int(grow[3])),
    )


def _prompt_boxes_for_labeled(model, batch, state, config):
    """Boxes for the labeled slices of a batch, regenerated from the current
    weights (or the cache when enabled). A slice falls back to its oracle
    ground-truth box when the classifier currently predicts class 0, the map
    thresholds empty, or the self-prompted box is bloated beyond box_gate
    times the oracle area; cold prompts would otherwise stall or mislead the
    segmentation branch early in training."""
    labeled_rows = [i for i, sid in enumerate(batch["ids"]) if sid in state.labeled_ids]
    if not labeled_rows:
        return [], []
    rows, boxes = [], []
    need_cam_rows = []
    for i in labeled_rows:
        sid = batch["ids"][i]
        if config.cache_prompts and sid in state.prompt_cache:
            cached = state.prompt_cache[sid]
            if cached is not None:
                rows.append(i)
                boxes.append(cached)
            continue
        need_cam_rows.append(i)

    if need_cam_rows:
        images = batch["images"][need_cam_rows]
        with torch.no_grad():
            probs = model.classify(model.encode_image(images))
        predicted = probs.argmax(dim=1)
        cams = cam_batch(model, images, predicted)
        for j, i in enumerate(need_cam_rows):
            sid = batch["ids"][i]
            oracle = mask_to_bbox(batch["masks"][i].numpy(), config.pad)
            box = None
            if int(predicted[j]) != 0:
                active = dominant_components(threshold_cam(cams[j], config.tau))
                box = cam_to_bbox(active, config.pad)
            if box is not None and oracle is not None:
                if _box_area(box) > config.box_gate * _box_area(oracle):
                    box = None
            if box is None and oracle is not None:
                box = oracle
                state.fallback_prompts += 1
            if config.cache_prompts:
                state.prompt_cache[sid] = box
            if box is not None:
                box = _jitter_box(box, state.jitter_rng, config.box_jitter, model.config.image_size)
                rows.append(i)
                boxes.append(box)
    return rows, boxes


def train_step(model: AdaSamModel, batch: dict, state: TrainState, config: TrainConfig) -> TrainState:
    """One optimizer step on the multitask objective.

    Every slice contributes the focal classification term; slices in the
    labeled set that have a prompt also contribute dice on the decoded mask.
    Both flow through the shared encoder adapters, so segmentation gradients
    reshape the features the classifier reads.
    """
    model.train()
    passes = 2 if config.two_pass else 1
    for _ in range(passes):
        rows, boxes = ([], [])
        if state.seg_enabled:
            rows, boxes = _prompt_boxes_for_labeled(model, batch, state, config)

        features = model.encode_image(batch["images"])
        probs = model.classify(features)
        cls_loss = focal_loss(probs, batch["classes"], state.focal)

        seg_loss = None
        if rows:
            coords = torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float32)
            prompts = model.encode_prompt(coords)
            logits = model.decode_mask(features[rows], prompts)
            pred = torch.softmax(logits, dim=1)
            # supervise inside the prompted region only: the box defines the
            # region of interest, and inference discards anything outside it
            terms = []
            for j, box in enumerate(boxes):
                crop = (slice(box.y_min, box.y_max), slice(box.x_min, box.x_max))
                gt = batch["masks"][rows[j]][crop]
                terms.append(dice_loss(pred[j][(slice(None),) + crop], gt))
            seg_loss = torch.stack(terms).mean()

        total = mtl_loss(cls_loss, seg_loss, state.weights)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {state.step}: cls={float(cls_loss.detach())}, "
                f"seg={None if seg_loss is None else float(seg_loss.detach())}"
            )

        state.optimizer.zero_grad()
        total.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad], config.grad_clip
            )
        state.optimizer.step()

        with torch.no_grad():
            accuracy = float((probs.argmax(dim=1) == batch["classes"]).float().mean())
        state.accuracy_log.append(accuracy)
        state.step += 1
        state.update_running(
            {
                "cls": float(cls_loss.detach()),
                "seg": float(seg_loss.detach()) if seg_loss is not None else 0.0,
                "total": float(total.detach()),
            }
        )
    return state


def _augment_in_place(
    images: torch.Tensor, masks: torch.Tensor, rows: range, rng: np.random.Generator, max_shift: int
) -> None:
    """Vertical flips and small translations for replayed labeled slices.
    Horizontal flips are excluded: they would swap the muscles' sides."""
    for i in rows:
        if rng.random() < 0.5:
            images[i] = torch.flip(images[i], dims=(-2,))
            masks[i] = torch.flip(masks[i], dims=(-2,))
        dy = int(rng.integers(-max_shift, max_shift + 1))
        dx = int(rng.integers(-max_shift, max_shift + 1))
        if dy or dx:
            images[i] = torch.roll(images[i], shifts=(dy, dx), dims=(-2, -1))
            masks[i] = torch.roll(masks[i], shifts=(dy, dx), dims=(-2, -1))


def _val_class_accuracy(model: AdaSamModel, data: dict) -> float | None:
    if not data["ids"]:
        return None
    model.eval()
    with torch.no_grad():
        probs = model.classify(model.encode_image(data["images"]))
    return float((probs.argmax(dim=1) == data["classes"]).float().mean())


def _load_split_tensors(manifest: DatasetManifest, split: str) -> dict:
    records = manifest.split_records(split)
    images = torch.stack(
        [torch.from_numpy(load_image(manifest.image_path(r))).unsqueeze(0) for r in records]
    ) if records else torch.zeros(0, 1, manifest.config.image_size, manifest.config.image_size)
    masks = torch.stack(
        [torch.from_numpy(load_mask(manifest.mask_path(r)).astype(np.int64)) for r in records]
    ) if records else torch.zeros(0, manifest.config.image_size, manifest.config.image_size, dtype=torch.long)
    classes = torch.tensor([r.slice_class for r in records], dtype=torch.long)
    return {
        "ids": [r.id for r in records],
        "images": images,
        "masks": masks,
        "classes": classes,
    }


def fit(
    model: AdaSamModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: Path | str,
) -> dict:
    """Train for config.epochs over the shuffled train split, evaluating val
    DSC each epoch; saves the best-val checkpoint plus a JSON report with the
    loss curves, accuracy drift, and the selected labeled slices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 12345])

    data = _load_split_tensors(manifest, "train")
    n = len(data["ids"])
    state = init_train_state(model, manifest, config)
    val_data = _load_split_tensors(manifest, "val")
    has_val = len(val_data["ids"]) > 0

    # two-stream batches: a shuffled pass over the whole split plus a few
    # replayed labeled slices per batch, so tiny budgets still give the
    # segmentation branch a steady gradient stream
    labeled_rows = [i for i, sid in enumerate(data["ids"]) if sid in state.labeled_ids]
    replay = min(config.batch_size // 2, len(labeled_rows))
    stream_size = max(1, config.batch_size - replay)

    epochs = []
    best_val = -math.inf
    best_epoch = -1
    ckpt_dir = out_dir / BEST_CHECKPOINT
    for epoch in range(config.epochs):
        state.seg_enabled = epoch >= config.seg_warmup_epochs
        order = shuffle_rng.permutation(n)
        sums = {"cls": 0.0, "seg": 0.0, "total": 0.0}
        seg_batches = 0
        n_batches = 0
        epoch_acc = []
        for start in range(0, n, stream_size):
            rows = [int(i) for i in order[start : start + stream_size]]
            n_stream = len(rows)
            if replay:
                extra = shuffle_rng.choice(len(labeled_rows), size=replay, replace=True)
                rows.extend(labeled_rows[int(i)] for i in extra)
            batch = {
                "ids": [data["ids"][i] for i in rows],
                "images": data["images"][rows],
                "masks": data["masks"][rows],
                "classes": data["classes"][rows],
            }
            aug_from = 0 if config.augment_stream else n_stream
            if config.augment_replay:
                _augment_in_place(
                    batch["images"], batch["masks"],
                    range(aug_from, len(rows)), shuffle_rng, config.max_shift,
                )
            state = train_step(model, batch, state, config)
            sums["cls"] += state.last["cls"]
            sums["total"] += state.last["total"]
            if state.last["seg"] > 0.0:
                sums["seg"] += state.last["seg"]
                seg_batches += 1
            n_batches += 1
            epoch_acc.append(state.accuracy_log[-1])

        entry = {
            "epoch": epoch,
            "cls_loss": sums["cls"] / max(n_batches, 1),
            "seg_loss": sums["seg"] / max(seg_batches, 1) if seg_batches else None,
            "total_loss": sums["total"] / max(n_batches, 1),
            "train_cls_accuracy": float(np.mean(epoch_acc)) if epoch_acc else None,
            "prompt_fallbacks": state.fallback_prompts,
        }
        if has_val:
            val = evaluate_split(model, manifest, "val", tau=config.tau, pad=config.pad)
            entry["val_dsc"] = val.overall["mean"]
            entry["val_cls_accuracy"] = _val_class_accuracy(model, val_data)
        else:
            entry["val_dsc"] = None
            entry["val_cls_accuracy"] = None
        epochs.append(entry)

        # model selection: val DSC when the segmentation branch trains; with
        # budget 0 the decoder stays random and val DSC is noise, so the
        # classification-only regime selects on val class accuracy instead
        if not state.labeled_ids:
            score = entry["val_cls_accuracy"]
        else:
            score = entry["val_dsc"]
        if score is None:
            score = -entry["total_loss"]
        if score >= best_val or best_epoch < 0:
            best_val = score
            best_epoch = epoch
            save_checkpoint(model, ckpt_dir)

    report = {
        "config": asdict(config),
        "model_config": asdict(model.config),
        "selected_labeled": sorted(state.labeled_ids),
        "epochs": epochs,
        "best_epoch": best_epoch,
        "best_val_dsc": epochs[best_epoch]["val_dsc"] if epochs else None,
        "steps": state.step,
        "checkpoint": str(ckpt_dir),
    }
    (out_dir / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
