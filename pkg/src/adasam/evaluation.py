"""Dice metrics and split-level evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .phantom import FOREGROUND_LABELS, LABEL_NAMES, DatasetManifest, load_image, load_mask
from .prompting import DEFAULT_PAD, DEFAULT_TAU, BBoxPrompt, generate_prompt

PROMPT_MODES = ("auto", "full_box")


def dsc(pred: np.ndarray, gt: np.ndarray, label: int) -> float:
    """Dice similarity 2|P.G| / (|P| + |G|) for one label; 1.0 when both sides
    are empty, 0.0 when exactly one is."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred == label
    g = gt == label
    p_count = int(p.sum())
    g_count = int(g.sum())
    if p_count == 0 and g_count == 0:
        return 1.0
    if p_count == 0 or g_count == 0:
        return 0.0
    return 2.0 * float(np.logical_and(p, g).sum()) / (p_count + g_count)


def restrict_to_box(mask: np.ndarray, box: BBoxPrompt) -> np.ndarray:
    """Zero out predictions outside the prompt's region of interest."""
    out = np.zeros_like(mask)
    out[box.y_min : box.y_max, box.x_min : box.x_max] = mask[
        box.y_min : box.y_max, box.x_min : box.x_max
    ]
    return out


# which mask labels a slice-class prompt vouches for
CLASS_LABELS = {1: (1,), 2: (2,), 3: (1, 2)}


def restrict_to_class(mask: np.ndarray, predicted_class: int) -> np.ndarray:
    """Make the decoded mask consistent with the class that generated the
    prompt: for a single-muscle class the classifier names the label and the
    decoder contributes the extent, so any foreground inside the ROI carries
    that label; for class 3 the decoder's own label choice stands."""
    if predicted_class in (1, 2):
        return np.where(mask > 0, predicted_class, 0).astype(mask.dtype)
    allowed = CLASS_LABELS.get(predicted_class, ())
    out = mask.copy()
    out[~np.isin(mask, (0,) + tuple(allowed))] = 0
    return out


def predict_mask(
    model,
    image: np.ndarray,
    tau: float = DEFAULT_TAU,
    pad: int = DEFAULT_PAD,
    prompt_mode: str = "auto",
) -> tuple[np.ndarray, BBoxPrompt | None, int]:
    """Full inference for one slice: prompt, decode, argmax, restrict the
    predicted foreground to the prompt box. Returns (mask, box, class).

    In "auto" mode a class-0 prediction yields an empty mask; "full_box"
    always decodes with the whole image as the prompt.
    """
    if prompt_mode not in PROMPT_MODES:
        raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
    size = model.config.image_size
    if prompt_mode == "full_box":
        box = BBoxPrompt.full_image(size, size)
        with torch.no_grad():
            predicted = int(model.classify(model.encode_image(image))[0].argmax())
    else:
        box, predicted = generate_prompt(model, image, tau=tau, pad=pad)
        if box is None:
            return np.zeros((size, size), dtype=np.uint8), None, predicted
    with torch.no_grad():
        features = model.encode_image(image)
        prompt = model.encode_prompt(box)
        logits = model.decode_mask(features, prompt)
        mask = logits[0].argmax(dim=0).numpy().astype(np.uint8)
    mask = restrict_to_box(mask, box)
    if prompt_mode == "auto":
        mask = restrict_to_class(mask, predicted)
    return mask, box, predicted


@dataclass
class DscReport:
    split: str
    prompt_mode: str
    tau: float
    pad: int
    per_label: dict[int, dict[str, float]]
    overall: dict[str, float]
    per_slice: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "prompt_mode": self.prompt_mode,
            "tau": self.tau,
            "pad": self.pad,
            "per_label": {str(k): v for k, v in self.per_label.items()},
            "overall": self.overall,
            "per_slice": self.per_slice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DscReport":
        return cls(
            split=d["split"],
            prompt_mode=d["prompt_mode"],
            tau=d["tau"],
            pad=d["pad"],
            per_label={int(k): v for k, v in d["per_label"].items()},
            overall=d["overall"],
            per_slice=d["per_slice"],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "DscReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _stats(values: list[float]) -> dict[str, float]:
    if not values:
        return {"mean": float("nan"), "stdev": float("nan"), "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "stdev": float(arr.std()), "n": len(values)}


def evaluate_split(
    model,
    manifest: DatasetManifest,
    split: str,
    tau: float = DEFAULT_TAU,
    pad: int = DEFAULT_PAD,
    prompt_mode: str = "auto",
) -> DscReport:
    """Run the prompt+decode pipeline over a split and aggregate DSC.

    A label contributes a per-slice value whenever it appears in the ground
    truth or in the prediction; "overall" is the unweighted mean of those
    per-slice per-label values, all of which are kept in per_slice so any
    other aggregation can be recomputed.
    """
    model.eval()
    per_label_values: dict[int, list[float]] = {label: [] for label in FOREGROUND_LABELS}
    pooled: list[float] = []
    rows = []
    for record in manifest.split_records(split):
        image = load_image(manifest.image_path(record))
        gt = load_mask(manifest.mask_path(record))
        pred, box, predicted_class = predict_mask(
            model, image, tau=tau, pad=pad, prompt_mode=prompt_mode
        )
        row = {
            "id": record.id,
            "gt_class": record.slice_class,
            "predicted_class": predicted_class,
            "box": list(box.as_tuple()) if box is not None else None,
            "dsc": {},
        }
        for label in FOREGROUND_LABELS:
            in_gt = bool((gt == label).any())
            in_pred = bool((pred == label).any())
            if not in_gt and not in_pred:
                continue
            value = dsc(pred, gt, label)
            row["dsc"][LABEL_NAMES[label]] = value
            per_label_values[label].append(value)
            pooled.append(value)
        rows.append(row)
    return DscReport(
        split=split,
        prompt_mode=prompt_mode,
        tau=tau,
        pad=pad,
        per_label={label: _stats(per_label_values[label]) for label in FOREGROUND_LABELS},
        overall=_stats(pooled),
        per_slice=rows,
    )
