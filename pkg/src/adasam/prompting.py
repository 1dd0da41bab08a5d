"""Self-prompting: classification evidence maps, thresholding, and the
bounding boxes handed to the segmentation branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

DEFAULT_TAU = 0.5
DEFAULT_PAD = 4
COMPONENT_MIN_FRACTION = 0.25


@dataclass(frozen=True)
class BBoxPrompt:
    """Half-open pixel box [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box coordinates must be >= 0: {self}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box: {self}")

    def validate_bounds(self, width: int, height: int) -> None:
        if self.x_max > width or self.y_max > height:
            raise ValueError(f"box {self} exceeds image bounds {width}x{height}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def full_image(cls, width: int, height: int) -> "BBoxPrompt":
        return cls(0, 0, width, height)


def _check_tau(tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return float(tau)


def _cam_from_feature_grads(features: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Weighted feature sum with spatially averaged gradients, ReLU'd. Input
    and output are (B, d, h, w) / (B, h, w)."""
    weights = grads.mean(dim=(2, 3), keepdim=True)
    return F.relu((weights * features).sum(dim=1))


def _normalize_cam(cam: torch.Tensor, out_size: int) -> np.ndarray:
    cam = F.interpolate(
        cam.unsqueeze(0).unsqueeze(0), size=(out_size, out_size),
        mode="bilinear", align_corners=False,
    )[0, 0]
    lo = float(cam.min())
    hi = float(cam.max())
    if hi - lo <= 0.0:
        return np.zeros((out_size, out_size), dtype=np.float32)
    return ((cam - lo) / (hi - lo)).numpy().astype(np.float32)


def grad_cam(model, x, class_index: int) -> np.ndarray:
    """Activation map for `class_index`: gradients of that class logit w.r.t.
    the encoder's output feature map give per-channel weights; the ReLU'd
    weighted sum is upsampled to image resolution and min-max normalized
    (an all-zero map stays all-zero)."""
    if not 0 <= class_index < model.config.n_classes:
        raise ValueError(f"class index {class_index} out of range")
    with torch.no_grad():
        features = model.encode_image(x)
    features = features.detach().requires_grad_(True)
    logits = model.classification_logits(features)
    (grads,) = torch.autograd.grad(logits[0, class_index], features)
    with torch.no_grad():
        cam = _cam_from_feature_grads(features.detach(), grads)[0]
    return _normalize_cam(cam, model.config.image_size)


def cam_batch(model, images: torch.Tensor, classes: torch.Tensor) -> list[np.ndarray]:
    """Per-sample activation maps for a batch; one backward pass covers all
    samples because the encoder mixes nothing across the batch."""
    with torch.no_grad():
        features = model.encode_image(images)
    features = features.detach().requires_grad_(True)
    logits = model.classification_logits(features)
    picked = logits[torch.arange(len(classes)), classes].sum()
    (grads,) = torch.autograd.grad(picked, features)
    with torch.no_grad():
        cams = _cam_from_feature_grads(features.detach(), grads)
    return [_normalize_cam(cams[i], model.config.image_size) for i in range(len(classes))]


def threshold_cam(cam: np.ndarray, tau: float) -> np.ndarray:
    """Boolean map of pixels at or above tau times the map maximum; an
    identically zero map thresholds to all-inactive."""
    tau = _check_tau(tau)
    cam = np.asarray(cam)
    peak = cam.max()
    if peak <= 0.0:
        return np.zeros_like(cam, dtype=bool)
    return cam >= tau * peak


def cam_to_bbox(binary: np.ndarray, pad: int = DEFAULT_PAD) -> BBoxPrompt | None:
    """Tight half-open box over the active pixels, expanded by `pad` and
    clipped to the map bounds; None when no pixel is active."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    ys, xs = np.nonzero(binary)
    if len(ys) == 0:
        return None
    h, w = binary.shape
    return BBoxPrompt(
        x_min=max(0, int(xs.min()) - pad),
        y_min=max(0, int(ys.min()) - pad),
        x_max=min(w, int(xs.max()) + 1 + pad),
        y_max=min(h, int(ys.max()) + 1 + pad),
    )


def dominant_components(binary: np.ndarray, min_fraction: float = COMPONENT_MIN_FRACTION) -> np.ndarray:
    """Keep the largest connected component of an activation mask plus every
    component at least `min_fraction` of its size; smaller specks are
    threshold noise, not salient structure."""
    labels, count = ndimage.label(binary)
    if count == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.flatnonzero(sizes >= min_fraction * sizes.max()) + 1
    return np.isin(labels, keep)


def generate_prompt(
    model, x, tau: float = DEFAULT_TAU, pad: int = DEFAULT_PAD
) -> tuple[BBoxPrompt | None, int]:
    """Classify the slice, then derive a box from the predicted class's
    activation map: threshold at tau, drop speck components, box the rest.
    A class-0 prediction (no muscle) or an empty thresholded map yields no
    prompt."""
    tau = _check_tau(tau)
    with torch.no_grad():
        features = model.encode_image(x)
    predicted = int(model.classify(features)[0].argmax())
    if predicted == 0:
        return None, 0
    cam = grad_cam(model, x, predicted)
    box = cam_to_bbox(dominant_components(threshold_cam(cam, tau)), pad)
    return box, predicted


def mask_to_bbox(mask: np.ndarray, pad: int = DEFAULT_PAD) -> BBoxPrompt | None:
    """Tight box over all foreground labels of a label mask (oracle prompt)."""
    return cam_to_bbox(np.asarray(mask) > 0, pad)
