"""Training objectives: focal classification loss, soft multi-label dice loss,
and their weighted multitask combination."""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass
class FocalParams:
    """Per-class weights and the focusing exponent of the focal loss."""

    alpha: tuple[float, ...]
    gamma: float = 2.0

    def __post_init__(self) -> None:
        self.alpha = tuple(float(a) for a in self.alpha)
        if any(a <= 0 for a in self.alpha):
            raise ValueError("focal alpha weights must be > 0")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")

    @classmethod
    def uniform(cls, n_classes: int, gamma: float = 2.0) -> "FocalParams":
        return cls(alpha=(1.0,) * n_classes, gamma=gamma)


@dataclass
class LossWeights:
    lambda_seg: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_seg < 0:
            raise ValueError("lambda_seg must be >= 0")


def focal_loss(probs: torch.Tensor, target, params: FocalParams) -> torch.Tensor:
    """-alpha_t * (1 - p_t)^gamma * log(p_t), one-hot targets.

    `probs` is a (C,) probability vector or a (B, C) batch; batched input
    returns the mean over samples. Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    single = probs.dim() == 1
    p = probs.unsqueeze(0) if single else probs
    t = torch.as_tensor(target, dtype=torch.long, device=p.device).reshape(-1)
    if t.numel() != p.shape[0]:
        raise ValueError(f"target count {t.numel()} != batch size {p.shape[0]}")
    if (t < 0).any() or (t >= p.shape[1]).any():
        raise ValueError("target class out of range")
    alpha = torch.as_tensor(params.alpha, dtype=p.dtype, device=p.device)
    if alpha.numel() != p.shape[1]:
        raise ValueError(f"alpha has {alpha.numel()} entries for {p.shape[1]} classes")

    p_t = p.gather(1, t.unsqueeze(1)).squeeze(1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = -alpha[t] * (1.0 - p_t) ** params.gamma * torch.log(p_t)
    return losses.mean()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss over foreground labels, 1 - 2*|P.G| / (|P| + |G| + eps).

    `pred` holds per-pixel label probabilities, shape (L, H, W) or (B, L, H, W)
    with channel 0 = background; `gt` is an integer label map of matching
    spatial shape. Labels with zero ground-truth pixels and exactly zero
    predicted mass are skipped; the result is the mean over the remaining
    (sample, label) terms, or 0 when nothing participates.
    """
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
        gt = gt.unsqueeze(0)
    if pred.dim() != 4 or gt.dim() != 3:
        raise ValueError("pred must be (B,L,H,W) and gt (B,H,W)")
    if pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")

    n_labels = pred.shape[1]
    terms = []
    for b in range(pred.shape[0]):
        for label in range(1, n_labels):
            y = (gt[b] == label).to(pred.dtype)
            y_hat = pred[b, label]
            gt_mass = float(y.sum())
            pred_mass = float(y_hat.detach().sum())
            if gt_mass == 0.0 and pred_mass == 0.0:
                continue
            intersection = (y_hat * y).sum()
            terms.append(1.0 - 2.0 * intersection / (y_hat.sum() + y.sum() + eps))
    if not terms:
        return pred.new_zeros(())
    return torch.stack(terms).mean()


def mtl_loss(cls_loss: torch.Tensor, seg_loss: torch.Tensor | None, weights: LossWeights) -> torch.Tensor:
    """Total objective: classification + lambda_seg * segmentation.

    The segmentation term is dropped when the slice is unlabeled or produced
    no prompt (seg_loss is None).
    """
    if seg_loss is None:
        return cls_loss
    return cls_loss + weights.lambda_seg * seg_loss
