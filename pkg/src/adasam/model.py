"""The promptable segmentation network: frozen ViT trunk with LoRA-adapted
attention, classification head, box prompt encoder, and a two-way
cross-attention mask decoder with a transposed-convolution upsampler.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .lora import LoraLinear
from .lora import merge_lora as _merge_lora_inplace

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    heads: int = 6
    n_classes: int = 4
    n_labels: int = 3
    lora_rank: int = 8
    lora_alpha: float | None = None
    decoder_dim: int | None = None
    decoder_heads: int = 4
    background_bias: float = -0.5
    locality: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.lora_alpha is None:
            self.lora_alpha = 2.0 * self.lora_rank
        if self.decoder_dim is None:
            self.decoder_dim = max(32, self.embed_dim // 2)
        if self.decoder_dim % 4 != 0:
            raise ValueError("decoder_dim must be divisible by 4 (sincos encoding)")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError("decoder_dim must be divisible by decoder_heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


def sincos_encode(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed multiscale sin/cos encoding of (..., 2) normalized xy coordinates."""
    if dim % 4 != 0:
        raise ValueError("encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = 2.0 ** torch.arange(quarter, dtype=coords.dtype, device=coords.device)
    angles = 2.0 * math.pi * coords.unsqueeze(-1) * freqs  # (..., 2, quarter)
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., 2, dim/2)
    return enc.flatten(-2)


def grid_position_encoding(grid: int, dim: int) -> torch.Tensor:
    """(grid*grid, dim) encoding of patch centers in normalized image coords."""
    centers = (torch.arange(grid, dtype=torch.float32) + 0.5) / grid
    ys, xs = torch.meshgrid(centers, centers, indexing="ij")
    coords = torch.stack([xs, ys], dim=-1).reshape(-1, 2)
    return sincos_encode(coords, dim)


class SelfAttention(nn.Module):
    """Multi-head self-attention with separate q/k/v projections so adapters
    can wrap q and v individually. An optional additive bias (applied to the
    attention logits) lets the encoder impose a locality prior."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) * self.scale
        if bias is not None:
            logits = logits + bias
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), bias)
        x = x + self.mlp(self.norm2(x))
        return x


def locality_bias(grid: int, strength: float) -> torch.Tensor:
    """(grid^2, grid^2) additive attention bias penalizing token distance.

    The trunk is frozen at random init, where unbiased attention mixes every
    token toward a global summary; the classifier then reads class evidence
    out of that summary from any token and gradient-based saliency goes flat.
    A distance penalty keeps information flow local, so class evidence stays
    where the structure actually is and activation maps can localize it."""
    coords = torch.stack(
        torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij"), dim=-1
    ).reshape(-1, 2).float()
    dist = torch.cdist(coords, coords, p=2.0)
    return -strength * dist


class ImageEncoder(nn.Module):
    """Patch-embedding ViT with locality-biased attention, producing a
    (B, d, h, w) feature map."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.grid = config.grid
        self.patch_embed = nn.Conv2d(
            1, config.embed_dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(
            torch.randn(1, self.grid * self.grid, config.embed_dim) * 0.02
        )
        self.register_buffer(
            "attn_bias",
            locality_bias(self.grid, config.locality) if config.locality > 0 else None,
            persistent=False,
        )
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.heads) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, hw, d)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens, self.attn_bias)
        tokens = self.norm(tokens)
        b, n, d = tokens.shape
        return tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)


class BoxPromptEncoder(nn.Module):
    """Encodes a pixel box as two corner tokens: fixed sinusoidal position
    encoding of the normalized corner plus a learned corner-type embedding."""

    def __init__(self, dim: int, image_size: int):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.corner_embed = nn.Embedding(2, dim)

    def forward(self, boxes: torch.Tensor) -> torch.Tensor:
        if boxes.dim() == 1:
            boxes = boxes.unsqueeze(0)
        if boxes.shape[-1] != 4:
            raise ValueError("boxes must have 4 coordinates (x_min, y_min, x_max, y_max)")
        s = float(self.image_size)
        x_min, y_min, x_max, y_max = boxes.unbind(-1)
        if (x_min < 0).any() or (y_min < 0).any() or (x_max > s).any() or (y_max > s).any():
            raise ValueError("box outside image bounds")
        if (x_min >= x_max).any() or (y_min >= y_max).any():
            raise ValueError("degenerate box: need x_min < x_max and y_min < y_max")
        corners = torch.stack(
            [torch.stack([x_min, y_min], dim=-1), torch.stack([x_max, y_max], dim=-1)], dim=1
        )
        enc = sincos_encode(corners.float() / s, self.dim)
        return enc + self.corner_embed.weight.unsqueeze(0)


class TwoWayBlock(nn.Module):
    """Prompt tokens attend to image tokens and vice versa, each followed by
    a small MLP. Image tokens carry a fixed grid position encoding."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.prompt_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_p1 = nn.LayerNorm(dim)
        self.prompt_mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )
        self.norm_p2 = nn.LayerNorm(dim)
        self.image_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_i1 = nn.LayerNorm(dim)
        self.image_mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )
        self.norm_i2 = nn.LayerNorm(dim)

    def forward(
        self, prompts: torch.Tensor, tokens: torch.Tensor, token_pe: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attended, _ = self.prompt_attn(prompts, tokens + token_pe, tokens, need_weights=False)
        prompts = self.norm_p1(prompts + attended)
        prompts = self.norm_p2(prompts + self.prompt_mlp(prompts))
        attended, _ = self.image_attn(tokens + token_pe, prompts, prompts, need_weights=False)
        tokens = self.norm_i1(tokens + attended)
        tokens = self.norm_i2(tokens + self.image_mlp(tokens))
        return prompts, tokens


class MaskDecoder(nn.Module):
    """Two-way cross-attention between prompt and feature tokens, then a
    transposed-convolution upsampler back to pixel resolution.

    The upsampler also reads a linear skip of the raw encoder tokens with
    patch_size^2 channels, so per-pixel detail inside each patch does not have
    to squeeze through the attention width.
    """

    UP_CHANNELS = 8

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.decoder_dim
        patch_area = config.patch_size * config.patch_size
        self.proj = nn.Linear(config.embed_dim, dim)
        self.blocks = nn.ModuleList(
            TwoWayBlock(dim, config.decoder_heads) for _ in range(2)
        )
        self.norm = nn.LayerNorm(dim)
        self.skip = nn.Linear(config.embed_dim, patch_area)
        self.register_buffer("token_pe", grid_position_encoding(config.grid, dim), persistent=False)
        head = nn.Conv2d(self.UP_CHANNELS, config.n_labels, kernel_size=1)
        # box-object prior: before any training, a prompted region leans
        # foreground ("the box contains the object"); the bias is trainable,
        # so supervision replaces the prior with evidence
        with torch.no_grad():
            head.bias[0] = config.background_bias
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(
                dim + patch_area, self.UP_CHANNELS,
                kernel_size=config.patch_size, stride=config.patch_size,
            ),
            nn.GELU(),
            nn.Conv2d(self.UP_CHANNELS, self.UP_CHANNELS, kernel_size=3, padding=1),
            nn.GELU(),
            head,
        )
        self.grid = config.grid

    def forward(self, features: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        b, d, h, w = features.shape
        raw = features.flatten(2).transpose(1, 2)  # (B, hw, embed)
        tokens = self.proj(raw)
        pe = self.token_pe.unsqueeze(0).to(tokens.dtype)
        for block in self.blocks:
            prompts, tokens = block(prompts, tokens, pe)
        mixed = torch.cat([self.norm(tokens), self.skip(raw)], dim=-1)
        spatial = mixed.transpose(1, 2).reshape(b, -1, h, w)
        return self.upsample(spatial)


def as_image_batch(x, image_size: int | None = None) -> torch.Tensor:
    """Coerce an image (numpy (H,W), tensor (H,W)/(1,H,W)/(B,1,H,W)) to a
    float32 (B,1,H,W) batch."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    x = x.float()
    if x.dim() == 2:
        x = x.unsqueeze(0).unsqueeze(0)
    elif x.dim() == 3:
        x = x.unsqueeze(1) if x.shape[0] != 1 else x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected a grayscale image batch, got shape {tuple(x.shape)}")
    if image_size is not None and x.shape[-2:] != (image_size, image_size):
        raise ValueError(
            f"image shape {tuple(x.shape[-2:])} does not match configured size {image_size}"
        )
    return x


class AdaSamModel(nn.Module):
    """Shared encoder + classification head + prompt encoder + mask decoder.

    The encoder trunk is frozen after seeded random init; only LoRA adapters,
    the classifier head, the prompt encoder, and the mask decoder train.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.encoder = ImageEncoder(config)
            for p in self.encoder.parameters():
                p.requires_grad_(False)
            if config.lora_rank > 0:
                for block in self.encoder.blocks:
                    block.attn.q = LoraLinear(block.attn.q, config.lora_rank, config.lora_alpha)
                    block.attn.v = LoraLinear(block.attn.v, config.lora_rank, config.lora_alpha)
            self.cls_head = nn.Linear(config.embed_dim, config.n_classes)
            self.prompt_encoder = BoxPromptEncoder(config.decoder_dim, config.image_size)
            self.mask_decoder = MaskDecoder(config)

    def encode_image(self, x) -> torch.Tensor:
        batch = as_image_batch(x, self.config.image_size)
        return self.encoder(batch)

    def classification_logits(self, features: torch.Tensor) -> torch.Tensor:
        """Class logits from mean-pooled features, expressed relative to the
        "no muscle" class (multinomial regression with a reference category).

        The reference shift changes neither the softmax nor the argmax, but
        the gradient of class c's logit becomes the direction separating c
        from an empty slice, so activation maps highlight the class's own
        structures rather than evidence composed of other classes' absence."""
        logits = self.cls_head(features.mean(dim=(2, 3)))
        return logits - logits[..., :1]

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        """Class probabilities from a feature map; rows sum to 1. Ties in a
        downstream argmax resolve to the lowest index (torch convention)."""
        return torch.softmax(self.classification_logits(features), dim=-1)

    def encode_prompt(self, box) -> torch.Tensor:
        """Box -> (B, 2, decoder_dim) corner tokens. Accepts a BBoxPrompt-like
        object with x_min/y_min/x_max/y_max, a 4-sequence, or a (B,4) tensor."""
        if hasattr(box, "x_min"):
            box = [box.x_min, box.y_min, box.x_max, box.y_max]
        boxes = torch.as_tensor(box, dtype=torch.float32)
        return self.prompt_encoder(boxes)

    def decode_mask(self, features: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        if features.dim() == 3:
            features = features.unsqueeze(0)
        if prompt.dim() == 2:
            prompt = prompt.unsqueeze(0)
        if features.shape[0] != prompt.shape[0]:
            raise ValueError("feature batch and prompt batch differ")
        logits = self.mask_decoder(features, prompt)
        return logits

    def predict_class(self, x) -> int:
        with torch.no_grad():
            probs = self.classify(self.encode_image(x))
        return int(probs[0].argmax())


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """(total, trainable) parameter counts; frozen trunk weights count only
    toward the total."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def merge_lora(model: AdaSamModel) -> AdaSamModel:
    return _merge_lora_inplace(model)


def save_checkpoint(model: AdaSamModel, out_dir: Path | str) -> Path:
    """Write config + one raw little-endian float32 blob per tensor + an index
    mapping tensor names to shapes. Round-trips bit-exactly."""
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    config = asdict(model.config)
    config["checkpoint_version"] = CHECKPOINT_VERSION
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    index: dict[str, list[int]] = {}
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ValueError(f"checkpoint tensors must be float32, {name} is {tensor.dtype}")
        blob = tensor.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
        (tensor_dir / f"{name}.bin").write_bytes(blob)
        index[name] = list(tensor.shape)
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(ckpt_dir: Path | str) -> AdaSamModel:
    ckpt_dir = Path(ckpt_dir)
    config = json.loads((ckpt_dir / "config.json").read_text())
    config.pop("checkpoint_version", None)
    model = AdaSamModel(ModelConfig(**config))
    index = json.loads((ckpt_dir / "index.json").read_text())
    state = {}
    for name, shape in index.items():
        raw = (ckpt_dir / "tensors" / f"{name}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model
