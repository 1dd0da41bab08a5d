"""Synthetic two-muscle thigh phantoms: slice generation, manifest, on-disk layout.

Each slice is a grayscale image with up to two elliptical muscle blobs on a
darker background: VL (label 1) on the left half, VM (label 2, smaller) on the
right half. The two never overlap by construction. Generation is pure in
(seed, index), so datasets rebuild bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

LABEL_BACKGROUND = 0
LABEL_VL = 1
LABEL_VM = 2
FOREGROUND_LABELS = (LABEL_VL, LABEL_VM)
LABEL_NAMES = {LABEL_VL: "vl", LABEL_VM: "vm"}

# slice classes: 0 = neither muscle, 1 = VL only, 2 = VM only, 3 = both
N_SLICE_CLASSES = 4

# base intensities; distinct levels so the zero-noise image is piecewise
# constant with level sets equal to the mask regions
_BG_LEVEL = 0.25
_VL_LEVEL = 0.60
_VM_LEVEL = 0.85

SPLITS = ("train", "val", "test")


@dataclass
class PhantomConfig:
    """Knobs for dataset generation. Split sizes default to a 15/1/5 ratio.

    `clutter` adds unlabeled muscle-intensity streaks to the top and bottom
    image bands (harder prompting regime); like the pixel noise it only
    applies when noise_sigma > 0, keeping the zero-noise phantom piecewise
    constant."""

    image_size: int = 256
    n_train: int = 150
    n_val: int = 10
    n_test: int = 50
    noise_sigma: float = 0.03
    class_mix: tuple[float, float, float, float] = (0.1, 0.3, 0.3, 0.3)
    clutter: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.class_mix = tuple(float(p) for p in self.class_mix)
        if len(self.class_mix) != N_SLICE_CLASSES:
            raise ValueError("class_mix needs one fraction per slice class")
        if any(p < 0 for p in self.class_mix):
            raise ValueError("class_mix fractions must be >= 0")
        if abs(sum(self.class_mix) - 1.0) > 1e-6:
            raise ValueError(f"class_mix must sum to 1, got {sum(self.class_mix)}")
        if not 0.0 <= self.noise_sigma <= 1.0:
            raise ValueError("noise_sigma must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test


def _slice_rng(config: PhantomConfig, index: int) -> np.random.Generator:
    # stream 1 is reserved for slice content, stream 0 for the split shuffle
    return np.random.default_rng([config.seed, 1, index])


def _ellipse(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    x = xx + 0.5 - cx
    y = yy + 0.5 - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / a
    v = (-x * st + y * ct) / b
    return (u * u + v * v) <= 1.0


def _draw_vl(rng: np.random.Generator, size: int) -> np.ndarray:
    cx = rng.uniform(0.20, 0.32) * size
    cy = rng.uniform(0.40, 0.60) * size
    a = rng.uniform(0.10, 0.155) * size
    b = rng.uniform(0.10, 0.155) * size
    theta = rng.uniform(-0.5, 0.5)
    return _ellipse(size, cx, cy, a, b, theta)


def _draw_vm(rng: np.random.Generator, size: int) -> np.ndarray:
    cx = rng.uniform(0.66, 0.78) * size
    cy = rng.uniform(0.40, 0.60) * size
    a = rng.uniform(0.075, 0.125) * size
    b = rng.uniform(0.075, 0.125) * size
    theta = rng.uniform(-0.5, 0.5)
    return _ellipse(size, cx, cy, a, b, theta)


def _draw_distractors(rng: np.random.Generator, size: int) -> list[tuple[np.ndarray, float]]:
    """Unlabeled clutter at muscle intensities: thin bright streaks hugging
    the top and bottom image edges, well clear of the muscle bands. Their
    pixel intensity matches the muscles exactly; only shape and location tell
    them apart, which is what makes an unprompted segmenter mislabel them."""
    streaks = []
    for _ in range(int(rng.integers(1, 4))):
        band_lo, band_hi = (0.05, 0.09) if rng.random() < 0.5 else (0.91, 0.95)
        cx = rng.uniform(0.15, 0.85) * size
        cy = rng.uniform(band_lo, band_hi) * size
        a = rng.uniform(0.10, 0.18) * size
        b = rng.uniform(0.012, 0.02) * size
        theta = rng.uniform(-0.3, 0.3)
        level = _VL_LEVEL if rng.random() < 0.5 else _VM_LEVEL
        streaks.append((_ellipse(size, cx, cy, a, b, theta), level))
    return streaks


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Mild low-frequency intensity modulation (a few random sinusoids)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out / 3.0


def generate_phantom_slice(config: PhantomConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render slice `index` as (image float32 in [0,1], mask uint8 in {0,1,2}).

    Deterministic for a fixed (config.seed, index). With noise_sigma == 0 the
    image is exactly piecewise constant over the mask regions.
    """
    if not 0 <= index < config.total:
        raise IndexError(f"slice index {index} outside [0, {config.total})")
    rng = _slice_rng(config, index)
    size = config.image_size

    slice_class = int(rng.choice(N_SLICE_CLASSES, p=config.class_mix))
    mask = np.zeros((size, size), dtype=np.uint8)
    if slice_class in (1, 3):
        mask[_draw_vl(rng, size)] = LABEL_VL
    if slice_class in (2, 3):
        mask[_draw_vm(rng, size)] = LABEL_VM

    levels = np.array([_BG_LEVEL, _VL_LEVEL, _VM_LEVEL], dtype=np.float64)
    image = levels[mask]
    if config.noise_sigma > 0:
        if config.clutter:
            for blob, level in _draw_distractors(rng, size):
                image[blob] = level
        image = image + 0.5 * config.noise_sigma * _texture(rng, size)
        image = image + rng.normal(0.0, config.noise_sigma, size=(size, size))
        image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask


def derive_slice_class(mask: np.ndarray) -> int:
    """Slice class from muscle presence: 0 neither, 1 VL only, 2 VM only, 3 both."""
    extra = set(np.unique(mask)) - {LABEL_BACKGROUND, LABEL_VL, LABEL_VM}
    if extra:
        raise ValueError(f"mask contains labels outside {{0,1,2}}: {sorted(extra)}")
    has_vl = bool((mask == LABEL_VL).any())
    has_vm = bool((mask == LABEL_VM).any())
    return (1 if has_vl else 0) + (2 if has_vm else 0)


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_mask(path: Path | str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


def save_image(image: np.ndarray, path: Path | str) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return arr / 255.0


@dataclass
class ManifestRecord:
    id: str
    image: str
    mask: str
    slice_class: int
    split: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "mask": self.mask,
            "class": self.slice_class,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        return cls(
            id=d["id"],
            image=d["image"],
            mask=d["mask"],
            slice_class=int(d["class"]),
            split=d["split"],
        )


@dataclass
class DatasetManifest:
    version: int
    config: PhantomConfig
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest record ids must be unique")
        bad = {r.split for r in self.records} - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags: {sorted(bad)}")

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.image

    def mask_path(self, record: ManifestRecord) -> Path:
        return self.root / record.mask

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "version": self.version,
            "tool": {"name": "adasam", "version": __version__},
            "config": asdict(self.config),
            "records": [r.to_dict() for r in self.records],
        }

    def save(self, path: Path | str | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        data = json.loads(path.read_text())
        cfg = data["config"]
        cfg["class_mix"] = tuple(cfg["class_mix"])
        manifest = cls(
            version=int(data["version"]),
            config=PhantomConfig(**cfg),
            records=[ManifestRecord.from_dict(r) for r in data["records"]],
            root=path.parent,
        )
        for record in manifest.records:
            for p in (manifest.image_path(record), manifest.mask_path(record)):
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file: {p}")
        return manifest


def build_dataset(config: PhantomConfig, out_dir: Path | str) -> DatasetManifest:
    """Generate all slices, write PNGs + manifest under out_dir.

    Split assignment takes contiguous blocks of a seeded index shuffle, so no
    slice leaks across splits and rebuilds are byte-identical.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out_dir}: {exc}") from exc

    order = np.random.default_rng([config.seed, 0]).permutation(config.total)
    splits = (
        ["train"] * config.n_train + ["val"] * config.n_val + ["test"] * config.n_test
    )

    records = []
    for position, index in enumerate(order):
        index = int(index)
        image, mask = generate_phantom_slice(config, index)
        slice_id = f"slice_{index:05d}"
        image_rel = f"images/{slice_id}.png"
        mask_rel = f"masks/{slice_id}.png"
        try:
            save_image(image, out_dir / image_rel)
            save_mask(mask, out_dir / mask_rel)
        except OSError as exc:
            raise OSError(f"failed writing slice {slice_id} under {out_dir}: {exc}") from exc
        records.append(
            ManifestRecord(
                id=slice_id,
                image=image_rel,
                mask=mask_rel,
                slice_class=derive_slice_class(mask),
                split=splits[position],
            )
        )

    records.sort(key=lambda r: r.id)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION, config=config, records=records, root=out_dir
    )
    manifest.save()
    return manifest
