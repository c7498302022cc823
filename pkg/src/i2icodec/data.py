"""Synthetic two-domain dataset: filled circles (domain 0) and filled squares (domain 1).

Content factors (centre, size) and style factors (hue, stripe phase) are
drawn independently; the two shapes of equal ``size`` have equal area, so
only the shape family separates the domains.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imageio import load_png, quantize_image, save_png
from .model import atomic_write

SHAPES = ("circle", "square")
SUPERSAMPLE = 4
BACKGROUND = (0.12, 0.12, 0.14)
STRIPE_PERIOD = 0.5   # fraction of the image size


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    image_size: int = 64
    n_train: int = 2000
    n_test: int = 200
    radius_range: tuple[float, float] = (0.2, 0.34)   # fraction of image size
    saturation: float = 0.75
    value: float = 0.95
    stripe_depth: float = 0.35

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.n_train < 1 or self.n_test < 1:
            raise DatasetError("sample counts must be positive")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise DatasetError(f"radius_range {self.radius_range} must satisfy 0 < lo <= hi < 0.5")

    @property
    def num_domains(self) -> int:
        return len(SHAPES)


@dataclass
class ShapeParams:
    domain: int
    cx: float      # pixels
    cy: float
    radius: float  # pixels; squares use the equal-area half side
    hue: float
    phase: float

    @property
    def half_side(self) -> float:
        return self.radius * math.sqrt(math.pi) / 2.0


@dataclass
class Split:
    images: np.ndarray          # (N, 3, S, S) float32 on the 8-bit grid
    labels: np.ndarray          # (N,) int64
    params: list[ShapeParams] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    train: Split
    test: Split


def sample_params(spec: DatasetSpec, rng: np.random.Generator, domain: int) -> ShapeParams:
    s = spec.image_size
    radius = rng.uniform(*spec.radius_range) * s
    margin = radius + 1.0
    cx, cy = rng.uniform(margin, s - margin, size=2)
    hue = rng.uniform(0.0, 1.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    return ShapeParams(int(domain), float(cx), float(cy), float(radius), float(hue), float(phase))


def shape_mask(p: ShapeParams, size: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Coverage fraction of each pixel by the shape, in [0, 1]."""
    k = supersample
    coords = (np.arange(size * k) + 0.5) / k
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    if SHAPES[p.domain] == "circle":
        inside = (xx - p.cx) ** 2 + (yy - p.cy) ** 2 <= p.radius ** 2
    else:
        a = p.half_side
        inside = (np.abs(xx - p.cx) <= a) & (np.abs(yy - p.cy) <= a)
    return inside.reshape(size, k, size, k).mean(axis=(1, 3))


def render(p: ShapeParams, spec: DatasetSpec) -> np.ndarray:
    s = spec.image_size
    mask = shape_mask(p, s)
    yy, xx = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    stripes = np.sin(2 * math.pi * (xx + yy) / (STRIPE_PERIOD * s * math.sqrt(2)) + p.phase)
    shade = 1.0 - spec.stripe_depth * 0.5 * (1.0 + stripes)
    rgb = np.array(colorsys.hsv_to_rgb(p.hue, spec.saturation, spec.value))
    fg = rgb[:, None, None] * shade[None]
    bg = np.asarray(BACKGROUND)[:, None, None]
    img = bg * (1.0 - mask[None]) + fg * mask[None]
    return quantize_image(img.astype(np.float32))


def _make_split(spec: DatasetSpec, n: int, seed_seq: np.random.SeedSequence) -> Split:
    rng = np.random.default_rng(seed_seq)
    labels = rng.integers(0, spec.num_domains, size=n)
    params = [sample_params(spec, rng, d) for d in labels]
    images = np.stack([render(p, spec) for p in params]) if n else np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
    return Split(images.astype(np.float32), labels.astype(np.int64), params)


def generate_dataset(spec: DatasetSpec, seed: int = 0, out_dir: str | Path | None = None) -> Dataset:
    """Deterministic in ``seed``; train and test come from independent child streams."""
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    ds = Dataset(spec, seed, _make_split(spec, spec.n_train, train_seq),
                 _make_split(spec, spec.n_test, test_seq))
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    manifest = {"spec": asdict(ds.spec), "seed": ds.seed, "shapes": list(SHAPES), "splits": {}}
    for name, split in (("train", ds.train), ("test", ds.test)):
        entries = []
        for i, (img, p) in enumerate(zip(split.images, split.params)):
            rel = f"{name}/{i:05d}.png"
            save_png(out / rel, img)
            entries.append({"file": rel, "label": int(split.labels[i]), "params": asdict(p)})
        manifest["splits"][name] = entries
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1).encode())


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    spec = DatasetSpec(**manifest["spec"])
    splits = {}
    for name in ("train", "test"):
        entries = manifest["splits"][name]
        imgs = [load_png(root / e["file"]) for e in entries]
        splits[name] = Split(np.stack(imgs).astype(np.float32),
                             np.array([e["label"] for e in entries], dtype=np.int64),
                             [ShapeParams(**e["params"]) for e in entries])
    return Dataset(spec, int(manifest["seed"]), splits["train"], splits["test"])


def load_image_folder(root: str | Path, size: int) -> Split:
    """Loader stub for external data: ``root/<domain index>/*.png``, resized to ``size``."""
    from PIL import Image

    root = Path(root)
    images, labels = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.isdigit()):
        for f in sorted(d.glob("*.png")):
            with Image.open(f) as im:
                a = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR))
            images.append(np.transpose(a, (2, 0, 1)).astype(np.float32) / 255.0)
            labels.append(int(d.name))
    if not images:
        raise DatasetError(f"no images under {root}")
    return Split(np.stack(images), np.array(labels, dtype=np.int64))
