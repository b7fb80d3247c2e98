"""Procedural street-scene-like segmentation domains and the SGDS file format.

Label maps are drawn first from a geometry stream that depends only on the
sample seed; the image is then rendered from the labels with a domain style.
The source, target and third domains therefore share label statistics and
differ only in appearance.

Classes: 0 ground, 1 sky, 2 building, 3 round object, 4 pole; 255 is void.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import stream

VOID = 255
NUM_CLASSES = 5
CLASS_NAMES = ("ground", "sky", "building", "object", "pole")
DOMAINS = ("source", "target", "third")

MAGIC = b"SGDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIBB")


class DatasetFormatError(ValueError):
    pass


class MagicMismatchError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LabelAccessError(PermissionError):
    pass


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    num_classes: int = NUM_CLASSES
    # expected fraction of all pixels per class; the remainder is void
    proportions: tuple = (0.50, 0.215, 0.175, 0.07, 0.03)

    def __post_init__(self):
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ValueError(f"image size {self.height}x{self.width} must be a positive multiple of 8")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"the scene generator draws exactly {NUM_CLASSES} classes")


@dataclass(frozen=True)
class DomainStyle:
    name: str
    class_colors: tuple  # num_classes RGB triples in [-1, 1]
    texture_amp: float = 0.0
    texture_freq: float = 0.0  # cycles per image width
    texture_phase: float = 0.0
    gradient: float = 0.0  # vertical brightness ramp, top to bottom
    noise_sigma: float = 0.0
    color_jitter: float = 0.0  # per-sample global color offset


STYLES = {
    "source": DomainStyle(
        "source",
        class_colors=((-0.30, -0.30, -0.35), (0.10, 0.45, 0.90), (0.55, 0.15, -0.20),
                      (0.85, -0.55, -0.45), (0.90, 0.90, -0.60)),
        texture_amp=0.05, texture_freq=4.0, texture_phase=0.0,
        gradient=0.05, noise_sigma=0.03, color_jitter=0.05),
    "target": DomainStyle(
        "target",
        class_colors=((0.20, 0.00, -0.30), (-0.15, 0.10, 0.25), (0.00, -0.25, -0.40),
                      (0.35, -0.35, 0.05), (0.45, 0.35, 0.05)),
        texture_amp=0.20, texture_freq=9.0, texture_phase=0.0,
        gradient=0.30, noise_sigma=0.10, color_jitter=0.08),
    "third": DomainStyle(
        "third",
        # the target palette moved by a fixed color offset, sampled at a new texture phase
        class_colors=((0.30, -0.05, -0.15), (-0.05, 0.05, 0.40), (0.10, -0.30, -0.25),
                      (0.45, -0.40, 0.20), (0.55, 0.30, 0.20)),
        texture_amp=0.20, texture_freq=9.0, texture_phase=1.3,
        gradient=0.30, noise_sigma=0.10, color_jitter=0.08),
}


@dataclass
class LabeledSample:
    image: np.ndarray  # 3 x H x W float32 in [-1, 1]
    labels: np.ndarray  # H x W uint8
    domain: str


def gen_labels(seed: int, scene: SceneParams = SceneParams()) -> np.ndarray:
    """Label geometry for one scene; depends on ``seed`` and ``scene`` only."""
    h, w = scene.height, scene.width
    rng = stream(seed, "geometry")
    lab = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    horizon = int(round(rng.uniform(0.22, 0.36) * h))
    lab[:horizon] = 1
    for _ in range(rng.integers(3, 6)):
        bw = max(2, int(round(rng.uniform(0.14, 0.30) * w)))
        x0 = int(rng.integers(0, w - bw + 1))
        top = int(round(rng.uniform(0.08, 0.30) * h))
        bottom = min(h, horizon + int(round(rng.uniform(0.08, 0.30) * h)))
        lab[top:bottom, x0:x0 + bw] = 2
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(0.06, 0.12) * h
        cy = rng.uniform(horizon + r, h - r * 0.5)
        cx = rng.uniform(0, w)
        lab[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 3
    for _ in range(rng.integers(1, 4)):
        pw = int(rng.integers(1, 3)) * max(1, w // 64)
        x0 = int(rng.integers(0, w - pw + 1))
        top = int(round(rng.uniform(0.05, 0.30) * h))
        bottom = int(round(rng.uniform(0.65, 1.0) * h))
        lab[top:bottom, x0:x0 + pw] = 4
    if rng.random() < 0.5:
        vh = max(2, int(round(rng.uniform(0.08, 0.20) * h)))
        vw = max(2, int(round(rng.uniform(0.08, 0.20) * w)))
        y0 = int(rng.integers(0, h - vh + 1))
        x0 = int(rng.integers(0, w - vw + 1))
        lab[y0:y0 + vh, x0:x0 + vw] = VOID
    return lab


def render(labels: np.ndarray, style: DomainStyle, seed: int) -> np.ndarray:
    h, w = labels.shape
    rng = stream(seed, "render", style.name)
    colors = np.asarray(style.class_colors, dtype=np.float64)
    img = np.zeros((3, h, w))
    valid = labels != VOID
    img[:, valid] = colors[labels[valid]].T
    # void pixels are clutter with their own random colour
    img[:, ~valid] = rng.uniform(-0.8, 0.8, size=(3, 1))
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    if style.texture_amp:
        k = np.where(valid, labels, 0)
        theta = k * np.pi / NUM_CLASSES
        wave = np.sin(2 * np.pi * style.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta))
                      + style.texture_phase + k)
        img += style.texture_amp * wave
    if style.gradient:
        img += style.gradient * (yy - 0.5)
    if style.color_jitter:
        img += rng.normal(0, style.color_jitter, size=(3, 1, 1))
    if style.noise_sigma:
        img += rng.normal(0, style.noise_sigma, size=img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def gen_sample(seed: int, scene: SceneParams = SceneParams(), style: DomainStyle = STYLES["source"]) -> LabeledSample:
    labels = gen_labels(seed, scene)
    return LabeledSample(render(labels, style, seed), labels, style.name)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.round((np.clip(images, -1, 1) + 1) * 127.5).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


class Dataset:
    """Labeled samples of one domain, held as u8 payloads plus float32 images.

    Label reads go through :attr:`labels`, which counts accesses so training
    code paths can be audited for label leakage.
    """

    def __init__(self, images_u8: np.ndarray, labels: np.ndarray, domain: str,
                 num_classes: int = NUM_CLASSES, seeds: Optional[np.ndarray] = None):
        images_u8 = np.asarray(images_u8, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.uint8)
        if images_u8.ndim != 4 or labels.ndim != 3 or images_u8.shape[0] != labels.shape[0] \
                or images_u8.shape[2:] != labels.shape[1:]:
            raise ValueError(f"inconsistent image {images_u8.shape} / label {labels.shape} arrays")
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        self.images_u8 = images_u8
        self.images = dequantize(images_u8)
        self._labels = labels
        self.domain = domain
        self.num_classes = num_classes
        self.seeds = None if seeds is None else np.asarray(seeds, dtype=np.int64)
        self.label_reads = 0

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], num_classes: int = NUM_CLASSES,
                     seeds=None, domain: Optional[str] = None, size=(64, 64)) -> "Dataset":
        if not samples:
            if domain is None:
                raise ValueError("empty sample list needs an explicit domain")
            return cls(np.zeros((0, 3) + tuple(size), np.uint8), np.zeros((0,) + tuple(size), np.uint8),
                       domain, num_classes, seeds)
        domains = {s.domain for s in samples}
        shapes = {s.image.shape for s in samples}
        if len(domains) != 1 or len(shapes) != 1:
            raise ValueError(f"samples must share one domain and size, got {domains} / {shapes}")
        images = quantize(np.stack([s.image for s in samples]))
        labels = np.stack([s.labels for s in samples])
        return cls(images, labels, domains.pop(), num_classes, seeds)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> tuple:
        return tuple(self.images.shape[2:])

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._labels

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], self.labels[i], self.domain)


class UnlabeledView:
    """Image-only handle on a dataset; asking for labels is an error."""

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self.images = dataset.images
        self.domain = dataset.domain
        self.num_classes = dataset.num_classes

    def __len__(self) -> int:
        return len(self._dataset)

    @property
    def size(self) -> tuple:
        return self._dataset.size

    @property
    def labels(self):
        raise LabelAccessError(
            f"labels of this {self.domain} split are withheld; use the labeled dataset "
            "(only the target-only baseline may read them)")


def write_dataset(path, dataset: Dataset) -> None:
    h, w = dataset.size
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset), h, w, dataset.num_classes,
                              DOMAINS.index(dataset.domain)))
        labels = dataset._labels
        for i in range(len(dataset)):
            fh.write(dataset.images_u8[i].tobytes())
            fh.write(labels[i].tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: not an SGDS file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, count, h, w, nc, dom = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if dom >= len(DOMAINS):
        raise DatasetFormatError(f"{path}: unknown domain tag {dom}")
    per = 3 * h * w + h * w
    expected = _HEADER.size + count * per
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header promises {expected}")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, per)
    images = body[:, :3 * h * w].reshape(count, 3, h, w).copy()
    labels = body[:, 3 * h * w:].reshape(count, h, w).copy()
    return Dataset(images, labels, DOMAINS[dom], nc)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = NUM_CLASSES
    n_source_train: int = 800
    n_source_val: int = 100
    n_target_train: int = 800
    n_target_test: int = 200
    n_third_test: int = 200

    @property
    def scene(self) -> SceneParams:
        return SceneParams(self.height, self.width, self.num_classes)


SPLITS = (
    # name, domain, size field, seed offset
    ("source_train", "source", "n_source_train", 0),
    ("source_val", "source", "n_source_val", 100_000),
    ("target_train", "target", "n_target_train", 200_000),
    ("target_test", "target", "n_target_test", 300_000),
    ("third_test", "third", "n_third_test", 400_000),
)


def split_seeds(config: DataConfig) -> dict:
    base = config.seed * 1_000_000
    seeds = {}
    for name, _, size_field, offset in SPLITS:
        n = getattr(config, size_field)
        if n < 0 or n > 100_000:
            raise ValueError(f"split {name}: size {n} outside 0..100000")
        seeds[name] = np.arange(base + offset, base + offset + n, dtype=np.int64)
    check_disjoint(seeds)
    return seeds


def check_disjoint(seeds: dict) -> None:
    seen = {}
    for name, arr in seeds.items():
        for s in arr.tolist():
            if s in seen:
                raise ValueError(f"seed {s} used by both {seen[s]} and {name}")
            seen[s] = name


@dataclass
class Splits:
    source_train: Dataset
    source_val: Dataset
    target_train: Dataset
    target_test: Dataset
    third_test: Dataset
    seeds: dict = field(default_factory=dict)

    @property
    def target_train_unlabeled(self) -> UnlabeledView:
        return self.target_train.unlabeled()

    def items(self):
        return [(name, getattr(self, name)) for name, *_ in SPLITS]


def make_split(name: str, config: DataConfig, seeds: np.ndarray) -> Dataset:
    domain = {n: d for n, d, *_ in SPLITS}[name]
    style = STYLES[domain]
    samples = [gen_sample(int(s), config.scene, style) for s in seeds]
    return Dataset.from_samples(samples, config.num_classes, seeds, domain=domain,
                                size=(config.height, config.width))


def make_splits(config: DataConfig = DataConfig()) -> Splits:
    seeds = split_seeds(config)
    made = {name: make_split(name, config, seeds[name]) for name, *_ in SPLITS}
    return Splits(**made, seeds=seeds)


def write_splits(splits: Splits, out_dir, config: DataConfig) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.__dict__, "splits": {}}
    for name, ds in splits.items():
        path = out_dir / f"{name}.sgds"
        write_dataset(path, ds)
        seeds = splits.seeds.get(name)
        manifest["splits"][name] = {
            "path": path.name,
            "domain": ds.domain,
            "count": len(ds),
            "seed_first": None if seeds is None or len(seeds) == 0 else int(seeds[0]),
            "seed_last": None if seeds is None or len(seeds) == 0 else int(seeds[-1]),
        }
    mpath = out_dir / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def read_splits(data_dir) -> Splits:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    made, seeds = {}, {}
    for name, *_ in SPLITS:
        entry = manifest["splits"][name]
        made[name] = read_dataset(data_dir / entry["path"])
        if entry.get("seed_first") is not None:
            seeds[name] = np.arange(entry["seed_first"], entry["seed_last"] + 1, dtype=np.int64)
            made[name].seeds = seeds[name]
    return Splits(**made, seeds=seeds)
