"""Procedural class-conditional grayscale images.

Eight pattern families stand in for a natural-image dataset. Each sample is a
pure function of ``(label, sample_seed)``; pixels are rounded to float32
precision at render time so that the on-disk format round-trips exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkernel import SeededRng, mix64

CLASS_NAMES = ("h-stripes", "v-stripes", "checker", "diagonal", "disc", "gradient", "constant", "blobs")
NUM_CLASSES = len(CLASS_NAMES)
IMAGE_SIZE = 16

VAPD_MAGIC = b"VAPD"
VAPD_VERSION = 1
VAPD_PIXELS = IMAGE_SIZE * IMAGE_SIZE


@dataclass(frozen=True)
class ClassLabel:
    id: int

    def __post_init__(self):
        if not 0 <= self.id < NUM_CLASSES:
            raise ValueError(f"class id must be in 0..{NUM_CLASSES - 1}, got {self.id}")

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.id]

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        return cls(CLASS_NAMES.index(name))


@dataclass(frozen=True)
class ImageSample:
    image: np.ndarray  # (1, S, S) in [0, 1]
    label: ClassLabel
    sample_seed: int


@dataclass(frozen=True)
class DatasetSpec:
    num_samples_per_class: int = 100
    base_seed: int = 0
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.num_samples_per_class < 1:
            raise ValueError("num_samples_per_class must be >= 1")


def _pattern(name: str, size: int, rng: SeededRng) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2 * int(rng.integers(0, 2))
    jx, jy = (int(v) for v in rng.integers(-1, 2, size=2))
    if name == "h-stripes":
        return (((y + phase) // 2) % 2 == 0).astype(float)
    if name == "v-stripes":
        return (((x + phase) // 2) % 2 == 0).astype(float)
    if name == "checker":
        return ((((x + phase) // 2) + ((y + phase) // 2)) % 2 == 0).astype(float)
    if name == "diagonal":
        return (((x + y + phase) // 2) % 2 == 0).astype(float)
    if name == "disc":
        c = (size - 1) / 2.0
        r = np.hypot(x - c - jx, y - c - jy)
        return np.clip((0.3 * size - r) / 2.0 + 0.5, 0.0, 1.0)
    if name == "gradient":
        ramp = np.clip((x + jx) / (size - 1), 0.0, 1.0)
        return ramp if phase == 0 else ramp[:, ::-1]
    if name == "constant":
        return np.ones((size, size))
    if name == "blobs":
        sigma = size / 5.0
        a = (size * 0.3 + jx, size * 0.3 + jy)
        b = (size * 0.7 - jy, size * 0.7 - jx)
        bump_a = np.exp(-((x - a[0]) ** 2 + (y - a[1]) ** 2) / (2 * sigma**2))
        bump_b = np.exp(-((x - b[0]) ** 2 + (y - b[1]) ** 2) / (2 * sigma**2))
        return np.maximum(bump_a, bump_b)
    raise ValueError(f"unknown class {name!r}")


def render_class_image(label: ClassLabel | int, sample_seed: int, size: int = IMAGE_SIZE) -> ImageSample:
    """Render one image of the given family; variation comes only from ``sample_seed``."""
    if not isinstance(label, ClassLabel):
        label = ClassLabel(int(label))
    rng = SeededRng(sample_seed, stream=label.id)
    scale = 0.5 + 0.5 * float(rng.uniform())
    img = np.clip(scale * _pattern(label.name, size, rng), 0.0, 1.0)
    img = img.astype(np.float32).astype(np.float64)
    return ImageSample(image=img[None], label=label, sample_seed=int(sample_seed))


def sample_seed_for(base_seed: int, class_id: int, index: int) -> int:
    return mix64(base_seed, class_id, index)


def make_dataset(spec: DatasetSpec) -> list[ImageSample]:
    """Class-major, index-minor list of ``8 * num_samples_per_class`` samples."""
    return [
        render_class_image(ClassLabel(c), sample_seed_for(spec.base_seed, c, i), spec.image_size)
        for c in range(NUM_CLASSES)
        for i in range(spec.num_samples_per_class)
    ]


def stack_images(samples: list[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    """(B, 1, S, S) images and (B,) integer labels."""
    return np.stack([s.image for s in samples]), np.array([s.label.id for s in samples], dtype=np.int64)


def write_vapd(path: str | Path, samples: list[ImageSample]) -> None:
    """Little-endian: magic, u32 version, u32 count, then per sample u8 label, u64 seed, 256 f32 pixels."""
    chunks = [VAPD_MAGIC, struct.pack("<II", VAPD_VERSION, len(samples))]
    for s in samples:
        if s.image.size != VAPD_PIXELS:
            raise ValueError(f"VAPD stores {IMAGE_SIZE}x{IMAGE_SIZE} images only")
        chunks.append(struct.pack("<BQ", s.label.id, s.sample_seed))
        chunks.append(s.image.reshape(-1).astype("<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def read_vapd(path: str | Path) -> list[ImageSample]:
    buf = Path(path).read_bytes()
    if buf[:4] != VAPD_MAGIC:
        raise ValueError("not a VAPD file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VAPD_VERSION:
        raise ValueError(f"unsupported VAPD version {version}")
    off = 12
    out = []
    rec = 9 + 4 * VAPD_PIXELS
    if len(buf) != off + count * rec:
        raise ValueError("truncated VAPD file")
    for _ in range(count):
        label, seed = struct.unpack_from("<BQ", buf, off)
        px = np.frombuffer(buf, dtype="<f4", count=VAPD_PIXELS, offset=off + 9)
        img = px.astype(np.float64).reshape(1, IMAGE_SIZE, IMAGE_SIZE)
        out.append(ImageSample(image=img, label=ClassLabel(label), sample_seed=seed))
        off += rec
    return out


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Block-average (B, 1, S, S) images to (B, 1, size, size); S must be a multiple of size."""
    images = np.asarray(images, dtype=np.float64)
    b, s = images.shape[0], images.shape[-1]
    if s % size:
        raise ValueError(f"cannot downsample {s} to {size}")
    f = s // size
    return images.reshape(b, 1, size, f, size, f).mean(axis=(3, 5))
