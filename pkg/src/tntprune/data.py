"""Synthetic planted-relevance images and their on-disk container."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, FormatError
from .rng import RngStream


def center_mask(grid: int, side: int) -> tuple[int, ...]:
    """Patch indices of a ``side x side`` square centred in a ``grid x grid`` layout."""
    lo = (grid - side) // 2
    return tuple(r * grid + c for r in range(lo, lo + side) for c in range(lo, lo + side))


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    num_classes: int = 2
    informative_mask: tuple[int, ...] = field(default_factory=lambda: center_mask(8, 4))
    signal_strength: float = 1.0
    background_noise: float = 0.5
    samples_per_class: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "informative_mask", tuple(sorted(int(i) for i in self.informative_mask)))
        n = self.num_patches
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if not self.informative_mask:
            raise ConfigError("informative_mask must be nonempty")
        if len(set(self.informative_mask)) != len(self.informative_mask):
            raise ConfigError("informative_mask has duplicate patch indices")
        if self.informative_mask[0] < 0 or self.informative_mask[-1] >= n:
            raise ConfigError(f"informative_mask entries must lie in [0, {n})")
        if self.signal_strength < 0 or self.background_noise < 0:
            raise ConfigError("signal_strength and background_noise must be nonnegative")
        if self.num_classes < 1 or self.samples_per_class < 0:
            raise ConfigError("num_classes must be >= 1 and samples_per_class >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["informative_mask"] = list(self.informative_mask)
        return d


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W]
    labels: np.ndarray  # [M] int64
    mask: np.ndarray | None = None  # [M, N] 0/1 ground-truth informative patches

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], None if self.mask is None else self.mask[idx])


def pixel_mask(spec: DatasetSpec) -> np.ndarray:
    """``[H, W]`` 0/1 map of the pixels covered by informative patches."""
    g, p = spec.grid, spec.patch_size
    m = np.zeros((g, g))
    for idx in spec.informative_mask:
        m[idx // g, idx % g] = 1.0
    return np.kron(m, np.ones((p, p)))


_SPLITS = {"train": 1, "test": 2}


def generate_synthetic(spec: DatasetSpec, split: str = "train") -> Dataset:
    """Background noise everywhere plus a per-class template inside the informative patches.

    Templates depend only on ``spec.seed``; ``split`` selects an independent
    sample stream, so train and test share the class templates.
    """
    if split not in _SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(_SPLITS)}")
    root = RngStream(spec.seed, stream_id=0xDA7A)
    shape = (spec.channels, spec.image_size, spec.image_size)
    templates = root.fork(0).standard_normal((spec.num_classes, *shape))
    templates *= pixel_mask(spec)
    rng = root.fork(_SPLITS[split])
    M = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(M)] if M else labels
    noise = rng.standard_normal((M, *shape)) * spec.background_noise
    images = noise + spec.signal_strength * templates[labels]
    mask = np.zeros((M, spec.num_patches))
    mask[:, list(spec.informative_mask)] = 1.0
    return Dataset(images, labels.astype(np.int64), mask)


def save_container(dataset: Dataset, path) -> None:
    tensors = {
        "images": dataset.images,
        "labels": dataset.labels.astype(np.float64),
    }
    if dataset.mask is not None:
        tensors["mask"] = dataset.mask
    checkpoint.save(path, tensors)


def load_container(path) -> Dataset:
    tensors = checkpoint.load(path)
    for name in ("images", "labels"):
        if name not in tensors:
            raise FormatError(f"container lacks required tensor {name!r}")
    images, labels = tensors["images"], tensors["labels"]
    if images.ndim != 4 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(f"inconsistent shapes: images {images.shape}, labels {labels.shape}")
    if np.any(labels != np.round(labels)) or (labels.size and labels.min() < 0):
        raise FormatError("labels must hold nonnegative integral values")
    return Dataset(images, labels.astype(np.int64), tensors.get("mask"))
