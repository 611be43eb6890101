"""Datasets: CIFAR-10 binary batches and the synthetic two-class blob task."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_SIDE = 32
CIFAR_CLASSES = 10


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"split images {self.images.shape} do not match labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    extra: Split | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, s in self.splits().items():
            if name in ("train", "test") and len(s) == 0:
                raise ValueError(f"{name} split is empty")
            if len(s) and not np.all(np.isfinite(s.images)):
                raise ValueError(f"{name} split has non-finite pixels")
            if len(s) and (s.images.min() < 0 or s.images.max() > 1):
                raise ValueError(f"{name} split has pixels outside [0, 1]")
            if len(s) and (s.labels.min() < 0 or s.labels.max() >= self.num_classes):
                raise ValueError(f"{name} split has labels outside [0, {self.num_classes})")

    def splits(self) -> dict[str, Split]:
        out = {"train": self.train, "test": self.test}
        if self.extra is not None:
            out["extra"] = self.extra
        return out

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.images.shape[1:])


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 1 label byte + 3 planes of side*side bytes per record
# ---------------------------------------------------------------------------


def read_cifar_records(path, side: int = CIFAR_SIDE, num_classes: int = CIFAR_CLASSES) -> Split:
    raw = Path(path).read_bytes()
    rec = 1 + 3 * side * side
    if len(raw) % rec:
        whole = len(raw) // rec
        raise ValueError(f"{path}: length {len(raw)} is not a multiple of {rec}; trailing record starts at byte {whole * rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise ValueError(f"{path}: label {labels[bad[0]]} > {num_classes - 1} in record {bad[0]} (byte offset {bad[0] * rec})")
    images = arr[:, 1:].reshape(-1, 3, side, side).astype(np.float64) / 255.0
    return Split(images, labels)


def load_cifar10_binary(train_paths, test_paths, side: int = CIFAR_SIDE) -> Dataset:
    """Load CIFAR-10 ``data_batch_*.bin`` / ``test_batch.bin`` style files."""

    def cat(paths):
        parts = [read_cifar_records(p, side) for p in ([paths] if isinstance(paths, (str, Path)) else paths)]
        return Split(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))

    return Dataset(cat(train_paths), cat(test_paths), CIFAR_CLASSES, meta={"source": "cifar10"})


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0, 1) * 255.0).astype(np.uint8)


def write_cifar_records(path, split: Split) -> None:
    """Write a split in CIFAR record layout; single-channel images become 3 identical planes."""
    imgs = split.images
    if imgs.shape[1] == 1:
        imgs = np.repeat(imgs, 3, axis=1)
    if imgs.shape[1] != 3 or imgs.shape[2] != imgs.shape[3]:
        raise ValueError(f"cannot write images of shape {imgs.shape[1:]} as CIFAR records")
    if split.labels.size and split.labels.max() > 255:
        raise ValueError("labels must fit in one byte")
    body = to_bytes(imgs).reshape(len(imgs), -1)
    out = np.concatenate([split.labels.astype(np.uint8)[:, None], body], axis=1)
    Path(path).write_bytes(out.tobytes())


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------

BLOB_BACKGROUND = 0.3
# contrast must exceed 2 * 8/255 for a robust separator to exist; low noise
# leaves undefended nets with large weights on flat pixels, which PGD exploits
BLOB_CONTRAST = 0.085
BLOB_NOISE_SIGMA = 0.03


def blob_template(label: int, size: int, background: float = BLOB_BACKGROUND, contrast: float = BLOB_CONTRAST) -> np.ndarray:
    """Class 0 lights the top-left quadrant, class 1 the bottom-right one."""
    img = np.full((size, size), background)
    h = size // 2
    if label == 0:
        img[:h, :h] += contrast
    else:
        img[h:, h:] += contrast
    return img


def _blob_images(labels, size, sigma, rng, background, contrast):
    base = np.stack([blob_template(0, size, background, contrast), blob_template(1, size, background, contrast)])
    imgs = base[labels] + sigma * rng.standard_normal((len(labels), size, size))
    return np.clip(imgs, 0.0, 1.0)[:, None]


def _balanced_labels(n, rng):
    labels = np.repeat(np.arange(2), n // 2)
    return labels[rng.permutation(n)]


def gen_blobs(
    n: int,
    image_size: int = 8,
    noise_sigma: float = BLOB_NOISE_SIGMA,
    seed: int = 0,
    n_extra: int = 0,
    background: float = BLOB_BACKGROUND,
    contrast: float = BLOB_CONTRAST,
) -> Dataset:
    """Two-class grayscale quadrant blobs plus clamped Gaussian noise.

    ``n`` examples (exactly ``n/2`` per class) are split 80/20 into train and
    test per class. ``n_extra`` draws a disjoint extra pool from an
    independent seed stream.
    """
    if n < 4 or n % 2:
        raise ValueError(f"gen_blobs needs an even n >= 4, got {n}")
    if image_size < 2 or image_size % 2:
        raise ValueError(f"image_size must be even and >= 2, got {image_size}")
    main_rng, extra_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    per_class = n // 2
    n_test = max(1, per_class // 5)
    labels = np.repeat(np.arange(2), per_class)
    images = _blob_images(labels, image_size, noise_sigma, main_rng, background, contrast)
    test_idx = np.concatenate([np.arange(n_test), per_class + np.arange(n_test)])
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    train_idx = train_idx[main_rng.permutation(len(train_idx))]
    test_idx = test_idx[main_rng.permutation(len(test_idx))]
    extra = None
    if n_extra:
        if n_extra % 2:
            raise ValueError("n_extra must be even")
        el = _balanced_labels(n_extra, extra_rng)
        extra = Split(_blob_images(el, image_size, noise_sigma, extra_rng, background, contrast), el)
    meta = {
        "source": "blobs",
        "n": n,
        "image_size": image_size,
        "noise_sigma": noise_sigma,
        "seed": seed,
        "n_extra": n_extra,
        "background": background,
        "contrast": contrast,
    }
    return Dataset(
        Split(images[train_idx], labels[train_idx]), Split(images[test_idx], labels[test_idx]), 2, extra, meta
    )


# ---------------------------------------------------------------------------
# augmentation and persistence
# ---------------------------------------------------------------------------


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool = True, crop_pad: int = 0) -> np.ndarray:
    """Seeded horizontal flip and/or pad-and-crop."""
    out = images.copy()
    n, _, h, w = images.shape
    if flip:
        m = rng.random(n) < 0.5
        out[m] = out[m, :, :, ::-1]
    if crop_pad:
        p = crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def save_npz(path, ds: Dataset) -> None:
    arrays = {}
    for name, s in ds.splits().items():
        arrays[f"{name}_images"] = s.images
        arrays[f"{name}_labels"] = s.labels
    arrays["num_classes"] = np.array(ds.num_classes)
    np.savez_compressed(path, **arrays)


def load_npz(path) -> Dataset:
    with np.load(path) as z:
        extra = Split(z["extra_images"], z["extra_labels"]) if "extra_images" in z else None
        return Dataset(
            Split(z["train_images"], z["train_labels"]),
            Split(z["test_images"], z["test_labels"]),
            int(z["num_classes"]),
            extra,
            {"source": str(path)},
        )
