"""Datasets: synthetic generators, CIFAR-10 binary batches and local corruptions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class UnsupportedCorruption(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str = "full"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise DataError(f"features {x.shape} do not match {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("features must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, index, tag: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.num_classes, tag or self.tag)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", *(f"f{i}" for i in range(self.dim))])
        for y, row in zip(self.labels, self.features):
            w.writerow([int(y), *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, num_classes: int | None = None) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
        feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        return cls(feats, labels, num_classes or int(labels.max()) + 1)


def _frame(centers: np.ndarray, noise_std: float) -> tuple[np.ndarray, float]:
    """Square box around the centers padded by 4 noise std; shared by every draw."""
    pad = 4.0 * noise_std
    lo = centers.min(axis=0) - pad
    span = float((centers.max(axis=0) + pad - lo).max())
    return lo, span


def _to_unit(x: np.ndarray, lo: np.ndarray, span: float) -> np.ndarray:
    if span == 0:
        return np.full_like(x, 0.5)
    return np.clip((x - lo) / span, 0.0, 1.0)


def three_class_centers(separation_hard: float, separation_easy: float) -> np.ndarray:
    """Classes 0 and 1 sit ``separation_hard`` apart; class 2 is ``separation_easy`` from both."""
    if separation_hard <= 0 or separation_easy <= 0:
        raise DataError("separations must be positive")
    half = separation_hard / 2
    if separation_easy <= half:
        raise DataError(
            f"separation_easy={separation_easy} cannot be equidistant from two centers {separation_hard} apart"
        )
    height = np.sqrt(separation_easy**2 - half**2)
    return np.array([[-half, 0.0], [half, 0.0], [0.0, height]])


def make_three_class(n_per_class: int, separation_hard: float = 1.0, separation_easy: float = 4.0,
                     noise_std: float = 1.0, seed: int = 0) -> Dataset:
    """Two overlapping Gaussian classes plus one distinctive class, in 2-D."""
    if noise_std <= 0:
        raise DataError("noise_std must be positive")
    if n_per_class < 1:
        raise DataError("n_per_class must be positive")
    centers = three_class_centers(separation_hard, separation_easy)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), n_per_class)
    x = centers[labels] + rng.normal(0.0, noise_std, size=(labels.size, 2))
    return Dataset(_to_unit(x, *_frame(centers, noise_std)), labels, 3, "three_class")


def make_blobs(num_classes: int, n_per_class: int, dim: int, center_spread: float = 1.0,
               noise_std: float = 1.0, seed: int = 0, center_seed: int | None = None) -> Dataset:
    """Isotropic Gaussian blobs around N(0, spread^2) centers.

    Centers come from ``center_seed`` (default ``seed``), so held-out draws that
    share a center seed share the class geometry and the unit-box frame.
    """
    if num_classes < 2 or n_per_class < 1 or dim < 1:
        raise DataError("need num_classes >= 2, n_per_class >= 1, dim >= 1")
    if center_spread < 0 or noise_std < 0:
        raise DataError("center_spread and noise_std must be non-negative")
    centers = np.random.default_rng(seed if center_seed is None else center_seed).normal(
        0.0, center_spread, size=(num_classes, dim))
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[labels] + rng.normal(0.0, noise_std, size=(labels.size, dim))
    return Dataset(_to_unit(x, *_frame(centers, noise_std)), labels, num_classes, "blobs")


# -- CIFAR-10 binary format ------------------------------------------------------------

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


def decode_cifar_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].astype(np.float64) / 255.0, labels


def encode_cifar_records(features: np.ndarray, labels: np.ndarray) -> bytes:
    pixels = np.rint(np.asarray(features) * 255.0).astype(np.uint8)
    if pixels.shape[1:] != (CIFAR_RECORD - 1,):
        raise DataError(f"CIFAR records need 3072 features, got {pixels.shape[1:]}")
    out = np.empty((pixels.shape[0], CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = pixels
    return out.tobytes()


def load_cifar10(directory, subset_per_class: int | None = None, split: str = "train", seed: int = 0) -> Dataset:
    """Read CIFAR-10 binary batches; optionally keep ``subset_per_class`` per class."""
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    paths = [directory / n for n in names]
    present = [p for p in paths if p.exists()]
    if not present:
        raise DataError(f"no CIFAR-10 {split} batches found in {directory}")
    xs, ys = [], []
    for p in present:
        x, y = decode_cifar_records(p.read_bytes(), str(p))
        xs.append(x)
        ys.append(y)
    ds = Dataset(np.concatenate(xs), np.concatenate(ys), 10, f"cifar10-{split}")
    if subset_per_class is None:
        return ds
    return subsample_per_class(ds, subset_per_class, seed)


def subsample_per_class(ds: Dataset, per_class: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < per_class:
            raise DataError(f"class {c} has {idx.size} samples, fewer than {per_class}")
        keep.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    return ds.subset(np.concatenate(keep))


def make_cifar_like(n_per_class: int, seed: int = 0, noise: float = 0.18) -> Dataset:
    """Synthetic 32x32x3 images quantised like CIFAR bytes.

    Each class has a smooth colour/orientation template; samples add random
    shifts, contrast jitter and pixel noise. Used where real CIFAR-10 batches
    are not on disk.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    templates = []
    for c in range(10):
        angle = np.pi * c / 10
        freq = 1.0 + (c % 3)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        color = 0.5 + 0.35 * np.cos(2 * np.pi * (c / 10 + np.arange(3) / 3))
        templates.append(color[:, None, None] * (0.5 + 0.5 * wave)[None])
    templates = np.stack(templates)
    labels = np.repeat(np.arange(10), n_per_class)
    imgs = templates[labels]
    shift = rng.integers(-3, 4, size=(labels.size, 2))
    imgs = np.stack([np.roll(im, tuple(s), axis=(1, 2)) for im, s in zip(imgs, shift)])
    gain = rng.uniform(0.6, 1.2, size=(labels.size, 1, 1, 1))
    imgs = 0.5 + gain * (imgs - 0.5) + rng.normal(0.0, noise, size=imgs.shape)
    pixels = np.rint(np.clip(imgs, 0.0, 1.0).reshape(labels.size, -1) * 255.0) / 255.0
    return Dataset(pixels, labels, 10, "cifar-like")


def write_cifar_batch(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_cifar_records(ds.features, ds.labels))


# -- corruptions -----------------------------------------------------------------------

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "brightness", "contrast", "pixelate")

# severity 1..5; index 0 is the identity level
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.0, 0.04, 0.06, 0.08, 0.09, 0.10),  # noise std
    "shot_noise": (np.inf, 500.0, 250.0, 100.0, 75.0, 50.0),  # photons per unit intensity
    "impulse_noise": (0.0, 0.01, 0.02, 0.03, 0.05, 0.07),  # fraction of entries saturated
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    "contrast": (1.0, 0.4, 0.3, 0.2, 0.1, 0.05),  # scale about per-image mean
    "pixelate": (1.0, 0.6, 0.5, 0.4, 0.3, 0.25),  # downsampling factor
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise UnsupportedCorruption(f"corruption {self.kind!r} is not implemented (available: {', '.join(CORRUPTIONS)})")
        if not 0 <= self.severity <= 5:
            raise DataError(f"severity must lie in 0..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity]


def _image_shape(dim: int, image_shape):
    if image_shape is not None:
        return tuple(image_shape)
    if dim == CIFAR_RECORD - 1:
        return CIFAR_SHAPE
    raise DataError(f"pixelate needs image-shaped features; got flat dimension {dim}")


def _pixelate(x: np.ndarray, factor: float, shape) -> np.ndarray:
    c, h, w = shape
    imgs = x.reshape(-1, c, h, w)
    sh, sw = max(1, int(h * factor)), max(1, int(w * factor))
    down = imgs[:, :, (np.arange(sh) * h) // sh][:, :, :, (np.arange(sw) * w) // sw]
    up = down[:, :, (np.arange(h) * sh) // h][:, :, :, (np.arange(w) * sw) // w]
    return up.reshape(x.shape)


def corrupt(ds: Dataset, spec: CorruptionSpec, seed: int = 0, image_shape=None) -> Dataset:
    """Apply one corruption; labels pass through, outputs are clipped to [0, 1].

    The same seed yields the same underlying noise draw at every severity, so
    severities differ only by their parameter.
    """
    if spec.severity == 0:
        return replace(ds)
    x = ds.features
    p = spec.parameter
    rng = np.random.default_rng(seed)
    if spec.kind == "gaussian_noise":
        out = x + p * rng.standard_normal(x.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(x * p) / p
    elif spec.kind == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = np.where(u < p, np.where(salt, 1.0, 0.0), x)
    elif spec.kind == "brightness":
        out = x + p
    elif spec.kind == "contrast":
        m = x.mean(axis=1, keepdims=True)
        out = (x - m) * p + m
    else:
        out = _pixelate(x, p, _image_shape(x.shape[1], image_shape))
    return Dataset(np.clip(out, 0.0, 1.0), ds.labels.copy(), ds.num_classes, f"{ds.tag}+{spec.kind}-{spec.severity}")
