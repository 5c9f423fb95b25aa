"""Dataset ingestion: IDX files, seeded synthetic clusters, eval-set selection."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError
from .nnet import Network, predict_batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Sample:
    """One image as a flat unit-scale pixel vector plus its class label."""

    pixels: np.ndarray
    label: int


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int
    shape: tuple[int, int, int]  # (H, W, C)
    provenance: str

    def __len__(self) -> int:
        return len(self.samples)

    def pixel_matrix(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples]) if self.samples else np.zeros((0, 0))

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def _read_idx(path: Path, expected_magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an IDX magic")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise FormatError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise CorruptionError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    if len(blob) != header_len + count:
        raise CorruptionError(
            f"{path}: payload is {len(blob) - header_len} bytes, header implies {count}"
        )
    payload = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    return dims, payload


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse an IDX image/label file pair (big-endian, u8 payload) into unit-scale pixels.

    The image magic 0x00000803 declares 3 dimensions (count, rows, cols);
    images are treated as single-channel.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC, ndim=3)
    lbl_dims, lbl_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, ndim=1)
    n, h, w = img_dims
    if lbl_dims[0] != n:
        raise DataError(f"{images_path}: {n} images but {lbl_dims[0]} labels")
    pixels = img_bytes.reshape(n, h * w).astype(np.float64) / 255.0
    labels = lbl_bytes.astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 0
    samples = [Sample(pixels[i], int(labels[i])) for i in range(n)]
    return Dataset(
        samples=samples,
        num_classes=num_classes,
        shape=(int(h), int(w), 1),
        provenance=f"idx:{images_path}:{labels_path}",
    )


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write the dataset as an IDX pair; read-back is byte-exact."""
    h, w, c = dataset.shape
    if c != 1:
        raise DataError(f"write_idx: IDX images are single-channel, dataset has C={c}")
    n = len(dataset)
    img = np.rint(dataset.pixel_matrix() * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(img.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels().astype(np.uint8).tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    dim: int = 144
    per_class: int = 400
    cluster_std: float = 0.1

    def __post_init__(self):
        if self.per_class < 1:
            raise ConfigError(f"synthetic.per_class: must be >= 1, got {self.per_class}")
        if self.dim < 2:
            raise ConfigError(f"synthetic.dim: must be >= 2, got {self.dim}")
        if self.num_classes < 2:
            raise ConfigError(f"synthetic.num_classes: must be >= 2, got {self.num_classes}")
        if self.cluster_std < 0:
            raise ConfigError(f"synthetic.cluster_std: must be >= 0, got {self.cluster_std}")


def _square_shape(dim: int) -> tuple[int, int, int]:
    side = math.isqrt(dim)
    if side * side == dim:
        return (side, side, 1)
    return (dim, 1, 1)


# Distance of every class mean from mid-gray. Keeping this fixed (instead of
# letting separation grow with sqrt(dim)) sizes the class margins to the usual
# epsilon=16 pixel budget regardless of image size.
CLASS_RADIUS = 0.6


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Seeded Gaussian class clusters, clamped to [0,1].

    Class means sit on a sphere of radius CLASS_RADIUS around the mid-gray
    image (pairwise separation ~ CLASS_RADIUS * sqrt(2), independent of dim);
    cluster_std controls the within-class spread and therefore how hard the
    classes are to separate and to attack. A perfect-square dim is exposed as
    a square single-channel image so conv architectures apply.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    directions = rng.normal(size=(spec.num_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 + CLASS_RADIUS * directions
    samples = []
    for cls in range(spec.num_classes):
        pts = means[cls] + rng.normal(0.0, spec.cluster_std, size=(spec.per_class, spec.dim))
        np.clip(pts, 0.0, 1.0, out=pts)
        samples.extend(Sample(pts[i], cls) for i in range(spec.per_class))
    return Dataset(
        samples=samples,
        num_classes=spec.num_classes,
        shape=_square_shape(spec.dim),
        provenance=f"synthetic:classes={spec.num_classes},dim={spec.dim},"
        f"per_class={spec.per_class},std={spec.cluster_std},seed={seed}",
    )


def select_eval_set(
    dataset: Dataset, surrogate: Network, n: int, seed: int
) -> tuple[Dataset, int]:
    """Draw a seeded random subset of size n, then drop surrogate misclassifications.

    Returns the survivors (in draw order) and the number skipped. Fewer than
    n survivors is normal, not an error; the skip count makes it visible.
    """
    if n < 1:
        raise DataError(f"select_eval_set: n must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    chosen = rng.permutation(len(dataset))[: min(n, len(dataset))]
    pixels = dataset.pixel_matrix()[chosen]
    labels = dataset.labels()[chosen]
    preds = predict_batch(surrogate, pixels)
    keep = preds == labels
    survivors = [Sample(pixels[i], int(labels[i])) for i in range(len(chosen)) if keep[i]]
    skipped = int(len(chosen) - keep.sum())
    subset = Dataset(
        samples=survivors,
        num_classes=dataset.num_classes,
        shape=dataset.shape,
        provenance=f"{dataset.provenance}|eval:n={n},seed={seed},skipped={skipped}",
    )
    return subset, skipped
