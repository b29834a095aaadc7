"""Procedural fine-grained parts dataset.

Every image shares one textured background; each class is defined by a
few small high-contrast pixel motifs stamped at class-specific base
positions (with per-image jitter), plus Gaussian noise. The motifs are
the only class-discriminative signal, so part-based recognition is the
intended optimal strategy.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DataError
from .serialize import read_json, sha256_bytes, write_json
from .tensor import subseed

MANIFEST_VERSION = 1
BLOB_NAME = "images.f64"


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    train_per_class: int = 40
    test_per_class: int = 10
    image_size: int = 64
    motifs_per_class: int = 3
    motif_size: int = 10
    palette: tuple = (0.05, 0.95)
    background_seed: int = 7
    jitter: int = 2
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.num_classes < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("class and per-class counts must be >= 1")
        if self.motif_size >= self.image_size:
            raise ConfigError("motif larger than image")
        if self.motifs_per_class < 1 or self.motif_size < 1:
            raise ConfigError("need at least one motif pixel per class")
        if self.jitter < 0 or self.noise_sigma < 0:
            raise ConfigError("jitter and noise_sigma must be non-negative")
        if self.motif_size + 2 * self.jitter > self.image_size:
            raise ConfigError("jittered motif placement does not fit in the image")
        object.__setattr__(self, "palette", tuple(float(v) for v in self.palette))
        if len(self.palette) != 2:
            raise ConfigError("palette must be a (low, high) pair")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "image_size": self.image_size,
            "motifs_per_class": self.motifs_per_class,
            "motif_size": self.motif_size,
            "palette": list(self.palette),
            "background_seed": self.background_seed,
            "jitter": self.jitter,
            "noise_sigma": self.noise_sigma,
        }

    @staticmethod
    def from_dict(doc: dict) -> "SyntheticSpec":
        return SyntheticSpec(
            num_classes=int(doc["num_classes"]),
            train_per_class=int(doc["train_per_class"]),
            test_per_class=int(doc["test_per_class"]),
            image_size=int(doc["image_size"]),
            motifs_per_class=int(doc["motifs_per_class"]),
            motif_size=int(doc["motif_size"]),
            palette=tuple(float(v) for v in doc["palette"]),
            background_seed=int(doc["background_seed"]),
            jitter=int(doc["jitter"]),
            noise_sigma=float(doc["noise_sigma"]),
        )


@dataclass
class Dataset:
    images: np.ndarray   # (N, 1, S, S) float64
    labels: np.ndarray   # (N,) int64
    split: str
    spec: SyntheticSpec
    seed: int

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.split,
                       self.spec, self.seed)


def _background(spec: SyntheticSpec) -> np.ndarray:
    """Smooth shared texture: a few random sinusoid gratings in [0.35, 0.60]."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.background_seed))
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    field = np.zeros((s, s))
    for _ in range(4):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(1.5, 4.0) / s
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += rng.uniform(0.5, 1.0) * np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    lo, hi = field.min(), field.max()
    return 0.35 + 0.25 * (field - lo) / (hi - lo)


def _class_layout(spec: SyntheticSpec, seed: int, c: int):
    """Motif patterns and base positions for one class, drawn once per class."""
    rng = subseed(seed, "class", c)
    k, ms = spec.motifs_per_class, spec.motif_size
    lo, hi = spec.palette
    patterns = np.where(rng.random((k, ms, ms)) < 0.5, lo, hi)
    margin = spec.jitter
    span = spec.image_size - ms - 2 * margin
    positions = []
    for _ in range(k):
        for _attempt in range(1000):
            r = margin + int(rng.integers(0, span + 1))
            col = margin + int(rng.integers(0, span + 1))
            if all(abs(r - pr) >= ms or abs(col - pc) >= ms for pr, pc in positions):
                positions.append((r, col))
                break
        else:
            raise ConfigError("could not place motifs without overlap; "
                              "reduce motifs_per_class or motif_size")
    return patterns, positions


def _render(spec, background, patterns, positions, rng) -> np.ndarray:
    img = background.copy()
    ms = spec.motif_size
    for pattern, (r, c) in zip(patterns, positions):
        if spec.jitter:
            dr = int(rng.integers(-spec.jitter, spec.jitter + 1))
            dc = int(rng.integers(-spec.jitter, spec.jitter + 1))
        else:
            dr = dc = 0
        img[r + dr:r + dr + ms, c + dc:c + dc + ms] = pattern
    if spec.noise_sigma:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return img


def generate(spec: SyntheticSpec, seed: int):
    """Build (train, test) datasets; bit-identical for identical (spec, seed)."""
    background = _background(spec)
    layouts = [_class_layout(spec, seed, c) for c in range(spec.num_classes)]

    # distinct classes must be distinguishable by pattern
    for a in range(spec.num_classes):
        for b in range(a + 1, spec.num_classes):
            if np.array_equal(layouts[a][0], layouts[b][0]):
                raise ConfigError(f"classes {a} and {b} drew identical motif patterns")

    def build(split: str, per_class: int) -> Dataset:
        n = spec.num_classes * per_class
        images = np.empty((n, 1, spec.image_size, spec.image_size))
        labels = np.empty(n, dtype=np.int64)
        idx = 0
        for c in range(spec.num_classes):
            patterns, positions = layouts[c]
            for k in range(per_class):
                rng = subseed(seed, split, c, k)
                images[idx, 0] = _render(spec, background, patterns, positions, rng)
                labels[idx] = c
                idx += 1
        return Dataset(images, labels, split, spec, seed)

    return build("train", spec.train_per_class), build("test", spec.test_per_class)


# ---------------------------------------------------------------------------
# persistence: manifest JSON + raw little-endian float64 blob
# ---------------------------------------------------------------------------

def save(dataset: Dataset, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(dataset.images, dtype="<f8").tobytes()
    (out / BLOB_NAME).write_bytes(blob)
    write_json(out / "manifest.json", {
        "format_version": MANIFEST_VERSION,
        "kind": "synthetic-parts-dataset",
        "spec": dataset.spec.to_dict(),
        "seed": dataset.seed,
        "split": dataset.split,
        "labels": dataset.labels.tolist(),
        "image_shape": list(dataset.images.shape),
        "blob": {"file": BLOB_NAME, "bytes": len(blob), "sha256": sha256_bytes(blob)},
    })


def load(path) -> Dataset:
    root = Path(path)
    doc = read_json(root / "manifest.json")
    if not isinstance(doc, dict) or doc.get("kind") != "synthetic-parts-dataset":
        raise DataError(f"{root} does not contain a dataset manifest")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported dataset manifest version {doc.get('format_version')!r}")
    spec = SyntheticSpec.from_dict(doc["spec"])
    blob_info = doc["blob"]
    blob_path = root / blob_info["file"]
    if not blob_path.exists():
        raise DataError(f"dataset blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != int(blob_info["bytes"]) or sha256_bytes(blob) != blob_info["sha256"]:
        raise CorruptionError(f"dataset blob failed its checksum: {blob_path}")
    shape = tuple(int(v) for v in doc["image_shape"])
    images = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
    labels = np.asarray(doc["labels"], dtype=np.int64)
    if labels.shape[0] != shape[0]:
        raise DataError("label count does not match image count")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise DataError(f"labels out of range [0, {spec.num_classes})")
    return Dataset(images, labels, str(doc["split"]), spec, int(doc["seed"]))
