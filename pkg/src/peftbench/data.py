"""Datasets: synthetic generators, stratified splitting, subsampling, ingestion.

Synthetic classification images mix a class-specific grating with a
class-specific blob plus noise; the "source" variant pre-trains backbones
while "target" variants remap labels and shift the rendering parameters,
using disjoint random streams. Conditional images (for the denoiser) tie
the structure to a discrete condition id instead of a class label.

External data comes in as an image folder of 8-bit grayscale PGMs
(root/classname/*.pgm) or a CSV (``path,label`` rows, or inline pixels
``p0..pK,label``).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream

SPLIT_RATIOS = {"train": 0.70, "val": 0.15, "test": 0.15}


class IngestError(ValueError):
    """Malformed external data, with file/row context in the message."""


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, C, S, S) float64
    labels: np.ndarray  # (N,) int64 class or condition ids
    num_classes: int
    splits: dict = field(default_factory=dict)  # split name -> index array
    provenance: str = "synthetic"

    def __post_init__(self):
        if not self.splits:
            raise ValueError("dataset needs a split partition")
        joined = np.concatenate([np.asarray(v) for v in self.splits.values()])
        if len(np.unique(joined)) != len(joined) or len(joined) != len(self.images):
            raise ValueError("splits must be disjoint and exhaustive")

    def split_arrays(self, split: str):
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]

    def splits_dict(self) -> dict:
        return {name: self.split_arrays(name) for name in ("train", "val", "test")}

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        for name in sorted(self.splits):
            h.update(name.encode())
            h.update(np.asarray(self.splits[name], dtype=np.int64).tobytes())
        return h.hexdigest()


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights` (sums exactly)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() == 0:
        raise ValueError("cannot allocate over zero weights")
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    remainder = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:remainder]] += 1
    return base


def stratified_split(labels: np.ndarray, rng: RngStream,
                     ratios: dict | None = None) -> dict:
    """Per-class proportional split; each split within +-1 of its exact share."""
    ratios = ratios or SPLIT_RATIOS
    names = list(ratios)
    out = {name: [] for name in names}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.child(f"class-{int(c)}").permutation(len(idx))]
        counts = largest_remainder(len(idx), [ratios[n] for n in names])
        start = 0
        for name, k in zip(names, counts):
            out[name].extend(idx[start : start + k].tolist())
            start += k
    return {name: np.array(sorted(v), dtype=np.int64) for name, v in out.items()}


# ---------------------------------------------------------------------------
# synthetic generators


def _grid(image_size: int):
    ax = (np.arange(image_size) + 0.5) / image_size
    return np.meshgrid(ax, ax, indexing="ij")


def _render(pattern_params, image_size: int) -> np.ndarray:
    gx, gy = _grid(image_size)
    freq, theta, phase, cx, cy, amp = pattern_params
    wave = np.sin(2 * np.pi * freq * (math.cos(theta) * gx + math.sin(theta) * gy)
                  + phase)
    blob = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * 0.12 ** 2))
    return amp * (0.5 * wave + 0.9 * blob)


def _class_params(classes: int, rng: RngStream, shift: float = 0.0):
    params = []
    for c in range(classes):
        crng = rng.child(f"class-{c}")
        freq = 1.5 + c + shift * float(crng.child("fshift").uniform(low=-0.3, high=0.3))
        theta = float(crng.child("theta").uniform(high=math.pi)) + shift * 0.3
        phase = float(crng.child("phase").uniform(high=2 * math.pi))
        cx, cy = crng.child("center").uniform((2,), low=0.2, high=0.8)
        amp = 1.0 + shift * float(crng.child("amp").uniform(low=-0.2, high=0.2))
        params.append((freq, theta, phase, float(cx), float(cy), amp))
    return params


def gen_synth_classification(rng: RngStream, classes: int = 3, size: int = 600,
                             image_size: int = 16, difficulty: float = 0.3,
                             variant: str = "source") -> Dataset:
    """Class-dependent grating+blob images with difficulty-scaled noise."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if variant not in ("source", "target"):
        raise ValueError(f"unknown variant {variant!r}")
    prng = rng.child(f"{variant}-patterns")
    params = _class_params(classes, prng, shift=0.0 if variant == "source" else 1.0)
    if variant == "target":
        remap = rng.child("target-remap").permutation(classes)
    else:
        remap = np.arange(classes)

    counts = largest_remainder(size, np.ones(classes))
    labels = np.concatenate([np.full(k, remap[c], dtype=np.int64)
                             for c, k in enumerate(counts)])
    pattern_ids = np.concatenate([np.full(k, c) for c, k in enumerate(counts)])
    noise_sigma = 0.05 + 0.6 * difficulty
    nrng = rng.child(f"{variant}-noise")
    images = np.empty((size, 1, image_size, image_size))
    for i, pid in enumerate(pattern_ids):
        base = _render(params[pid], image_size)
        images[i, 0] = base + noise_sigma * nrng.child(i).normal(base.shape)
    splits = stratified_split(labels, rng.child(f"{variant}-split"))
    return Dataset(name=f"synth-{variant}", images=images, labels=labels,
                   num_classes=classes, splits=splits, provenance="synthetic")


def gen_synth_conditional(rng: RngStream, cond_vocab: int = 4, size: int = 400,
                          image_size: int = 16, noise: float = 0.1) -> Dataset:
    """Images whose orientation/blob placement follow the condition id."""
    if cond_vocab < 2:
        raise ValueError("cond_vocab must be >= 2")
    gx, gy = _grid(image_size)
    counts = largest_remainder(size, np.ones(cond_vocab))
    labels = np.concatenate([np.full(k, c, dtype=np.int64)
                             for c, k in enumerate(counts)])
    nrng = rng.child("cond-noise")
    images = np.empty((size, 1, image_size, image_size))
    for i, c in enumerate(labels):
        theta = math.pi * c / cond_vocab
        wave = np.sin(2 * np.pi * 2.0 * (math.cos(theta) * gx + math.sin(theta) * gy))
        cx = 0.3 + 0.4 * (c % 2)
        cy = 0.3 + 0.4 * ((c // 2) % 2)
        blob = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * 0.15 ** 2))
        images[i, 0] = 0.5 * wave + blob + noise * nrng.child(i).normal(wave.shape)
    splits = stratified_split(labels, rng.child("cond-split"))
    return Dataset(name="synth-conditional", images=images, labels=labels,
                   num_classes=cond_vocab, splits=splits, provenance="synthetic")


def subsample_fraction(dataset: Dataset, p: float, rng: RngStream) -> Dataset:
    """Keep a stratified floor(p * |train|) subset of the train split.

    Validation and test indices are untouched so every fraction of a sweep
    is scored against the same evaluation sets.
    """
    if not 0 < p <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {p}")
    train_idx = dataset.splits["train"]
    if p == 1.0:
        return dataset
    total = int(math.floor(p * len(train_idx)))
    if total < 1:
        raise ValueError(
            f"fraction {p} of {len(train_idx)} training items yields 0 items"
        )
    train_labels = dataset.labels[train_idx]
    class_ids = np.unique(train_labels)
    class_counts = [int(np.sum(train_labels == c)) for c in class_ids]
    quota = largest_remainder(total, class_counts)
    chosen = []
    for c, k in zip(class_ids, quota):
        pool = train_idx[train_labels == c]
        pick = rng.child(f"class-{int(c)}").choice(len(pool), size=int(k))
        chosen.extend(pool[pick].tolist())
    new_splits = dict(dataset.splits)
    new_splits["train"] = np.array(sorted(chosen), dtype=np.int64)
    leftover = np.setdiff1d(train_idx, new_splits["train"])
    new_splits["unused"] = leftover
    return Dataset(name=dataset.name, images=dataset.images, labels=dataset.labels,
                   num_classes=dataset.num_classes, splits=new_splits,
                   provenance=dataset.provenance)


# ---------------------------------------------------------------------------
# PGM + CSV ingestion


def write_pgm(path, image: np.ndarray):
    """Write a 2-D array (values in [0,1]) as binary 8-bit PGM."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5/P2 PGM into a float array scaled to [0,1]."""
    raw = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif raw[i : i + 1].isspace():
            i += 1
        else:
            start = i
            while i < len(raw) and not raw[i : i + 1].isspace():
                i += 1
            tokens.append(raw[start:i])
    if len(tokens) < 4 or tokens[0] not in (b"P5", b"P2"):
        raise IngestError(f"{path}: not an 8-bit PGM (P5/P2)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 255:
        raise IngestError(f"{path}: unsupported maxval {maxval}")
    if tokens[0] == b"P5":
        pixels = np.frombuffer(raw[i + 1 : i + 1 + w * h], dtype=np.uint8)
        if pixels.size != w * h:
            raise IngestError(f"{path}: truncated pixel data")
    else:
        values = raw[i:].split()
        if len(values) != w * h:
            raise IngestError(f"{path}: expected {w * h} pixels, got {len(values)}")
        pixels = np.array([int(v) for v in values], dtype=np.float64)
    return pixels.astype(np.float64).reshape(h, w) / maxval


def _ingest_image_folder(root: Path) -> tuple[np.ndarray, np.ndarray, int]:
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise IngestError(f"{root}: need at least 2 class directories")
    images, labels = [], []
    shape = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.pgm"))
        if not files:
            raise IngestError(f"{cdir}: no .pgm files")
        for f in files:
            img = read_pgm(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise IngestError(
                    f"{f}: image shape {img.shape} differs from {shape}"
                )
            images.append(img[None])
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64), len(class_dirs)


def _ingest_csv(path: Path) -> tuple[np.ndarray, np.ndarray, int]:
    lines = path.read_text().splitlines()
    if not lines:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    inline = header[-1] == "label" and header[0].startswith("p") and len(header) > 2
    pathmode = header == ["path", "label"]
    if not (inline or pathmode):
        raise IngestError(
            f"{path}: header must be 'path,label' or 'p0..pK,label', got {lines[0]!r}"
        )
    images, labels = [], []
    side = None
    for row_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise IngestError(
                f"{path}:{row_no}: expected {len(header)} cells, got {len(cells)}"
            )
        try:
            label = int(cells[-1])
        except ValueError:
            raise IngestError(
                f"{path}:{row_no}: bad label token {cells[-1]!r}"
            ) from None
        if pathmode:
            img = read_pgm(path.parent / cells[0])
        else:
            try:
                flat = np.array([float(c) for c in cells[:-1]])
            except ValueError:
                raise IngestError(f"{path}:{row_no}: bad pixel value") from None
            n = int(math.isqrt(flat.size))
            if n * n != flat.size:
                raise IngestError(
                    f"{path}:{row_no}: {flat.size} pixels is not a square image"
                )
            img = flat.reshape(n, n)
        if side is None:
            side = img.shape
        elif img.shape != side:
            raise IngestError(f"{path}:{row_no}: inconsistent image size")
        images.append(img[None])
        labels.append(label)
    if not images:
        raise IngestError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if labels.min() < 0:
        raise IngestError(f"{path}: negative label")
    return np.stack(images), labels, int(labels.max()) + 1


def ingest(path, fmt: str, seed: int = 0) -> Dataset:
    """Load an image-folder or CSV dataset with a seeded 70/15/15 split."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: does not exist")
    if fmt == "image-folder":
        images, labels, num_classes = _ingest_image_folder(path)
    elif fmt == "csv":
        images, labels, num_classes = _ingest_csv(path)
    else:
        raise ValueError(f"unknown ingest format {fmt!r}")
    splits = stratified_split(labels, RngStream(seed).child("ingest-split"))
    return Dataset(name=path.name, images=images, labels=labels,
                   num_classes=num_classes, splits=splits, provenance=fmt)
