"""Score-labeled image datasets.

Three sources: CSV manifests referencing PGM (P5) or raw-raster images,
a procedural synthetic generator with a controlled imbalance shape, and
programmatic construction. Datasets are immutable after construction and
every generator is deterministic per seed.
"""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadConfig,
    BadFraction,
    BadScore,
    DuplicateId,
    EmptyDataset,
    IoError,
    MissingFile,
    ShapeMismatch,
)
from .jsonio import read_json, write_canonical_json
from .net import seeded_rng

SPLIT_STREAM = 0x59B1
SYNTH_STREAM = 0x5A11

MANIFEST_HEADER = ["id", "path", "score"]

# Heavily skewed default: ~87% of the mass sits on the three middle
# classes, ordered 4 > 3 > 5, with two nearly-empty top classes.
DEFAULT_PROPORTIONS = (0.02, 0.045, 0.28, 0.40, 0.19, 0.045, 0.018, 0.002)


@dataclass(frozen=True)
class ScoredImage:
    """One sample: stable id, (H, W, C) float64 pixels in [0, 1], and an
    integer score label."""

    id: str
    pixels: np.ndarray
    score: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ShapeMismatch(f"pixels must be (H, W, C), got shape {px.shape}")
        if not np.isfinite(px).all():
            raise BadConfig(f"sample {self.id!r} has non-finite pixels")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise BadConfig(f"sample {self.id!r} has pixels outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "score", int(self.score))


@dataclass(frozen=True)
class DatasetStats:
    n_classes: int
    counts: tuple  # counts[i] is the number of samples with score i + 1

    @property
    def total(self):
        return sum(self.counts)

    def to_json_dict(self):
        return {"classes": self.n_classes, "counts": list(self.counts), "total": self.total}


@dataclass(frozen=True)
class Dataset:
    images: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.n_classes < 2:
            raise BadConfig("need at least two classes")
        seen = set()
        shape = None
        for img in self.images:
            if img.id in seen:
                raise DuplicateId(f"duplicate sample id {img.id!r}")
            seen.add(img.id)
            if not 1 <= img.score <= self.n_classes:
                raise BadScore(f"sample {img.id!r} has score {img.score}, expected [1, {self.n_classes}]")
            if shape is None:
                shape = img.pixels.shape
            elif img.pixels.shape != shape:
                raise ShapeMismatch(
                    f"sample {img.id!r} has shape {img.pixels.shape}, dataset uses {shape}"
                )

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def image_shape(self):
        if not self.images:
            raise EmptyDataset("dataset has no images")
        return self.images[0].pixels.shape

    def ids(self):
        return tuple(img.id for img in self.images)

    def scores(self):
        return np.array([img.score for img in self.images], dtype=np.int64)

    def stats(self) -> DatasetStats:
        counts = [0] * self.n_classes
        for img in self.images:
            counts[img.score - 1] += 1
        return DatasetStats(n_classes=self.n_classes, counts=tuple(counts))

    def arrays(self):
        """(images (n, H, W, C), zero-based labels (n,)) as fresh arrays."""
        if not self.images:
            raise EmptyDataset("dataset has no images")
        x = np.stack([img.pixels for img in self.images]).astype(np.float64)
        y = self.scores() - 1
        return x, y

    def subset(self, indices) -> "Dataset":
        return Dataset(images=tuple(self.images[i] for i in indices), n_classes=self.n_classes)


# ---------------------------------------------------------------------------
# PGM and raw-raster files


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM (P5, maxval 255) as a (H, W) uint8 array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MissingFile(f"cannot read image {path}: {exc}") from exc

    # Header tokens may be separated by whitespace and '#' comments.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval

    if tokens[0] != b"P5":
        raise IoError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise IoError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise IoError(f"{path}: only 8-bit PGM supported (maxval 255, got {maxval})")
    data = blob[pos : pos + width * height]
    if len(data) != width * height:
        raise IoError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ShapeMismatch("PGM export expects a 2-D uint8 array")
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(gray.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc


def read_raster(path) -> np.ndarray:
    """Flat little-endian float64 raster with a JSON sidecar holding
    {"height", "width", "channels"}; returns (H, W, C)."""
    sidecar = str(path) + ".json"
    if not os.path.exists(sidecar):
        raise MissingFile(f"raster sidecar {sidecar} not found")
    meta = read_json(sidecar)
    try:
        h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IoError(f"{sidecar}: malformed raster sidecar: {exc}") from exc
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MissingFile(f"cannot read raster {path}: {exc}") from exc
    if len(blob) != h * w * c * 8:
        raise IoError(f"{path}: raster size does not match sidecar dimensions")
    return np.frombuffer(blob, dtype="<f8").reshape(h, w, c).astype(np.float64)


def write_raster(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ShapeMismatch("raster export expects a (H, W, C) array")
    try:
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(pixels, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write raster {path}: {exc}") from exc
    h, w, c = pixels.shape
    write_canonical_json({"height": h, "width": w, "channels": c}, str(path) + ".json")


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)[:, :, None] / 255.0
    if ext == ".raw":
        return read_raster(path)
    raise IoError(f"unsupported image format {ext!r} (expected .pgm or .raw)")


# ---------------------------------------------------------------------------
# Manifests


def load_manifest(path, n_classes) -> Dataset:
    """Read a `id,path,score` CSV; image paths resolve relative to it."""
    if not os.path.exists(path):
        raise MissingFile(f"manifest {path} not found")
    base = os.path.dirname(os.path.abspath(path))
    images = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IoError(f"{path}: empty manifest file") from None
        if header != MANIFEST_HEADER:
            raise IoError(f"{path}: expected header {','.join(MANIFEST_HEADER)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise IoError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sample_id, rel, score_text = row
            if sample_id in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {sample_id!r}")
            seen.add(sample_id)
            try:
                score = int(score_text)
            except ValueError:
                raise BadScore(f"{path}:{lineno}: score {score_text!r} is not an integer") from None
            if not 1 <= score <= n_classes:
                raise BadScore(f"{path}:{lineno}: score {score} outside [1, {n_classes}]")
            img_path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.exists(img_path):
                raise MissingFile(f"{path}:{lineno}: image {img_path} not found")
            images.append(ScoredImage(id=sample_id, pixels=read_image(img_path), score=score))
    return Dataset(images=tuple(images), n_classes=n_classes)


def quantize_to_u8(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats onto 0..255 with round-half-up."""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_dataset(dataset: Dataset, out_dir, manifest_name="manifest.csv") -> str:
    """Write `images/` plus a manifest; grayscale goes to PGM (quantized
    to 8 bits), multi-channel data to raw rasters. Returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    for img in dataset:
        if img.pixels.shape[2] == 1:
            rel = os.path.join("images", f"{img.id}.pgm")
            write_pgm(os.path.join(out_dir, rel), quantize_to_u8(img.pixels[:, :, 0]))
        else:
            rel = os.path.join("images", f"{img.id}.raw")
            write_raster(os.path.join(out_dir, rel), img.pixels)
        rows.append((img.id, rel.replace(os.sep, "/"), img.score))
    manifest_path = os.path.join(out_dir, manifest_name)
    write_manifest(rows, manifest_path)
    return manifest_path


def write_manifest(rows, path) -> None:
    """Write (id, path, score) rows as UTF-8 CSV with LF line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for sample_id, rel, score in rows:
        writer.writerow([sample_id, rel, int(score)])
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    """Procedural dataset spec: class histogram shape, boundary-ambiguity
    rate for the dominant classes, square grayscale image size, seed."""

    n_classes: int = 8
    size: int = 3100
    proportions: tuple = DEFAULT_PROPORTIONS
    ambiguity: float = 0.25
    image_size: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if self.n_classes < 2:
            raise BadConfig("need at least two classes")
        if self.size < 1:
            raise BadConfig("size must be >= 1")
        if len(self.proportions) != self.n_classes:
            raise BadConfig("one proportion per class required")
        if any(p < 0 for p in self.proportions):
            raise BadConfig("proportions must be non-negative")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise BadConfig("proportions must sum to 1")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise BadConfig("ambiguity rate must lie in [0, 1]")
        if self.image_size < 8:
            raise BadConfig("image size must be >= 8")
        if self.seed < 0:
            raise BadConfig("seed must be non-negative")

    def to_json_dict(self):
        return {
            "classes": self.n_classes,
            "size": self.size,
            "proportions": list(self.proportions),
            "ambiguity": self.ambiguity,
            "image_size": self.image_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(d):
        try:
            cfg = {}
            if "classes" in d:
                cfg["n_classes"] = int(d["classes"])
            if "size" in d:
                cfg["size"] = int(d["size"])
            if "proportions" in d:
                cfg["proportions"] = tuple(d["proportions"])
            if "ambiguity" in d:
                cfg["ambiguity"] = float(d["ambiguity"])
            if "image_size" in d:
                cfg["image_size"] = int(d["image_size"])
            if "seed" in d:
                cfg["seed"] = int(d["seed"])
            return SynthConfig(**cfg)
        except (TypeError, ValueError) as exc:
            raise BadConfig(f"malformed synthetic config: {exc}") from exc


def apportion(proportions, total) -> list:
    """Largest-remainder rounding of ``proportions * total``; each count is
    within one sample of its exact share."""
    exact = [p * total for p in proportions]
    counts = [int(e) for e in exact]
    remainders = sorted(
        range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    return counts


def majority_triple(proportions) -> tuple:
    """Up to three dominant classes (1-based scores), largest share first,
    ties broken toward the lower score."""
    order = sorted(range(len(proportions)), key=lambda i: (-proportions[i], i))
    return tuple(i + 1 for i in order[:3] if proportions[i] > 0)


def generative_parameters(cfg: SynthConfig):
    """Scores plus the latent level driving each image's appearance.

    The unit interval is cut into ``n_classes`` equal bins; a sample of
    score s draws its level from bin s. Interior draws stay away from the
    bin edges, while a configurable fraction of the dominant classes'
    samples lands within a sliver of an inner edge: the label is kept but
    the appearance is nearly that of the neighboring class.
    """
    rng = seeded_rng(SYNTH_STREAM, cfg.seed)
    counts = apportion(cfg.proportions, cfg.size)
    dominant = set(majority_triple(cfg.proportions))
    width = 1.0 / cfg.n_classes
    margin = 0.2 * width
    sliver = 0.02 * width

    scores = []
    levels = []
    for cls in range(1, cfg.n_classes + 1):
        lo = (cls - 1) * width
        hi = cls * width
        for _ in range(counts[cls - 1]):
            ambiguous = cls in dominant and rng.random() < cfg.ambiguity
            if ambiguous:
                edges = []
                if cls > 1:
                    edges.append("low")
                if cls < cfg.n_classes:
                    edges.append("high")
                edge = edges[rng.integers(len(edges))]
                if edge == "low":
                    g = lo + rng.random() * sliver
                else:
                    g = hi - rng.random() * sliver
            else:
                g = lo + margin + rng.random() * (width - 2 * margin)
            scores.append(cls)
            levels.append(g)
    order = rng.permutation(len(scores))
    return (
        np.array(scores, dtype=np.int64)[order],
        np.array(levels, dtype=np.float64)[order],
    )


def _render_image(level, size, rng) -> np.ndarray:
    """Grayscale blob scene whose blob count and brightness both grow
    with ``level``; pixels are quantized to 8-bit steps."""
    background = 0.08 + 0.12 * level
    blob_count = 1 + int(level * 8.999)
    brightness = 0.35 + 0.6 * level

    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), background)
    for _ in range(blob_count):
        cy = rng.uniform(1.0, size - 1.0)
        cx = rng.uniform(1.0, size - 1.0)
        radius = rng.uniform(1.2, 2.8)
        img += brightness * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (radius * radius))
    img += rng.uniform(-0.03, 0.03, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (quantize_to_u8(img) / 255.0)[:, :, None]


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic procedural dataset matching ``cfg``'s histogram."""
    scores, levels = generative_parameters(cfg)
    rng = seeded_rng(SYNTH_STREAM, cfg.seed, 1)
    images = []
    for i, (score, level) in enumerate(zip(scores, levels)):
        images.append(
            ScoredImage(
                id=f"synth-{i:05d}",
                pixels=_render_image(level, cfg.image_size, rng),
                score=int(score),
            )
        )
    return Dataset(images=tuple(images), n_classes=cfg.n_classes)


# ---------------------------------------------------------------------------
# Splitting


def split(dataset: Dataset, fraction: float, seed: int):
    """Disjoint, exhaustive (train, rest) partition; seeded and stable."""
    if not 0.0 < fraction < 1.0:
        raise BadFraction(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    order = seeded_rng(SPLIT_STREAM, seed).permutation(n)
    n_train = int(fraction * n + 0.5)
    train_idx = sorted(order[:n_train].tolist())
    rest_idx = sorted(order[n_train:].tolist())
    return dataset.subset(train_idx), dataset.subset(rest_idx)
