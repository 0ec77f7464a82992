"""Datasets, loaders and the per-student training-set transformations."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from morphence import nn

IMAGE_KINDS = ("translate", "rotate", "pixel-noise")
FLAT_KINDS = ("affine", "jitter")
TRANSFORM_KINDS = ("identity",) + IMAGE_KINDS + FLAT_KINDS

# validity ranges used when drawing transforms
MAX_SHIFT_FRACTION = 0.15
MAX_ROTATION_DEG = 20.0
MAX_PIXEL_NOISE = 0.05
MAX_AFFINE_STRENGTH = 0.15
MAX_JITTER = 0.05

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class TransformError(ValueError):
    pass


class TransformTooAggressive(TransformError):
    """Too few transformed examples kept their label; draw milder parameters."""

    def __init__(self, kept_fraction: float, min_keep: float):
        super().__init__(f"transform kept {kept_fraction:.3f} of examples, need >= {min_keep}")
        self.kept_fraction = kept_fraction
        self.min_keep = min_keep


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    lb: float = 0.0
    ub: float = 1.0
    name: str = "data"
    image_shape: tuple[int, int, int] | None = None  # (height, width, channels)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(x) != len(y):
            raise nn.ShapeError(f"{len(x)} examples but {len(y)} labels")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise nn.ValidationError("labels outside [0, num_classes)")
        if x.size and (x.min() < self.lb or x.max() > self.ub):
            raise nn.ValidationError(f"features outside [{self.lb}, {self.ub}]")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != x.shape[1]:
            raise nn.ShapeError(f"image shape {self.image_shape} does not match width {x.shape[1]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])

    def with_inputs(self, x, name: str | None = None) -> "Dataset":
        return replace(self, x=x, name=name or self.name)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))

    def concat(self, other: "Dataset") -> "Dataset":
        return replace(self, x=np.vstack([self.x, other.x]), y=np.concatenate([self.y, other.y]))


def save_dataset(data: Dataset, path, provenance: dict | None = None) -> None:
    """Store a dataset (e.g. an adversarial set) with JSON provenance metadata."""
    meta = {
        "name": data.name,
        "num_classes": data.num_classes,
        "lb": data.lb,
        "ub": data.ub,
        "image_shape": data.image_shape,
        "provenance": provenance or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, x=data.x, y=data.y, meta=np.array(json.dumps(meta)))


def load_dataset(path) -> tuple[Dataset, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        shape = tuple(meta["image_shape"]) if meta["image_shape"] else None
        data = Dataset(z["x"], z["y"], meta["num_classes"], meta["lb"], meta["ub"], meta["name"], shape)
    return data, meta["provenance"]


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an MNIST-style IDX image/label file pair, scaling pixels to [0, 1]."""
    with _open(images_path) as fh:
        raw_images = fh.read()
    with _open(labels_path) as fh:
        raw_labels = fh.read()
    if len(raw_images) < 16 or len(raw_labels) < 8:
        raise FormatError("IDX header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic {magic:#010x}")
    lmagic, lcount = struct.unpack(">II", raw_labels[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic {lmagic:#010x}")
    if count != lcount:
        raise FormatError(f"{count} images but {lcount} labels")
    if len(raw_images) - 16 < count * rows * cols or len(raw_labels) - 8 < count:
        raise FormatError("IDX payload truncated")
    pixels = np.frombuffer(raw_images, np.uint8, count * rows * cols, 16)
    labels = np.frombuffer(raw_labels, np.uint8, count, 8)
    return Dataset(
        pixels.reshape(count, rows * cols) / 255.0,
        labels,
        num_classes,
        name=Path(images_path).name,
        image_shape=(rows, cols, 1),
    )


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` (pixels re-quantised to uint8)."""
    h, w, _ = data.image_shape
    pixels = np.clip(np.rint(data.x * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(data), h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(data)))
        fh.write(data.y.astype(np.uint8).tobytes())


def load_csv(path, num_classes: int | None = None, lb=0.0, ub=1.0) -> Dataset:
    """One example per row, integer label in the last column."""
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] < 2:
        raise FormatError("CSV needs at least one feature column and a label column")
    y = table[:, -1].astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(table[:, :-1], y, k, lb, ub, name=Path(path).stem)


def gen_blobs(
    num_per_class: int,
    k: int,
    spread: float,
    seed: int = 0,
    dim: int = 2,
) -> Dataset:
    """Gaussian clusters around well separated centres inside the unit cube."""
    if k < 2:
        raise nn.ValidationError("need at least two classes")
    if spread <= 0 or num_per_class < 1:
        raise nn.ValidationError("spread and num_per_class must be positive")
    rng = np.random.default_rng(seed)
    # centres on a scaled simplex-like layout: spread k points as far apart as possible
    best = None
    for _ in range(64):
        cand = rng.uniform(0.2, 0.8, size=(k, dim))
        d = np.linalg.norm(cand[:, None] - cand[None], axis=-1)
        sep = d[np.triu_indices(k, 1)].min()
        if best is None or sep > best[0]:
            best = (sep, cand)
    centres = best[1]
    x = np.vstack([c + rng.normal(0, spread, size=(num_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(k), num_per_class)
    order = rng.permutation(len(y))
    return Dataset(np.clip(x[order], 0.0, 1.0), y[order], k, name=f"blobs-k{k}-d{dim}")


def load_digits() -> Dataset:
    """scikit-learn's 8x8 handwritten digits scaled to [0, 1]."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10, name="digits", image_shape=(8, 8, 1))


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}")
        if self.kind == "identity" and self.params:
            raise TransformError("identity transform takes no parameters")

    def key(self) -> tuple:
        return (self.kind, tuple(sorted((k, _freeze(v)) for k, v in self.params.items())), self.seed)

    def within_ranges(self, image_shape=None) -> bool:
        """Whether the magnitudes lie inside the ranges :func:`draw_transform` samples from.

        Explicitly constructed specs may exceed them (e.g. to probe the validity filter).
        """
        p = self.params
        if self.kind == "identity":
            return True
        if self.kind == "translate":
            h, w, _ = image_shape
            dx, dy = p["shift"]
            return abs(dx) <= max(1, int(MAX_SHIFT_FRACTION * w)) and abs(dy) <= max(1, int(MAX_SHIFT_FRACTION * h))
        if self.kind == "rotate":
            return abs(p["angle"]) <= MAX_ROTATION_DEG
        if self.kind == "pixel-noise":
            return 0 <= p["sigma"] <= MAX_PIXEL_NOISE
        if self.kind == "jitter":
            return 0 <= p["sigma"] <= MAX_JITTER
        return 0 <= p["strength"] <= MAX_AFFINE_STRENGTH

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)))


def _freeze(v):
    return tuple(_freeze(i) for i in v) if isinstance(v, (list, tuple)) else v


def _images(data: Dataset) -> np.ndarray:
    h, w, c = data.image_shape
    return data.x.reshape(len(data), h, w, c)


def apply_transform(data: Dataset, t: TransformSpec) -> Dataset:
    """Apply ``t`` to every example; labels are kept and features clamped to bounds."""
    if t.kind == "identity":
        return replace(data, x=data.x.copy())
    if t.kind in IMAGE_KINDS and t.kind != "pixel-noise" and data.image_shape is None:
        raise TransformError(f"{t.kind} needs image-shaped data")
    p = t.params
    if t.kind == "translate":
        dx, dy = (int(v) for v in p.get("shift", (0, 0)))
        imgs = _images(data)
        out = np.zeros_like(imgs)
        h, w = imgs.shape[1:3]
        # out[r, c] = in[r - dy, c - dx]; zero fill where the source is off-image
        out[:, max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = imgs[
            :, max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)
        ]
        x = out.reshape(len(data), -1)
    elif t.kind == "rotate":
        # grid-constant fades smoothly into the zero background instead of dropping border pixels
        x = ndimage.rotate(_images(data), float(p["angle"]), axes=(2, 1), reshape=False, order=1, mode="grid-constant")
        x = x.reshape(len(data), -1)
    elif t.kind in ("pixel-noise", "jitter"):
        rng = np.random.default_rng(t.seed)
        x = data.x + rng.normal(0.0, float(p["sigma"]), size=data.x.shape)
    elif t.kind == "affine":
        d = data.dim
        rng = np.random.default_rng(t.seed)
        s = float(p["strength"])
        a = np.eye(d) + s * rng.uniform(-1, 1, size=(d, d))
        centre = 0.5 * (data.lb + data.ub)
        x = (data.x - centre) @ a.T + centre + s * rng.uniform(-1, 1, size=d) * (data.ub - data.lb) * 0.5
    else:  # pragma: no cover
        raise TransformError(t.kind)
    return replace(data, x=np.clip(x, data.lb, data.ub), name=f"{data.name}|{t.kind}")


def validate_transform(base: nn.Model, transformed: Dataset, min_keep: float = 0.9) -> Dataset:
    """Keep only transformed examples that ``base`` still assigns their original label."""
    keep = nn.predict(base, transformed.x) == transformed.y
    frac = float(keep.mean()) if len(keep) else 0.0
    if frac < min_keep:
        raise TransformTooAggressive(frac, min_keep)
    return transformed.subset(np.flatnonzero(keep))


def candidate_kinds(data: Dataset) -> tuple[str, ...]:
    return IMAGE_KINDS if data.image_shape is not None else FLAT_KINDS


def draw_kind(data: Dataset, rng: np.random.Generator) -> str:
    kinds = candidate_kinds(data)
    return kinds[int(rng.integers(len(kinds)))]


def draw_transform(
    data: Dataset, rng: np.random.Generator, scale: float = 1.0, kind: str | None = None
) -> TransformSpec:
    """Draw a random transform suited to ``data``; ``scale`` < 1 yields milder parameters."""
    seed = int(rng.integers(2**31))
    kind = kind or draw_kind(data, rng)
    if kind in IMAGE_KINDS and kind != "pixel-noise" and data.image_shape is None:
        raise TransformError(f"{kind} needs image-shaped data")
    if kind in IMAGE_KINDS:
        h, w, _ = data.image_shape or (1, 1, 1)
        if kind == "translate":
            max_dx = max(1, int(MAX_SHIFT_FRACTION * w * scale))
            max_dy = max(1, int(MAX_SHIFT_FRACTION * h * scale))
            shift = (0, 0)
            while shift == (0, 0):
                shift = (int(rng.integers(-max_dx, max_dx + 1)), int(rng.integers(-max_dy, max_dy + 1)))
            return TransformSpec("translate", {"shift": list(shift)}, 0)
        if kind == "rotate":
            angle = float(rng.uniform(-1, 1) * MAX_ROTATION_DEG * scale)
            return TransformSpec("rotate", {"angle": round(angle, 4)}, 0)
        return TransformSpec("pixel-noise", {"sigma": round(float(rng.uniform(0.2, 1)) * MAX_PIXEL_NOISE * scale, 5)}, seed)
    if kind == "affine":
        return TransformSpec("affine", {"strength": round(float(rng.uniform(0.2, 1)) * MAX_AFFINE_STRENGTH * scale, 5)}, seed)
    return TransformSpec("jitter", {"sigma": round(float(rng.uniform(0.2, 1)) * MAX_JITTER * scale, 5)}, seed)


def draw_distinct_transforms(data: Dataset, n: int, seed: int = 0) -> list[TransformSpec]:
    """``n`` pairwise distinct transform specs."""
    rng = np.random.default_rng(seed)
    specs: list[TransformSpec] = []
    seen = set()
    attempts = 0
    while len(specs) < n:
        t = draw_transform(data, rng)
        attempts += 1
        if t.key() in seen:
            if attempts > 1000 * n:
                raise TransformError("could not draw enough distinct transforms")
            continue
        seen.add(t.key())
        specs.append(t)
    return specs
