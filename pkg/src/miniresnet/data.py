"""Manifests, filtering, image preprocessing, fold splits and synthetic faces."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ImageReadError, ManifestError
from .serialize import read_tensors, write_tensors

ANGLES = ("yaw", "pitch", "roll")
SOURCES = ("AFLW", "AFW", "synthetic")
MANIFEST_HEADER = ["image_path", "x", "y", "w", "h", "yaw", "pitch", "roll", "source"]
LABEL_SCALE = 100.0
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PoseSample:
    image_path: str
    x: float
    y: float
    w: float
    h: float
    yaw: float
    pitch: float
    roll: float
    source: str = "synthetic"
    row: int = 0

    def angle(self, name: str) -> float:
        return float(getattr(self, name))

    @property
    def face_box(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h

    @property
    def min_face_side(self) -> float:
        return min(self.w, self.h)


@dataclass(frozen=True)
class FilterPolicy:
    """Angle bounds are symmetric and inclusive: |angle| <= bound is kept."""

    yaw_range: float = 100.0
    pitch_range: float = 45.0
    roll_range: float = 25.0
    min_face_px: float = 0.0
    afw_min_face_px: float = 150.0

    def __post_init__(self):
        if min(self.yaw_range, self.pitch_range, self.roll_range) < 0:
            raise ConfigError("angle ranges must be non-negative")
        if self.min_face_px < 0 or self.afw_min_face_px <= 0:
            raise ConfigError("minimum face sizes must be positive")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def load_manifest(path) -> list[PoseSample]:
    """Parse a CSV manifest. Relative image paths resolve against its directory.

    Row numbers count the header as row 1, matching what a spreadsheet shows.
    """
    path = Path(path)
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("manifest is empty (missing header)", row=1) from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}", row=1)
        samples = []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", row=rownum)
            rec = dict(zip(MANIFEST_HEADER, (c.strip() for c in row)))
            values = {}
            for col in ("x", "y", "w", "h", "yaw", "pitch", "roll"):
                try:
                    v = float(rec[col])
                except ValueError:
                    raise ManifestError(f"not a number: {rec[col]!r}", row=rownum, column=col) from None
                if not math.isfinite(v):
                    raise ManifestError(f"non-finite value {rec[col]!r}", row=rownum, column=col)
                values[col] = v
            if values["w"] <= 0 or values["h"] <= 0:
                raise ManifestError("face box width and height must be positive", row=rownum, column="w")
            if values["x"] < 0 or values["y"] < 0:
                raise ManifestError("face box origin must be non-negative", row=rownum, column="x")
            if rec["source"] not in SOURCES:
                raise ManifestError(f"unknown source {rec['source']!r}", row=rownum, column="source")
            img = Path(rec["image_path"])
            if not img.is_absolute():
                img = base / img
            samples.append(PoseSample(image_path=str(img), source=rec["source"], row=rownum, **values))
    return samples


def write_manifest(path, samples: Iterable[PoseSample], relative_to=None) -> Path:
    path = Path(path)
    rel = Path(relative_to) if relative_to is not None else path.parent
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            p = Path(s.image_path)
            try:
                p = p.relative_to(rel)
            except ValueError:
                pass
            w.writerow([p.as_posix(), _num(s.x), _num(s.y), _num(s.w), _num(s.h),
                        _num(s.yaw), _num(s.pitch), _num(s.roll), s.source])
    return path


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def rejection_reason(sample: PoseSample, policy: FilterPolicy, target_size: int) -> str | None:
    """Name of the first filter rule that removes ``sample``, or None if kept."""
    if abs(sample.yaw) > policy.yaw_range:
        return "yaw_range"
    if abs(sample.pitch) > policy.pitch_range:
        return "pitch_range"
    if abs(sample.roll) > policy.roll_range:
        return "roll_range"
    if sample.min_face_side < max(target_size, policy.min_face_px):
        return "face_too_small"
    if sample.source == "AFW" and not sample.min_face_side > policy.afw_min_face_px:
        return "afw_face_size"
    return None


def filter_samples(samples: Sequence[PoseSample], policy: FilterPolicy, target_size: int) -> list[PoseSample]:
    return [s for s in samples if rejection_reason(s, policy, target_size) is None]


def filter_stats(samples: Sequence[PoseSample], policy: FilterPolicy, target_size: int) -> dict:
    reasons = Counter(rejection_reason(s, policy, target_size) for s in samples)
    kept = reasons.pop(None, 0)
    return {"total": len(samples), "kept": kept, "dropped": dict(sorted(reasons.items()))}


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load an image as float64 in [0, 255]; grayscale (H, W) or color (H, W, 3)."""
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                return np.asarray(im, dtype=np.float64) * (255.0 / 65535.0)
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64)
    except FileNotFoundError:
        raise ImageReadError(path, "file not found") from None
    except OSError as exc:
        raise ImageReadError(path, str(exc)) from exc


def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment (edges clamped)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(image, face_box, target_size: int) -> np.ndarray:
    """Crop -> grayscale -> resize -> rescale [0, 255] to [-1, 1].

    ``image`` is a path or an array; returns a float32 (1, S, S) array.
    """
    arr = read_image(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float64)
    x, y, w, h = (int(round(v)) for v in face_box)
    H, W = arr.shape[:2]
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W or y + h > H:
        where = f" in {image}" if isinstance(image, (str, Path)) else ""
        raise ConfigError(f"face box {(x, y, w, h)} outside image of size {W}x{H}{where}")
    crop = to_grayscale(arr[y : y + h, x : x + w])
    small = resize_bilinear(crop, target_size, target_size)
    out = np.clip(small / 127.5 - 1.0, -1.0, 1.0)
    return out.astype(np.float32)[None]


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def normalize_label(degrees):
    """[-100, 100] degrees -> [-1, 1]."""
    if np.ndim(degrees) == 0:
        return float(degrees) / LABEL_SCALE
    return np.asarray(degrees, dtype=np.float64) / LABEL_SCALE


def denormalize_label(normalized):
    """Inverse of :func:`normalize_label` (exact up to one ulp in degrees)."""
    if np.ndim(normalized) == 0:
        return float(normalized) * LABEL_SCALE
    return np.asarray(normalized, dtype=np.float64) * LABEL_SCALE


# ---------------------------------------------------------------------------
# Prepared datasets
# ---------------------------------------------------------------------------


@dataclass
class PreparedDataset:
    images: np.ndarray  # (N, 1, S, S) float32 in [-1, 1]
    degrees: np.ndarray  # (N, 3) float64, columns yaw/pitch/roll
    rows: list[int] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if self.degrees.shape != (n, 3):
            raise ConfigError(f"labels shape {self.degrees.shape} does not match {n} images")
        if not self.rows:
            self.rows = list(range(n))
        if not self.paths:
            self.paths = [""] * n
        if not self.sources:
            self.sources = ["synthetic"] * n

    def __len__(self) -> int:
        return len(self.images)

    @property
    def target_size(self) -> int:
        return int(self.images.shape[-1])

    def angle_degrees(self, angle: str) -> np.ndarray:
        return self.degrees[:, ANGLES.index(angle)]

    def labels(self, angle: str) -> np.ndarray:
        return normalize_label(self.angle_degrees(angle))

    def subset(self, indices) -> "PreparedDataset":
        idx = np.asarray(indices, dtype=int)
        return PreparedDataset(
            images=self.images[idx],
            degrees=self.degrees[idx],
            rows=[self.rows[i] for i in idx],
            paths=[self.paths[i] for i in idx],
            sources=[self.sources[i] for i in idx],
        )

    def check_bounds(self) -> None:
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ConfigError("pixel values outside [-1, 1]")
        lab = normalize_label(self.degrees)
        if lab.size and (lab.min() < -1 or lab.max() > 1):
            raise ConfigError("normalized labels outside [-1, 1]")

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensors(d / "dataset.bin", {"images": self.images, "degrees": self.degrees},
                      meta={"target_size": self.target_size, "count": len(self)})
        index = {
            "format": "miniresnet-prepared",
            "target_size": self.target_size,
            "count": len(self),
            "angles": list(ANGLES),
            "blob": "dataset.bin",
            "stats": self.stats,
            "samples": [
                {"row": r, "image_path": p, "source": s} for r, p, s in zip(self.rows, self.paths, self.sources)
            ],
        }
        (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "PreparedDataset":
        d = Path(directory)
        try:
            index = json.loads((d / "index.json").read_text())
        except FileNotFoundError:
            raise ConfigError(f"no prepared dataset in {d} (index.json missing)") from None
        tensors, _ = read_tensors(d / index.get("blob", "dataset.bin"))
        samples = index.get("samples", [])
        return cls(
            images=tensors["images"].astype(np.float32),
            degrees=tensors["degrees"].astype(np.float64),
            rows=[s["row"] for s in samples],
            paths=[s["image_path"] for s in samples],
            sources=[s["source"] for s in samples],
            stats=index.get("stats", {}),
        )


def prepare_dataset(samples: Sequence[PoseSample], target_size: int, policy: FilterPolicy | None = None) -> PreparedDataset:
    policy = policy or FilterPolicy()
    kept = filter_samples(samples, policy, target_size)
    images = np.zeros((len(kept), 1, target_size, target_size), dtype=np.float32)
    for i, s in enumerate(kept):
        images[i] = preprocess_image(s.image_path, s.face_box, target_size)
    degrees = np.array([[s.yaw, s.pitch, s.roll] for s in kept], dtype=np.float64).reshape(len(kept), 3)
    ds = PreparedDataset(
        images=images,
        degrees=degrees,
        rows=[s.row for s in kept],
        paths=[s.image_path for s in kept],
        sources=[s.source for s in kept],
        stats=filter_stats(samples, policy, target_size),
    )
    ds.check_bounds()
    return ds


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


def split_kfold(n, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` folds.

    ``n`` may be a dataset (its length is used). Earlier folds take the
    remainder, so sizes differ by at most one.
    """
    n = n if isinstance(n, (int, np.integer)) else len(n)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# Synthetic faces
# ---------------------------------------------------------------------------

DEFAULT_RANGES = {"yaw": 90.0, "pitch": 30.0, "roll": 20.0}
# Desk-scale preset: yaw varies, the nuisance angles stay at zero so a
# reduced-width network can fit the set within a short schedule.
DESK_RANGES = {"yaw": 90.0, "pitch": 0.0, "roll": 0.0}


def _blob(u, v, cu, cv, ru, rv, soft):
    r = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / soft, -50, 50)))


def render_face(size: int, yaw: float, pitch: float, roll: float, margin: int | None = None,
                noise: np.ndarray | None = None) -> np.ndarray:
    """Draw a schematic face on a square canvas; returns uint8 (C, C).

    The face occupies the central ``size`` x ``size`` box. Yaw shifts the
    features sideways and shades the head, pitch shifts them vertically and
    roll rotates the whole pattern in the image plane.
    """
    margin = size // 4 if margin is None else margin
    canvas = size + 2 * margin
    coords = (np.arange(canvas) + 0.5 - canvas / 2) / (size / 2)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    r = math.radians(roll)
    u, v = u * math.cos(r) + v * math.sin(r), -u * math.sin(r) + v * math.cos(r)
    sy, cy = math.sin(math.radians(yaw)), math.cos(math.radians(yaw))
    sp = math.sin(math.radians(pitch))
    soft = 0.04

    head = _blob(u, v, 0.0, 0.0, 0.78, 0.95, soft)
    shade = 0.62 + 0.25 * sy * u + 0.12 * sp * v
    fx, fy = 0.45 * sy, 0.35 * sp
    eyes = _blob(u, v, fx - 0.3 * cy, -0.25 + fy, 0.12 * (0.4 + 0.6 * cy), 0.08, soft) + _blob(
        u, v, fx + 0.3 * cy, -0.25 + fy, 0.12 * (0.4 + 0.6 * cy), 0.08, soft
    )
    nose = _blob(u, v, 1.35 * fx, 0.05 + fy, 0.07, 0.16, soft)
    mouth = _blob(u, v, fx, 0.45 + fy, 0.28 * (0.3 + 0.7 * cy), 0.06, soft)
    face = shade - 0.45 * np.clip(eyes, 0, 1) - 0.25 * nose - 0.35 * mouth
    img = 0.18 + head * (face - 0.18)
    if noise is not None:
        img = img + noise
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def make_synthetic_dataset(n: int, seed: int, target_size: int, out_dir, ranges: dict | None = None,
                           noise_std: float = 0.01) -> Path:
    """Render ``n`` synthetic faces to ``out_dir`` and write ``manifest.csv``.

    Labels are uniform in ``±ranges[angle]`` degrees. The same arguments
    produce byte-identical files.
    """
    if n <= 0:
        raise ConfigError("n must be positive")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    margin = target_size // 4
    canvas = target_size + 2 * margin
    samples = []
    for i in range(n):
        angles = {a: float(np.round(rng.uniform(-ranges[a], ranges[a]), 3)) for a in ANGLES}
        noise = rng.normal(0.0, noise_std, (canvas, canvas)) if noise_std > 0 else None
        img = render_face(target_size, angles["yaw"], angles["pitch"], angles["roll"], margin, noise)
        rel = Path("images") / f"face_{i:05d}.png"
        Image.fromarray(img, mode="L").save(out / rel, optimize=False)
        samples.append(PoseSample(str(out / rel), margin, margin, target_size, target_size,
                                  source="synthetic", row=i + 2, **angles))
    write_manifest(out / "manifest.csv", samples)
    (out / "synth.json").write_text(json.dumps(
        {"n": n, "seed": seed, "size": target_size, "ranges": ranges, "noise_std": noise_std}, indent=2, sort_keys=True
    ) + "\n")
    return out / "manifest.csv"
