"""Dataset manifests, ingestion, stratified splitting and the toy lesion generator.

A manifest is persisted as JSON lines: the first line is a header carrying
``class_names`` and ``resolution``; every following line is one record with the
keys ``sample_id``, ``image``, ``mask`` and ``label``. Image and mask paths are
stored relative to the manifest file.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DERM_CLASS_NAMES = ("AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm")
MANIFEST_KEYS = ("sample_id", "image", "mask", "label")


@dataclass(frozen=True)
class ImageSample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: int
    sample_id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"{self.sample_id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.sample_id}: mask is not binary")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image: Path
    mask: Path
    label: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    resolution: tuple[int, int]

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample_ids must be unique")
        for e in self.entries:
            if not 0 <= e.label < len(self.class_names):
                raise ValueError(f"{e.sample_id}: label {e.label} out of range")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def subset(self, entries) -> "DatasetManifest":
        entries = sorted(entries, key=lambda e: e.sample_id)
        return DatasetManifest(tuple(entries), self.class_names, self.resolution)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        lines = [json.dumps({"class_names": list(self.class_names),
                             "resolution": list(self.resolution)})]
        for e in self.entries:
            lines.append(json.dumps({
                "sample_id": e.sample_id,
                "image": _relpath(e.image, base),
                "mask": _relpath(e.mask, base),
                "label": int(e.label),
            }))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        base = path.parent
        entries = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            if set(rec) != set(MANIFEST_KEYS):
                raise ValueError(f"{path}: record keys {sorted(rec)} != {sorted(MANIFEST_KEYS)}")
            entries.append(ManifestEntry(rec["sample_id"], base / rec["image"],
                                         base / rec["mask"], int(rec["label"])))
        return cls(tuple(entries), tuple(header["class_names"]), tuple(header["resolution"]))


def _relpath(p: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(p).resolve(), base)).as_posix()


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------


def read_image(path, resolution=None) -> np.ndarray:
    """Read an RGB image as float32 (H, W, 3) in [0, 1], optionally resampled bilinearly."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution[1], resolution[0]):
            im = im.resize((resolution[1], resolution[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def read_mask(path, resolution=None) -> np.ndarray:
    """Read a single-channel mask; pixel values > 127 map to 1. Resampling is nearest-neighbour."""
    with Image.open(path) as im:
        im = im.convert("L")
        if resolution is not None and im.size != (resolution[1], resolution[0]):
            im = im.resize((resolution[1], resolution[0]), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_samples(manifest: DatasetManifest):
    """Load every entry of ``manifest`` into stacked arrays.

    Returns ``(images, masks, labels)`` with shapes (N, H, W, 3), (N, H, W), (N,).
    """
    H, W = manifest.resolution
    n = len(manifest)
    images = np.empty((n, H, W, 3), dtype=np.float32)
    masks = np.empty((n, H, W), dtype=np.uint8)
    for i, e in enumerate(manifest.entries):
        images[i] = read_image(e.image, (H, W))
        masks[i] = read_mask(e.mask, (H, W))
    return images, masks, manifest.labels


def iter_samples(manifest: DatasetManifest):
    for e in manifest.entries:
        yield ImageSample(read_image(e.image, manifest.resolution),
                          read_mask(e.mask, manifest.resolution), e.label, e.sample_id)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass
class IngestReport:
    matched: int = 0
    skipped: list = field(default_factory=list)  # (sample_id, reason)

    def to_dict(self):
        return {"matched": self.matched,
                "skipped": [{"sample_id": s, "reason": r} for s, r in self.skipped]}


def _read_label_table(label_table):
    """Read ``sample_id,label`` rows; labels may be integers or class names."""
    with open(label_table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    id_key = "sample_id" if "sample_id" in rows[0] else "image_id"
    label_key = "label" if "label" in rows[0] else "dx"
    return {r[id_key].strip(): r[label_key].strip() for r in rows}


def ingest_dataset(image_dir, mask_dir, label_table, resolution, out_dir,
                   class_names=None, mask_suffix=""):
    """Pair images with masks and labels, resample them to ``resolution`` and write a manifest.

    Samples lacking a mask or a label row are skipped and listed in the returned
    :class:`IngestReport`. Raises ``ValueError`` when nothing could be matched.
    """
    image_dir, mask_dir, out_dir = Path(image_dir), Path(mask_dir), Path(out_dir)
    resolution = (int(resolution[0]), int(resolution[1]))
    labels = _read_label_table(label_table)

    masks = {}
    for p in sorted(mask_dir.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            stem = p.stem
            if mask_suffix and stem.endswith(mask_suffix):
                stem = stem[: -len(mask_suffix)]
            masks[stem] = p

    raw_labels = sorted(set(labels.values()))
    if class_names is None:
        if all(v.lstrip("-").isdigit() for v in raw_labels):
            n = max(int(v) for v in raw_labels) + 1 if raw_labels else 0
            class_names = [f"class_{i}" for i in range(n)]
        elif set(raw_labels) <= {c.lower() for c in DERM_CLASS_NAMES} | set(DERM_CLASS_NAMES):
            class_names = list(DERM_CLASS_NAMES)
        else:
            class_names = raw_labels
    class_names = list(class_names)
    name_to_id = {c.lower(): i for i, c in enumerate(class_names)}

    def parse_label(v):
        if v.lstrip("-").isdigit():
            return int(v)
        return name_to_id.get(v.lower(), -1)

    report = IngestReport()
    img_out, mask_out = out_dir / "images", out_dir / "masks"
    img_out.mkdir(parents=True, exist_ok=True)
    mask_out.mkdir(parents=True, exist_ok=True)

    entries = []
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        sid = p.stem
        if sid not in masks:
            report.skipped.append((sid, "missing mask"))
            continue
        if sid not in labels:
            report.skipped.append((sid, "missing label"))
            continue
        label = parse_label(labels[sid])
        if not 0 <= label < len(class_names):
            report.skipped.append((sid, f"unknown label {labels[sid]!r}"))
            continue
        image = read_image(p, resolution)
        mask = read_mask(masks[sid], resolution)
        ip, mp = img_out / f"{sid}.png", mask_out / f"{sid}.png"
        write_image(ip, image)
        write_mask(mp, mask)
        entries.append(ManifestEntry(sid, ip, mp, label))

    report.matched = len(entries)
    for sid, reason in report.skipped:
        logger.warning("skipping %s: %s", sid, reason)
    if not entries:
        raise ValueError(f"no usable samples found in {image_dir}")
    manifest = DatasetManifest(tuple(sorted(entries, key=lambda e: e.sample_id)),
                               tuple(class_names), resolution)
    manifest.save(out_dir / "manifest.jsonl")
    (out_dir / "ingest_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return manifest, report


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(manifest: DatasetManifest, train_fraction=0.8, seed=0):
    """Per-class stratified split.

    Each class contributes ``floor((1 - train_fraction) * n)`` samples to the test
    set and the rest to train. A class with a single sample goes to train.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(len(manifest.class_names)):
        members = [e for e in manifest.entries if e.label == c]
        if not members:
            continue
        if len(members) < 2:
            warnings.warn(f"class {manifest.class_names[c]!r} has {len(members)} sample; "
                          "placing it in train", stacklevel=2)
            train.extend(members)
            continue
        order = rng.permutation(len(members))
        # epsilon guards against 0.2 * 10 = 1.9999999999999998
        n_test = int(math.floor((1.0 - train_fraction) * len(members) + 1e-9))
        test.extend(members[i] for i in order[:n_test])
        train.extend(members[i] for i in order[n_test:])
    return manifest.subset(train), manifest.subset(test)


# ---------------------------------------------------------------------------
# Toy lesion dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_classes: int = 3
    samples_per_class: int = 100
    resolution: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


_LESION_COLORS = np.array([
    [0.62, 0.38, 0.30],
    [0.78, 0.48, 0.50],
    [0.50, 0.36, 0.26],
    [0.70, 0.52, 0.40],
    [0.28, 0.18, 0.16],
    [0.56, 0.40, 0.32],
    [0.66, 0.22, 0.32],
])


def toy_class_profile(c: int) -> dict:
    """Deterministic appearance parameters for toy class ``c``."""
    lo = 0.04 + 0.03 * (c % 8)
    return {
        "area_range": (lo, lo + 0.05),
        "color": _LESION_COLORS[c % len(_LESION_COLORS)],
        "stripe_freq": 0.12 + 0.08 * (c % 4),
        "stripe_amp": 0.03 + 0.03 * (c % 3),
        "speckle": 0.01 + 0.01 * (c % 2),
        "aspect_range": (0.5 + 0.1 * (c % 3), 1.0),
    }


def toy_class_names(n: int) -> tuple[str, ...]:
    if n == len(DERM_CLASS_NAMES):
        return DERM_CLASS_NAMES
    return tuple(f"toy{c}" for c in range(n))


def _ellipse_mask(H, W, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def make_toy_sample(rng: np.random.Generator, c: int, resolution):
    """Draw one (image, mask) pair for class ``c``."""
    H, W = resolution
    prof = toy_class_profile(c)
    lo, hi = prof["area_range"]
    for _ in range(1000):
        frac = rng.uniform(lo, hi)
        ratio = rng.uniform(*prof["aspect_range"])
        area = frac * H * W
        a = math.sqrt(area / (math.pi * ratio))
        b = a * ratio
        if a + 2 > min(H, W) / 2 or b < 2:
            continue
        cy = rng.uniform(a + 1, H - a - 2)
        cx = rng.uniform(a + 1, W - a - 2)
        mask = _ellipse_mask(H, W, cy, cx, a, b, rng.uniform(0, math.pi))
        if lo <= mask.mean() <= hi:
            break
    else:  # pragma: no cover - the ranges above always admit a solution
        raise RuntimeError(f"could not place a lesion for class {c}")

    skin = np.array([0.88, 0.70, 0.58]) + rng.normal(0, 0.03, size=3)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    gy, gx = rng.normal(0, 0.04, size=2)
    image = skin[None, None, :] + (gy * yy + gx * xx)[..., None]

    ang = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = np.sin(2 * math.pi * prof["stripe_freq"]
                     * (xx * W * math.cos(ang) + yy * H * math.sin(ang)) + phase)
    lesion = (prof["color"] + rng.normal(0, 0.02, size=3))[None, None, :] \
        + prof["stripe_amp"] * stripes[..., None] \
        + rng.normal(0, prof["speckle"], size=(H, W, 1))
    image = np.where(mask[..., None] == 1, lesion, image)
    image = image + rng.normal(0, 0.015, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0
    return image.astype(np.float32), mask


def generate_toy_dataset(spec: ToyDatasetSpec, out_dir) -> DatasetManifest:
    """Write ``spec.num_classes * spec.samples_per_class`` toy samples under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write toy dataset to {out_dir}: {exc}") from exc
    resolution = (int(spec.resolution[0]), int(spec.resolution[1]))
    entries, rows = [], []
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, c])
        for i in range(spec.samples_per_class):
            sid = f"toy_c{c}_{i:04d}"
            image, mask = make_toy_sample(rng, c, resolution)
            ip, mp = out_dir / "images" / f"{sid}.png", out_dir / "masks" / f"{sid}.png"
            write_image(ip, image)
            write_mask(mp, mask)
            entries.append(ManifestEntry(sid, ip, mp, c))
            rows.append((sid, c))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        w.writerows(rows)
    manifest = DatasetManifest(tuple(sorted(entries, key=lambda e: e.sample_id)),
                               toy_class_names(spec.num_classes), resolution)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
