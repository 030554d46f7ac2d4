"""Datasets: directory ingest, synthetic glyph generator, stratified splits, manifests."""

import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np

from .exceptions import ConfigurationError, DataError, FormatError
from .imaging import decode_bmp, encode_bmp, pipeline_fingerprint, preprocess_image

MANIFEST_FORMAT = "manetl-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    source: str


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str = ""
    aug_seed: int = 0


@dataclass
class DatasetManifest:
    class_count: int
    per_class: int
    records: List[ManifestRecord]
    fingerprint: str = field(default_factory=pipeline_fingerprint)
    seed: int = 0

    def indices(self, split):
        return [i for i, r in enumerate(self.records) if r.split == split]

    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self, split=None):
        counts = np.zeros(self.class_count, dtype=np.int64)
        for r in self.records:
            if split is None or r.split == split:
                counts[r.label] += 1
        return counts


def sample_seed(seed, sample_id):
    """64-bit per-sample seed derived by hashing (seed, sample id)."""
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- synthetic glyphs -------------------------------------------------------

RAW_SIZE = 48
_GLYPH_SALT = 20230815
_STROKES = 4


def _anchor_points():
    rng = np.random.default_rng(_GLYPH_SALT)
    grid = np.array([(x, y) for y in (0.22, 0.5, 0.78) for x in (0.22, 0.5, 0.78)])
    return grid + rng.uniform(-0.06, 0.06, size=grid.shape)


def glyph_table(classes=50):
    """Stroke sets (pairs of anchor indices) for each class.

    Any two classes share at most two of their four strokes, so every pair of
    glyphs differs in at least two strokes.
    """
    rng = np.random.default_rng(_GLYPH_SALT + 1)
    segments = list(itertools.combinations(range(9), 2))
    table = []
    while len(table) < classes:
        pick = rng.choice(len(segments), size=_STROKES, replace=False)
        strokes = frozenset(segments[i] for i in pick)
        touched = {a for s in strokes for a in s}
        if len(touched) < 5:
            continue
        if all(len(strokes & other) <= 2 for other in table):
            table.append(strokes)
    return [sorted(s) for s in table]


def render_glyph(strokes, rng, size=RAW_SIZE):
    """Draw one jittered dark-on-light 3-channel instance of a glyph."""
    anchors = _anchor_points() * size
    angle = np.deg2rad(rng.uniform(-10, 10))
    scale = rng.uniform(0.88, 1.08)
    shift = rng.uniform(-3, 3, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    center = np.array([size / 2, size / 2])
    points = (anchors - center) @ rot.T * scale + center + shift
    points = points + rng.normal(0, 0.8, size=points.shape)
    thickness = rng.uniform(2.5, 4.5)

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pix = np.stack([xx, yy], axis=-1)
    dist = np.full((size, size), np.inf)
    for a, b in strokes:
        p, q = points[a], points[b]
        d = q - p
        t = np.clip(((pix - p) @ d) / (d @ d), 0.0, 1.0)
        nearest = p + t[..., None] * d
        dist = np.minimum(dist, np.linalg.norm(pix - nearest, axis=-1))
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)

    page = rng.uniform(215, 250) + rng.uniform(-6, 6, size=3)
    pen = rng.uniform(20, 70) + rng.uniform(-10, 10, size=3)
    img = page * (1 - ink[..., None]) + pen * ink[..., None]
    img = img + rng.normal(0, 4.0, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(classes, per_class, seed=0):
    """Procedural stand-in for a handwritten character corpus.

    Returns ``(manifest, samples)`` with ``per_class`` samples for each of
    ``classes`` glyph classes; output is a pure function of the arguments.
    """
    if not 1 <= classes <= 50:
        raise ConfigurationError("synthetic datasets support 1..50 classes")
    if per_class < 2:
        raise ConfigurationError("synthetic datasets need at least 2 samples per class")
    table = glyph_table(classes)
    samples, records = [], []
    for label in range(classes):
        for index in range(per_class):
            rng = np.random.default_rng([seed, label, index])
            sid = f"{label:02d}/{index:04d}.bmp"
            samples.append(ImageSample(render_glyph(table[label], rng), label,
                                       f"synthetic:seed={seed}:{sid}"))
            records.append(ManifestRecord(sid, label, "", sample_seed(seed, sid)))
    return DatasetManifest(classes, per_class, records, seed=seed), samples


# -- splitting --------------------------------------------------------------

def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_dataset(manifest, train_fraction=0.8, seed=0):
    """Stratified train/test assignment, a pure function of ``seed``.

    Each class keeps ``round(train_fraction * count)`` training samples,
    clamped so both splits get at least one sample.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    by_class = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.label, []).append(i)
    split = [""] * len(manifest.records)
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 2:
            raise ConfigurationError(f"class {label} has fewer than 2 samples")
        n_train = min(max(_round_half_up(train_fraction * len(members)), 1), len(members) - 1)
        order = np.random.default_rng([seed, label]).permutation(len(members))
        for rank, pos in enumerate(order):
            split[members[pos]] = "train" if rank < n_train else "test"
    records = [replace(r, split=s, aug_seed=sample_seed(seed, r.path))
               for r, s in zip(manifest.records, split)]
    return replace(manifest, records=records, seed=seed)


# -- disk layout ------------------------------------------------------------

def load_directory(root):
    """Read ``<root>/<class_id>/<name>.bmp``; class ids are sorted numerically."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    class_dirs = [d for d in root.iterdir() if d.is_dir()]
    try:
        class_dirs.sort(key=lambda d: int(d.name))
    except ValueError:
        raise DataError(f"class directories under {root} must be numeric ids") from None
    samples, records = [], []
    for label, cdir in enumerate(class_dirs):
        for path in sorted(cdir.glob("*.bmp")):
            rel = path.relative_to(root).as_posix()
            try:
                pixels = decode_bmp(path.read_bytes())
            except FormatError as exc:
                raise FormatError(f"{rel}: {exc}") from None
            samples.append(ImageSample(pixels, label, rel))
            records.append(ManifestRecord(rel, label))
    if not samples:
        raise DataError(f"no BMP images found under {root}")
    counts = np.bincount([r.label for r in records], minlength=len(class_dirs))
    manifest = DatasetManifest(len(class_dirs), int(counts.max()), records)
    return manifest, samples


def write_dataset(samples, manifest, root):
    """Write samples as BMP files following the manifest's relative paths."""
    root = Path(root)
    for sample, record in zip(samples, manifest.records):
        path = root / record.path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_bmp(sample.pixels))


def write_manifest(manifest, path):
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "fingerprint": manifest.fingerprint,
        "class_count": manifest.class_count,
        "per_class": manifest.per_class,
        "seed": manifest.seed,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in manifest.records:
        lines.append(json.dumps({"path": r.path, "label": r.label, "split": r.split,
                                 "aug_seed": r.aug_seed}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise FormatError(f"{path}: not a manifest file")
        if header.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {header.get('version')}")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(ManifestRecord(row["path"], int(row["label"]), row["split"],
                                          int(row["aug_seed"])))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from None
    return DatasetManifest(header["class_count"], header["per_class"], records,
                           header["fingerprint"], header["seed"])


def dataset_fingerprint(manifest, samples):
    """Hash of pipeline fingerprint, split assignment and raw pixel bytes."""
    h = hashlib.sha256(manifest.fingerprint.encode())
    for record, sample in zip(manifest.records, samples):
        h.update(f"{record.path}|{record.label}|{record.split}|{record.aug_seed}".encode())
        h.update(np.ascontiguousarray(sample.pixels).tobytes())
    return h.hexdigest()[:16]


def preprocess_samples(samples, indices=None, augment=False, seeds=None, epoch=0,
                       invert=True, size=32):
    """Stack preprocessed samples into an (N, 1, size, size) float32 array.

    With ``augment`` each sample draws its rotation from ``(seeds[i], epoch)``
    so the result does not depend on processing order.
    """
    if indices is None:
        indices = range(len(samples))
    out = []
    for i in indices:
        rng = np.random.default_rng([seeds[i], epoch]) if augment else None
        out.append(preprocess_image(samples[i].pixels, augment, rng, size, invert))
    if not out:
        return np.zeros((0, 1, size, size), dtype=np.float32)
    return np.stack(out)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
