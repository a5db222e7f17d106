"""Planted-glyph synthetic dataset, dataset manifests and PNG helpers."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .numerics import Rng

MANIFEST_MAGIC = "# protosanity-manifest v1"

_R = np.arange(7)[:, None]
_C = np.arange(7)[None, :]
GLYPHS = {
    "square": (_R < 6) & (_C < 6),
    "plus": (np.abs(_R - 3) <= 1) | (np.abs(_C - 3) <= 1),
    "diamond": np.abs(_R - 3) + np.abs(_C - 3) <= 3,
    "ring": ~((np.abs(_R - 3) <= 1) & (np.abs(_C - 3) <= 1)),
    "triangle": _C <= _R,
    "cross": (np.abs(_R - _C) <= 1) | (np.abs(_R + _C - 6) <= 1),
    "checker": (_R + _C) % 2 == 0,
    "bars": (_C % 3 != 2) & (_R >= 0),
}
GLYPH_NAMES = tuple(GLYPHS)
GLYPH_COLORS = (
    (0.95, 0.1, 0.1),
    (0.1, 0.9, 0.1),
    (0.15, 0.25, 0.95),
    (0.95, 0.9, 0.1),
    (0.9, 0.1, 0.9),
    (0.1, 0.9, 0.9),
    (1.0, 0.55, 0.0),
    (1.0, 1.0, 1.0),
)


@dataclass
class Dataset:
    """Images in raw ``[0, 1]`` space, ``(N, 3, H, W)``, with labels and masks.

    ``masks`` may be ``None`` or hold ``None`` entries for images without a
    segmentation.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    masks: list | None = None
    class_names: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def mask(self, i):
        if self.masks is None:
            return None
        return self.masks[i]


def glyph_mask(name: str) -> np.ndarray:
    return GLYPHS[name].copy()


def _place(rng, size, gh, gw, placement, margin):
    if placement == "uniform":
        return int(rng.integers(0, size - gh + 1)), int(rng.integers(0, size - gw + 1))
    if placement == "border":
        side = int(rng.integers(4))
        off = int(rng.integers(0, margin + 1))
        along = int(rng.integers(0, size - max(gh, gw) + 1))
        if side == 0:
            return off, along
        if side == 1:
            return size - gh - off, along
        if side == 2:
            return along, off
        return along, size - gw - off
    raise InvalidArgumentError(f"unknown placement {placement!r}")


def render_image(rng, label, size=32, placement="uniform", margin=4):
    """One planted-glyph image as ``uint8 (H, W, 3)`` and its glyph mask."""
    base = rng.uniform(0.2, 0.8, size=(size, size, 1))
    img = np.clip(base + rng.normal(0.0, 0.04, size=(size, size, 3)), 0.0, 1.0)
    name = GLYPH_NAMES[label]
    glyph = GLYPHS[name]
    gh, gw = glyph.shape
    top, left = _place(rng, size, gh, gw, placement, margin)
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + gh, left : left + gw] = glyph
    shade = rng.uniform(0.85, 1.0, size=(size, size, 1))
    color = np.asarray(GLYPH_COLORS[label])[None, None, :]
    img = np.where(mask[..., None], np.clip(color * shade, 0.0, 1.0), img)
    return np.round(img * 255).astype(np.uint8), mask


def to_raw(rgb_u8):
    """``uint8 (H, W, 3)`` to float ``(3, H, W)`` in [0, 1]."""
    return np.asarray(rgb_u8, dtype=np.float64).transpose(2, 0, 1) / 255.0


def make_synthetic(num_classes=4, train=500, test=200, size=32, seed=0, placement="uniform", margin=4):
    """Build the planted-glyph train and test sets in memory.

    Class ``k`` is glyph ``GLYPH_NAMES[k]`` painted in its own colour over a
    shared grey noise texture; the segmentation mask is the glyph support.
    Labels cycle through the classes, so each split is exactly balanced when
    its size is a multiple of ``num_classes``.
    """
    if not (1 <= num_classes <= len(GLYPH_NAMES)):
        raise InvalidArgumentError(f"num_classes must lie in [1, {len(GLYPH_NAMES)}]")
    if size < 8:
        raise InvalidArgumentError("image size must be at least 8")
    rng = Rng(seed)
    splits = {}
    offset = 0
    for split, count in (("train", train), ("test", test)):
        imgs, masks, labels = [], [], []
        for j in range(count):
            label = j % num_classes
            rgb, mask = render_image(rng.stream("synth-" + split, j), label, size, placement, margin)
            imgs.append(rgb)
            masks.append(mask)
            labels.append(label)
        images = np.stack([to_raw(r) for r in imgs]) if imgs else np.zeros((0, 3, size, size))
        splits[split] = (
            Dataset(images, np.array(labels, dtype=np.int64), np.arange(offset, offset + count), masks, list(GLYPH_NAMES[:num_classes])),
            imgs,
        )
        offset += count
    return splits["train"][0], splits["test"][0], splits


def write_png_rgb(path, rgb_u8):
    Image.fromarray(np.ascontiguousarray(rgb_u8, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def write_png_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def write_png_gray16(path, values, vmax=None):
    """Save a non-negative map as 16-bit greyscale scaled to its maximum."""
    v = np.asarray(values, dtype=np.float64)
    top = float(v.max()) if vmax is None else float(vmax)
    scaled = np.zeros_like(v) if top <= 0 else np.clip(v / top, 0.0, 1.0)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def read_png_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_png_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


@dataclass
class ManifestEntry:
    split: str
    label: int
    image_path: str
    mask_path: str | None = None


@dataclass
class Manifest:
    """Parsed dataset manifest; paths are relative to ``root``."""

    entries: list
    geometry: tuple
    class_names: list
    root: Path = Path(".")

    def split(self, name):
        return [(i, e) for i, e in enumerate(self.entries) if e.split == name]


class ManifestError(InvalidArgumentError):
    """Malformed manifest or unreadable/ill-shaped referenced file."""


def write_manifest(path, entries, geometry, class_names):
    lines = [
        MANIFEST_MAGIC,
        "# geometry " + " ".join(str(v) for v in geometry),
        "# classes " + ",".join(class_names),
    ]
    for e in entries:
        fields = [e.split, str(e.label), e.image_path] + ([e.mask_path] if e.mask_path else [])
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    """Parse a manifest file and check it against the stated invariants."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    geometry, classes, entries = None, None, []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split(None, 1)
            if parts and parts[0] == "geometry":
                geometry = tuple(int(v) for v in parts[1].split())
            elif parts and parts[0] == "classes":
                classes = parts[1].strip().split(",")
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4) or fields[0] not in ("train", "test"):
            raise ManifestError(f"{path}:{lineno}: expected split<TAB>label<TAB>image[<TAB>mask]")
        try:
            label = int(fields[1])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: label {fields[1]!r} is not an integer") from None
        mask = fields[3] if len(fields) == 4 and fields[3] else None
        entries.append(ManifestEntry(fields[0], label, fields[2], mask))
    if geometry is None or len(geometry) != 3:
        raise ManifestError(f"{path}: missing '# geometry C H W' header")
    if classes is None:
        classes = [str(c) for c in range(max((e.label for e in entries), default=-1) + 1)]
    for i, e in enumerate(entries):
        if not (0 <= e.label < len(classes)):
            raise ManifestError(f"{path}: entry {i} ({e.image_path}) has label {e.label} outside the class list")
    train_labels = {e.label for e in entries if e.split == "train"}
    missing = set(range(len(classes))) - train_labels
    if entries and missing:
        raise ManifestError(f"{path}: classes {sorted(missing)} have no training image")
    return Manifest(entries, geometry, classes, path.parent)


def load_split(manifest: Manifest, split: str) -> Dataset:
    """Decode every image (and mask) of one split into a :class:`Dataset`."""
    c, h, w = manifest.geometry
    imgs, labels, ids, masks = [], [], [], []
    for i, e in manifest.split(split):
        img_path = manifest.root / e.image_path
        try:
            rgb = read_png_rgb(img_path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"entry {i}: cannot decode image {e.image_path}: {exc}") from exc
        if rgb.shape != (h, w, c):
            raise ManifestError(f"entry {i}: image {e.image_path} has shape {rgb.shape}, expected {(h, w, c)}")
        mask = None
        if e.mask_path:
            try:
                mask = read_png_mask(manifest.root / e.mask_path)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"entry {i}: cannot decode mask {e.mask_path}: {exc}") from exc
            if mask.shape != (h, w):
                raise ManifestError(f"entry {i}: mask {e.mask_path} has shape {mask.shape}, expected {(h, w)}")
        imgs.append(to_raw(rgb))
        labels.append(e.label)
        ids.append(i)
        masks.append(mask)
    images = np.stack(imgs) if imgs else np.zeros((0, c, h, w))
    return Dataset(images, np.array(labels, dtype=np.int64), np.array(ids, dtype=np.int64), masks, list(manifest.class_names))


def generate_to_disk(out_dir, num_classes=4, train=500, test=200, size=32, seed=0, placement="uniform", margin=4):
    """Write the planted-glyph dataset as PNGs plus ``manifest.tsv``; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    _, _, splits = make_synthetic(num_classes, train, test, size, seed, placement, margin)
    entries = []
    for split in ("train", "test"):
        ds, rgbs = splits[split]
        for j, (rgb, label, mask) in enumerate(zip(rgbs, ds.labels, ds.masks)):
            stem = f"{split}_{j:05d}"
            img_rel = os.path.join("images", stem + ".png")
            mask_rel = os.path.join("masks", stem + ".png")
            try:
                write_png_rgb(out / img_rel, rgb)
                write_png_mask(out / mask_rel, mask)
            except OSError as exc:
                raise OSError(f"cannot write {out / img_rel}: {exc}") from exc
            entries.append(ManifestEntry(split, int(label), img_rel, mask_rel))
    manifest_path = out / "manifest.tsv"
    write_manifest(manifest_path, entries, (3, size, size), list(GLYPH_NAMES[:num_classes]))
    return manifest_path
