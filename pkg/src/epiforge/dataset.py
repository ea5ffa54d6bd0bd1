"""Image catalogs with case metadata, a synthetic generator, and preprocessing.

A manifest is a CSV with header ``image_id,class,case_id,path``.  Paths are
relative to the manifest's directory and class names are mapped to indices in
order of first appearance.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ._rng import stream

CROP_SIZE = 128
EVAL_RESIZE = 147
SYNTHETIC_SIZE = 160
BRIGHTNESS_RANGE = (0.8, 1.2)
MANIFEST_HEADER = ("image_id", "class", "case_id", "path")


class DatasetError(ValueError):
    """Raised when a manifest or image violates the dataset contract."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    class_index: int
    case_id: str
    path: str


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple[ImageEntry, ...]
    classes: tuple[str, ...]
    source_root: Path

    def __post_init__(self):
        seen = set()
        counts = [0] * len(self.classes)
        for e in self.entries:
            if not 0 <= e.class_index < len(self.classes):
                raise DatasetError(f"class index {e.class_index} out of range for {e.image_id}")
            key = (e.class_index, e.case_id, e.image_id)
            if key in seen:
                raise DatasetError(f"duplicate (class, case_id, image_id) {key}")
            seen.add(key)
            counts[e.class_index] += 1
        empty = [self.classes[c] for c, n in enumerate(counts) if n == 0]
        if empty:
            raise DatasetError(f"classes with no entries: {empty}")

    def __len__(self):
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def by_class(self) -> list[list[ImageEntry]]:
        groups: list[list[ImageEntry]] = [[] for _ in self.classes]
        for e in self.entries:
            groups[e.class_index].append(e)
        return groups

    def cases_by_class(self) -> list[dict[str, list[ImageEntry]]]:
        """Per class, an insertion-ordered mapping case_id -> entries."""
        groups: list[dict[str, list[ImageEntry]]] = [{} for _ in self.classes]
        for e in self.entries:
            groups[e.class_index].setdefault(e.case_id, []).append(e)
        return groups

    def resolve(self, entry: ImageEntry) -> Path:
        return self.source_root / entry.path

    def subset(self, entries: Sequence[ImageEntry], classes: Sequence[int] | None = None) -> "DatasetIndex":
        """Index over ``entries``; with ``classes`` given, keep and renumber those classes only."""
        if classes is None:
            return DatasetIndex(tuple(entries), self.classes, self.source_root)
        remap = {old: new for new, old in enumerate(classes)}
        kept = tuple(
            ImageEntry(e.image_id, remap[e.class_index], e.case_id, e.path)
            for e in entries
            if e.class_index in remap
        )
        return DatasetIndex(kept, tuple(self.classes[c] for c in classes), self.source_root)

    def rebased(self, root: str | Path) -> "DatasetIndex":
        """Same entries with paths rewritten relative to ``root``."""
        root = Path(root)
        entries = tuple(
            ImageEntry(e.image_id, e.class_index, e.case_id, os.path.relpath(self.resolve(e), root))
            for e in self.entries
        )
        return DatasetIndex(entries, self.classes, root)

    def summary(self) -> dict:
        cases = self.cases_by_class()
        return {
            "classes": self.n_classes,
            "cases": sum(len(c) for c in cases),
            "images": len(self.entries),
            "per_class": {
                name: {"cases": len(cases[i]), "images": sum(len(v) for v in cases[i].values())}
                for i, name in enumerate(self.classes)
            },
        }


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetIndex:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    classes: dict[str, int] = {}
    entries: list[ImageEntry] = []
    seen: dict[tuple, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DatasetError(f"expected header {','.join(MANIFEST_HEADER)}, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 or any(not field.strip() for field in row):
                raise DatasetError(f"malformed row {row!r}", line=lineno)
            image_id, cls, case_id, rel = (field.strip() for field in row)
            class_index = classes.setdefault(cls, len(classes))
            key = (class_index, case_id, image_id)
            if key in seen:
                raise DatasetError(
                    f"duplicate image_id {image_id!r} in case {case_id!r} of class {cls!r}"
                    f" (first seen on line {seen[key]})",
                    line=lineno,
                )
            seen[key] = lineno
            if check_paths and not (root / rel).is_file():
                raise DatasetError(f"image path does not resolve: {rel}", line=lineno)
            entries.append(ImageEntry(image_id, class_index, case_id, rel))
    if not entries:
        raise DatasetError(f"manifest {path} lists no images")
    return DatasetIndex(tuple(entries), tuple(classes), root)


def write_manifest(index: DatasetIndex, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in index.entries:
            writer.writerow([e.image_id, index.classes[e.class_index], e.case_id, e.path])
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an ``(H, W, 3)`` uint8 RGB array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic data

_MOTIFS = ("disk", "square", "triangle", "ring", "cross", "diamond", "hbars", "vbars")


def _motif_sdf(kind: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Approximate signed distance (positive inside) for the class motif."""
    ax, ay = np.abs(x), np.abs(y)
    if kind == "disk":
        return r - np.hypot(x, y)
    if kind == "square":
        return 0.8 * r - np.maximum(ax, ay)
    if kind == "triangle":
        return 0.5 * r - np.maximum(ax * 0.866 + y * 0.5, -y)
    if kind == "ring":
        return 0.3 * r - np.abs(np.hypot(x, y) - 0.75 * r)
    if kind == "cross":
        w = 0.3 * r
        return np.maximum(np.minimum(w - ax, r - ay), np.minimum(w - ay, r - ax))
    if kind == "diamond":
        return (r - (ax + ay)) * 0.707
    if kind in ("hbars", "vbars"):
        t = y if kind == "hbars" else x
        box = 0.85 * r - np.maximum(ax, ay)
        bars = np.sin(t * np.pi / (0.3 * r)) * (0.3 * r / np.pi)
        return np.minimum(box, bars)
    raise ValueError(kind)


def class_color(class_index: int, hue_shift: float = 0.0) -> tuple[float, float, float]:
    hue = (class_index * 0.381966 + hue_shift) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.95)


def render_synthetic(class_index: int, case_rng: np.random.Generator, image_rng: np.random.Generator) -> np.ndarray:
    """Render one ``SYNTHETIC_SIZE`` square uint8 image.

    The class fixes motif shape and colour; the case fixes background hue, a
    sinusoidal texture and a slight foreground hue drift; the image adds placement, scale and pixel noise.
    """
    size = SYNTHETIC_SIZE
    # case draws must happen in a fixed order so every image of a case agrees
    bg_hue = case_rng.uniform()
    bg_val = case_rng.uniform(0.3, 0.55)
    tex_freq = case_rng.uniform(2.0, 6.0)
    tex_phase = case_rng.uniform(0, 2 * np.pi)
    tex_angle = case_rng.uniform(0, np.pi)
    fg_shift = case_rng.uniform(-0.03, 0.03)

    cx = size / 2 + image_rng.uniform(-18, 18)
    cy = size / 2 + image_rng.uniform(-18, 18)
    radius = image_rng.uniform(34, 46)
    gain = image_rng.uniform(0.9, 1.1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    along = (xx * np.cos(tex_angle) + yy * np.sin(tex_angle)) / size
    texture = 0.08 * np.sin(2 * np.pi * tex_freq * along + tex_phase)
    bg = np.array(colorsys.hsv_to_rgb(bg_hue, 0.3, bg_val))
    canvas = bg[None, None, :] * (1.0 + texture[..., None])

    kind = _MOTIFS[class_index % len(_MOTIFS)]
    mask = np.clip(_motif_sdf(kind, xx - cx, yy - cy, radius) + 0.5, 0.0, 1.0)[..., None]
    fg = np.array(class_color(class_index, fg_shift))
    canvas = canvas * (1 - mask) + fg[None, None, :] * mask
    canvas = canvas * gain + image_rng.normal(0.0, 0.04, size=canvas.shape)
    return np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(
    out_dir: str | Path,
    n_classes: int,
    cases_per_class: int,
    images_per_case: int,
    seed: int,
    class_offset: int = 0,
) -> DatasetIndex:
    """Write a synthetic case-annotated PNG dataset plus ``manifest.csv`` under ``out_dir``.

    ``class_offset`` shifts the motif/colour identities, so a dataset of
    unseen classes can be generated for evaluation.
    """
    if min(n_classes, cases_per_class, images_per_case) < 1:
        raise ValueError("all counts must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from exc
    entries = []
    classes = tuple(f"class_{c + class_offset:02d}" for c in range(n_classes))
    for c in range(n_classes):
        for k in range(cases_per_class):
            case_id = f"c{c:02d}-case{k:02d}"
            rel_dir = Path("images") / classes[c] / case_id
            (out / rel_dir).mkdir(parents=True, exist_ok=True)
            for i in range(images_per_case):
                image_id = f"img{i:04d}"
                pixels = render_synthetic(c + class_offset, stream(seed, c, k), stream(seed, c, k, i))
                rel = (rel_dir / f"{image_id}.png").as_posix()
                try:
                    Image.fromarray(pixels, mode="RGB").save(out / rel, format="PNG")
                except OSError as exc:
                    raise DatasetError(f"cannot write {out / rel}: {exc}") from exc
                entries.append(ImageEntry(image_id, c, case_id, rel))
    index = DatasetIndex(tuple(entries), classes, out)
    write_manifest(index, out / "manifest.csv")
    return index


# ---------------------------------------------------------------------------
# preprocessing


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Affine map [0, 255] -> [-1, 1] in float64."""
    return (np.asarray(pixels, dtype=np.float64) - 127.5) / 127.5


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return image


def preprocess_train(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop, brightness jitter, horizontal flip, then normalisation.

    Draws from ``rng`` in a fixed order (row offset, column offset, brightness,
    flip), so a cloned generator reproduces the output exactly.
    """
    image = _check_rgb(image)
    h, w = image.shape[:2]
    if h < CROP_SIZE or w < CROP_SIZE:
        raise DatasetError(f"image {h}x{w} is smaller than the {CROP_SIZE}x{CROP_SIZE} crop")
    top = int(rng.integers(0, h - CROP_SIZE + 1))
    left = int(rng.integers(0, w - CROP_SIZE + 1))
    factor = rng.uniform(*BRIGHTNESS_RANGE)
    flip = rng.random() < 0.5
    crop = image[top : top + CROP_SIZE, left : left + CROP_SIZE].astype(np.float64)
    crop = np.clip(crop * factor, 0.0, 255.0)
    if flip:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(normalize(crop))


def center_crop(image: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    h, w = image.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return image[top : top + size, left : left + size]


def preprocess_eval(image: np.ndarray) -> np.ndarray:
    """Bilinear resize to 147x147, centre crop to 128x128, normalise."""
    image = _check_rgb(image)
    if image.dtype != np.uint8:
        raise DatasetError(f"expected uint8 pixels, got {image.dtype}")
    resized = Image.fromarray(image, mode="RGB").resize((EVAL_RESIZE, EVAL_RESIZE), Image.BILINEAR)
    return np.ascontiguousarray(normalize(center_crop(np.asarray(resized))))


class ImageCache:
    """Decodes each entry once and memoises its eval tensor."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._raw: dict[str, np.ndarray] = {}
        self._eval: dict[str, np.ndarray] = {}

    def raw(self, entry: ImageEntry) -> np.ndarray:
        key = entry.path
        if key not in self._raw:
            self._raw[key] = load_image(self.index.resolve(entry))
        return self._raw[key]

    def eval_tensor(self, entry: ImageEntry) -> np.ndarray:
        key = entry.path
        if key not in self._eval:
            self._eval[key] = preprocess_eval(self.raw(entry))
        return self._eval[key]

    def eval_batch(self, entries: Sequence[ImageEntry]) -> np.ndarray:
        return np.stack([self.eval_tensor(e) for e in entries])

    def train_batch(self, entries: Sequence[ImageEntry], seed: int, *keys: int) -> np.ndarray:
        """Augmented batch; image ``j`` uses its own stream keyed by ``(*keys, j)``."""
        return np.stack([preprocess_train(self.raw(e), stream(seed, *keys, j)) for j, e in enumerate(entries)])


def split_by_case(index: DatasetIndex, holdout_fraction: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Case-disjoint split: per class, a seeded share of cases goes to the second index.

    Each class keeps at least one case on each side.
    """
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    first, second = [], []
    for c, cases in enumerate(index.cases_by_class()):
        ids = list(cases)
        if len(ids) < 2:
            raise DatasetError(f"class {index.classes[c]!r} has a single case; cannot split by case")
        order = stream(seed, c).permutation(len(ids))
        n_hold = min(max(1, round(holdout_fraction * len(ids))), len(ids) - 1)
        held = {ids[j] for j in order[:n_hold]}
        for cid in ids:
            (second if cid in held else first).extend(cases[cid])
    return index.subset(first), index.subset(second)
