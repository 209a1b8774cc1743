"""Dataset curation, folder layout, and batch loading.

Layout is ``{root}/{trainA,trainB,testA,testB}`` with A = sketch and B =
color. Paired datasets must keep file stems aligned across A and B; unpaired
datasets are two independent pools. Color images load as float32 in [-1, 1]
(bilinear resize), sketches as single-channel [0, 1] (area resize).
"""

from __future__ import annotations

import json
import logging
import random
import shutil
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Scheme
from .edges import IMAGE_EXTENSIONS

logger = logging.getLogger(__name__)

# train/test sizes the curation pipeline is expected to reach
EXPECTED_COUNTS: dict[str, tuple[int, int]] = {
    "elephant": (1800, 343),
    "sheep": (1300, 229),
    "bedroom": (1355, 135),
    "illustration": (659, 131),
}

COCO_CATEGORY: dict[str, str] = {"elephant": "elephant", "sheep": "sheep"}


class LayoutError(ValueError):
    """Dataset folder layout violates the scheme's contract."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: Path
    scheme: Scheme
    expected_counts: tuple[int, int] | None = None  # (train, test), color side

    @classmethod
    def for_dataset(cls, name: str, root: str | Path, scheme: Scheme) -> "DatasetSpec":
        return cls(name=name, root=Path(root), scheme=scheme,
                   expected_counts=EXPECTED_COUNTS.get(name))

    def split_dir(self, split: str, domain: str) -> Path:
        if split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {split!r}")
        if domain not in ("A", "B"):
            raise ValueError(f"domain must be A (sketch) or B (color), got {domain!r}")
        return self.root / f"{split}{domain}"


@lru_cache(maxsize=64)
def _listing(directory: Path) -> tuple[Path, ...]:
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory missing: {directory}")
    return tuple(sorted(p for p in directory.iterdir()
                        if p.suffix.lower() in IMAGE_EXTENSIONS))


def list_images(directory: str | Path) -> list[Path]:
    return list(_listing(Path(directory)))


def clear_listing_cache() -> None:
    """Tests that rewrite dataset folders in place call this between phases."""
    _listing.cache_clear()


# --------------------------------------------------------------------------
# Image decoding
# --------------------------------------------------------------------------

def load_color(path: str | Path, image_size: int = 256) -> torch.Tensor:
    """RGB image as a (3, S, S) float32 tensor in [-1, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_sketch(path: str | Path, image_size: int = 256) -> torch.Tensor:
    """Grayscale sketch as a (1, S, S) float32 tensor in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("L").resize((image_size, image_size), Image.BOX)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr[None, :, :].copy())


# --------------------------------------------------------------------------
# Batch loading
# --------------------------------------------------------------------------

def _aligned_pairs(spec: DatasetSpec, split: str) -> list[tuple[Path, Path]]:
    sketches = list_images(spec.split_dir(split, "A"))
    colors = list_images(spec.split_dir(split, "B"))
    by_stem_a = {p.stem: p for p in sketches}
    by_stem_b = {p.stem: p for p in colors}
    orphans = sorted(set(by_stem_a) ^ set(by_stem_b))
    if orphans:
        raise LayoutError(f"paired dataset {spec.name}/{split}: stems without a "
                          f"counterpart: {orphans[:5]}"
                          + (" ..." if len(orphans) > 5 else ""))
    return [(by_stem_a[s], by_stem_b[s]) for s in sorted(by_stem_a)]


def load_batch(spec: DatasetSpec, split: str, index_or_seed: int,
               image_size: int = 256, batch_size: int = 1
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """One ``(sketch, color)`` batch, each (B, C, S, S).

    Paired mode treats the argument as a batch index into the stem-sorted
    pair list (wrapping); unpaired mode treats it as a draw seed, so the same
    value always reproduces the same independent samples from both pools.
    """
    if spec.scheme is Scheme.PAIRED:
        pairs = _aligned_pairs(spec, split)
        picks = [pairs[(index_or_seed * batch_size + i) % len(pairs)]
                 for i in range(batch_size)]
        sketch_paths = [a for a, _ in picks]
        color_paths = [b for _, b in picks]
    else:
        sketches = list_images(spec.split_dir(split, "A"))
        colors = list_images(spec.split_dir(split, "B"))
        rng = random.Random(index_or_seed)
        sketch_paths = [sketches[rng.randrange(len(sketches))] for _ in range(batch_size)]
        color_paths = [colors[rng.randrange(len(colors))] for _ in range(batch_size)]

    sketch = torch.stack([load_sketch(p, image_size) for p in sketch_paths])
    color = torch.stack([load_color(p, image_size) for p in color_paths])
    return sketch, color


def split_size(spec: DatasetSpec, split: str) -> tuple[int, int]:
    """(|A|, |B|) for a split; paired mode also enforces alignment."""
    if spec.scheme is Scheme.PAIRED:
        n = len(_aligned_pairs(spec, split))
        return n, n
    return (len(list_images(spec.split_dir(split, "A"))),
            len(list_images(spec.split_dir(split, "B"))))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

@dataclass
class ValidationReport:
    dataset: str
    counts: dict[str, int] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        out = [f"dataset {self.dataset}:"]
        out += [f"  {name}: {n}" for name, n in sorted(self.counts.items())]
        out += [f"  VIOLATION: {v}" for v in self.violations]
        return out


def validate_dataset(spec: DatasetSpec) -> ValidationReport:
    """Count each split directory and compare against expectations.

    Mismatched counts and alignment problems are reported, not raised; only a
    missing dataset root is fatal.
    """
    if not spec.root.is_dir():
        raise FileNotFoundError(f"dataset root missing: {spec.root}")
    report = ValidationReport(dataset=spec.name)
    for split in ("train", "test"):
        for domain in ("A", "B"):
            directory = spec.split_dir(split, domain)
            try:
                n = len(list_images(directory))
            except FileNotFoundError:
                n = 0
                report.violations.append(f"missing directory {directory.name}")
            report.counts[f"{split}{domain}"] = n
            if n == 0:
                report.violations.append(f"{directory.name} is empty")
        if spec.scheme is Scheme.PAIRED:
            try:
                _aligned_pairs(spec, split)
            except (LayoutError, FileNotFoundError) as exc:
                report.violations.append(str(exc))
    if spec.expected_counts is not None:
        expected = dict(zip(("train", "test"), spec.expected_counts))
        for split, want in expected.items():
            got = report.counts.get(f"{split}B", 0)
            if got != want:
                report.violations.append(
                    f"{split}B has {got} color images, expected {want}")
    return report


# --------------------------------------------------------------------------
# COCO-style curation
# --------------------------------------------------------------------------

def curate_coco(annotation_file: str | Path, category_name: str) -> list[int]:
    """Sorted, deduplicated ids of images with at least one instance of the
    category in a COCO-format instance annotation file."""
    text = Path(annotation_file).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{annotation_file}: malformed annotation JSON at "
                         f"offset {exc.pos} (line {exc.lineno}): {exc.msg}") from exc

    categories = {c["name"]: c["id"] for c in data.get("categories", [])}
    if category_name not in categories:
        available = ", ".join(sorted(categories)) or "<none>"
        raise KeyError(f"unknown category {category_name!r}; "
                       f"annotation file defines: {available}")
    cat_id = categories[category_name]
    ids = {a["image_id"] for a in data.get("annotations", [])
           if a.get("category_id") == cat_id}
    return sorted(ids)


def materialize_coco_split(annotation_file: str | Path, images_dir: str | Path,
                           out_dir: str | Path, category_name: str) -> int:
    """Copy every curated image into ``out_dir``; returns the copy count.

    Image files are located through the annotation ``file_name`` field;
    missing source files are skipped with a warning so a partial image dump
    still yields a usable (if short-counted) split.
    """
    data = json.loads(Path(annotation_file).read_text())
    wanted = set(curate_coco(annotation_file, category_name))
    by_id = {img["id"]: img["file_name"] for img in data.get("images", [])}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_dir = Path(images_dir)
    copied = 0
    for image_id in sorted(wanted):
        name = by_id.get(image_id)
        src = images_dir / name if name else None
        if src is None or not src.is_file():
            logger.warning("curate: image id %s (%s) not found under %s; skipping",
                           image_id, name, images_dir)
            continue
        shutil.copyfile(src, out_dir / src.name)
        copied += 1
    return copied
