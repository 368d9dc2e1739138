"""Dataset manifests, image loading, negative sampling, and synthetic data.

A dataset is a CSV manifest plus ordinary image files. The manifest has a
required header row with fields ``pair_id, top_id, top_path, bottom_id,
bottom_path, split`` and one positive (top, bottom) pair per record; image
paths are relative to the manifest's directory. Compatibility is defined
extensionally: the listed pairs are the positive set, every other (top,
bottom) combination is a negative.

Image decoding and batch assembly could be farmed out to worker threads, but
the yielded order and the sampled negatives are a pure function of the seed,
so any such parallelism must not reorder the output. The implementation here
is sequential. Manifests are immutable after load and safe to share.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

CATEGORY_TOP = "top"
CATEGORY_BOTTOM = "bottom"
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("pair_id", "top_id", "top_path", "bottom_id", "bottom_path", "split")

# Hues (degrees) of the synthetic palette: 12 maximally separated colors.
TOY_PALETTE_HUES = tuple(range(0, 360, 30))


class ManifestError(ValueError):
    """Base class for manifest problems."""


class ManifestParseError(ManifestError):
    """Malformed manifest line or record."""


class ManifestIntegrityError(ManifestError):
    """Structurally valid manifest that violates a dataset invariant."""


class ImageLoadError(ValueError):
    """Image file that cannot be decoded or has a degenerate size."""


class NegativeExhaustionError(RuntimeError):
    """Every bottom is a positive for the requested top."""


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    category: str  # CATEGORY_TOP or CATEGORY_BOTTOM
    image_path: str  # relative to the manifest directory


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    top_id: str
    bottom_id: str
    split: str


@dataclass
class ItemImage:
    """A normalized image with identity.

    ``pixels`` is a float32 array of shape (3, S, S) with values in [-1, 1].
    """

    item_id: str
    category: str
    pixels: np.ndarray


@dataclass
class PairManifest:
    """The loaded dataset: positive pairs plus the item table."""

    pairs: Tuple[PairRecord, ...]
    items: Dict[str, ItemRecord]
    root: Path
    _positives_by_top: Dict[str, frozenset] = field(default_factory=dict, repr=False)

    @property
    def top_ids(self) -> List[str]:
        return [i for i, rec in self.items.items() if rec.category == CATEGORY_TOP]

    @property
    def bottom_ids(self) -> List[str]:
        return [i for i, rec in self.items.items() if rec.category == CATEGORY_BOTTOM]

    def pairs_of_split(self, split: str) -> List[PairRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [p for p in self.pairs if p.split == split]

    def bottoms_of_split(self, split: str) -> List[str]:
        """Unique bottom ids of a split, in first-seen manifest order."""
        seen: Dict[str, None] = {}
        for p in self.pairs_of_split(split):
            seen.setdefault(p.bottom_id, None)
        return list(seen)

    def positives_of_top(self, top_id: str) -> frozenset:
        if not self._positives_by_top:
            acc: Dict[str, set] = {}
            for p in self.pairs:
                acc.setdefault(p.top_id, set()).add(p.bottom_id)
            self._positives_by_top.update({t: frozenset(b) for t, b in acc.items()})
        return self._positives_by_top.get(top_id, frozenset())

    def item_path(self, item_id: str) -> Path:
        return self.root / self.items[item_id].image_path


def load_manifest(path: str | Path) -> PairManifest:
    """Parse and validate a manifest file.

    Raises ManifestParseError for malformed records and
    ManifestIntegrityError for category conflicts, inconsistent item paths,
    or duplicate (top, bottom) pairs within a split. Errors carry the
    1-based line number of the offending record.
    """
    path = Path(path)
    items: Dict[str, ItemRecord] = {}
    pairs: List[PairRecord] = []
    seen_pairs = set()

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError(f"{path}: empty manifest, header row required")
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestParseError(
                f"{path}:1: bad header {header!r}, expected {list(MANIFEST_FIELDS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestParseError(
                    f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}"
                )
            pair_id, top_id, top_path, bottom_id, bottom_path, split = (v.strip() for v in row)
            if split not in SPLITS:
                raise ManifestParseError(
                    f"{path}:{lineno}: bad split {split!r}, expected one of {SPLITS}"
                )
            for item_id, category, img_path in (
                (top_id, CATEGORY_TOP, top_path),
                (bottom_id, CATEGORY_BOTTOM, bottom_path),
            ):
                prev = items.get(item_id)
                if prev is None:
                    items[item_id] = ItemRecord(item_id, category, img_path)
                elif prev.category != category:
                    raise ManifestIntegrityError(
                        f"{path}:{lineno}: item {item_id!r} used as {category} "
                        f"but previously declared {prev.category}"
                    )
                elif prev.image_path != img_path:
                    raise ManifestIntegrityError(
                        f"{path}:{lineno}: item {item_id!r} has conflicting paths "
                        f"{prev.image_path!r} and {img_path!r}"
                    )
            key = (top_id, bottom_id, split)
            if key in seen_pairs:
                raise ManifestIntegrityError(
                    f"{path}:{lineno}: duplicate pair ({top_id!r}, {bottom_id!r}) in split {split!r}"
                )
            seen_pairs.add(key)
            pairs.append(PairRecord(pair_id, top_id, bottom_id, split))

    return PairManifest(pairs=tuple(pairs), items=items, root=path.parent)


def load_image(
    path: str | Path,
    size: int,
    *,
    item_id: Optional[str] = None,
    category: str = CATEGORY_TOP,
) -> ItemImage:
    """Decode an RGB raster file and normalize it to (3, size, size) in [-1, 1].

    8-bit values map affinely: v -> v / 127.5 - 1, so pure white becomes 1.0
    and pure black -1.0. Resampling is bilinear.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.width == 0 or img.height == 0:
                raise ImageLoadError(f"{path}: zero-dimension image")
            rgb = img.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
    except UnidentifiedImageError as exc:
        raise ImageLoadError(f"{path}: cannot decode image ({exc})") from exc
    arr = np.asarray(rgb, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)
    pixels = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return ItemImage(item_id=item_id or path.stem, category=category, pixels=pixels)


class ImageStore:
    """Loads manifest items at a fixed size, with an in-memory cache."""

    def __init__(self, manifest: PairManifest, size: int, cache: bool = True):
        self.manifest = manifest
        self.size = size
        self._cache: Optional[Dict[str, ItemImage]] = {} if cache else None

    def get(self, item_id: str) -> ItemImage:
        if self._cache is not None and item_id in self._cache:
            return self._cache[item_id]
        rec = self.manifest.items[item_id]
        img = load_image(
            self.manifest.item_path(item_id), self.size,
            item_id=item_id, category=rec.category,
        )
        if self._cache is not None:
            self._cache[item_id] = img
        return img


def _draw_negative(
    manifest: PairManifest,
    top_id: str,
    rng: np.random.Generator,
    bottoms: Optional[Sequence[str]] = None,
) -> str:
    """Uniform draw over bottoms not paired with ``top_id`` (rejection sampling)."""
    pool = list(bottoms) if bottoms is not None else manifest.bottom_ids
    positives = manifest.positives_of_top(top_id)
    if sum(1 for b in pool if b not in positives) == 0:
        raise NegativeExhaustionError(
            f"no negative bottom available for top {top_id!r}"
        )
    while True:
        candidate = pool[int(rng.integers(len(pool)))]
        if candidate not in positives:
            return candidate


def sample_negative(manifest: PairManifest, top_id: str, rng_seed: int) -> str:
    """Sample one bottom_id with (top_id, bottom_id) not in the positive set.

    Deterministic for a fixed seed; uniform over the valid bottoms.
    """
    rng = np.random.default_rng(rng_seed)
    return _draw_negative(manifest, top_id, rng)


@dataclass
class Batch:
    tops: List[ItemImage]
    positive_bottoms: List[ItemImage]
    negative_bottoms: List[ItemImage]
    pair_ids: List[str]

    def __len__(self) -> int:
        return len(self.tops)


def batch_iter(
    manifest: PairManifest,
    split: str,
    batch_size: int,
    shuffle: bool,
    rng_seed: int,
    *,
    image_size: int = 128,
    store: Optional[ImageStore] = None,
) -> Iterator[Batch]:
    """Yield triplet batches covering each pair of the split exactly once.

    Negatives are resampled per epoch, uniformly over the non-positive
    bottoms. The last batch may be smaller. Output is a pure function of
    (manifest, split, batch_size, shuffle, rng_seed).
    """
    pairs = manifest.pairs_of_split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    store = store or ImageStore(manifest, image_size)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))

    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        tops, pos, neg, ids = [], [], [], []
        for p in chunk:
            tops.append(store.get(p.top_id))
            pos.append(store.get(p.bottom_id))
            neg.append(store.get(_draw_negative(manifest, p.top_id, rng)))
            ids.append(p.pair_id)
        yield Batch(tops=tops, positive_bottoms=pos, negative_bottoms=neg, pair_ids=ids)


def _palette_rgb(hue_deg: int) -> Tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue_deg / 360.0, 0.85, 0.90)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def _draw_top(size: int, color: Tuple[int, int, int], rng: np.random.Generator) -> Image.Image:
    """Solid-color rectangle on a white field, geometry jittered per item."""
    img = Image.new("RGB", (size, size), (255, 255, 255))
    d = ImageDraw.Draw(img)
    w = int(size * rng.uniform(0.45, 0.70))
    h = int(size * rng.uniform(0.30, 0.50))
    cx = int(size * (0.5 + rng.uniform(-0.08, 0.08)))
    cy = int(size * (0.40 + rng.uniform(-0.08, 0.08)))
    d.rectangle([cx - w // 2, cy - h // 2, cx + w // 2, cy + h // 2], fill=color)
    return img


def _draw_bottom(size: int, color: Tuple[int, int, int], rng: np.random.Generator) -> Image.Image:
    """Solid-color trapezoid on a white field, geometry jittered per item."""
    img = Image.new("RGB", (size, size), (255, 255, 255))
    d = ImageDraw.Draw(img)
    top_w = int(size * rng.uniform(0.50, 0.75))
    bot_w = int(size * rng.uniform(0.22, 0.45))
    h = int(size * rng.uniform(0.50, 0.72))
    cx = int(size * (0.5 + rng.uniform(-0.06, 0.06)))
    y0 = int(size * (0.5 - h / (2 * size)))
    y1 = y0 + h
    d.polygon(
        [(cx - top_w // 2, y0), (cx + top_w // 2, y0),
         (cx + bot_w // 2, y1), (cx - bot_w // 2, y1)],
        fill=color,
    )
    return img


def synth_toy_dataset(
    n_pairs: int, image_size: int, rng_seed: int, out_dir: str | Path
) -> PairManifest:
    """Write a synthetic paired dataset with a known compatibility rule.

    Each top is a colored rectangle on white, its compatible bottom a
    trapezoid of the same hue; hues come from a fixed 12-color palette.
    Geometry is jittered per item so images within a hue still differ.
    Pairs are split 70/15/15 (train/val/test) by a seeded permutation.
    The output (images and manifest) is byte-identical for a fixed seed.
    """
    if n_pairs < 4:
        raise ValueError("n_pairs must be >= 4")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)

    records = []
    for i in range(n_pairs):
        hue = TOY_PALETTE_HUES[int(rng.integers(len(TOY_PALETTE_HUES)))]
        color = _palette_rgb(hue)
        top_id, bottom_id = f"top{i:05d}", f"bot{i:05d}"
        top_rel = f"images/{top_id}.png"
        bot_rel = f"images/{bottom_id}.png"
        _draw_top(image_size, color, rng).save(out_dir / top_rel)
        _draw_bottom(image_size, color, rng).save(out_dir / bot_rel)
        records.append((f"pair{i:05d}", top_id, top_rel, bottom_id, bot_rel))

    n_train = int(n_pairs * 0.70)
    n_val = int(n_pairs * 0.15)
    perm = rng.permutation(n_pairs)
    split_of = {}
    for rank, idx in enumerate(perm):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for i, (pair_id, top_id, top_rel, bottom_id, bot_rel) in enumerate(records):
            writer.writerow([pair_id, top_id, top_rel, bottom_id, bot_rel, split_of[i]])

    return load_manifest(manifest_path)


def toy_hue_of(manifest: PairManifest, item_id: str) -> int:
    """Recover the palette hue of a synthetic item from its stored image.

    Only meaningful for datasets produced by ``synth_toy_dataset``; used by
    oracle scorers in tests and demos.
    """
    img = load_image(manifest.item_path(item_id), 32)
    arr = (img.pixels + 1.0) / 2.0  # back to [0, 1]
    flat = arr.reshape(3, -1)
    # Non-white pixels belong to the drawn shape.
    mask = flat.min(axis=0) < 0.85
    if not mask.any():
        raise ValueError(f"item {item_id!r} has no colored region")
    r, g, b = flat[:, mask].mean(axis=1)
    h, _, _ = colorsys.rgb_to_hsv(float(r), float(g), float(b))
    hue = h * 360.0
    return min(TOY_PALETTE_HUES, key=lambda p: min(abs(hue - p), 360 - abs(hue - p)))
