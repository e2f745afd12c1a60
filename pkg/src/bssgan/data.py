"""Image ingestion and the procedural concrete-surface stand-in dataset.

Folder layout (one format for every pipeline)::

    root/<split>/<class_name>/*.png|jpg
    root/train/_unlabeled/*.png

Images are resized with a Catmull-Rom bicubic kernel (zero outside the
image) and mapped from [0, 255] to [-1, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from bssgan.dataset import DatasetIndex, ImageRecord, fraction_count
from bssgan.errors import ConfigError, DataError

log = logging.getLogger(__name__)

UNLABELED_DIR = "_unlabeled"
CLASS_FILE = "classes.txt"  # optional class order, one name per line
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
PROCEDURAL_CLASSES = ("UD", "CR", "SP")


# ---------------------------------------------------------------- resize


def cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    w[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return w


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights along one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        j = base + tap
        w = cubic_weight(src - j)
        ok = (j >= 0) & (j < n_in)
        m[np.arange(n_out)[ok], j[ok]] += w[ok]
    return m


def resize_bicubic(img: np.ndarray, size: int) -> np.ndarray:
    """Resize an (H, W, C) array to (size, size, C)."""
    img = np.asarray(img, np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.copy()
    return np.einsum("ih,hwc,jw->ijc", resize_matrix(h, size), img, resize_matrix(w, size))


def to_unit_range(img: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1], clipped (bicubic overshoot)."""
    return np.clip(np.asarray(img, np.float64) / 127.5 - 1.0, -1.0, 1.0)


def read_image(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode {path}: {e}") from e
    return to_unit_range(resize_bicubic(arr, size)).astype(np.float32)


def write_image(path, pixels: np.ndarray) -> None:
    from bssgan.sampling import to_uint8

    Image.fromarray(to_uint8(pixels), "RGB").save(path)


# ---------------------------------------------------------------- ingestion


def _image_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_dir(root, size: int, class_names: Sequence[str] | None = None, eager: bool = True) -> DatasetIndex:
    """Index ``root/<class>/*`` plus an optional ``root/_unlabeled`` pool.

    Undecodable files are skipped with a warning. With ``eager`` every
    image is decoded now; otherwise decoding happens on first use.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    found = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != UNLABELED_DIR)
    names = tuple(class_names) if class_names is not None else tuple(found)
    missing = [n for n in names if n not in found]
    if missing:
        raise DataError(f"{root}: no folder for classes {missing}")
    if len(names) < 2:
        raise DataError(f"{root}: need at least two class folders, found {found}")
    store: dict[str, ImageRecord] = {}

    def add(path: Path, label):
        rid = path.relative_to(root).as_posix()
        rec = ImageRecord(rid, label, "file", path=path)
        if eager:
            try:
                rec.pixels = read_image(path, size)
            except DataError as e:
                log.warning("skipping %s", e)
                return None
        store[rid] = rec
        return rid

    labeled = []
    for k, name in enumerate(names):
        ids = [i for i in (add(p, k) for p in _image_files(root / name)) if i is not None]
        if not ids:
            raise DataError(f"class {name!r} under {root} has no readable images")
        labeled.append(ids)
    unlabeled = []
    if (root / UNLABELED_DIR).is_dir():
        unlabeled = [i for i in (add(p, None) for p in _image_files(root / UNLABELED_DIR)) if i is not None]
    return DatasetIndex(labeled, unlabeled, names, size, store)


def class_order(root) -> tuple[str, ...] | None:
    path = Path(root) / CLASS_FILE
    if not path.is_file():
        return None
    return tuple(line.strip() for line in path.read_text().splitlines() if line.strip())


def load_splits(root, size: int, seed: int = 0) -> tuple[DatasetIndex, DatasetIndex]:
    """(train, test) from ``root/train`` + ``root/test``, or a 2:1 split of ``root/all``.

    Class order comes from ``root/classes.txt`` when present, else sorted folder names.
    """
    root = Path(root)
    names = class_order(root)
    if (root / "train").is_dir() and (root / "test").is_dir():
        train = ingest_dir(root / "train", size, names)
        test = ingest_dir(root / "test", size, train.class_names)
        return train, test
    if (root / "all").is_dir():
        return make_split(ingest_dir(root / "all", size, names), SplitSpec(seed=seed))
    raise DataError(f"{root} has neither train/ + test/ nor all/ subfolders")


def materialize(index: DatasetIndex, root, split: str = "all") -> Path:
    """Write an index as PNG files in the standard layout, plus ``root/classes.txt``."""
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / CLASS_FILE).write_text("\n".join(index.class_names) + "\n")
    out = Path(root) / split
    for k, ids in enumerate(index.labeled):
        folder = out / index.class_names[k]
        folder.mkdir(parents=True, exist_ok=True)
        for i in ids:
            write_image(folder / f"{_file_stem(i)}.png", index.pixels([i])[0])
    if index.unlabeled:
        folder = out / UNLABELED_DIR
        folder.mkdir(parents=True, exist_ok=True)
        for i in index.unlabeled:
            write_image(folder / f"{_file_stem(i)}.png", index.pixels([i])[0])
    return out


def _file_stem(rid: str) -> str:
    return Path(rid).stem if "/" in rid and Path(rid).suffix else rid.replace("/", "_")


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train: int = 2
    test: int = 1
    seed: int = 0


def make_split(index: DatasetIndex, spec: SplitSpec = SplitSpec()) -> tuple[DatasetIndex, DatasetIndex]:
    """Stratified, disjoint train/test split; the unlabeled pool stays in train."""
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for k, pool in enumerate(index.labeled):
        n_test = int(round(len(pool) * spec.test / (spec.train + spec.test)))
        if n_test == 0 or n_test == len(pool):
            raise DataError(
                f"class {index.class_names[k]!r} has {len(pool)} images, too few for a {spec.train}:{spec.test} split"
            )
        order = rng.permutation(len(pool))
        test.append([pool[j] for j in np.sort(order[:n_test])])
        train.append([pool[j] for j in np.sort(order[n_test:])])
    return index.derive(train, index.unlabeled), index.derive(test)


def make_hybrid(train: DatasetIndex, labeled_fraction: float, seed: int = 0) -> DatasetIndex:
    """Keep a stratified labeled subset; move the rest to the unlabeled pool."""
    if not 0 < labeled_fraction <= 1:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    labeled, moved = [], []
    for pool in train.labeled:
        keep = fraction_count(len(pool), labeled_fraction)
        if keep == 0:
            raise DataError(f"labeled fraction {labeled_fraction} leaves a class empty")
        order = rng.permutation(len(pool))
        labeled.append([pool[j] for j in np.sort(order[:keep])])
        moved.extend(pool[j] for j in np.sort(order[keep:]))
    return train.derive(labeled, list(train.unlabeled) + moved)


def subsample_unlabeled(index: DatasetIndex, fraction: float, seed: int = 0) -> DatasetIndex:
    """Keep a random ``fraction`` of the unlabeled pool (0 empties it)."""
    if not 0 <= fraction <= 1:
        raise ConfigError(f"unlabeled fraction must be in [0, 1], got {fraction}")
    n = fraction_count(len(index.unlabeled), fraction)
    keep = np.sort(np.random.default_rng(seed).choice(len(index.unlabeled), size=n, replace=False))
    return index.derive(index.labeled, [index.unlabeled[j] for j in keep])


# ---------------------------------------------------------------- procedural


def _texture(rng: np.random.Generator, s: int) -> np.ndarray:
    """Concrete-like background: smoothed correlated noise with a grey tint."""
    coarse = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=s / 10, mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=0.8, mode="wrap")
    grey = 0.35 * coarse / (coarse.std() + 1e-8) + 0.12 * fine / (fine.std() + 1e-8)
    level = rng.uniform(0.0, 0.3)
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = 0.12 * grey[..., None] + level + tint
    return np.clip(img, -1.0, 1.0)


def _stamp(mask: np.ndarray, points: np.ndarray, radius: float) -> None:
    s = mask.shape[0]
    yy, xx = np.mgrid[0:s, 0:s]
    for y, x in points:
        mask |= (yy - y) ** 2 + (xx - x) ** 2 <= radius**2


def crack_mask(rng: np.random.Generator, s: int) -> np.ndarray:
    """A 1-3 px wide random polyline crossing the tile edge to edge."""
    vertical = rng.random() < 0.5
    n_seg = int(rng.integers(2, 5))
    along = np.linspace(-1, s, n_seg + 1)
    across = np.clip(rng.uniform(0.2 * s, 0.8 * s) + np.cumsum(rng.normal(0, s / 8, n_seg + 1)), 0, s - 1)
    pts = np.stack([along, across], 1) if vertical else np.stack([across, along], 1)
    dense = []
    for a, b in zip(pts[:-1], pts[1:]):
        steps = int(np.ceil(np.hypot(*(b - a)) * 2)) + 1
        dense.append(a + (b - a) * np.linspace(0, 1, steps)[:, None])
    width = int(rng.integers(1, 4))
    mask = np.zeros((s, s), bool)
    _stamp(mask, np.concatenate(dense), radius=width / 2)
    return mask


def spall_mask(rng: np.random.Generator, s: int) -> np.ndarray:
    """An irregular blob grown by a random walk until it covers >= 4% of the tile."""
    target = rng.uniform(0.05, 0.12) * s * s
    mask = np.zeros((s, s), bool)
    pos = rng.uniform(0.3 * s, 0.7 * s, size=2)
    radius = max(1.5, s / 16)
    while mask.sum() < target:
        _stamp(mask, pos[None], radius)
        pos = np.clip(pos + rng.normal(0, radius, size=2), 0, s - 1)
    return ndimage.binary_closing(mask, iterations=1) | mask


def _darken(img: np.ndarray, mask: np.ndarray, depth: float) -> np.ndarray:
    out = img.copy()
    out[mask] = np.clip(out[mask] - depth, -1.0, 1.0)
    return out


def procedural_image(rng: np.random.Generator, label: int, s: int, contrast: float = 0.4) -> np.ndarray:
    base = _texture(rng, s)
    if label == 0:
        return base
    if label == 1:
        return _darken(base, crack_mask(rng, s), contrast * rng.uniform(0.8, 1.2))
    blob = spall_mask(rng, s)
    shade = contrast * rng.uniform(0.6, 1.0) + 0.1 * rng.standard_normal((s, s, 1))
    out = base.copy()
    out[blob] = np.clip(out[blob] - shade[blob], -1.0, 1.0)
    return out


def make_procedural(counts: Sequence[int], size: int = 32, seed: int = 0, contrast: float = 0.4) -> DatasetIndex:
    """Deterministic stand-in dataset: UD texture, CR = UD + dark polyline, SP = UD + dark blob.

    ``counts`` lists per-class totals in UD, CR, SP order (2 or 3 classes).
    """
    if not 2 <= len(counts) <= 3:
        raise ConfigError(f"procedural data has 2 or 3 classes, got {len(counts)} counts")
    if min(counts) <= 0:
        raise ConfigError(f"class counts must be positive, got {list(counts)}")
    store: dict[str, ImageRecord] = {}
    labeled = []
    for k, n in enumerate(counts):
        ids = []
        for j in range(n):
            rng = np.random.default_rng([seed, k, j])
            rid = f"{PROCEDURAL_CLASSES[k].lower()}_{j:05d}"
            store[rid] = ImageRecord(rid, k, "procedural", pixels=procedural_image(rng, k, size, contrast).astype(np.float32))
            ids.append(rid)
        labeled.append(ids)
    return DatasetIndex(labeled, (), PROCEDURAL_CLASSES[: len(counts)], size, store)


def detect_damage(img: np.ndarray) -> int:
    """Hand-coded classifier for procedural tiles: 0 intact, 1 crack, 2 blob.

    Dark pixels are those well below the tile median; a large
    compact dark component is a blob, a thin elongated one is a crack.
    """
    grey = np.asarray(img, np.float64).mean(axis=2)
    dark = grey < np.median(grey) - 0.12
    labels, n = ndimage.label(dark, structure=np.ones((3, 3)))
    if n == 0:
        return 0
    sizes = ndimage.sum(dark, labels, index=np.arange(1, n + 1))
    big = int(np.argmax(sizes)) + 1
    area = sizes[big - 1]
    s = grey.shape[0]
    if area < 0.02 * s * s and dark.sum() < 0.03 * s * s:
        return 0
    filled = ndimage.binary_fill_holes(labels == big)
    thick = ndimage.binary_erosion(filled, iterations=2).sum()
    return 2 if thick >= 0.004 * s * s else 1
