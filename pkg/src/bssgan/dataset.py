"""Image records and the dataset index shared by data loading and sampling.

An index never copies pixels. It holds id lists (per class, plus an
unlabeled pool) over a shared ``store`` of :class:`ImageRecord` entries;
splitting, subsampling and augmentation build new indexes over the same
store.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from bssgan.errors import ConfigError, DataError

SOURCES = ("file", "procedural", "synthetic-gan", "augmented")


@dataclass
class ImageRecord:
    id: str
    label: int | None  # None = unlabeled at ingest time
    source: str
    pixels: np.ndarray | None = None  # (S, S, 3) float32 in [-1, 1]
    path: Path | None = None
    base: str | None = None  # augmented: id of the record it was derived from
    transform: dict | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown image source {self.source!r}")


def check_pixels(arr: np.ndarray, size: int, what: str = "image") -> np.ndarray:
    if arr.shape != (size, size, 3):
        raise DataError(f"{what}: expected shape {(size, size, 3)}, got {arr.shape}")
    if arr.min() < -1.0 or arr.max() > 1.0:
        raise DataError(f"{what}: values outside [-1, 1]")
    return arr


def ratio_of(counts: Sequence[int]) -> tuple[int, ...]:
    """Smallest integer ratio, e.g. (14400, 900, 450) -> (32, 2, 1)."""
    counts = [int(c) for c in counts]
    g = 0
    for c in counts:
        g = gcd(g, c)
    return tuple(c // g for c in counts) if g else tuple(counts)


@dataclass
class DatasetIndex:
    labeled: tuple[tuple[str, ...], ...]
    unlabeled: tuple[str, ...]
    class_names: tuple[str, ...]
    image_size: int
    store: dict[str, ImageRecord] = field(repr=False)
    ratio: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.labeled = tuple(tuple(ids) for ids in self.labeled)
        self.unlabeled = tuple(self.unlabeled)
        self.class_names = tuple(self.class_names)
        if len(self.labeled) != len(self.class_names):
            raise ConfigError(f"{len(self.labeled)} id lists for {len(self.class_names)} class names")
        seen: set[str] = set()
        for ids in (*self.labeled, self.unlabeled):
            for i in ids:
                if i in seen:
                    raise ConfigError(f"id {i!r} appears twice in the index")
                if i not in self.store:
                    raise ConfigError(f"id {i!r} has no record in the store")
                seen.add(i)
        actual = ratio_of(self.counts)
        if self.ratio and tuple(self.ratio) != actual:
            raise ConfigError(f"recorded ratio {self.ratio} disagrees with list lengths {self.counts}")
        self.ratio = actual

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(ids) for ids in self.labeled)

    @property
    def n_labeled(self) -> int:
        return sum(self.counts)

    def all_ids(self) -> list[str]:
        return [i for ids in self.labeled for i in ids] + list(self.unlabeled)

    def labeled_arrays(self) -> tuple[list[str], np.ndarray]:
        """Every labeled id, class-major order, with its label."""
        ids = [i for ids in self.labeled for i in ids]
        labels = np.concatenate([np.full(len(ids_k), k, np.int64) for k, ids_k in enumerate(self.labeled)])
        return ids, labels

    def derive(self, labeled: Iterable[Iterable[str]], unlabeled: Iterable[str] = ()) -> "DatasetIndex":
        out = DatasetIndex(tuple(tuple(x) for x in labeled), tuple(unlabeled), self.class_names, self.image_size, self.store)
        out._cache = self._cache
        return out

    def fresh_ids(self, prefix: str, n: int) -> list[str]:
        """``n`` ids of the form ``<prefix><seq>`` not yet in the shared store."""
        out, seq = [], 0
        while len(out) < n:
            rid = f"{prefix}{seq:06d}"
            if rid not in self.store:
                out.append(rid)
            seq += 1
        return out

    def with_records(self, records: Iterable[ImageRecord], label: int) -> "DatasetIndex":
        """Add new records to the shared store and append them to class ``label``."""
        new = []
        for r in records:
            if r.id in self.store:
                raise ConfigError(f"record id {r.id!r} already exists")
            self.store[r.id] = r
            new.append(r.id)
        labeled = [list(ids) for ids in self.labeled]
        labeled[label].extend(new)
        return self.derive(labeled, self.unlabeled)

    def pixels(self, ids: Sequence[str]) -> np.ndarray:
        """Stack the (N, S, S, 3) float32 pixels of ``ids``; decoding is cached."""
        out = np.empty((len(ids), self.image_size, self.image_size, 3), np.float32)
        for j, i in enumerate(ids):
            out[j] = self._load(i)
        return out

    def _load(self, i: str) -> np.ndarray:
        hit = self._cache.get(i)
        if hit is not None:
            return hit
        rec = self.store[i]
        if rec.pixels is not None:
            arr = rec.pixels
        elif rec.source == "augmented":
            from bssgan.sampling import apply_transform

            arr = apply_transform(self._load(rec.base), rec.transform)
        elif rec.path is not None:
            from bssgan.data import read_image

            arr = read_image(rec.path, self.image_size)
        else:
            raise DataError(f"record {i!r} has neither pixels nor a path")
        arr = check_pixels(np.asarray(arr, np.float32), self.image_size, i)
        self._cache[i] = arr
        return arr

    def describe(self) -> dict:
        return {
            "classes": dict(zip(self.class_names, self.counts)),
            "unlabeled": len(self.unlabeled),
            "ratio": ":".join(str(r) for r in self.ratio),
            "image_size": self.image_size,
        }


def fraction_count(n: int, fraction: float) -> int:
    """round(n * fraction) with exact decimal handling (0.2 * 600 == 120)."""
    return int(round(Fraction(str(fraction)) * n))
