"""Batch composition and resampling of imbalanced training indexes.

``plan_balanced_batch``/``draw_balanced_batch`` build the class-balanced
batches of the semi-supervised GAN: ``n_l/K`` labeled images per class,
a generated sub-batch of the same size, and ``c`` times that many
unlabeled images. The rest are the resampling baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from bssgan.dataset import DatasetIndex, ImageRecord
from bssgan.errors import ConfigError, DataError
from bssgan.networks import NOISE_DIM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchPlan:
    k: int
    n_l: int
    c: float
    n_g: int
    n_ul: int

    @property
    def per_class(self) -> int:
        return self.n_l // self.k

    @property
    def m(self) -> int:
        return self.n_l + self.n_g + self.n_ul


def plan_balanced_batch(k: int, n_l: int, c: float = 0.0) -> BatchPlan:
    if k < 2:
        raise ConfigError(f"balanced batches need K >= 2, got {k}")
    if n_l <= 0 or n_l % k:
        raise ConfigError(f"n_l={n_l} is not a positive multiple of K={k}")
    if c < 0:
        raise ConfigError(f"c must be >= 0, got {c}")
    n_g = n_l // k
    n_ul = c * n_g
    if abs(n_ul - round(n_ul)) > 1e-9:
        raise ConfigError(f"c*n_l/K = {n_ul} is not an integer")
    return BatchPlan(k, n_l, c, n_g, int(round(n_ul)))


@dataclass
class Batch:
    labeled: list[str]
    labels: np.ndarray
    unlabeled: list[str]
    z: np.ndarray  # (n_g, NOISE_DIM)
    plan: BatchPlan

    @property
    def real(self) -> list[str]:
        """The real sub-batch: labeled rows first, then unlabeled."""
        return self.labeled + self.unlabeled

    def composition(self) -> tuple[int, ...]:
        """(count of class 0, ..., class K-1, unlabeled, generated)."""
        per = np.bincount(self.labels, minlength=self.plan.k)
        return (*per.tolist(), len(self.unlabeled), self.z.shape[0])


def draw_balanced_batch(index: DatasetIndex, plan: BatchPlan, rng: np.random.Generator) -> Batch:
    if index.k != plan.k:
        raise ConfigError(f"plan is for K={plan.k} but the index has K={index.k}")
    labeled, labels = [], []
    for k, pool in enumerate(index.labeled):
        if not pool:
            raise DataError(f"class {index.class_names[k]!r} has no labeled images")
        pick = rng.integers(0, len(pool), size=plan.per_class)
        labeled.extend(pool[j] for j in pick)
        labels.append(np.full(plan.per_class, k, np.int64))
    unlabeled: list[str] = []
    if plan.n_ul:
        pool = index.unlabeled
        if not pool:
            raise DataError("plan asks for unlabeled images but the unlabeled pool is empty")
        pick = rng.choice(len(pool), size=plan.n_ul, replace=plan.n_ul > len(pool))
        unlabeled = [pool[j] for j in pick]
    z = rng.standard_normal((plan.n_g, NOISE_DIM)).astype(np.float32)
    return Batch(labeled, np.concatenate(labels), unlabeled, z, plan)


def epoch_schedule(index: DatasetIndex, plan: BatchPlan) -> int:
    """Balanced batches per epoch: ceil(N_l / n_l)."""
    return max(1, math.ceil(index.n_labeled / plan.n_l))


def generated_total(index: DatasetIndex, plan: BatchPlan, epochs: int) -> int:
    return plan.n_g * epochs * epoch_schedule(index, plan)


def shuffled_batches(index: DatasetIndex, batch_size: int, rng: np.random.Generator):
    """One epoch of plain minibatches, shuffled, without replacement."""
    ids, labels = index.labeled_arrays()
    order = rng.permutation(len(ids))
    for s in range(0, len(ids), batch_size):
        sel = order[s : s + batch_size]
        yield [ids[j] for j in sel], labels[sel]


def undersample(index: DatasetIndex, rng: np.random.Generator) -> DatasetIndex:
    """Truncate every class to the smallest class count, sampling without replacement."""
    n = min(index.counts)
    labeled = []
    for pool in index.labeled:
        keep = np.sort(rng.choice(len(pool), size=n, replace=False))
        labeled.append([pool[j] for j in keep])
    return index.derive(labeled, index.unlabeled)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class Augmentation:
    flip: bool = True
    translate_frac: float = 0.1
    rotate_deg: float = 15.0

    def sample(self, rng: np.random.Generator, size: int) -> dict:
        max_shift = int(math.floor(self.translate_frac * size))
        return {
            "flip": bool(self.flip and rng.random() < 0.5),
            "dy": int(rng.integers(-max_shift, max_shift + 1)),
            "dx": int(rng.integers(-max_shift, max_shift + 1)),
            "angle": float(rng.uniform(-self.rotate_deg, self.rotate_deg)) if self.rotate_deg else 0.0,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def apply_transform(pixels: np.ndarray, t: dict | None) -> np.ndarray:
    """Flip, rotate, then shift an (S, S, 3) image; borders are reflected."""
    out = pixels
    if not t:
        return out.copy()
    if t.get("flip"):
        out = out[:, ::-1]
    if t.get("angle"):
        out = ndimage.rotate(out, t["angle"], axes=(1, 0), reshape=False, order=1, mode="reflect")
    if t.get("dx") or t.get("dy"):
        out = ndimage.shift(out, (t.get("dy", 0), t.get("dx", 0), 0), order=0, mode="reflect")
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def oversample_da(index: DatasetIndex, augment: Augmentation, rng: np.random.Generator) -> DatasetIndex:
    """Pad every smaller class to the largest class count with transformed copies.

    Transforms are drawn now and recorded on the new records; pixels are
    produced lazily when the index loads them.
    """
    target = max(index.counts)
    out = index
    for k, pool in enumerate(index.labeled):
        need = target - len(pool)
        if need <= 0:
            continue
        bases = rng.integers(0, len(pool), size=need)
        ids = out.fresh_ids(f"aug/{index.class_names[k]}/", need)
        records = [
            ImageRecord(rid, k, "augmented", base=pool[b], transform=augment.sample(rng, index.image_size))
            for rid, b in zip(ids, bases)
        ]
        out = out.with_records(records, k)
    return out


# ---------------------------------------------------------------- GAN over-sampling


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to [0, 255] bytes."""
    return np.clip(np.rint((np.asarray(images, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def synthesize(generator, n: int, rng: np.random.Generator, chunk: int = 64) -> np.ndarray:
    """Draw ``n`` samples from a generator in inference mode, values in [-1, 1]."""
    import bssgan.tensor as T

    out = []
    with T.no_tape():
        for s in range(0, n, chunk):
            z = rng.standard_normal((min(chunk, n - s), generator.spec.input_shape[0])).astype(np.float32)
            out.append(generator.forward(T.Tensor(z), training=False).data)
    if not out:
        s = generator_size(generator)
        return np.zeros((0, s, s, 3), np.float32)
    return np.concatenate(out)


def generator_size(generator) -> int:
    return int(round(math.sqrt(generator.spec.output_dim / 3)))


def oversample_gan(
    index: DatasetIndex, checkpoint, label: int, count: int, out_dir, rng: np.random.Generator
) -> DatasetIndex:
    """Write ``count`` generated images for class ``label`` and index them.

    Files go to ``out_dir/<class>/gan_<seq>.png``. No sample is filtered.
    """
    from PIL import Image

    from bssgan.networks import find_network

    if not Path(checkpoint).exists():
        raise DataError(f"generator checkpoint {checkpoint} does not exist")
    generator = find_network(checkpoint, "generator")
    size = generator_size(generator)
    if size != index.image_size:
        raise ConfigError(f"generator emits {size}px images but the index is {index.image_size}px")
    name = index.class_names[label]
    folder = Path(out_dir) / name
    folder.mkdir(parents=True, exist_ok=True)
    images = to_uint8(synthesize(generator, count, rng))
    records = []
    ids = index.fresh_ids(f"gan/{name}/", count)
    for seq, (rid, img) in enumerate(zip(ids, images)):
        path = folder / f"gan_{seq:06d}.png"
        Image.fromarray(img, "RGB").save(path)
        records.append(ImageRecord(rid, label, "synthetic-gan", path=path))
    return index.with_records(records, label)
