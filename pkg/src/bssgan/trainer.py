"""Experiment pipelines, per-epoch checkpointing and model selection.

Pipelines:

* ``bss-gan``   balanced semi-supervised GAN (D has K+1 outputs)
* ``bsl``       plain supervised classifier
* ``bus``       classifier on an under-sampled training set
* ``bos-da``    classifier on a set over-sampled with flip/shift/rotate copies
* ``bos-gan``   classifier on a set over-sampled with GAN images (one GAN per minority class)
* ``bsl-sdf``   pre-train on GAN images of every class, then fine-tune on real images
* ``bsl-bce``   classifier with reverse-frequency weighted cross-entropy
* ``bsl-focal`` classifier with reverse-frequency weighted focal loss

Every pipeline writes one checkpoint per epoch under ``out_dir/epoch_<n>/``
(``out_dir/<stage>/epoch_<n>/`` for two-stage runs), evaluates the classifier on
the selection split after each epoch, and picks the best epoch with
:func:`select_best`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

import bssgan.tensor as T
from bssgan import losses as L
from bssgan.data import SplitSpec, load_splits, make_hybrid, make_split, subsample_unlabeled
from bssgan.dataset import DatasetIndex
from bssgan.errors import ConfigError, DataError, NumericError
from bssgan.evaluation import MetricsReport, build_report, confusion, majority_class, save_grid
from bssgan.networks import NOISE_DIM, Network, build_discriminator, build_generator, load_network, save_networks
from bssgan.sampling import (
    Augmentation,
    BatchPlan,
    draw_balanced_batch,
    epoch_schedule,
    oversample_da,
    oversample_gan,
    plan_balanced_batch,
    shuffled_batches,
    undersample,
)
from bssgan.tensor.checkpoint import ADAM_PREFIX
from bssgan.tensor.optim import Adam

log = logging.getLogger(__name__)

PIPELINES = ("bsl", "bus", "bos-da", "bos-gan", "bsl-sdf", "bss-gan", "bsl-bce", "bsl-focal")
CONSTRAINT = 0.90
LOG_COLUMNS = ("step", "epoch", "loss_d", "loss_d_us", "loss_d_s", "loss_g", "loss_g_h", "loss_g_fm")


@dataclass
class ExperimentConfig:
    pipeline: str = "bss-gan"
    k: int = 2
    image_size: int = 128
    n_l: int = 60
    c: float = 0.0
    epochs: int = 300
    lr: float = 2e-5
    seed: int = 0
    select_rule: str | None = None  # binary | ternary; inferred from k when unset
    select_on_test: bool = False
    dataset_root: str = ""
    labeled_fraction: float = 1.0
    unlabeled_fraction: float = 1.0
    da: dict = field(default_factory=lambda: Augmentation().to_dict())
    focal_gamma: float = 2.0
    out_dir: str = "runs/experiment"
    val_fraction: float = 0.1
    gan_epochs: int | None = None  # ordinary-GAN pre-training epochs; defaults to ``epochs``
    betas: tuple = (2, 5)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; valid ids: {', '.join(PIPELINES)}")
        if self.select_rule is None:
            self.select_rule = "binary" if self.k == 2 else "ternary"
        if self.select_rule not in ("binary", "ternary"):
            raise ConfigError(f"select_rule must be binary or ternary, got {self.select_rule!r}")
        if (self.select_rule == "binary") != (self.k == 2):
            raise ConfigError(f"select_rule {self.select_rule!r} does not fit K={self.k}")
        if self.epochs < 1 or self.lr <= 0 or self.n_l <= 0:
            raise ConfigError("epochs, lr and n_l must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        self.da = {**Augmentation().to_dict(), **dict(self.da)}
        Augmentation(**self.da)
        self.betas = tuple(self.betas)
        plan_balanced_batch(self.k, self.n_l, self.c)

    @property
    def augmentation(self) -> Augmentation:
        return Augmentation(**self.da)

    @property
    def pretrain_epochs(self) -> int:
        return self.gan_epochs if self.gan_epochs is not None else self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        try:
            return cls(**dict(d))
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_step(self, **row) -> None:
        self.steps.append(row)

    def checkpoints(self) -> list[str]:
        return [e["checkpoint"] for e in self.epochs]

    def save(self, out, name: str = "train_log") -> None:
        out = Path(out)
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.steps:
                w.writerow({k: ("" if row.get(k) is None else _num(row[k])) for k in LOG_COLUMNS})
        (out / f"{name}_epochs.json").write_text(json.dumps(self.epochs, indent=1, sort_keys=True) + "\n")


def _num(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


@dataclass
class RunResult:
    config: ExperimentConfig
    log: TrainLog
    selected: dict
    report: MetricsReport
    out_dir: Path
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- data


@dataclass
class Splits:
    train: DatasetIndex
    val: DatasetIndex
    test: DatasetIndex


def prepare_data(config: ExperimentConfig, train: DatasetIndex | None = None, test: DatasetIndex | None = None) -> Splits:
    """Load train/test and carve the selection split.

    The validation split is taken (stratified) from the labeled training set
    before any labels are hidden, so hybrid runs select models on the same
    images as fully labeled ones.
    """
    if train is None or test is None:
        if not config.dataset_root:
            raise ConfigError("dataset_root is not set")
        if not Path(config.dataset_root).exists():
            raise DataError(f"dataset_root {config.dataset_root} does not exist")
        train, test = load_splits(config.dataset_root, config.image_size, config.seed)
    if train.k != config.k:
        raise ConfigError(f"config says K={config.k} but the dataset has {train.k} classes {train.class_names}")
    if train.image_size != config.image_size:
        raise ConfigError(f"config image_size {config.image_size} != dataset image size {train.image_size}")
    if config.select_on_test:
        val = test
    else:
        parts = round(1 / config.val_fraction)
        train, val = make_split(train, SplitSpec(train=parts - 1, test=1, seed=config.seed + 1))
    if config.labeled_fraction < 1:
        train = make_hybrid(train, config.labeled_fraction, config.seed + 2)
    if config.unlabeled_fraction < 1:
        train = subsample_unlabeled(train, config.unlabeled_fraction, config.seed + 3)
    return Splits(train, val, test)


# ---------------------------------------------------------------- helpers


class Streams:
    """Independent, seed-derived random streams."""

    def __init__(self, seed: int):
        names = ("init", "batches", "dropout", "data", "gan")
        seqs = np.random.SeedSequence(seed).spawn(len(names))
        for name, s in zip(names, seqs):
            setattr(self, name, np.random.default_rng(s))


def predict(net: Network, index: DatasetIndex, ids=None, k: int | None = None, chunk: int = 256) -> np.ndarray:
    """Argmax over the first K outputs (the synthetic column is ignored)."""
    ids = index.labeled_arrays()[0] if ids is None else ids
    k = index.k if k is None else k
    out = []
    with T.no_tape():
        for s in range(0, len(ids), chunk):
            p = net.forward(T.Tensor(index.pixels(ids[s : s + chunk])), training=False)
            out.append(np.argmax(p.data[:, :k], axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate(net: Network, index: DatasetIndex, pipeline: str = "", checkpoint: str = "", betas=(2, 5)) -> MetricsReport:
    ids, labels = index.labeled_arrays()
    cm = confusion(predict(net, index, ids), labels, index.k)
    return build_report(cm, pipeline, checkpoint, betas)


def _finite(loss: L.LossValue, what: str, step: int) -> float:
    v = loss.scalar
    if not math.isfinite(v):
        raise NumericError(f"{what} loss is {v} at step {step}")
    return v


def _epoch_record(epoch: int, ckpt: Path, report: MetricsReport, root: Path) -> dict:
    return {
        "epoch": epoch,
        "checkpoint": ckpt.relative_to(root).as_posix(),
        "tpr": report.tpr,
        "tnr": report.tnr,
        "accuracy": report.accuracy,
        "recall": report.recall,
    }


# ---------------------------------------------------------------- selection


def select_best(epochs: list[dict], rule: str = "binary", threshold: float = CONSTRAINT) -> dict:
    """Pick the epoch with the best minority recall among those whose majority recall exceeds ``threshold``.

    ``tpr`` holds the minority (positive) recall, ``tnr`` the majority
    recall; for the ternary rule these are the smallest-class and
    largest-class recalls. Ties go to the higher constraint metric, then
    the earlier epoch. If no epoch satisfies the constraint the best
    minority recall overall is returned and a warning is logged.
    """
    if rule not in ("binary", "ternary"):
        raise ConfigError(f"unknown selection rule {rule!r}")
    if not epochs:
        raise ConfigError("cannot select from an empty training log")

    def val(x):
        return -math.inf if x is None else x

    def key(e):
        return (val(e["tpr"]), val(e["tnr"]), -e["epoch"])

    feasible = [e for e in epochs if e["tnr"] is not None and e["tnr"] > threshold]
    if feasible:
        return {**max(feasible, key=key), "fallback": False}
    log.warning("no epoch has majority recall > %.2f; falling back to the best minority recall", threshold)
    return {**max(epochs, key=key), "fallback": True}


# ---------------------------------------------------------------- BSS-GAN


@dataclass
class StepResult:
    d: L.LossValue
    g: L.LossValue
    p_real: np.ndarray
    p_gen: np.ndarray
    labels: np.ndarray
    composition: tuple


def bss_gan_step(D: Network, G: Network, opt_d: Adam, opt_g: Adam, train: DatasetIndex, plan: BatchPlan, rngs: Streams, step: int = 0) -> StepResult:
    """One balanced batch: a discriminator update, then a generator update.

    The generator update uses a fresh forward pass through the updated
    discriminator (frozen, batch-norm statistics untouched). Real features
    for feature matching are constants.
    """
    batch = draw_balanced_batch(train, plan, rngs.batches)
    x_real = T.Tensor(train.pixels(batch.real))
    z = T.Tensor(batch.z)

    with T.no_tape():
        x_gen = G.forward(z, training=True, update_stats=False)
    with T.Tape() as tape:
        p_real = D.forward(x_real, training=True, rng=rngs.dropout)
        p_gen = D.forward(x_gen, training=True, rng=rngs.dropout, update_stats=False)
        d_loss = L.d_total(p_real, batch.labels, p_gen, plan=plan)
    _finite(d_loss, "discriminator", step)
    opt_d.step(T.backward(tape, d_loss.total, D.trainable))

    with T.no_tape():
        D.forward(x_real, training=True, rng=rngs.dropout, update_stats=False)
        f_real = D.features.detach()
    with T.Tape() as tape:
        x_gen = G.forward(z, training=True)
        p_gen_g = D.forward(x_gen, training=True, rng=rngs.dropout, frozen=True, update_stats=False)
        g_loss = L.g_total(p_gen_g, f_real, D.features)
    _finite(g_loss, "generator", step)
    opt_g.step(T.backward(tape, g_loss.total, G.trainable))
    return StepResult(d_loss, g_loss, p_real.data, p_gen.data, batch.labels, batch.composition())


def train_bss_gan(config: ExperimentConfig, splits: Splits, out_dir: Path, on_step: Callable | None = None) -> tuple[TrainLog, dict[str, Network]]:
    rngs = Streams(config.seed)
    plan = plan_balanced_batch(config.k, config.n_l, config.c)
    if plan.n_ul and not splits.train.unlabeled:
        raise DataError(f"c={config.c} asks for unlabeled images but the unlabeled pool is empty")
    D = build_discriminator(config.k, True, config.image_size, rngs.init, "d")
    G = build_generator(config.image_size, NOISE_DIM, rngs.init, "g")
    opt_d, opt_g = Adam(D.trainable, config.lr), Adam(G.trainable, config.lr)
    per_epoch = epoch_schedule(splits.train, plan)
    log.info("bss-gan: %d batches/epoch, m=%d (n_l=%d, n_g=%d, n_ul=%d)", per_epoch, plan.m, plan.n_l, plan.n_g, plan.n_ul)
    tlog = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(per_epoch):
            step += 1
            r = bss_gan_step(D, G, opt_d, opt_g, splits.train, plan, rngs, step)
            tlog.add_step(
                step=step,
                epoch=epoch,
                loss_d=r.d.scalar,
                loss_d_us=r.d.components["unsupervised"],
                loss_d_s=r.d.components["supervised"],
                loss_g=r.g.scalar,
                loss_g_h=r.g.components["heuristic"],
                loss_g_fm=r.g.components["feature_matching"],
                composition=r.composition,
            )
            if on_step:
                on_step(r)
        _end_epoch(tlog, epoch, {"d": D, "g": G}, D, splits.val, out_dir, config)
    _save_final(out_dir, {"d": D, "g": G}, {"d": opt_d, "g": opt_g}, config)
    return tlog, {"d": D, "g": G}


def _end_epoch(tlog: TrainLog, epoch: int, nets: dict, classifier: Network, val: DatasetIndex, out_dir: Path, config, root: Path | None = None) -> None:
    ckpt = out_dir / f"epoch_{epoch}"
    save_networks(ckpt, nets, meta={"epoch": epoch, "pipeline": config.pipeline, "k": config.k, "class_names": list(val.class_names)})
    report = evaluate(classifier, val)
    tlog.epochs.append(_epoch_record(epoch, ckpt, report, root or out_dir))
    log.info("epoch %d: val minority recall %s, majority recall %s", epoch, report.tpr, report.tnr)


def _save_final(out_dir: Path, nets: dict, opts: dict, config) -> None:
    extra = {}
    for name, opt in opts.items():
        extra.update(opt.state_tensors(f"{ADAM_PREFIX}{name}/"))
    save_networks(out_dir / "final", nets, extra, meta={"pipeline": config.pipeline, "k": config.k})


# ---------------------------------------------------------------- supervised


def supervised_loss(kind: str, alpha=None, gamma: float = 2.0):
    if kind == "plain":
        return lambda p, y: L.cross_entropy(p, y)
    if kind == "balanced_ce":
        return lambda p, y: L.balanced_cross_entropy(p, y, alpha)
    if kind == "focal":
        return lambda p, y: L.focal_loss(p, y, alpha, gamma)
    raise ConfigError(f"unknown supervised loss {kind!r}")


def train_supervised(
    config: ExperimentConfig,
    train: DatasetIndex,
    val: DatasetIndex,
    out_dir: Path,
    loss: str = "plain",
    net: Network | None = None,
    rngs: Streams | None = None,
    root: Path | None = None,
    epochs: int | None = None,
) -> tuple[TrainLog, Network]:
    """Shuffled minibatches of size n_l over ``train``; one checkpoint per epoch."""
    rngs = rngs or Streams(config.seed)
    D = net or build_discriminator(config.k, False, config.image_size, rngs.init, "d")
    opt = Adam(D.trainable, config.lr)
    alpha = L.reverse_frequency_weights(train.counts) if loss != "plain" else None
    fn = supervised_loss(loss, alpha, config.focal_gamma)
    tlog = TrainLog()
    step = 0
    for epoch in range(1, (epochs or config.epochs) + 1):
        for ids, y in shuffled_batches(train, config.n_l, rngs.batches):
            step += 1
            with T.Tape() as tape:
                p = D.forward(T.Tensor(train.pixels(ids)), training=True, rng=rngs.dropout)
                lv = fn(p, y)
            v = _finite(lv, "classifier", step)
            opt.step(T.backward(tape, lv.total, D.trainable))
            tlog.add_step(step=step, epoch=epoch, loss_d=v, loss_d_s=v)
        _end_epoch(tlog, epoch, {"d": D}, D, val, out_dir, config, root)
    _save_final(out_dir, {"d": D}, {"d": opt}, config)
    return tlog, D


# ---------------------------------------------------------------- ordinary GAN


def train_ordinary_gan(
    config: ExperimentConfig, train: DatasetIndex, out_dir: Path, classes=None, epochs: int | None = None, rngs: Streams | None = None
) -> Path:
    """Original minimax GAN on the images of ``classes`` (all classes by default).

    D is the classifier stack with two outputs; column 0 is "real". Returns
    the final checkpoint directory, which holds the generator.
    """
    rngs = rngs or Streams(config.seed)
    classes = range(train.k) if classes is None else classes
    pool = [i for k in classes for i in train.labeled[k]]
    if not pool:
        raise DataError(f"no training images for classes {list(classes)}")
    D = build_discriminator(2, False, config.image_size, rngs.gan, "d")
    G = build_generator(config.image_size, NOISE_DIM, rngs.gan, "g")
    opt_d, opt_g = Adam(D.trainable, config.lr), Adam(G.trainable, config.lr)
    half = max(1, config.n_l // 2)
    per_epoch = max(1, math.ceil(len(pool) / half))
    tlog = TrainLog()
    step = 0
    fixed_z = T.Tensor(rngs.gan.standard_normal((64, NOISE_DIM)).astype(np.float32))
    out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, (epochs or config.pretrain_epochs) + 1):
        for _ in range(per_epoch):
            step += 1
            ids = [pool[j] for j in rngs.batches.integers(0, len(pool), size=half)]
            x_real = T.Tensor(train.pixels(ids))
            z = T.Tensor(rngs.batches.standard_normal((half, NOISE_DIM)).astype(np.float32))
            with T.no_tape():
                x_gen = G.forward(z, training=True, update_stats=False)
            with T.Tape() as tape:
                d_real = D.forward(x_real, training=True, rng=rngs.dropout)[:, 0]
                d_gen = D.forward(x_gen, training=True, rng=rngs.dropout, update_stats=False)[:, 0]
                d_loss, _ = L.ordinary_gan_losses(d_real, d_gen)
            _finite(d_loss, "gan discriminator", step)
            opt_d.step(T.backward(tape, d_loss.total, D.trainable))
            with T.Tape() as tape:
                x_gen = G.forward(z, training=True)
                d_gen = D.forward(x_gen, training=True, rng=rngs.dropout, frozen=True, update_stats=False)[:, 0]
                _, g_loss = L.ordinary_gan_losses(d_gen.detach(), d_gen)
            _finite(g_loss, "gan generator", step)
            opt_g.step(T.backward(tape, g_loss.total, G.trainable))
            tlog.add_step(step=step, epoch=epoch, loss_d=d_loss.scalar, loss_g=g_loss.scalar)
        save_networks(out_dir / f"epoch_{epoch}", {"d": D, "g": G}, meta={"epoch": epoch, "classes": list(classes)})
        tlog.epochs.append({"epoch": epoch, "checkpoint": f"epoch_{epoch}"})
    with T.no_tape():
        save_grid(G.forward(fixed_z, training=False).data, out_dir / "samples.png")
    _save_final(out_dir, {"d": D, "g": G}, {"d": opt_d, "g": opt_g}, config)
    tlog.save(out_dir, "gan_log")
    return out_dir / "final"


def train_sdf(config: ExperimentConfig, splits: Splits, out_dir: Path, generators: Mapping[int, Path]) -> tuple[TrainLog, TrainLog, Network]:
    """Stage 1 on synthetic images only, stage 2 fine-tunes every layer on real images."""
    rngs = Streams(config.seed)
    train = splits.train
    synthetic = train.derive([[] for _ in range(train.k)])
    for k in range(train.k):
        if k not in generators or not Path(generators[k]).exists():
            raise DataError(f"no generator checkpoint for class {train.class_names[k]!r}")
        synthetic = oversample_gan(synthetic, generators[k], k, len(train.labeled[k]), out_dir / "synthetic", rngs.gan)
    stage1, D = train_supervised(config, synthetic, splits.val, out_dir / "stage1", rngs=rngs, root=out_dir)
    handoff = {k: v.data.copy() for k, v in D.params.items()}
    stage2, D = train_supervised(config, train, splits.val, out_dir / "stage2", net=D, rngs=rngs, root=out_dir)
    stage2.meta["handoff"] = handoff
    return stage1, stage2, D


# ---------------------------------------------------------------- dispatch


def run_experiment(config: ExperimentConfig, splits: Splits | None = None, on_step: Callable | None = None) -> RunResult:
    """Train a pipeline, select an epoch, evaluate it on the test split, write artifacts."""
    from bssgan.evaluation import emit_report

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = splits or prepare_data(config)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    rngs = Streams(config.seed)
    extra: dict = {"train_counts": list(splits.train.counts), "unlabeled": len(splits.train.unlabeled)}
    p = config.pipeline
    classifier_root = out_dir
    if p == "bss-gan":
        tlog, _ = train_bss_gan(config, splits, out_dir, on_step)
    elif p in ("bsl", "bsl-bce", "bsl-focal", "bus", "bos-da"):
        train = splits.train
        if p == "bus":
            train = undersample(train, rngs.data)
        elif p == "bos-da":
            train = oversample_da(train, config.augmentation, rngs.data)
        extra["train_counts"] = list(train.counts)
        loss = {"bsl-bce": "balanced_ce", "bsl-focal": "focal"}.get(p, "plain")
        tlog, _ = train_supervised(config, train, splits.val, out_dir, loss, rngs=rngs)
    elif p == "bos-gan":
        train = splits.train
        big = majority_class(train.counts)
        for k in range(train.k):
            if k == big:
                continue
            gen = train_ordinary_gan(config, train, out_dir / "gan" / train.class_names[k], [k], rngs=rngs)
            train = oversample_gan(train, gen, k, max(train.counts) - train.counts[k], out_dir / "synthetic", rngs.gan)
        extra["train_counts"] = list(train.counts)
        tlog, _ = train_supervised(config, train, splits.val, out_dir, rngs=rngs)
    elif p == "bsl-sdf":
        gens = {k: train_ordinary_gan(config, splits.train, out_dir / "gan" / splits.train.class_names[k], [k], rngs=rngs) for k in range(splits.train.k)}
        stage1, tlog, _ = train_sdf(config, splits, out_dir, gens)
        stage1.save(out_dir / "stage1")
        classifier_root = out_dir / "stage2"
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ConfigError(f"unknown pipeline {p!r}")
    tlog.save(classifier_root)
    selected = select_best(tlog.epochs, config.select_rule)
    (out_dir / "selection.json").write_text(json.dumps(selected, indent=1, sort_keys=True) + "\n")
    D = load_network(out_dir / selected["checkpoint"], "d")
    report = evaluate(D, splits.test, p, selected["checkpoint"], config.betas)
    emit_report(report, out_dir / "test", betas=range(1, 11))
    return RunResult(config, tlog, selected, report, out_dir, extra)


def prune_checkpoints(out_dir: Path, keep: list[str]) -> None:
    """Delete per-epoch checkpoint directories except ``keep`` (relative paths)."""
    keep_set = {(Path(out_dir) / k).resolve() for k in keep}
    for d in sorted(Path(out_dir).rglob("epoch_*")):
        if d.is_dir() and d.resolve() not in keep_set:
            shutil.rmtree(d)
