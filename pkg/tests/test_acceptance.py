"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The desk-scale training criteria (6, 7, 9) are marked slow; together
they take about 25 minutes on one core.
"""

import math

import numpy as np
import pytest

import bssgan.tensor as T
from bssgan import losses as L
from bssgan.data import SplitSpec, make_procedural, make_split, materialize
from bssgan.dataset import DatasetIndex, ImageRecord
from bssgan.evaluation import (
    accuracy,
    build_report,
    confusion,
    counts_from_rates,
    f_beta,
    per_class_recall,
    precision_recall,
    tpr_tnr,
)
from bssgan.sampling import draw_balanced_batch, epoch_schedule, plan_balanced_batch
from bssgan.tensor.gradcheck import gradcheck
from bssgan.trainer import ExperimentConfig, prepare_data, prune_checkpoints, run_experiment

from grad_cases import GRAD_CASES, LOSS_GRADS

SEEDS = (0, 1, 2)
DESK_COUNTS = (1440, 90)  # 2:1 split gives 960:60 train, 480:30 test
DESK_EPOCHS = 40


# ---------------------------------------------------------------- 1. tables


# (name, TPR, TNR, F2, F5, accuracy) in percent; positive support, negative support
CRACK_ROWS = [
    ("BSL", 31.0, 99.4, 35.2, 31.7, 95.4),
    ("BUS", 46.0, 97.0, 46.6, 46.1, 94.0),
    ("BOS-DA", 45.7, 99.4, 50.1, 46.5, 96.2),
    ("BOS-GAN", 29.3, 99.5, 33.6, 30.1, 95.4),
    ("BSL-SDF", 49.0, 92.8, 43.4, 47.8, 90.2),
    ("BSS-GAN", 89.3, 92.2, 72.8, 85.6, 92.1),
]
SPALL_ROWS = [
    ("BSL", 62.0, 99.8, 66.1, 62.8, 98.6),
    ("BUS", 84.7, 97.1, 73.2, 82.2, 96.7),
    ("BOS-DA", 83.3, 99.9, 85.5, 83.7, 99.4),
    ("BOS-GAN", 64.0, 99.9, 68.6, 64.8, 99.0),
    ("BSL-SDF", 84.0, 92.8, 62.3, 78.7, 93.8),
    ("BSS-GAN", 98.0, 95.8, 77.6, 93.3, 95.9),
]
# (name, accuracy, UD, CR, SP recalls)
TERNARY_ROWS = [
    ("BSL", 93.6, 99.5, 28.7, 32.0),
    ("BUS", 91.7, 95.4, 42.6, 69.3),
    ("BOS-DA", 95.2, 99.5, 29.0, 90.0),
    ("BOS-GAN", 88.3, 92.7, 31.3, 60.7),
    ("BSL-SDF", 89.6, 93.5, 35.0, 73.3),
    ("BSS-GAN", 89.7, 90.9, 70.0, 94.0),
]
TOL = 0.2


def binary_cm(tp, n_pos, tn, n_neg):
    return np.array([[tn, n_neg - tn], [n_pos - tp, tp]])


def row_is_attainable(tpr, tnr, f2, f5, acc, n_pos, n_neg):
    """Brute force over every integer CM whose rates round to the row's values.

    Uses the textbook formulas directly, independent of the package.
    """
    for tp in range(n_pos + 1):
        if abs(100 * tp / n_pos - tpr) > 0.05 + 1e-9:
            continue
        for tn in range(n_neg + 1):
            if abs(100 * tn / n_neg - tnr) > 0.05 + 1e-9:
                continue
            fp = n_neg - tn
            p, r = tp / (tp + fp), tp / n_pos
            scores = [(1 + b * b) * p * r / (b * b * p + r) for b in (2, 5)]
            a = (tp + tn) / (n_pos + n_neg)
            if all(abs(100 * s - want) <= TOL for s, want in zip(scores + [a], (f2, f5, acc))):
                return True
    return False


def test_criterion_1_table_reconstruction(verdict):
    matched, inconsistent, wrong = 0, [], []
    for table, rows, n_pos in (("crack", CRACK_ROWS, 300), ("spalling", SPALL_ROWS, 150)):
        for name, tpr, tnr, f2, f5, acc in rows:
            tp, tn = counts_from_rates([tpr / 100, tnr / 100], [n_pos, 4800])
            rep = build_report(binary_cm(tp, n_pos, tn, 4800), betas=(2, 5))
            got = (100 * rep.f["2"], 100 * rep.f["5"], 100 * rep.accuracy)
            if all(abs(g - w) <= TOL for g, w in zip(got, (f2, f5, acc))):
                matched += 1
            elif not row_is_attainable(tpr, tnr, f2, f5, acc, n_pos, 4800):
                inconsistent.append(f"{table}/{name} (no integer CM with these rates gives F2={f2}, F5={f5}, acc={acc})")
            else:
                wrong.append(f"{table}/{name} got {tuple(round(g, 2) for g in got)}")
    support = (4800, 300, 150)
    for name, acc, *recalls in TERNARY_ROWS:
        hits = counts_from_rates([r / 100 for r in recalls], support)
        cm = np.diag(hits)
        for i, n in enumerate(support):
            cm[i, (i + 1) % 3] = n - hits[i]
        got_recalls = [100 * r for r in per_class_recall(cm)]
        got_acc = 100 * accuracy(cm)
        if all(abs(g - w) <= TOL for g, w in zip(got_recalls + [got_acc], recalls + [acc])):
            matched += 1
        else:
            wrong.append(f"ternary/{name} recalls {[round(r, 2) for r in got_recalls]} acc {got_acc:.2f}")
    detail = f"{matched} rows reproduced within +-{TOL}"
    if inconsistent:
        detail += "; source rows with no consistent CM: " + ", ".join(inconsistent)
    if wrong:
        detail += "; mismatched: " + ", ".join(wrong)
    verdict(1, not wrong, detail)


# ---------------------------------------------------------------- 2. all-majority predictor


def test_criterion_2_all_majority_predictor(verdict):
    labels = np.r_[np.zeros(4800, int), np.ones(300, int)]
    cm = confusion(np.zeros_like(labels), labels, 2)
    tpr, tnr = tpr_tnr(cm)
    acc = 100 * accuracy(cm)
    verdict(2, abs(acc - 94.1) <= 0.05 and tpr == 0.0, f"accuracy {acc:.3f}%, TPR {tpr}, TNR {tnr}")


# ---------------------------------------------------------------- 3. batch composition


def flat_index(counts, unlabeled):
    store, labeled = {}, []
    px = np.zeros((1, 1, 3), np.float32)
    for k, n in enumerate(counts):
        ids = [f"{k}_{j}" for j in range(n)]
        store.update({i: ImageRecord(i, k, "procedural", pixels=px) for i in ids})
        labeled.append(ids)
    pool = [f"u_{j}" for j in range(unlabeled)]
    store.update({i: ImageRecord(i, None, "procedural", pixels=px) for i in pool})
    return DatasetIndex(labeled, pool, tuple(f"c{k}" for k in range(len(counts))), 1, store)


def test_criterion_3_batch_composition(verdict):
    cases = [
        ((960, 60), 1, 0, 90, (30, 30, 0, 30)),
        ((960, 60), 1, 1, 120, (30, 30, 30, 30)),
        ((960, 60, 30), 1, 0, 80, (20, 20, 20, 0, 20)),
    ]
    bad = []
    rng = np.random.default_rng(0)
    for counts, ul, c, m, want in cases:
        index = flat_index(counts, 4000 * ul)
        plan = plan_balanced_batch(len(counts), 60, c)
        for _ in range(1000):
            b = draw_balanced_batch(index, plan, rng)
            size = len(b.labeled) + len(b.unlabeled) + b.z.shape[0]
            labels_ok = all(index.store[i].label == y for i, y in zip(b.labeled, b.labels))
            if b.composition() != want or size != m or plan.m != m or not labels_ok:
                bad.append((counts, c, b.composition(), size))
                break
    verdict(3, not bad, "3000 batches: m in {90, 120, 80} with exact per-class/unlabeled/generated counts" if not bad else f"violations {bad}")


# ---------------------------------------------------------------- 4. gradients


def test_criterion_4_gradient_suite(verdict):
    worst, failures = {}, []
    for name, (fn, make) in {**GRAD_CASES, **LOSS_GRADS}.items():
        errs = []
        for seed in range(20):
            errs.append(max(gradcheck(fn, make(np.random.default_rng(1000 + seed))).values()))
        worst[name] = max(errs)
        if worst[name] >= 1e-3:
            failures.append(name)
    top = max(worst, key=worst.get)
    verdict(4, not failures, f"{len(worst)} ops/losses x 20 instances, worst {top} {worst[top]:.2e}" + (f"; failing {failures}" if failures else ""))


# ---------------------------------------------------------------- 5. loss identities


def probs(g, n, c):
    z = g.normal(size=(n, c))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return T.Tensor(e / e.sum(axis=1, keepdims=True), dtype=np.float64)


def test_criterion_5_loss_identities(verdict):
    g = np.random.default_rng(5)
    gaps = {"d": 0.0, "g": 0.0, "focal": 0.0, "focal_numpy": 0.0}
    for _ in range(50):
        k, n = int(g.integers(2, 4)), int(g.integers(1, 8))
        p_real, p_gen = probs(g, 2 * n, k + 1), probs(g, n, k + 1)
        y = g.integers(0, k, n)
        d = L.d_total(p_real, y, p_gen)
        gaps["d"] = max(gaps["d"], abs(d.scalar - L.d_unsupervised(p_real, p_gen).scalar - L.d_supervised(p_real[:n], y).scalar))
        f_real = T.Tensor(g.normal(size=(2 * n, 6)), dtype=np.float64)
        f_gen = T.Tensor(g.normal(size=(n, 6)), dtype=np.float64)
        gt = L.g_total(p_gen, f_real, f_gen)
        gaps["g"] = max(gaps["g"], abs(gt.scalar - L.g_heuristic(p_gen).scalar - L.g_feature_matching(f_real, f_gen).scalar))
        q, alpha = probs(g, n, k), g.uniform(0.5, 20, k)
        focal0 = L.focal_loss(q, y, alpha, 0.0).scalar
        gaps["focal"] = max(gaps["focal"], abs(focal0 - L.balanced_cross_entropy(q, y, alpha).scalar))
        by_hand = float(np.mean(-alpha[y] * np.log(q.data[np.arange(n), y])))
        gaps["focal_numpy"] = max(gaps["focal_numpy"], abs(focal0 - by_hand))
    half = T.Tensor(np.full(7, 0.5), dtype=np.float64)
    d_loss, g_loss = L.ordinary_gan_losses(half, half)
    gaps["gan_d"] = abs(d_loss.scalar - 2 * math.log(2))
    gaps["gan_g"] = abs(g_loss.scalar - math.log(2))
    worst = max(gaps.values())
    verdict(5, worst < 1e-6, "max gap " + ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()))


# ---------------------------------------------------------------- 8. F-beta sweep


def test_criterion_8_f_beta_sweep(verdict):
    g = np.random.default_rng(8)
    done, bad = 0, []
    while done < 100:
        cm = g.integers(1, 400, size=(2, 2))
        p, r = precision_recall(cm)
        if abs(p - r) < 1e-9:
            continue
        done += 1
        gaps = [abs(f_beta(p, r, b) - r) for b in np.linspace(0.5, 50, 200)]
        monotone = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        if not monotone or abs(f_beta(p, r, 1000) - r) >= 1e-3:
            bad.append(cm.tolist())
    verdict(8, not bad, f"{done} random CMs, F_beta moves monotonically toward recall, |F_1000 - R| < 1e-3" if not bad else f"failing {bad[:3]}")


# ---------------------------------------------------------------- desk-scale training


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    """Procedural 16:1 datasets written to disk, one per seed."""
    roots = {}
    for seed in SEEDS:
        root = tmp_path_factory.mktemp(f"desk{seed}")
        train, test = make_split(make_procedural(DESK_COUNTS, 32, seed=seed), SplitSpec(2, 1, seed=seed))
        assert train.counts == (960, 60) and test.counts == (480, 30)
        materialize(train, root, "train")
        materialize(test, root, "test")
        roots[seed] = root
    return roots


def desk_config(root, out, seed, **kw):
    base = dict(k=2, image_size=32, n_l=60, lr=2e-5, epochs=DESK_EPOCHS, seed=seed, dataset_root=str(root), out_dir=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


def run_and_prune(config):
    result = run_experiment(config)
    prune_checkpoints(result.out_dir, [result.selected["checkpoint"]])
    return result


@pytest.mark.slow
def test_criterion_6_desk_scale_end_to_end(desk_data, tmp_path, verdict):
    rows, wins = [], 0
    for seed in SEEDS:
        bsl = run_and_prune(desk_config(desk_data[seed], tmp_path / f"bsl{seed}", seed, pipeline="bsl")).report
        bss = run_and_prune(desk_config(desk_data[seed], tmp_path / f"bss{seed}", seed, pipeline="bss-gan")).report
        ok = bss.tpr >= bsl.tpr + 0.15 and bsl.tnr > 0.85 and bss.tnr > 0.85
        wins += ok
        rows.append(f"seed {seed}: BSL TPR {bsl.tpr:.3f} TNR {bsl.tnr:.3f} | BSS-GAN TPR {bss.tpr:.3f} TNR {bss.tnr:.3f} {'ok' if ok else 'miss'}")
    verdict(6, wins >= 2, f"{wins}/3 seeds hold; " + "; ".join(rows))


@pytest.mark.slow
def test_criterion_7_unlabeled_utilization(desk_data, tmp_path, verdict):
    rows, wins = [], 0
    for seed in SEEDS:
        full = desk_config(desk_data[seed], tmp_path / "probe", seed, pipeline="bss-gan")
        steps = DESK_EPOCHS * epoch_schedule(prepare_data(full).train, plan_balanced_batch(2, 60, 0))
        results = {}
        for arm, c, frac in (("0%", 0, 0.0), ("100%", 1, 1.0)):
            cfg = desk_config(desk_data[seed], tmp_path / f"hyb{seed}_{c}", seed, pipeline="bss-gan", labeled_fraction=0.2, c=c, unlabeled_fraction=frac)
            per_epoch = epoch_schedule(prepare_data(cfg).train, plan_balanced_batch(2, 60, c))
            cfg = desk_config(desk_data[seed], cfg.out_dir, seed, pipeline="bss-gan", labeled_fraction=0.2, c=c, unlabeled_fraction=frac, epochs=math.ceil(steps / per_epoch))
            results[arm] = run_and_prune(cfg).report
        ok = results["100%"].tpr >= results["0%"].tpr
        wins += ok
        rows.append(f"seed {seed} ({steps} steps): 0% TPR {results['0%'].tpr:.3f} | 100% TPR {results['100%'].tpr:.3f} {'ok' if ok else 'miss'}")
    verdict(7, wins >= 2, f"{wins}/3 seeds hold; " + "; ".join(rows))


@pytest.mark.slow
def test_criterion_9_determinism(desk_data, tmp_path, verdict):
    out = []
    for run in ("a", "b"):
        cfg = desk_config(desk_data[0], tmp_path / run, 0, pipeline="bss-gan", epochs=5)
        out.append(run_and_prune(cfg).out_dir / "test" / "metrics.json")
    same = out[0].read_bytes() == out[1].read_bytes()
    verdict(9, same, "two 5-epoch BSS-GAN runs with seed 0 give byte-identical metrics.json" if same else "metrics.json differs between identical runs")
