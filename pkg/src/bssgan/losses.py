"""Training objectives.

Every loss consumes probability rows (softmax outputs) and returns a
:class:`LossValue` whose ``total`` is a differentiable scalar tensor.
Class labels are 0-based; in a (K+1)-way output the synthetic class is
column ``K``. Every logarithm is ``ln(max(p, 1e-12))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

import bssgan.tensor as T
from bssgan.errors import ConfigError


@dataclass
class LossValue:
    total: T.Tensor
    components: dict[str, float] = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return self.total.item()


def _value(t: T.Tensor) -> float:
    return float(t.data)


def _rows(p: T.Tensor, what: str) -> int:
    if p.ndim != 2 or p.shape[0] == 0:
        raise ConfigError(f"{what}: expected a non-empty (N, C) probability batch, got {p.shape}")
    return p.shape[1] - 1


def _labels(y, num_classes: int, what: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"{what}: labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def d_unsupervised(p_real: T.Tensor, p_gen: T.Tensor) -> LossValue:
    """-E_real ln(1 - p_synth) - E_gen ln(p_synth)."""
    k = _rows(p_real, "d_unsupervised(real)")
    _rows(p_gen, "d_unsupervised(generated)")
    real_term = -T.mean(T.log(1.0 - p_real[:, k]))
    gen_term = -T.mean(T.log(p_gen[:, k]))
    total = real_term + gen_term
    return LossValue(total, {"unsupervised": _value(total)})


def d_supervised(p_labeled: T.Tensor, labels, conditional: bool = True) -> LossValue:
    """Cross-entropy over the K real classes of a (K+1)-way output.

    With ``conditional`` the real-class probability is renormalised by
    ``1 - p_synth`` (the probability conditioned on "not synthetic").
    """
    k = _rows(p_labeled, "d_supervised")
    y = _labels(labels, k, "d_supervised")
    if y.shape[0] != p_labeled.shape[0]:
        raise ConfigError(f"d_supervised: {y.shape[0]} labels for {p_labeled.shape[0]} rows")
    log_py = T.log(T.pick(p_labeled, y))
    if conditional:
        log_py = log_py - T.log(1.0 - p_labeled[:, k])
    total = -T.mean(log_py)
    return LossValue(total, {"supervised": _value(total)})


def d_total(p_real: T.Tensor, labels, p_gen: T.Tensor, n_labeled: int | None = None, plan=None, conditional: bool = True) -> LossValue:
    """Discriminator loss over one balanced batch.

    ``p_real`` scores the whole real sub-batch (labeled rows first, then the
    unlabeled rows); the labeled rows also feed the supervised term.
    """
    n_l = len(labels) if n_labeled is None else n_labeled
    if plan is not None:
        if (p_real.shape[0], n_l, p_gen.shape[0]) != (plan.n_l + plan.n_ul, plan.n_l, plan.n_g):
            raise ConfigError(
                f"batch sizes (real={p_real.shape[0]}, labeled={n_l}, generated={p_gen.shape[0]}) "
                f"do not match plan (n_l={plan.n_l}, n_ul={plan.n_ul}, n_g={plan.n_g})"
            )
    if n_l > p_real.shape[0]:
        raise ConfigError(f"d_total: {n_l} labeled rows but only {p_real.shape[0]} real rows")
    us = d_unsupervised(p_real, p_gen)
    s = d_supervised(p_real[:n_l], labels, conditional)
    return LossValue(us.total + s.total, {**us.components, **s.components})


def g_heuristic(p_gen: T.Tensor) -> LossValue:
    """-E_gen ln(1 - p_synth): the generator wants its samples scored as real."""
    k = _rows(p_gen, "g_heuristic")
    total = -T.mean(T.log(1.0 - p_gen[:, k]))
    return LossValue(total, {"heuristic": _value(total)})


def g_feature_matching(f_real: T.Tensor, f_gen: T.Tensor) -> LossValue:
    """Squared L2 distance between batch-mean features."""
    if f_real.ndim != 2 or f_gen.ndim != 2 or f_real.shape[1] != f_gen.shape[1]:
        raise ConfigError(f"feature widths differ: {f_real.shape} vs {f_gen.shape}")
    diff = T.mean(f_real, axis=0) - T.mean(f_gen, axis=0)
    total = T.sum(diff * diff)
    return LossValue(total, {"feature_matching": _value(total)})


def g_total(p_gen: T.Tensor, f_real: T.Tensor, f_gen: T.Tensor) -> LossValue:
    fm = g_feature_matching(f_real, f_gen)
    h = g_heuristic(p_gen)
    return LossValue(fm.total + h.total, {**h.components, **fm.components})


def ordinary_gan_losses(d_real: T.Tensor, d_gen: T.Tensor) -> tuple[LossValue, LossValue]:
    """Original GAN objective on real-probabilities ``D(x)``.

    The generator uses the non-saturating form ``-E ln D(G(z))``.
    """
    if d_real.size == 0 or d_gen.size == 0:
        raise ConfigError("ordinary_gan_losses: empty batch")
    d_loss = -T.mean(T.log(d_real)) - T.mean(T.log(1.0 - d_gen))
    g_loss = -T.mean(T.log(d_gen))
    return (
        LossValue(d_loss, {"discriminator": _value(d_loss)}),
        LossValue(g_loss, {"generator": _value(g_loss)}),
    )


def balanced_cross_entropy(p: T.Tensor, labels, alpha: Sequence[float]) -> LossValue:
    """-alpha_y ln p_y averaged over the batch."""
    return focal_loss(p, labels, alpha, gamma=0.0, _name="balanced_ce")


def focal_loss(p: T.Tensor, labels, alpha: Sequence[float], gamma: float = 2.0, _name: str = "focal") -> LossValue:
    """-alpha_y (1 - p_y)^gamma ln p_y averaged over the batch."""
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    if p.ndim != 2 or p.shape[0] == 0:
        raise ConfigError(f"expected a non-empty (N, K) probability batch, got {p.shape}")
    k = p.shape[1]
    alpha = np.asarray(alpha, dtype=p.dtype)
    if alpha.shape != (k,) or np.any(alpha <= 0):
        raise ConfigError(f"alpha must be {k} positive weights, got {alpha.tolist()}")
    y = _labels(labels, k, _name)
    p_y = T.pick(p, y)
    per_row = T.log(p_y) * T.Tensor(alpha[y], dtype=p.dtype)
    if gamma:
        per_row = per_row * (1.0 - p_y) ** gamma
    total = -T.mean(per_row)
    return LossValue(total, {_name: _value(total)})


def cross_entropy(p: T.Tensor, labels) -> LossValue:
    return balanced_cross_entropy(p, labels, np.ones(p.shape[1]))


def reverse_frequency_weights(class_counts: Sequence[int]) -> np.ndarray:
    """alpha_i = total / count_i."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ConfigError(f"class counts must be positive, got {list(class_counts)}")
    return counts.sum() / counts
