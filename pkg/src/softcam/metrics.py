"""Localization, mass-based and deletion metrics for saliency maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import models as M
from .saliency import SaliencyMap

log = logging.getLogger(__name__)


class EmptyMaskError(ValueError):
    pass


class Misclassified(ValueError):
    pass


def _input_values(smap, size: tuple[int, int] | None = None) -> np.ndarray:
    if isinstance(smap, SaliencyMap):
        return smap.values if size is None else smap.at_input(size)
    arr = np.asarray(smap, dtype=np.float32)
    if size is not None and arr.shape != tuple(size):
        arr = ad.upsample_array(arr, size)
    return arr


def _mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("annotation mask must be binary")
    return m.astype(bool)


# ------------------------------------------------------------------ patches


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch < 1 or self.height < 1 or self.width < 1:
            raise ValueError("patch size and extents must be positive")

    @property
    def rows(self) -> int:
        return -(-self.height // self.patch)

    @property
    def cols(self) -> int:
        return -(-self.width // self.patch)

    def __len__(self) -> int:
        return self.rows * self.cols

    def rects(self) -> list[tuple[int, int, int, int]]:
        """(y0, y1, x0, x1) in row-major order; the last row/column may be ragged."""
        p = self.patch
        return [(r * p, min((r + 1) * p, self.height), c * p, min((c + 1) * p, self.width))
                for r in range(self.rows) for c in range(self.cols)]

    def labels(self) -> np.ndarray:
        """Patch index of every pixel."""
        r = np.arange(self.height) // self.patch
        c = np.arange(self.width) // self.patch
        return r[:, None] * self.cols + c[None, :]

    def means(self, values: np.ndarray) -> np.ndarray:
        lab = self.labels().ravel()
        sums = np.bincount(lab, weights=values.astype(np.float64).ravel(), minlength=len(self))
        counts = np.bincount(lab, minlength=len(self))
        return sums / counts

    def rank(self, values: np.ndarray) -> np.ndarray:
        """Patch indices by descending mean; equal means keep row-major order."""
        return np.argsort(-self.means(values), kind="stable")

    def overlaps(self, mask: np.ndarray) -> np.ndarray:
        lab = self.labels().ravel()
        return np.bincount(lab, weights=mask.ravel().astype(np.float64), minlength=len(self)) > 0


# --------------------------------------------------------------- precision


def topk_localization_precision(smap, mask, k: int = 10, patch: int = 8,
                                with_alt: bool = False):
    """Share of the k highest-mean patches that are positively activated and touch the mask.

    The denominator is ``k``; ``with_alt`` also returns the alternative reading
    that divides by the number of positively activated top-k patches.
    """
    m = _mask(mask)
    if not m.any():
        raise EmptyMaskError("top-k localization precision is undefined for an empty mask")
    values = _input_values(smap, m.shape)
    grid = PatchGrid(*m.shape, patch)
    if not 1 <= k <= len(grid):
        raise ValueError(f"k={k} must lie in [1, {len(grid)}]")
    means = grid.means(values)
    top = grid.rank(values)[:k]
    positive = means[top] > 0
    hits = int(np.sum(positive & grid.overlaps(m)[top]))
    prec = hits / k
    if not with_alt:
        return prec
    n_pos = int(positive.sum())
    return prec, (hits / n_pos if n_pos else 0.0)


def random_topk_precision(mask, k: int = 10, patch: int = 8, seed: int = 0, repeats: int = 1) -> float:
    """Top-k precision of uniformly random patch rankings (every patch counted as positive)."""
    m = _mask(mask)
    if not m.any():
        raise EmptyMaskError("top-k localization precision is undefined for an empty mask")
    grid = PatchGrid(*m.shape, patch)
    over = grid.overlaps(m)
    rng = np.random.default_rng(seed)
    vals = [over[rng.permutation(len(grid))[:k]].sum() / k for _ in range(repeats)]
    return float(np.mean(vals))


def positive_normalized(values: np.ndarray) -> np.ndarray:
    """Negative values zeroed, then scaled so the maximum is 1 (all-zero stays zero)."""
    s = np.maximum(np.asarray(values, np.float64), 0.0)
    peak = s.max(initial=0.0)
    return s / peak if peak > 0 else s


def activation_precision(smap, mask, with_flag: bool = False):
    """Fraction of the positive saliency mass inside the mask; 0 (flagged) when there is none."""
    m = _mask(mask)
    s = positive_normalized(_input_values(smap, m.shape))
    total = s.sum()
    degenerate = not total > 0
    value = 0.0 if degenerate else float((s * m).sum() / total)
    return (value, degenerate) if with_flag else value


def activation_sensitivity(smap, mask) -> float:
    m = _mask(mask)
    if not m.any():
        raise EmptyMaskError("activation sensitivity is undefined for an empty mask")
    s = positive_normalized(_input_values(smap, m.shape))
    return float((s * m).sum() / m.sum())


@dataclass(frozen=True)
class Consistency:
    pos_mean: float
    pos_std: float
    neg_mean: float
    neg_std: float
    n_disease: int
    n_healthy: int

    def __str__(self) -> str:
        return (f"r+ = {self.pos_mean:.2f} ± {self.pos_std:.2f} (n={self.n_disease}), "
                f"r- = {self.neg_mean:.2f} ± {self.neg_std:.2f} (n={self.n_healthy})")


def activation_consistency(evidence: Sequence[np.ndarray], labels: Sequence[int],
                           disease_class: int = 1, healthy_class: int = 0) -> Consistency:
    """Share of positive cells on disease samples and negative cells on healthy samples.

    ``evidence`` holds one signed [C,N,M] volume (or a single [N,M] disease map)
    per sample; the disease-class channel is scored. Zero cells only count in
    the denominator.
    """
    if len(evidence) == 0:
        raise ValueError("activation consistency needs at least one sample")
    pos, neg = [], []
    for ev, y in zip(evidence, labels, strict=True):
        a = np.asarray(ev)
        a = a[disease_class] if a.ndim == 3 else a
        if y == healthy_class:
            neg.append(np.mean(a < 0))
        else:
            pos.append(np.mean(a > 0))

    def ms(v):
        return (float(np.mean(v)), float(np.std(v))) if v else (float("nan"), float("nan"))

    return Consistency(*ms(pos), *ms(neg), len(pos), len(neg))


# ---------------------------------------------------------------- deletion


@dataclass
class DeletionCurve:
    c0: float
    confidences: list[float]  # c_0 .. c_k
    predicted_class: int = -1
    order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("initial confidence must be positive")
        if len(self.confidences) < 1:
            raise ValueError("curve needs at least the t=0 point")

    @property
    def k(self) -> int:
        return len(self.confidences) - 1

    @property
    def normalized(self) -> np.ndarray:
        return np.asarray(self.confidences, np.float64) / self.c0

    def points(self) -> list[tuple[int, float]]:
        return list(enumerate(self.confidences))


def audc(curve: DeletionCurve) -> float:
    """Mean normalized confidence over the k removal steps (lower is more faithful)."""
    if curve.k == 0:
        return 1.0
    return float(np.mean(curve.normalized[1:]))


def occlusion_batch(image: np.ndarray, orders: Sequence[Sequence[int]], k: int, patch: int = 8,
                    fill: float = 0.0) -> np.ndarray:
    """Images [len(orders)*(k+1), ...] with the first t patches of each order occluded."""
    x = np.asarray(image, np.float32)
    grid = PatchGrid(*x.shape[-2:], patch)
    if not 0 <= k <= len(grid):
        raise ValueError(f"k={k} must lie in [0, {len(grid)}]")
    rects = grid.rects()
    batch = np.empty((len(orders), k + 1, *x.shape), np.float32)
    for o, order in enumerate(orders):
        cur = x.copy()
        batch[o, 0] = cur
        for t in range(1, k + 1):
            y0, y1, x0, x1 = rects[order[t - 1]]
            cur[..., y0:y1, x0:x1] = fill
            batch[o, t] = cur
    return batch.reshape(-1, *x.shape)


def occlusion_curves(model: M.ModelBundle, image: np.ndarray, orders: Sequence[Sequence[int]], k: int,
                     patch: int = 8, fill: float = 0.0, label: int | None = None) -> list[DeletionCurve]:
    """Predicted-class probability while the patches of each order are occluded cumulatively."""
    batch = occlusion_batch(image, orders, k, patch, fill)
    probs = M.predict_proba(model, batch).reshape(len(orders), k + 1, -1)
    pred = int(np.argmax(probs[0, 0]))
    if label is not None and pred != label:
        raise Misclassified(f"predicted {pred}, label {label}")
    curves = []
    for o, order in enumerate(orders):
        conf = probs[o, :, pred].astype(np.float64)
        curves.append(DeletionCurve(float(conf[0]), conf.tolist(), pred, [int(i) for i in order[:k]]))
    return curves


def occlusion_curve(model: M.ModelBundle, image: np.ndarray, order: Sequence[int], k: int,
                    patch: int = 8, fill: float = 0.0, label: int | None = None) -> DeletionCurve:
    return occlusion_curves(model, image, [order], k, patch, fill, label)[0]


def deletion_curve(model: M.ModelBundle, image, smap, k: int = 10, patch: int = 8,
                   fill: float = 0.0, label: int | None = None) -> DeletionCurve:
    """Occlude the top-ranked patches of ``smap`` one at a time.

    With ``label`` given, a misclassified image raises :class:`Misclassified`.
    """
    x = np.asarray(image, np.float32)
    values = _input_values(smap, x.shape[-2:])
    order = PatchGrid(*x.shape[-2:], patch).rank(values)
    return occlusion_curve(model, x, order, k, patch, fill, label)


def random_order(n_patches: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n_patches)


def random_patch_baseline(model: M.ModelBundle, image, k: int = 10, patch: int = 8, seed: int = 0,
                          fill: float = 0.0, label: int | None = None) -> DeletionCurve:
    """Deletion curve for a uniformly random patch order drawn from ``seed``."""
    x = np.asarray(image, np.float32)
    order = random_order(len(PatchGrid(*x.shape[-2:], patch)), seed)
    return occlusion_curve(model, x, order, k, patch, fill, label)
