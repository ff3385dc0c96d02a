"""ElasticNet-regularized training, the optimizer recipe and lambda sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import models as M
from .autodiff import Tensor

log = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ("epoch", "lr", "ce", "l1", "l2", "total", "val_acc", "val_auc", "sparsity")
SPARSITY_THRESHOLD = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_init: float = 1e-3
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda1: float = 0.0
    lambda2: float = 0.0
    l2_squared: bool = False
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_init <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_init:
            raise ValueError("need 0 < lr_min <= lr_init")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0,1) and weight_decay be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be non-negative")

    @property
    def variant(self) -> str:
        if self.lambda1 == 0 and self.lambda2 == 0:
            return "dense"
        if self.lambda2 == 0:
            return "sparse"
        if self.lambda1 == 0:
            return "ridge"
        return "elasticnet"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    l1_penalty: float
    l2_penalty: float
    total: float


# ------------------------------------------------------------------- loss


def elasticnet_terms(evidence: Tensor, probs: Tensor, label, lambda1: float, lambda2: float,
                     l2_squared: bool = False) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Differentiable (ce, l1, l2, total). Batched penalties are averaged over the batch."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("regularization weights must be non-negative")
    ce = ad.cross_entropy(probs, label)
    spatial = tuple(range(evidence.ndim - 3, evidence.ndim))
    l1 = ad.reduce_sum(ad.abs_(evidence), axis=spatial)
    sq = ad.reduce_sum(ad.square(evidence), axis=spatial)
    l2 = sq if l2_squared else ad.sqrt(sq)
    if evidence.ndim == 4:
        l1, l2 = ad.reduce_mean(l1), ad.reduce_mean(l2)
    total = ce
    if lambda1:
        total = total + l1 * np.float32(lambda1)
    if lambda2:
        total = total + l2 * np.float32(lambda2)
    return ce, l1, l2, total


def elasticnet_loss(evidence, probs, label, lambda1: float, lambda2: float,
                    l2_squared: bool = False) -> LossBreakdown:
    """Cross-entropy plus lambda1 * sum|A| plus lambda2 * ||A||_2 over all cells and classes."""
    ev = evidence if isinstance(evidence, Tensor) else Tensor(evidence)
    pr = probs if isinstance(probs, Tensor) else Tensor(probs)
    ce, l1, l2, total = elasticnet_terms(ev, pr, label, lambda1, lambda2, l2_squared)
    return LossBreakdown(ce.item(), l1.item(), l2.item(), total.item())


# -------------------------------------------------------------- optimizer


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_init down to lr_min, clipped at lr_min."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps if total_steps else 1.0
    lr = config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + math.cos(math.pi * frac))
    return max(config.lr_min, lr)


def sgd_nesterov_step(weights: np.ndarray, grads: np.ndarray, velocity: np.ndarray, lr: float,
                      momentum: float, weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    if not weights.shape == grads.shape == velocity.shape:
        raise ValueError(f"shape mismatch: weights {weights.shape}, grads {grads.shape}, "
                         f"velocity {velocity.shape}")
    g = grads + weight_decay * weights
    v = momentum * velocity + g
    w = weights - lr * (g + momentum * v)
    return w.astype(np.float32), v.astype(np.float32)


# ---------------------------------------------------------------- metrics


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with tied scores counting one half."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auc(labels: np.ndarray, probs: np.ndarray) -> float:
    if probs.shape[1] == 2:
        return roc_auc(labels == 1, probs[:, 1])
    vals = [roc_auc(labels == c, probs[:, c]) for c in range(probs.shape[1])]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evidence_sparsity(evidence: np.ndarray, threshold: float = SPARSITY_THRESHOLD) -> float:
    return float(np.mean(np.abs(evidence) < threshold))


def evaluate_split(model: M.ModelBundle, images: np.ndarray, labels: np.ndarray,
                   batch_size: int = 128) -> dict:
    probs, ev = [], []
    for s in range(0, len(images), batch_size):
        feats = M.forward_features(model, images[s:s + batch_size])
        if model.head_kind == "softcam":
            a = M.evidence_head(model, feats)
            ev.append(a.data)
            logits = ad.reduce_mean(a, axis=(-2, -1))
        else:
            logits = M.blackbox_head(model, feats)
        probs.append(ad.softmax(logits).data)
    probs = np.concatenate(probs)
    pred = probs.argmax(axis=1)
    return {
        "acc": float(np.mean(pred == labels)),
        "auc": multiclass_auc(labels, probs),
        "sparsity": evidence_sparsity(np.concatenate(ev)) if ev else float("nan"),
        "probs": probs,
    }


# ------------------------------------------------------------------ train


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    l1: float
    l2: float
    total: float
    val_acc: float
    val_auc: float
    sparsity: float

    def row(self) -> list:
        return [self.epoch, *(f"{getattr(self, k):.9g}" for k in EPOCH_LOG_HEADER[1:])]


@dataclass
class TrainResult:
    model: M.ModelBundle
    log: list[EpochRecord]
    best_epoch: int
    config: TrainConfig

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_LOG_HEADER)
        for rec in self.log:
            w.writerow(rec.row())
        return buf.getvalue()


def _flip_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random((len(images), 2)) < 0.5
    out = images.copy()
    for i, (h, v) in enumerate(flips):
        if h:
            out[i] = out[i][..., ::-1]
        if v:
            out[i] = out[i][..., ::-1, :]
    return out


def train_step(model: M.ModelBundle, images: np.ndarray, labels: np.ndarray,
               config: TrainConfig) -> tuple[dict[str, np.ndarray], tuple[float, float, float, float]]:
    """Gradients of the regularized objective for one batch."""
    with ad.Tape() as tape:
        params = {k: tape.watch(Tensor(v, copy=False)) for k, v in model.named_parameters().items()}
        if model.head_kind == "softcam":
            ev, _, probs = M.softcam_forward(model, images, params)
            ce, l1, l2, total = elasticnet_terms(ev, probs, labels, config.lambda1, config.lambda2,
                                                 config.l2_squared)
        else:
            _, probs = M.blackbox_forward(model, images, params)
            ce = total = ad.cross_entropy(probs, labels)
            l1 = l2 = Tensor(0.0)
    table = M.counted_backward(tape, total)
    grads = {k: table.get(t, np.zeros_like(t.data)) for k, t in params.items()}
    return grads, (ce.item(), l1.item(), l2.item(), total.item())


def train(model: M.ModelBundle, dataset, config: TrainConfig) -> TrainResult:
    """Train ``model`` on ``dataset.train``; keep the best-validation-accuracy weights.

    Ties on validation accuracy are broken by validation AUC; earlier epochs win
    exact ties.
    """
    tr, va = dataset.train, dataset.val
    if len(tr) == 0:
        raise ValueError("training split is empty")
    if np.any(tr.labels >= model.n_classes) or np.any(tr.labels < 0):
        raise ValueError("training labels out of range for the model's class count")
    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.named_parameters().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    current = model.with_parameters(params)
    history: list[EpochRecord] = []
    best = (-1.0, -1.0)
    best_params, best_epoch = params, -1
    n = len(tr)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config)
        order = rng.permutation(n)
        sums = np.zeros(4)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = tr.images[idx]
            if config.augment:
                batch = _flip_batch(batch, rng)
            grads, terms = train_step(current, batch, tr.labels[idx], config)
            if not all(math.isfinite(t) for t in terms):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            sums += np.array(terms) * len(idx)
            for k in params:
                params[k], velocity[k] = sgd_nesterov_step(params[k], grads[k], velocity[k], lr,
                                                           config.momentum, config.weight_decay)
            current = model.with_parameters(params)
        ce, l1, l2, total = sums / n
        if len(va):
            ev = evaluate_split(current, va.images, va.labels)
            val_acc, val_auc, sparsity = ev["acc"], ev["auc"], ev["sparsity"]
        else:
            val_acc = val_auc = sparsity = float("nan")
        rec = EpochRecord(epoch, lr, ce, l1, l2, total, val_acc, val_auc, sparsity)
        history.append(rec)
        log.info("epoch %d lr %.2e loss %.4f val_acc %.4f val_auc %.4f", epoch, lr, total,
                 val_acc, val_auc)
        key = (np.nan_to_num(val_acc, nan=-1.0), np.nan_to_num(val_auc, nan=-1.0))
        if key > best or best_epoch < 0:
            best, best_params, best_epoch = key, {k: v.copy() for k, v in params.items()}, epoch
    trained = model.with_parameters(best_params)
    trained.metadata.update({"lambda1": config.lambda1, "lambda2": config.lambda2,
                             "epoch": best_epoch, "train_seed": config.seed,
                             "variant": config.variant if model.head_kind == "softcam" else "blackbox"})
    return TrainResult(trained, history, best_epoch, config)


# ------------------------------------------------------------------ sweep


@dataclass
class SweepRow:
    lambda1: float
    lambda2: float
    val_acc: float
    val_auc: float
    sparsity: float
    selected: bool = False


SWEEP_HEADER = ("rank", "lambda1", "lambda2", "val_acc", "val_auc", "sparsity", "selected")


def select_lambda(rows: Sequence[SweepRow], tolerance: float = 0.01) -> int:
    """Index of the largest regularization whose accuracy is within ``tolerance``
    of the unregularized run (or of the best run when no (0, 0) point exists)."""
    if not rows:
        raise ValueError("empty sweep")
    ref = [r.val_acc for r in rows if r.lambda1 == 0 and r.lambda2 == 0]
    ref_acc = ref[0] if ref else max(r.val_acc for r in rows)
    ok = [i for i, r in enumerate(rows) if r.val_acc >= ref_acc - tolerance - 1e-12]
    return max(ok, key=lambda i: (rows[i].lambda1 + rows[i].lambda2, rows[i].lambda1, -i))


def sweep_lambda(base_config: TrainConfig, grid: Iterable[tuple[float, float]], dataset,
                 model_factory, keep_models: bool = False):
    """One training run per (lambda1, lambda2) point.

    ``model_factory()`` must return a fresh untrained model. Grid point ``i`` is
    trained with seed ``base_seed ^ i``. Returns (rows, selected index, results).
    """
    grid = list(grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    rows, results = [], []
    for i, (l1, l2) in enumerate(grid):
        cfg = replace(base_config, lambda1=float(l1), lambda2=float(l2), seed=base_config.seed ^ i)
        res = train(model_factory(), dataset, cfg)
        best = res.log[res.best_epoch]
        rows.append(SweepRow(cfg.lambda1, cfg.lambda2, best.val_acc, best.val_auc, best.sparsity))
        results.append(res if keep_models else None)
    sel = select_lambda(rows)
    rows[sel].selected = True
    return rows, sel, results


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    """Rows ranked by validation accuracy, then AUC, then grid order."""
    order = sorted(range(len(rows)), key=lambda i: (-rows[i].val_acc, -np.nan_to_num(rows[i].val_auc), i))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for rank, i in enumerate(order, 1):
        r = rows[i]
        w.writerow([rank, f"{r.lambda1:.9g}", f"{r.lambda2:.9g}", f"{r.val_acc:.9g}",
                    f"{r.val_auc:.9g}", f"{r.sparsity:.9g}", int(r.selected)])
    return buf.getvalue()
