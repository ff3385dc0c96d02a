"""Per-sample metric evaluation of saliency methods on a labelled split."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as X
from . import models as M
from . import saliency as S

log = logging.getLogger(__name__)

RANDOM_CONTROL = "RandomPatch"
REPORT_HEADER = ("sample_id", "method", "class", "topk_prec", "topk_prec_alt", "ap", "as", "audc")
METRIC_FIELDS = ("topk_prec", "topk_prec_alt", "ap", "as", "audc")


@dataclass
class SampleRecord:
    sample_id: int
    method: str
    cls: int
    topk_prec: float | None = None
    topk_prec_alt: float | None = None
    ap: float | None = None
    as_: float | None = None
    audc: float | None = None

    def row(self) -> tuple:
        return (self.sample_id, self.method, self.cls, self.topk_prec, self.topk_prec_alt,
                self.ap, self.as_, self.audc)

    def get(self, name: str):
        return getattr(self, "as_" if name == "as" else name)


@dataclass
class MetricReport:
    records: list[SampleRecord] = field(default_factory=list)
    curves: dict[str, list[np.ndarray]] = field(default_factory=dict)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    model_digest: str = ""

    def methods(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def values(self, method: str, metric: str) -> np.ndarray:
        return np.array([r.get(metric) for r in self.records
                         if r.method == method and r.get(metric) is not None], np.float64)

    def aggregates(self) -> dict:
        out = {}
        for m in self.methods():
            out[m] = {}
            for f in METRIC_FIELDS:
                v = self.values(m, f)
                out[m][f] = ({"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
                             if v.size else {"mean": None, "std": None, "n": 0})
        return out

    def mean_curve(self, method: str) -> np.ndarray:
        cs = self.curves.get(method, [])
        return np.mean(np.stack(cs), axis=0) if cs else np.zeros(0)


def method_map(model, x, method, c, forward=None, **opts) -> S.SaliencyMap:
    """One saliency map, reusing the prediction pass for SoftCAM evidence."""
    method = S.MethodId(method)
    if method is S.MethodId.SOFTCAM:
        return S.softcam_evidence(model, x, c, forward=forward)
    if method is S.MethodId.SCORECAM:
        return S.scorecam(model, x, c, top_channels=opts.get("scorecam_channels"))
    if method is S.MethodId.INTEGRATED_GRADIENTS:
        return S.integrated_gradients(model, x, c, steps=opts.get("ig_steps", 32))
    return S.explain(model, x, method, c)


def evaluate_sample(model: M.ModelBundle, image: np.ndarray, label: int, mask: np.ndarray,
                    sample_id: int, methods: Sequence, k: int = 10, patch: int = 8, fill: float = 0.0,
                    n_random: int = 10, seed: int = 0, healthy_class: int = 0, **opts):
    """Records and normalized deletion curves for one sample.

    Localization metrics need a disease sample (non-empty mask); deletion needs a
    correct prediction. Returns (records, curves, skip reason or None).
    """
    x = np.asarray(image, np.float32)
    if model.head_kind == "softcam":
        forward = M.softcam_forward(model, x)
        probs = forward[2].data
    else:
        forward = None
        probs = M.predict_proba(model, x[None])[0]
    pred = int(np.argmax(probs))
    correct = pred == label
    localize = label != healthy_class and bool(np.any(mask))
    if not correct and not localize:
        return [], {}, f"misclassified (predicted {pred}, label {label})"
    records, curves = [], {}
    for method in methods:
        method = S.MethodId(method)
        if not S.applicable(method, model):
            continue
        # correct predictions and localization both score the label's map
        smap = method_map(model, x, method, label, forward, **opts)
        rec = SampleRecord(sample_id, str(method), label)
        if localize:
            rec.topk_prec, rec.topk_prec_alt = X.topk_localization_precision(smap, mask, k, patch, with_alt=True)
            rec.ap = X.activation_precision(smap, mask)
            rec.as_ = X.activation_sensitivity(smap, mask)
        if correct:
            curve = X.deletion_curve(model, x, smap, k, patch, fill)
            rec.audc = X.audc(curve)
            curves[str(method)] = curve.normalized
        records.append(rec)
    if n_random > 0:
        rec = SampleRecord(sample_id, RANDOM_CONTROL, label)
        rseed = seed * 1_000_003 + sample_id
        if localize:
            rec.topk_prec = X.random_topk_precision(mask, k, patch, seed=rseed, repeats=n_random)
        if correct:
            n_patches = len(X.PatchGrid(*x.shape[-2:], patch))
            orders = [X.random_order(n_patches, rseed + 7919 * r) for r in range(n_random)]
            ns = [c.normalized for c in X.occlusion_curves(model, x, orders, k, patch, fill)]
            mean_curve = np.mean(ns, axis=0)
            rec.audc = float(np.mean(mean_curve[1:])) if k else 1.0
            curves[RANDOM_CONTROL] = mean_curve
        records.append(rec)
    return records, curves, None


def evaluate(model: M.ModelBundle, split, methods: Sequence, k: int = 10, patch: int = 8,
             fill: float = 0.0, n_random: int = 10, seed: int = 0, threads: int = 1,
             limit: int | None = None, **opts) -> MetricReport:
    """Evaluate ``methods`` on every sample of ``split``; results are in sample order
    regardless of ``threads``."""
    n = len(split) if limit is None else min(limit, len(split))

    def one(i):
        return evaluate_sample(model, split.images[i], int(split.labels[i]), split.masks[i],
                               int(split.ids[i]), methods, k, patch, fill, n_random, seed, **opts)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    report = MetricReport()
    for i, (recs, curves, reason) in enumerate(results):
        if reason is not None:
            sid = int(split.ids[i])
            log.warning("sample %d skipped: %s", sid, reason)
            report.skipped.append((sid, reason))
            continue
        report.records.extend(recs)
        for name, c in curves.items():
            report.curves.setdefault(name, []).append(c)
    return report


def is_nan(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))
