"""Post-hoc saliency baselines and built-in SoftCAM evidence maps."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models as M
from .autodiff import Tape, Tensor


class MethodId(str, enum.Enum):
    CAM = "CAM"
    GRADCAM = "GradCAM"
    SCORECAM = "ScoreCAM"
    LAYERCAM = "LayerCAM"
    GUIDED_BP = "GuidedBP"
    INTEGRATED_GRADIENTS = "IntegratedGradients"
    SOFTCAM = "SoftCAM-evidence"

    def __str__(self) -> str:
        return self.value


FEATURE_RES = "feature"
INPUT_RES = "input"

NON_NEGATIVE = {MethodId.GRADCAM, MethodId.SCORECAM, MethodId.LAYERCAM}


class NotApplicable(TypeError):
    """The method cannot run on this model's head."""


@dataclass(frozen=True)
class SaliencyMap:
    class_index: int
    values: np.ndarray
    resolution: str
    method: MethodId

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"saliency values must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("saliency map has non-finite values")
        if self.resolution not in (FEATURE_RES, INPUT_RES):
            raise ValueError(f"unknown resolution tag {self.resolution!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "method", MethodId(self.method))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def at_input(self, size: tuple[int, int]) -> np.ndarray:
        """Values at input resolution (bilinear upsampling of feature maps)."""
        if self.values.shape == tuple(size):
            return self.values
        return ad.upsample_array(self.values, size)


def _single(model: M.ModelBundle, image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if x.shape != model.config.input_shape:
        raise ad.ShapeError(f"expected a single image of shape {model.config.input_shape}, got {x.shape}")
    return x


def _check_class(model: M.ModelBundle, c: int) -> int:
    if not 0 <= c < model.n_classes:
        raise ValueError(f"class {c} out of range for {model.n_classes} classes")
    return int(c)


def applicable(method, model: M.ModelBundle) -> bool:
    method = MethodId(method)
    if method is MethodId.CAM:
        return isinstance(model.head, M.BlackBoxHead) and len(model.head.layers) == 1
    if method is MethodId.SOFTCAM:
        return isinstance(model.head, M.SoftCamHead)
    return True


def cam(model: M.ModelBundle, image, c: int, include_bias: bool = False) -> SaliencyMap:
    """Class-weighted sum of the last feature maps using the FC row of class ``c``."""
    if not applicable(MethodId.CAM, model):
        raise NotApplicable("CAM requires single-FC head")
    c = _check_class(model, c)
    feats = M.forward_features(model, _single(model, image)).data
    w, b = model.head.layers[0]
    s = np.tensordot(w[c], feats, axes=1)
    if include_bias:
        s = s + b[c]
    return SaliencyMap(c, s, FEATURE_RES, MethodId.CAM)


def _feature_grad(model, image, c):
    feats = M.forward_features(model, _single(model, image))
    with Tape() as tape:
        tape.watch(feats)
        logit = M.head_logits(model, feats)[c]
    return feats.data, M.counted_backward(tape, logit)[feats]


def gradcam(model: M.ModelBundle, image, c: int) -> SaliencyMap:
    c = _check_class(model, c)
    feats, grad = _feature_grad(model, image, c)
    weights = grad.mean(axis=(1, 2))
    s = np.maximum(np.tensordot(weights, feats, axes=1), 0.0)
    return SaliencyMap(c, s, FEATURE_RES, MethodId.GRADCAM)


def layercam(model: M.ModelBundle, image, c: int) -> SaliencyMap:
    c = _check_class(model, c)
    feats, grad = _feature_grad(model, image, c)
    s = (np.maximum(grad, 0.0) * feats).sum(axis=0)
    return SaliencyMap(c, s, FEATURE_RES, MethodId.LAYERCAM)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def scorecam_masks(feats: np.ndarray, channels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Min-max normalized upsampled activation masks; constant channels give all-zero masks."""
    up = ad.upsample_array(feats[channels], size)
    lo = up.min(axis=(1, 2), keepdims=True)
    hi = up.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (up - lo) / np.where(span > 0, span, 1.0), 0.0).astype(np.float32)


def scorecam_channels(feats: np.ndarray, top_channels: int | None) -> np.ndarray:
    d = feats.shape[0]
    k = d if top_channels is None else int(top_channels)
    if not 1 <= k <= d:
        raise ValueError(f"top_channels must lie in [1, {d}], got {top_channels}")
    if k == d:
        return np.arange(d)
    energy = (feats.astype(np.float64) ** 2).sum(axis=(1, 2))
    return np.sort(np.argsort(-energy, kind="stable")[:k])


def scorecam(model: M.ModelBundle, image, c: int, top_channels: int | None = None,
             batch_size: int = 64) -> SaliencyMap:
    """Gradient-free channel weighting by the class score of activation-masked inputs."""
    c = _check_class(model, c)
    x = _single(model, image)
    feats = M.forward_features(model, x).data
    channels = scorecam_channels(feats, top_channels)
    masks = scorecam_masks(feats, channels, x.shape[-2:])
    scores = []
    for s in range(0, len(channels), batch_size):
        masked = x[None] * masks[s:s + batch_size, None]
        scores.append(M.logits(model, masked).data[:, c])
    weights = _softmax_np(np.concatenate(scores).astype(np.float64))
    s = np.maximum(np.tensordot(weights, feats[channels].astype(np.float64), axes=1), 0.0)
    return SaliencyMap(c, s, FEATURE_RES, MethodId.SCORECAM)


def input_gradient(model: M.ModelBundle, images: np.ndarray, c: int, guided: bool = False) -> np.ndarray:
    """d logit_c / d input for one image [C,H,W] or a batch (gradient of the batch sum)."""
    mode = "guided" if guided else "standard"
    with Tape(relu_mode=mode) as tape:
        x = tape.watch(Tensor(images))
        lg = M.logits(model, x)
        target = lg[c] if lg.ndim == 1 else ad.reduce_sum(lg[:, c])
    return M.counted_backward(tape, target)[x]


def guided_backprop(model: M.ModelBundle, image, c: int) -> SaliencyMap:
    c = _check_class(model, c)
    g = input_gradient(model, _single(model, image), c, guided=True)
    return SaliencyMap(c, g.sum(axis=0), INPUT_RES, MethodId.GUIDED_BP)


def integrated_gradients_raw(model: M.ModelBundle, image, c: int, steps: int = 32,
                             baseline: np.ndarray | None = None, batch_size: int = 64) -> np.ndarray:
    """Per-element attributions [C,H,W] using a right-endpoint Riemann sum."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = _single(model, image)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, np.float32)
    diff = x - x0
    total = np.zeros(x.shape, np.float64)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    for s in range(0, steps, batch_size):
        a = alphas[s:s + batch_size]
        path = (x0[None] + a[:, None, None, None] * diff[None]).astype(np.float32)
        total += input_gradient(model, path, c).sum(axis=0)
    return (diff * (total / steps)).astype(np.float32)


def integrated_gradients(model: M.ModelBundle, image, c: int, steps: int = 32,
                         baseline: np.ndarray | None = None) -> SaliencyMap:
    c = _check_class(model, c)
    attr = integrated_gradients_raw(model, image, c, steps, baseline)
    return SaliencyMap(c, attr.sum(axis=0), INPUT_RES, MethodId.INTEGRATED_GRADIENTS)


def softcam_evidence(model: M.ModelBundle, image, c: int, forward=None) -> SaliencyMap:
    """Evidence channel ``c``.

    Pass the ``(evidence, logits, probs)`` triple from a prediction already made
    to get the map without another forward pass.
    """
    if not applicable(MethodId.SOFTCAM, model):
        raise NotApplicable("SoftCAM-evidence requires a SoftCAM head")
    c = _check_class(model, c)
    if forward is None:
        forward = M.softcam_forward(model, _single(model, image))
    evidence = forward[0]
    if evidence.ndim != 3:
        raise ad.ShapeError("expected single-image evidence maps [C,N,M]")
    return SaliencyMap(c, evidence.data[c], FEATURE_RES, MethodId.SOFTCAM)


_DISPATCH = {
    MethodId.CAM: cam,
    MethodId.GRADCAM: gradcam,
    MethodId.SCORECAM: scorecam,
    MethodId.LAYERCAM: layercam,
    MethodId.GUIDED_BP: guided_backprop,
    MethodId.INTEGRATED_GRADIENTS: integrated_gradients,
    MethodId.SOFTCAM: softcam_evidence,
}


def explain(model: M.ModelBundle, image, method, c: int, **kwargs) -> SaliencyMap:
    method = MethodId(method)
    if not applicable(method, model):
        raise NotApplicable(f"{method} is not applicable to a {model.head_kind} head")
    return _DISPATCH[method](model, image, c, **kwargs)
