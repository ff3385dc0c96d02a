"""Small CNN backbones with either a pooled fully-connected head or a 1x1-conv
class-evidence head, plus the exact converter between the two."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

HEAD_PRESETS = {"resnet": (), "vgg": (64, 64)}


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = True


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int] = (1, 64, 64)
    blocks: tuple[BlockSpec, ...] = tuple(BlockSpec(c) for c in (16, 32, 64, 128))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        n, m = self.feature_shape()[1:]
        if n < 2 or m < 2:
            raise ValueError(f"feature map {n}x{m} is not spatial (needs >= 2x2)")

    @classmethod
    def from_channels(cls, channels=(16, 32, 64, 128), input_shape=(1, 64, 64), seed=0, pools=None):
        """``pools`` switches the 2x2 max-pool per block; all blocks pool by default."""
        channels = tuple(int(c) for c in channels)
        pools = (True,) * len(channels) if pools is None else tuple(bool(p) for p in pools)
        if len(pools) != len(channels):
            raise ValueError(f"pools has {len(pools)} entries for {len(channels)} blocks")
        return cls(input_shape=tuple(input_shape),
                   blocks=tuple(BlockSpec(c, pool=p) for c, p in zip(channels, pools)), seed=seed)

    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for b in self.blocks:
            h = (h + 2 * b.padding - b.kernel) // b.stride + 1
            w = (w + 2 * b.padding - b.kernel) // b.stride + 1
            if h < 1 or w < 1:
                raise ValueError("blocks shrink the input below 1x1")
            if b.pool:
                if h % 2 or w % 2:
                    raise ValueError(f"pooling an odd extent {h}x{w}")
                h, w = h // 2, w // 2
            c = b.out_channels
        return c, h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(input_shape=tuple(d["input_shape"]),
                   blocks=tuple(BlockSpec(**b) for b in d["blocks"]), seed=int(d.get("seed", 0)))


@dataclass
class BlackBoxHead:
    """GAP followed by fully connected layers with ReLUs between them."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    kind = "blackbox"

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ShapeError(f"FC stack mismatch: {w0.shape} feeds {w1.shape}")

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def widths(self) -> list[int]:
        return [w.shape[0] for w, _ in self.layers]


@dataclass
class SoftCamHead:
    """Stack of 1x1 convolutions; the last one emits one signed evidence map per class."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    kind = "softcam"

    def __post_init__(self):
        for k, _ in self.layers:
            if k.ndim != 4 or k.shape[2:] != (1, 1):
                raise ShapeError(f"evidence head layers must be 1x1 kernels, got {k.shape}")

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def widths(self) -> list[int]:
        return [k.shape[0] for k, _ in self.layers]


@dataclass
class ModelBundle:
    config: BackboneConfig
    backbone: list[tuple[np.ndarray, np.ndarray]]
    head: BlackBoxHead | SoftCamHead
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.config.feature_shape()[0]
        if self.head.in_channels != d:
            raise ShapeError(f"head expects {self.head.in_channels} channels, backbone emits {d}")

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    @property
    def head_kind(self) -> str:
        return self.head.kind

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(self.backbone):
            out[f"backbone.{i}.weight"] = k
            out[f"backbone.{i}.bias"] = b
        for i, (w, b) in enumerate(self.head.layers):
            out[f"head.{i}.weight"] = w
            out[f"head.{i}.bias"] = b
        return out

    def with_parameters(self, params: dict[str, np.ndarray]) -> "ModelBundle":
        backbone = [(params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"])
                    for i in range(len(self.backbone))]
        layers = [(params[f"head.{i}.weight"], params[f"head.{i}.bias"])
                  for i in range(len(self.head.layers))]
        return replace(self, backbone=backbone, head=type(self.head)(layers), metadata=dict(self.metadata))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.named_parameters().values())

    def architecture(self) -> dict:
        return {"config": self.config.to_dict(), "head_kind": self.head_kind,
                "head_widths": self.head.widths(), "n_classes": self.n_classes}

    def config_digest(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ------------------------------------------------------------- pass counting


class PassCounter:
    """Counts forward passes through the backbone and backward sweeps."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.backward = 0

    def bump(self, kind: str) -> None:
        with self._lock:
            setattr(self, kind, getattr(self, kind) + 1)

    def snapshot(self) -> tuple[int, int]:
        return self.forward, self.backward


passes = PassCounter()


def counted_backward(tape: ad.Tape, output: Tensor, seed=None):
    passes.bump("backward")
    return ad.backward(tape, output, seed)


# ------------------------------------------------------------------ building


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_weights(config: BackboneConfig, n_classes: int = 2, head: str = "softcam",
                 preset: str = "resnet", hidden: tuple[int, ...] | None = None,
                 seed: int | None = None) -> ModelBundle:
    """Kaiming-uniform (fan-in) weights with zero biases, fully determined by the seed."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if head not in ("softcam", "blackbox"):
        raise ValueError(f"unknown head kind {head!r}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    backbone = []
    c_in = config.input_shape[0]
    for b in config.blocks:
        fan_in = c_in * b.kernel * b.kernel
        backbone.append((kaiming_uniform(rng, (b.out_channels, c_in, b.kernel, b.kernel), fan_in),
                         np.zeros(b.out_channels, np.float32)))
        c_in = b.out_channels
    widths = list(HEAD_PRESETS[preset] if hidden is None else hidden) + [n_classes]
    fcs = []
    for width in widths:
        fcs.append((kaiming_uniform(rng, (width, c_in), c_in), np.zeros(width, np.float32)))
        c_in = width
    bb_head = BlackBoxHead(fcs)
    model = ModelBundle(config, backbone, bb_head, metadata={"seed": int(seed)})
    return to_softcam(model) if head == "softcam" else model


def convert_head(head: BlackBoxHead) -> SoftCamHead:
    """Rewrite each b2 x b1 FC layer as a 1x1 convolution with the same values."""
    return SoftCamHead([(w.reshape(w.shape[0], w.shape[1], 1, 1).copy(), b.copy())
                        for w, b in head.layers])


def to_softcam(model: ModelBundle) -> ModelBundle:
    if not isinstance(model.head, BlackBoxHead):
        raise TypeError("model already has an evidence head")
    return ModelBundle(model.config, [(k.copy(), b.copy()) for k, b in model.backbone],
                       convert_head(model.head), metadata=dict(model.metadata))


# ------------------------------------------------------------------- forward


def _tensors(model: ModelBundle, params: dict[str, Tensor] | None) -> dict[str, Tensor]:
    if params is not None:
        return params
    return {k: Tensor(v, copy=False) for k, v in model.named_parameters().items()}


def check_input(model: ModelBundle, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image)
    expected = model.config.input_shape
    if tuple(x.shape[-3:]) != expected or x.ndim not in (3, 4):
        raise ShapeError(f"image shape {x.shape} does not match configured input {expected}")
    return x


def forward_features(model: ModelBundle, image, params: dict[str, Tensor] | None = None) -> Tensor:
    """Backbone feature map [D,N,M] (or [B,D,N,M] for a batch)."""
    x = check_input(model, image)
    p = _tensors(model, params)
    passes.bump("forward")
    for i, spec in enumerate(model.config.blocks):
        x = ad.conv2d(x, p[f"backbone.{i}.weight"], p[f"backbone.{i}.bias"],
                      stride=spec.stride, padding=spec.padding)
        x = ad.relu(x)
        if spec.pool:
            x = ad.maxpool2(x)
    return x


def blackbox_head(model: ModelBundle, features: Tensor, params=None) -> Tensor:
    if not isinstance(model.head, BlackBoxHead):
        raise TypeError("model does not have a black-box (GAP + FC) head")
    p = _tensors(model, params)
    h = ad.global_avg_pool(features)
    n = len(model.head.layers)
    for i in range(n):
        h = ad.linear(h, p[f"head.{i}.weight"], p[f"head.{i}.bias"])
        if i < n - 1:
            h = ad.relu(h)
    return h


def evidence_head(model: ModelBundle, features: Tensor, params=None) -> Tensor:
    if not isinstance(model.head, SoftCamHead):
        raise TypeError("model does not have a SoftCAM evidence head")
    p = _tensors(model, params)
    a = features
    n = len(model.head.layers)
    for i in range(n):
        a = ad.conv2d(a, p[f"head.{i}.weight"], p[f"head.{i}.bias"])
        if i < n - 1:
            a = ad.relu(a)
    return a


def blackbox_forward(model: ModelBundle, image, params=None) -> tuple[Tensor, Tensor]:
    logits = blackbox_head(model, forward_features(model, image, params), params)
    return logits, ad.softmax(logits)


def softcam_forward(model: ModelBundle, image, params=None) -> tuple[Tensor, Tensor, Tensor]:
    """Evidence maps, logits (their spatial means) and class probabilities."""
    if not isinstance(model.head, SoftCamHead):
        raise TypeError("model does not have a SoftCAM evidence head")
    evidence = evidence_head(model, forward_features(model, image, params), params)
    logits = ad.reduce_mean(evidence, axis=(-2, -1))
    return evidence, logits, ad.softmax(logits)


def head_logits(model: ModelBundle, features: Tensor, params=None) -> Tensor:
    """Logits from a feature map for either head kind."""
    if isinstance(model.head, SoftCamHead):
        return ad.reduce_mean(evidence_head(model, features, params), axis=(-2, -1))
    return blackbox_head(model, features, params)


def logits(model: ModelBundle, image, params=None) -> Tensor:
    return head_logits(model, forward_features(model, image, params), params)


def predict_proba(model: ModelBundle, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Untracked batched probabilities for an [n,C,H,W] array."""
    out = []
    for s in range(0, len(images), batch_size):
        out.append(ad.softmax(logits(model, images[s:s + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes), np.float32)
