"""Seeded synthetic lesion images with ground-truth masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``lesion_counts[c]`` is the inclusive (lo, hi) lesion count for class ``c``;
    class 0 is healthy and must be (0, 0). ``split_sizes`` overrides
    ``n_samples``/``split_fractions`` with explicit train/val/test counts.
    """

    image_size: int = 64
    lesion_counts: tuple[tuple[int, int], ...] = ((0, 0), (3, 5))
    radius_range: tuple[float, float] = (3.0, 5.0)
    intensity_delta: float = 1.0
    background_scale: float = 0.25
    background_smoothing: float = 1.5
    class_balance: tuple[float, ...] = (0.73, 0.27)
    split_fractions: tuple[float, float, float] = (0.75, 0.10, 0.15)
    n_samples: int = 1000
    split_sizes: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("lesion_counts", "radius_range", "class_balance", "split_fractions", "split_sizes"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _freeze(v))
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError(f"split fractions {self.split_fractions} must be non-negative and sum to 1")
        if len(self.lesion_counts) < 2 or tuple(self.lesion_counts[0]) != (0, 0):
            raise ValueError("class 0 must be healthy with zero lesions and at least one disease class")
        for (lo0, hi0), (lo1, hi1) in zip(self.lesion_counts, self.lesion_counts[1:]):
            if not (lo1 > hi0 and hi1 >= lo1):
                raise ValueError("lesion counts must be strictly increasing across grades")
        if len(self.class_balance) != self.n_classes or abs(sum(self.class_balance) - 1.0) > 1e-9:
            raise ValueError("class_balance needs one non-negative weight per class summing to 1")
        r0, r1 = self.radius_range
        if r0 < 1 or r1 < r0:
            raise ValueError(f"radius range {self.radius_range} invalid (need 1 <= lo <= hi)")
        if 2 * int(np.ceil(r1)) + 1 > self.image_size:
            raise ValueError(f"lesion radius {r1} does not fit in a {self.image_size}px image")
        if self.split_sizes is not None and (len(self.split_sizes) != 3 or min(self.split_sizes) < 0):
            raise ValueError("split_sizes must be three non-negative counts")
        if self.intensity_delta <= 0:
            raise ValueError("intensity_delta must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.lesion_counts)

    @property
    def total(self) -> int:
        return sum(self.split_sizes) if self.split_sizes is not None else self.n_samples

    def counts(self) -> tuple[int, int, int]:
        if self.split_sizes is not None:
            return tuple(self.split_sizes)
        n = self.n_samples
        n_train = int(round(self.split_fractions[0] * n))
        n_val = int(round(self.split_fractions[1] * n))
        return n_train, n_val, n - n_train - n_val

    @classmethod
    def multiclass(cls, **kw) -> "SynthConfig":
        kw.setdefault("lesion_counts", ((0, 0), (1, 2), (3, 4), (5, 7)))
        kw.setdefault("class_balance", (0.25, 0.25, 0.25, 0.25))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, (list, tuple)) else v


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W]
    label: int
    mask: np.ndarray  # [H,W] bool
    id: int = -1

    @property
    def mask_area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Split:
    images: np.ndarray  # [n,1,H,W] float32
    labels: np.ndarray  # [n] int
    masks: np.ndarray  # [n,H,W] bool
    ids: np.ndarray  # [n] int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.masks[i], int(self.ids[i]))

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.labels[idx], self.masks[idx], self.ids[idx])


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    config: SynthConfig | None = None
    norm: tuple[float, float] = (0.0, 1.0)
    meta: dict = field(default_factory=dict)

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def n_classes(self) -> int:
        if self.config is not None:
            return self.config.n_classes
        return int(max(s.labels.max(initial=0) for s in self.splits().values())) + 1


def lesion_profile(dist: np.ndarray, radius: float) -> np.ndarray:
    """Unit-peak radial falloff that crosses one half exactly at ``radius``."""
    return np.exp(-np.log(2.0) * (dist / radius) ** 4)


def render_sample(config: SynthConfig, label: int, rng: np.random.Generator):
    """Raw (unnormalized) image and lesion mask for one sample."""
    s = config.image_size
    noise = rng.standard_normal((s, s))
    bg = gaussian_filter(noise, config.background_smoothing, mode="wrap")
    bg *= config.background_scale / max(bg.std(), 1e-12)
    lo, hi = config.lesion_counts[label]
    n = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0:s, 0:s]
    blobs = np.zeros((s, s))
    mask = np.zeros((s, s), dtype=bool)
    for _ in range(n):
        r = float(rng.uniform(*config.radius_range))
        m = int(np.ceil(r))
        cy, cx = rng.uniform(m, s - 1 - m, size=2)
        dist = np.hypot(yy - cy, xx - cx)
        contrib = lesion_profile(dist, r)
        blobs += config.intensity_delta * contrib
        mask |= contrib > 0.5
    return (bg + blobs).astype(np.float32), mask


def _draw_labels(config: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    # exact class proportions, randomly ordered
    counts = np.floor(np.array(config.class_balance) * n).astype(int)
    rem = n - counts.sum()
    frac = np.array(config.class_balance) * n - counts
    for c in np.argsort(-frac, kind="stable")[:rem]:
        counts[c] += 1
    labels = np.repeat(np.arange(config.n_classes), counts)
    return rng.permutation(labels)


def generate_dataset(config: SynthConfig) -> Dataset:
    """Train/val/test splits, normalized by the training split's mean and std.

    Sample ``i`` is drawn from its own RNG stream spawned from the master seed,
    so content does not depend on generation order.
    """
    n = config.total
    master = np.random.SeedSequence(config.seed)
    label_rng, *sample_seqs = [np.random.default_rng(s) for s in master.spawn(n + 1)]
    labels = _draw_labels(config, n, label_rng)
    images = np.empty((n, 1, config.image_size, config.image_size), np.float32)
    masks = np.empty((n, config.image_size, config.image_size), bool)
    for i in range(n):
        images[i, 0], masks[i] = render_sample(config, int(labels[i]), sample_seqs[i])
    n_train, n_val, _ = config.counts()
    ids = np.arange(n)
    tr = slice(0, n_train)
    mean = float(images[tr].mean()) if n_train else 0.0
    std = float(images[tr].std()) if n_train else 1.0
    images = ((images - mean) / std).astype(np.float32)
    parts = [slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, n)]
    splits = [Split(images[p], labels[p].astype(np.int64), masks[p], ids[p]) for p in parts]
    return Dataset(*splits, config=config, norm=(mean, std))


def augment(sample: Sample, seed: int) -> Sample:
    """Random horizontal and vertical flips applied identically to image and mask."""
    rng = np.random.default_rng(seed)
    h, v = rng.random(2) < 0.5
    return flip(sample, horizontal=bool(h), vertical=bool(v))


def flip(sample: Sample, horizontal: bool = False, vertical: bool = False) -> Sample:
    img, mask = sample.image, sample.mask
    if horizontal:
        img, mask = img[..., ::-1], mask[..., ::-1]
    if vertical:
        img, mask = img[..., ::-1, :], mask[..., ::-1, :]
    return Sample(np.ascontiguousarray(img), sample.label, np.ascontiguousarray(mask), sample.id)
