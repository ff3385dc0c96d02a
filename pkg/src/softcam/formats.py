"""On-disk formats: SCT1 tensors, SCM1 checkpoints, PGM images, datasets,
saliency archives and report files."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import models as M
from .autodiff import Tensor

SCT_MAGIC = b"SCT1"
SCM_MAGIC = b"SCM1"
CHECKPOINT_VERSION = 1
MAX_ELEMENTS = 2**31 - 1
MANIFEST_HEADER = ("id", "split", "label", "mask_file")


class FormatError(ValueError):
    """Malformed on-disk data."""


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ExtentOverflow(FormatError):
    pass


class DigestMismatch(FormatError):
    pass


# -------------------------------------------------------------------- SCT1


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
    head = SCT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one SCT1 record at ``offset``; returns (array, end offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise TruncatedPayload("SCT1 header truncated")
    if bytes(buf[offset:offset + 4]) != SCT_MAGIC:
        raise BadMagic(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise TruncatedPayload(f"SCT1 extents truncated (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = 1
    for e in shape:
        n *= e
        if n > MAX_ELEMENTS:
            raise ExtentOverflow(f"tensor extents {shape} exceed {MAX_ELEMENTS} elements")
    if len(buf) - pos < 4 * n:
        raise TruncatedPayload(f"SCT1 payload truncated: need {4 * n} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
    return arr, pos + 4 * n


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_tensor(path, t) -> None:
    _atomic_write(path, tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor")
    return Tensor(arr, copy=False)


# -------------------------------------------------------------------- SCM1


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: M.ModelBundle, provenance: dict | None = None) -> bytes:
    names, payload, index, offset = [], [], [], 0
    for name, arr in model.named_parameters().items():
        rec = tensor_to_bytes(arr)
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        payload.append(rec)
        offset += len(rec)
        names.append(name)
    prov = dict(model.metadata)
    prov.update(provenance or {})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config_digest": model.config_digest(),
        "class_count": model.n_classes,
        "head_kind": model.head_kind,
        "architecture": model.architecture(),
        "provenance": prov,
        "tensors": index,
    }
    hb = _canonical(header)
    body = SCM_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model: M.ModelBundle, provenance: dict | None = None) -> str:
    """Write a checkpoint; returns the hex digest of the file contents."""
    data = checkpoint_bytes(model, provenance)
    _atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 8 + 32:
        raise TruncatedPayload("checkpoint truncated")
    if buf[:4] != SCM_MAGIC:
        raise BadMagic(f"bad checkpoint magic {buf[:4]!r}")
    body, stored = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise DigestMismatch("checkpoint digest mismatch (file corrupted or tampered)")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + hlen])
    except ValueError as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from None
    return header, 8 + hlen


def load_checkpoint(path, expected_digest: str | None = None) -> M.ModelBundle:
    buf = Path(path).read_bytes()
    header, start = read_checkpoint_header(buf)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    arch = header["architecture"]
    digest = hashlib.sha256(_canonical(arch)).hexdigest()
    if digest != header["config_digest"]:
        raise DigestMismatch("config digest does not match the stored architecture")
    if expected_digest is not None and expected_digest != digest:
        raise DigestMismatch(f"checkpoint config {digest[:12]} != expected {expected_digest[:12]}")
    body = memoryview(buf)[:-32]
    params = {}
    for entry in header["tensors"]:
        arr, _ = tensor_from_bytes(body, start + entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"tensor {entry['name']} shape {arr.shape} != index {entry['shape']}")
        params[entry["name"]] = arr
    config = M.BackboneConfig.from_dict(arch["config"])
    n_bb = len(config.blocks)
    backbone = [(params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"]) for i in range(n_bb)]
    layers = [(params[f"head.{i}.weight"], params[f"head.{i}.bias"]) for i in range(len(arch["head_widths"]))]
    head = M.SoftCamHead(layers) if arch["head_kind"] == "softcam" else M.BlackBoxHead(layers)
    model = M.ModelBundle(config, backbone, head, metadata=dict(header.get("provenance", {})))
    if model.config_digest() != digest:
        raise DigestMismatch("rebuilt model does not match the stored config digest")
    return model


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------- PGM


def pgm_bytes(pixels: np.ndarray) -> bytes:
    p = np.asarray(pixels)
    if p.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    h, w = p.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.clip(p, 0, 255).astype(np.uint8).tobytes()


def write_pgm(path, pixels: np.ndarray) -> None:
    _atomic_write(path, pgm_bytes(pixels))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise BadMagic("not a binary PGM (P5) file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    pix = data[len(data) - w * h:]
    if len(pix) != w * h:
        raise TruncatedPayload("PGM pixel data truncated")
    return np.frombuffer(pix, np.uint8).reshape(h, w).copy()


def render_diverging(values: np.ndarray) -> np.ndarray:
    """Symmetric 8-bit rendering: 0 is mid-gray, +/-max|v| map to 255/0."""
    v = np.asarray(values, np.float64)
    scale = np.abs(v).max(initial=0.0)
    if scale == 0:
        return np.full(v.shape, 128, np.uint8)
    return np.clip(np.round(127.5 + 127.5 * v / scale), 0, 255).astype(np.uint8)


def mask_to_pgm(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


# ------------------------------------------------------------------ dataset


def save_dataset(directory, dataset) -> str:
    """Write images, masks and manifest; returns the manifest digest."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, split in dataset.splits().items():
        for i in range(len(split)):
            sid = int(split.ids[i])
            stem = f"{sid:06d}"
            save_tensor(d / "images" / f"{stem}.sct", split.images[i])
            mask_file = f"masks/{stem}.pgm"
            write_pgm(d / mask_file, mask_to_pgm(split.masks[i]))
            rows.append((sid, split_name, int(split.labels[i]), mask_file))
    rows.sort()
    lines = [",".join(MANIFEST_HEADER)] + [f"{a},{b},{c},{e}" for a, b, c, e in rows]
    manifest = ("\n".join(lines) + "\n").encode()
    _atomic_write(d / "manifest.csv", manifest)
    meta = {"config": dataset.config.to_dict() if dataset.config else None,
            "norm": {"mean": dataset.norm[0], "std": dataset.norm[1]}, "n_classes": dataset.n_classes}
    _atomic_write(d / "dataset.json", json.dumps(meta, indent=2, sort_keys=True).encode())
    return hashlib.sha256(manifest).hexdigest()


def load_dataset(directory):
    from .synthdata import Dataset, Split, SynthConfig

    d = Path(directory)
    manifest = d / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {d}")
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise FormatError(f"manifest header {reader.fieldnames} != {MANIFEST_HEADER}")
        rows = list(reader)
    groups: dict[str, list] = {"train": [], "val": [], "test": []}
    for r in rows:
        if r["split"] not in groups:
            raise FormatError(f"unknown split {r['split']!r}")
        sid = int(r["id"])
        img = load_tensor(d / "images" / f"{sid:06d}.sct").data
        mask = read_pgm(d / r["mask_file"]) > 127
        groups[r["split"]].append((sid, img, int(r["label"]), mask))
    meta_path = d / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    cfg = SynthConfig.from_dict(meta["config"]) if meta.get("config") else None

    def build(items):
        if not items:
            shape = cfg and (cfg.image_size, cfg.image_size) or (0, 0)
            return Split(np.zeros((0, 1, *shape), np.float32), np.zeros(0, np.int64),
                         np.zeros((0, *shape), bool), np.zeros(0, np.int64))
        ids, imgs, labels, masks = zip(*items)
        return Split(np.stack(imgs), np.array(labels, np.int64), np.stack(masks), np.array(ids, np.int64))

    norm = meta.get("norm", {"mean": 0.0, "std": 1.0})
    return Dataset(build(groups["train"]), build(groups["val"]), build(groups["test"]), config=cfg,
                   norm=(norm["mean"], norm["std"]))


# ----------------------------------------------------------------- saliency


def save_saliency(directory, stem: str, smap, model_digest: str) -> list[Path]:
    d = Path(directory)
    sct, js, pgm = d / f"{stem}.sct", d / f"{stem}.json", d / f"{stem}.pgm"
    save_tensor(sct, smap.values)
    side = {"method": str(smap.method), "class": smap.class_index, "resolution": smap.resolution,
            "shape": list(smap.values.shape), "model_digest": model_digest}
    _atomic_write(js, (json.dumps(side, sort_keys=True, indent=2) + "\n").encode())
    write_pgm(pgm, render_diverging(smap.values))
    return [sct, js, pgm]


# ------------------------------------------------------------------ reports


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join("" if v is None else (f"{v:.9g}" if isinstance(v, float) else str(v)) for v in r))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def curve_svg(curves: dict[str, np.ndarray], width: int = 360, height: int = 240, title: str = "") -> str:
    """Minimal line chart of normalized confidence against removed patches."""
    pad = 36
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]
    ymax = max([1.0] + [float(np.max(c)) for c in curves.values() if len(c)])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - 8}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="8" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="11">{title}</text>')
    for i, (name, ys) in enumerate(curves.items()):
        ys = np.asarray(ys, float)
        n = max(len(ys) - 1, 1)
        pts = " ".join(f"{pad + (width - pad - 8) * t / n:.2f},{height - pad - (height - pad - 8) * y / ymax:.2f}"
                       for t, y in enumerate(ys))
        color = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - 10}" y="{24 + 12 * i}" text-anchor="end" font-size="10" '
                     f'fill="{color}">{name}</text>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="10">0</text>')
    parts.append(f'<text x="{width - 10}" y="{height - 10}" text-anchor="end" font-size="10">patches removed</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
