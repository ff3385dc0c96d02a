"""Command-line pipeline: gen-data, train, explain, evaluate, sweep.

Data goes to files; stdout carries one JSON summary line per command and
diagnostics go to stderr. Exit codes: 0 ok, 2 config error, 3 training
failure, 4 nothing to evaluate.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import formats as F
from . import models as M
from . import saliency as S
from . import synthdata as D
from . import training as T

log = logging.getLogger("softcam")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EMPTY = 0, 2, 3, 4
ALL_METHODS = [m.value for m in S.MethodId]


class ConfigError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``key=value`` overrides; values are parsed as JSON when possible."""
    out = dict(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = _parse_value(val)
    return out


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except ValueError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SOFTCAM_SEED")
    return int(env) if env else None


def _dataset(path):
    p = Path(path)
    if not (p / "manifest.csv").exists():
        raise ConfigError(f"{p} is not a dataset directory (missing manifest.csv)")
    return F.load_dataset(p)


def _checkpoint(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        return F.load_checkpoint(path)
    except F.FormatError as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from None


def _methods(spec: str) -> list[str]:
    if spec == "all":
        return list(ALL_METHODS)
    names = [m.strip() for m in spec.split(",") if m.strip()]
    for n in names:
        try:
            S.MethodId(n)
        except ValueError:
            raise ConfigError(f"unknown method {n!r}; choose from {ALL_METHODS}") from None
    return names


def _split(ds, name):
    if name not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {name!r}")
    return getattr(ds, name)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    raw = apply_overrides(_load_json(args.config), args.set)
    seed = _seed(args)
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = D.SynthConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid data config: {e}") from None
    ds = D.generate_dataset(cfg)
    digest = F.save_dataset(args.out, ds)
    return {"command": "gen-data", "out": str(args.out), "manifest_digest": digest,
            "counts": {k: len(v) for k, v in ds.splits().items()}}


def _train_config(args) -> tuple[T.TrainConfig, dict]:
    raw = apply_overrides(_load_json(args.config), args.set)
    for key in ("lambda1", "lambda2", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    seed = _seed(args)
    if seed is not None:
        raw["seed"] = seed
    model_keys = {"channels", "pools", "preset", "hidden"}
    try:
        return T.TrainConfig.from_dict({k: v for k, v in raw.items() if k not in model_keys}), raw
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid training config: {e}") from None


def _fresh_model(raw: dict, ds, head: str, seed: int) -> M.ModelBundle:
    size = ds.train.images.shape[-1] if len(ds.train) else ds.config.image_size
    try:
        bb = M.BackboneConfig.from_channels(raw.get("channels", (16, 32, 64, 128)),
                                            input_shape=(1, size, size), seed=seed,
                                            pools=raw.get("pools"))
        return M.init_weights(bb, ds.n_classes, head=head, preset=raw.get("preset", "resnet"),
                              hidden=raw.get("hidden"), seed=seed)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from None


def cmd_train(args) -> dict:
    cfg, raw = _train_config(args)
    ds = _dataset(args.data)
    model = _fresh_model(raw, ds, args.head, cfg.seed)
    result = T.train(model, ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variant = cfg.variant if args.head == "softcam" else "blackbox"
    digest = F.save_checkpoint(out / "model.scm", result.model, {"variant": variant})
    F._atomic_write(out / "epoch_log.csv", result.log_csv().encode())
    best = result.log[result.best_epoch]
    F.write_json(out / "run.json", {"train_config": cfg.to_dict(), "head": args.head, "variant": variant,
                                    "model": {k: raw[k] for k in ("channels", "pools", "preset", "hidden") if k in raw},
                                    "best_epoch": result.best_epoch, "val_acc": best.val_acc,
                                    "val_auc": best.val_auc, "checkpoint_digest": digest})
    return {"command": "train", "variant": variant, "best_epoch": result.best_epoch,
            "val_acc": best.val_acc, "val_auc": best.val_auc, "checkpoint_digest": digest}


def cmd_explain(args) -> dict:
    model = _checkpoint(args.checkpoint)
    split = _split(_dataset(args.data), args.split)
    methods = _methods(args.methods)
    runnable = []
    for m in methods:
        if S.applicable(m, model):
            runnable.append(m)
        else:
            log.warning("skipping %s: not applicable to a %s head", m, model.head_kind)
    if not runnable:
        raise ConfigError("no requested method is applicable to this checkpoint")
    n = len(split) if args.limit is None else min(args.limit, len(split))
    digest = model.config_digest()
    out = Path(args.out)
    written = 0
    for i in range(n):
        x, sid = split.images[i], int(split.ids[i])
        forward = M.softcam_forward(model, x) if model.head_kind == "softcam" else None
        probs = forward[2].data if forward else M.predict_proba(model, x[None])[0]
        if args.cls == "all":
            classes = range(model.n_classes)
        elif args.cls == "pred":
            classes = [int(np.argmax(probs))]
        else:
            classes = [int(args.cls)]
        for m in runnable:
            for c in classes:
                smap = E.method_map(model, x, m, c, forward, scorecam_channels=args.scorecam_channels,
                                    ig_steps=args.ig_steps)
                F.save_saliency(out, f"{sid:06d}_{smap.method.value}_c{c}", smap, digest)
                written += 1
    return {"command": "explain", "methods": runnable,
            "skipped_methods": [m for m in methods if m not in runnable], "maps": written}


def write_report(out: Path, report: E.MetricReport, k: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    F.write_csv(out / "report.csv", E.REPORT_HEADER, [r.row() for r in report.records])
    agg = report.aggregates()
    F.write_json(out / "aggregate.json", {"model_digest": report.model_digest, "methods": agg,
                                          "skipped": len(report.skipped)})
    curves = {}
    for m in report.curves:
        mc = report.mean_curve(m)
        curves[m] = mc
        F.write_csv(out / f"deletion_{m}.csv", ("t", "confidence", "normalized"),
                    [(t, float(v), float(v)) for t, v in enumerate(mc)])
        F._atomic_write(out / f"deletion_{m}.svg", F.curve_svg({m: mc}, title=f"deletion: {m}").encode())
    if curves:
        F._atomic_write(out / "deletion_all.svg", F.curve_svg(curves, title="mean deletion curves").encode())
    return agg


def cmd_evaluate(args) -> dict:
    model = _checkpoint(args.checkpoint)
    split = _split(_dataset(args.data), args.split)
    methods = [m for m in _methods(args.methods) if S.applicable(m, model)]
    report = E.evaluate(model, split, methods, k=args.k, patch=args.patch, fill=args.fill,
                        n_random=args.n_random, seed=_seed(args) or 0, threads=args.threads,
                        limit=args.limit, scorecam_channels=args.scorecam_channels, ig_steps=args.ig_steps)
    report.model_digest = model.config_digest()
    if not report.records:
        log.error("no sample qualified for evaluation")
        return {"command": "evaluate", "error": "no qualifying samples", "_exit": EXIT_EMPTY}
    agg = write_report(Path(args.out), report, args.k)
    summary = {m: {f: v["mean"] for f, v in d.items() if v["n"]} for m, d in agg.items()}
    return {"command": "evaluate", "samples": len({r.sample_id for r in report.records}),
            "skipped": len(report.skipped), "means": summary}


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"l1:l2,l1:l2"``; a bare number is (l1, 0)."""
    grid = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            if ":" in item:
                a, b = item.split(":", 1)
                grid.append((float(a), float(b)))
            else:
                grid.append((float(item), 0.0))
        except ValueError:
            raise ConfigError(f"bad grid entry {item!r}") from None
    if not grid:
        raise ConfigError("lambda grid is empty")
    return grid


def cmd_sweep(args) -> dict:
    cfg, raw = _train_config(args)
    ds = _dataset(args.data)
    grid = parse_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], []
    for i, (l1, l2) in enumerate(grid):
        point = replace(cfg, lambda1=l1, lambda2=l2, seed=cfg.seed ^ i)
        try:
            res = T.train(_fresh_model(raw, ds, args.head, cfg.seed), ds, point)
        except T.TrainingDiverged as e:
            log.error("grid point (%g, %g) diverged: %s", l1, l2, e)
            failed.append([l1, l2])
            rows.append(T.SweepRow(l1, l2, float("nan"), float("nan"), float("nan")))
            continue
        best = res.log[res.best_epoch]
        rows.append(T.SweepRow(l1, l2, best.val_acc, best.val_auc, best.sparsity))
        F._atomic_write(out / f"epoch_log_{i:02d}.csv", res.log_csv().encode())
    ok = [r for r in rows if not np.isnan(r.val_acc)]
    selected = None
    if ok:
        sel = T.select_lambda(ok)
        ok[sel].selected = True
        selected = {"lambda1": ok[sel].lambda1, "lambda2": ok[sel].lambda2, "val_acc": ok[sel].val_acc}
    F._atomic_write(out / "sweep.csv", T.sweep_csv(rows).encode())
    summary = {"command": "sweep", "points": len(grid), "selected": selected, "diverged": failed}
    if failed:
        summary["_exit"] = EXIT_TRAIN
    return summary


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softcam", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed (fallback: $SOFTCAM_SEED)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic lesion dataset")
    g.add_argument("--config", help="JSON file with SynthConfig fields")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def train_args(sp):
        sp.add_argument("--config", help="JSON file with TrainConfig fields (plus channels/pools/preset/hidden)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--data", required=True)
        sp.add_argument("--head", choices=("blackbox", "softcam"), default="softcam")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a black-box or SoftCAM model")
    train_args(t)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.set_defaults(func=cmd_train)

    def explain_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--methods", default="all")
        sp.add_argument("--limit", type=int)
        sp.add_argument("--scorecam-channels", type=int, default=None)
        sp.add_argument("--ig-steps", type=int, default=32)
        sp.add_argument("--out", required=True)

    e = sub.add_parser("explain", help="export saliency maps")
    explain_args(e)
    e.add_argument("--class", dest="cls", default="all", help="class index, 'all' or 'pred'")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="compute explanation metrics")
    explain_args(v)
    v.add_argument("--k", type=int, default=10)
    v.add_argument("--patch", type=int, default=8)
    v.add_argument("--fill", type=float, default=0.0)
    v.add_argument("--n-random", type=int, default=10)
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train over a lambda grid and select a value")
    train_args(s)
    s.add_argument("--grid", required=True, help='e.g. "0:0,1e-4:0,1e-3:0"')
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except T.TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_TRAIN
    code = summary.pop("_exit", EXIT_OK)
    print(json.dumps(summary, sort_keys=True, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
