"""Command-line surface: train, eval, shapes, gradcheck, synth, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import numpy as np

from .tensor import Tensor
from .model import KftModel, ModelConfig, shape_schedule, load_config_file
from .data import synth_generate, save_dataset, load_dataset
from .train import (TrainConfig, SgdMomentum, train_loop, evaluate,
                    load_checkpoint)
from .verify import gradcheck_report


def _load_configs(path):
    raw = load_config_file(path)
    model_cfg = ModelConfig.from_dict(raw["model"])
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    return model_cfg, train_cfg


def _cmd_shapes(args) -> int:
    model_cfg, _ = _load_configs(args.config)
    entries = shape_schedule(model_cfg)
    # group x2 / x5 stages into single display rows, keeping the last shape
    rows = []
    for e in entries:
        if rows and rows[-1][0] == e.group:
            rows[-1] = (e.group, e.out_shape, rows[-1][2] or e.note)
        else:
            rows.append((e.group, e.out_shape, e.note))
    for name, (c, t, h, w), note in rows:
        line = f"{name:<20} {c:>5} x {t:>3} x {h:>3} x {w:>3}"
        if note:
            line += f"   [{note}]"
        print(line)
    print(f"{len(rows)} stages")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = gradcheck_report(seed=args.seed, tol=args.tol)
    worst_fail = False
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.component:<35} max-rel-error {r.max_rel_error:.3e}  {status}")
        worst_fail |= not r.passed
    return 1 if worst_fail else 0


def _cmd_synth(args) -> int:
    ds = synth_generate(args.classes, args.clips, args.frames, args.size,
                        args.seed, multi_label=args.multi_label)
    manifest = save_dataset(args.out, ds)
    print(f"wrote {len(ds)} clips, manifest {manifest}")
    return 0


def _split_dataset(ds, val_fraction: float, seed: int):
    from .data import Dataset
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    nval = int(round(n * val_fraction))
    val_idx = set(order[:nval].tolist())
    train = Dataset(ds.classes, [ds.clips[i] for i in range(n) if i not in val_idx],
                    ds.multi_label)
    val = Dataset(ds.classes, [ds.clips[i] for i in range(n) if i in val_idx],
                  ds.multi_label)
    return train, val


def _cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config)
    ds = load_dataset(args.data)
    if args.val_data:
        val = load_dataset(args.val_data)
        train = ds
    else:
        train, val = _split_dataset(ds, 0.2, train_cfg.shuffle_seed)
    model = KftModel(model_cfg, seed=args.seed)
    summary = train_loop(model, train, val, train_cfg, out_dir=args.out,
                         resume=args.resume,
                         log_fn=lambda r: print(json.dumps(r)))
    print(f"finished at step {summary['step']}, best val loss "
          f"{summary['best_val']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    with open(str(args.ckpt) + ".json") as fh:
        meta = json.load(fh)
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    train_cfg = TrainConfig.from_dict(meta.get("train_config", {}))
    model = KftModel(model_cfg, seed=0)
    load_checkpoint(args.ckpt, model)
    ds = load_dataset(args.data)
    rep = evaluate(model, ds, train_cfg.augment_config(),
                   train_cfg.eval_batch_size)
    print(json.dumps({"loss": rep.loss, "top1": rep.top1, "top5": rep.top5,
                      "map": rep.map}))
    return 0


def _cmd_bench(args) -> int:
    model_cfg, _ = _load_configs(args.config)
    rng = np.random.default_rng(0)
    for variant in ("1d", "2d", "3d"):
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "variant": variant})
        model = KftModel(cfg, seed=0)
        x = Tensor(rng.standard_normal(
            (args.batch, 3, cfg.frames, cfg.size, cfg.size)).astype(np.float32))
        t0 = time.perf_counter()
        logits = model.forward(x, training=False)
        t_fwd = time.perf_counter() - t0
        xg = Tensor(x.data, requires_grad=True)
        t0 = time.perf_counter()
        (model.forward(xg, training=False) ** 2.0).sum().backward()
        t_bwd = time.perf_counter() - t0
        print(f"{variant}: forward {t_fwd * 1e3:.1f} ms, "
              f"forward+backward {t_bwd * 1e3:.1f} ms "
              f"(batch {args.batch}, logits {logits.shape})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kft",
                                description="video action classifier toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset manifest JSON")
    t.add_argument("--val-data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("shapes", help="print the layer shape schedule")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=_cmd_shapes)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--config", default=None,
                   help="unused sizes come from the built-in micro config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=_cmd_gradcheck)

    y = sub.add_parser("synth", help="generate a synthetic dataset")
    y.add_argument("--classes", type=int, required=True)
    y.add_argument("--clips", type=int, required=True, help="clips per class")
    y.add_argument("--frames", type=int, default=32)
    y.add_argument("--size", type=int, default=64)
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--multi-label", action="store_true")
    y.set_defaults(fn=_cmd_synth)

    b = sub.add_parser("bench", help="forward/backward wall time per variant")
    b.add_argument("--config", required=True)
    b.add_argument("--batch", type=int, default=1)
    b.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except Exception as exc:              # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
