"""Command-line entry point: ``pcsod {synth,train,eval,predict,gradcheck,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gradcheck
from .autodiff import CheckpointError
from .data import (
    PlyError,
    PointView,
    generate_scene,
    load_dataset,
    load_ply,
    random_recipe,
    save_ply,
)
from .metrics import aggregate, evaluate, write_curve_csv, write_report_csv
from .model import ModelConfig, SaliencyNet, plan_geometry
from .training import checkpoint_load, checkpoint_save, infer_full_view, parse_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pcsod")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_synth(args) -> int:
    if not 0.0 < args.split_ratio <= 1.0:
        raise UsageError("--split-ratio must lie in (0, 1]")
    if args.views < 1:
        raise UsageError("--views must be positive")
    n_train = int(round(args.views * args.split_ratio))
    if n_train == args.views:
        raise UsageError("empty test split")
    if n_train == 0:
        raise UsageError("empty train split")
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    recipes = [random_recipe(rng) for _ in range(args.views)]
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, recipe in enumerate(recipes):
        split = "train" if i < n_train else "test"
        name = f"view_{i:04d}"
        view = generate_scene(recipe, n_points=args.points)
        save_ply(view, out / split / f"{name}.ply")
        lines.append(f"# {split}/{name}\n{recipe.to_text()}")
    (out / "recipes.txt").write_text("".join(lines))
    print(f"wrote {n_train} train and {args.views - n_train} test views to {out}")
    return EXIT_OK


def _read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return parse_config(text)
    except KeyError as e:
        raise UsageError(f"config {path}: {e.args[0]}") from None


def cmd_train(args) -> int:
    model_cfg, train_cfg = _read_config(args.config)
    views = load_dataset(args.data, "train")
    t0 = time.time()

    def report(step, loss, _model):
        if step % args.print_every == 0:
            print(f"step {step:6d}  loss {loss:.5f}  {time.time() - t0:7.1f}s", flush=True)
        return False

    result = train(views, train_cfg, model_cfg, resume=args.resume, checkpoint_path=args.out,
                   max_steps=args.max_steps, on_step=report)
    checkpoint_save(args.out, result.model, result.optimizer, train_cfg)
    if args.log:
        result.log.to_csv(args.log)
    print(f"trained {result.optimizer.state.step} steps; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = checkpoint_load(args.ckpt)
    views = load_dataset(args.data, args.split)
    if not all(v.has_labels for v in views):
        raise ValueError("evaluation views require labels")
    reports = []
    for i, view in enumerate(views):
        probs = infer_full_view(view, model, votes=args.votes, rng=[args.seed, i])
        reports.append(evaluate(probs, view.labels, name=view.view_id))
    total = aggregate(reports)
    write_report_csv(args.report, reports, total)
    if args.curve:
        write_curve_csv(args.curve, total)
    print(f"{len(reports)} views  MAE {total.mae:.4f}  maxF {total.max_f:.4f}  "
          f"maxE {total.max_e:.4f}  IoU {total.iou:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = checkpoint_load(args.ckpt)
    view = load_ply(args.input)
    probs = infer_full_view(view, model, votes=args.votes, rng=args.seed)
    hard = (probs >= 0.5).astype(np.int8)
    out = PointView(view.positions, view.colors, hard, view.scene_id, view.view_id)
    save_ply(out, args.out, scalar=probs)
    print(f"{len(view)} points, {int(hard.sum())} predicted salient -> {args.out}")
    return EXIT_OK


_BLOCK_GROUPS = {
    "all": gradcheck.BLOCKS,
    "encoder": ("encoder",),
    "fab": ("fab",),
    "ppb": ("ppb_semantics", "ppb_multiscale"),
    "spb": ("spb",),
    "loss": ("loss",),
}


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(_BLOCK_GROUPS[args.block], seed=args.seed,
                            normalization=not args.no_norm)
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_bench(args) -> int:
    if args.config:
        model_cfg, _ = _read_config(args.config)
    else:
        model_cfg = ModelConfig()
    rng = np.random.default_rng(args.seed)
    feats = np.concatenate([rng.uniform(-1, 1, (args.batch, args.block_size, 3)),
                            rng.uniform(0, 1, (args.batch, args.block_size, 6))], axis=-1)
    labels = rng.integers(0, 2, (args.batch, args.block_size))
    model = SaliencyNet(model_cfg, seed=args.seed)
    model.train()
    rows = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        geo = plan_geometry(feats[..., :3], model_cfg)
        t1 = time.perf_counter()
        loss = ad.cross_entropy(model(feats, geo).logits, labels)
        t2 = time.perf_counter()
        loss.backward()
        t3 = time.perf_counter()
        rows.append((t1 - t0, t2 - t1, t3 - t2))
    geo_t, fwd_t, bwd_t = np.median(np.array(rows), axis=0)
    print(f"parameters {model.num_parameters()}  batch {args.batch} x {args.block_size} points")
    print(f"geometry {geo_t:.3f}s  forward {fwd_t:.3f}s  backward {bwd_t:.3f}s  (median of {args.repeats})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcsod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split-ratio", type=float, default=0.7)
    s.add_argument("--points", type=int, default=8192, help="points per view")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from DATA/train")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV run log")
    s.add_argument("--resume", help="checkpoint saved at an epoch boundary")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--print-every", type=int, default=10)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a split")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True, help="per-view + aggregate CSV")
    s.add_argument("--curve", help="threshold-curve CSV")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--votes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write a saliency-colored PLY")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--votes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of every block")
    s.add_argument("--block", default="all", choices=tuple(_BLOCK_GROUPS))
    s.add_argument("--no-norm", action="store_true", help="check with batch norm disabled")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time geometry, forward and backward on random blocks")
    s.add_argument("--config")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--block-size", type=int, default=4096)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pcsod {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError) as e:
        print(f"pcsod {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlyError, CheckpointError, OSError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"pcsod {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
