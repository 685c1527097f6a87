"""Command-line entry points: train, eval, bench, viz."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint
from .memory import ego_compensate
from .model import decoder_forward
from .simeval import bench_attention, bench_report, rays_for_scene, render_all_features, scene_from_text, scene_to_text
from .train import (RunConfig, evaluate_model, load_checkpoint, parse_run_config,
                    predict_scene, run_config_to_text, train)


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_run_config(f.read())


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.steps is not None:
        run.steps = args.steps
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.txt"), "w") as f:
        f.write(run_config_to_text(run))
    train(run, out_dir=args.out, resume=args.resume, log=print)
    print(f"checkpoint written to {os.path.join(args.out, 'ckpt_final.bin')}")
    return 0


def _load_scene_dir(path: str):
    scenes = []
    for name in sorted(os.listdir(path)):
        if name.endswith(".scene"):
            with open(os.path.join(path, name)) as f:
                scenes.append(scene_from_text(f.read()))
    if not scenes:
        raise SystemExit(f"no .scene files under {path}")
    return scenes


def cmd_eval(args) -> int:
    params, run, step = load_checkpoint(args.ckpt)
    scenes = None
    if args.scenes:
        scenes = _load_scene_dir(args.scenes)
    report = evaluate_model(params, run, args.gen, args.gen_seed, scenes=scenes)
    text = "\n".join(report.lines()) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    views = [int(v) for v in args.views.split(",")]
    rng = np.random.default_rng(args.seed)
    rows = bench_attention(views, args.tokens, args.queries, args.trials, rng)
    text = bench_report(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(text, end="")
    return 0


def cmd_viz(args) -> int:
    from .viz import attention_heatmap, ensure_dir, wedge_plot

    params, run, _ = load_checkpoint(args.ckpt)
    with open(args.scene) as f:
        scene = scene_from_text(f.read())
    ensure_dir(args.out)

    wedge_plot(params, args.layer, os.path.join(args.out, f"wedges_layer{args.layer}.svg"))

    rays = rays_for_scene(scene)
    rng = np.random.default_rng(0)
    feats = render_all_features(scene, 0, rng)
    capture: dict = {}
    result = decoder_forward(params, feats, rays, None, training=False, capture=capture)
    attention_heatmap(result, args.layer, args.query, args.head, len(scene.cams),
                      scene.cams[0].h_feat, scene.cams[0].w_feat,
                      os.path.join(args.out, f"attn_q{args.query}_l{args.layer}_h{args.head}.svg"))
    print(f"plots written under {args.out}")
    return 0


def cmd_gen_scenes(args) -> int:
    """Write synthetic scene files for offline evaluation."""
    from .simeval import SceneConfig, generate_scene

    run = _load_run_config(args.config)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(rng, run.scene)
        with open(os.path.join(args.out, f"scene_{i:04d}.scene"), "w") as f:
            f.write(scene_to_text(scene))
    print(f"{args.count} scenes written under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dividedview",
                                description="Divided-view 3D detection on synthetic rigs")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on streamed synthetic scenes")
    t.add_argument("--config", default=None, help="run config path (key = value text)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", default=None, help="directory of .scene files")
    e.add_argument("--gen", type=int, default=8, help="scenes to synthesize when --scenes is absent")
    e.add_argument("--gen-seed", type=int, default=9000)
    e.add_argument("--out", default=None, help="metrics report path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="global vs divided attention cost")
    b.add_argument("--views", default="4,6,8")
    b.add_argument("--tokens", type=int, default=512)
    b.add_argument("--queries", type=int, default=128)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz", help="wedge layout and attention heatmaps")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--scene", required=True, help="scene file")
    v.add_argument("--layer", type=int, default=0)
    v.add_argument("--head", type=int, default=0)
    v.add_argument("--query", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)

    g = sub.add_parser("gen-scenes", help="write synthetic scene files")
    g.add_argument("--config", default=None)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int, default=9000)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
