"""Run configuration, optimizers, and the train/eval drivers.

Configs are flat ``section.key = value`` text (see ``parse_run_config``);
every key mirrors a dataclass field so a config round-trips through the
checkpoint snapshot.  The optimizer is selectable: decoupled-weight-decay
Adam or momentum SGD, both under a cosine learning-rate schedule.  With a
fixed seed the whole run is deterministic, checkpoint bytes included.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import checkpoint
from .assign import LossWeights, detection_loss
from .autodiff import Tensor
from .dvpe import NormRange
from .memory import ego_compensate
from .model import (ModelConfig, ModelParams, decoder_forward, init_model,
                    update_memory, world_boxes)
from .simeval import (MetricsReport, Scene, SceneConfig, evaluate, generate_scene,
                      oracle_2d_proposals, rays_for_scene, render_all_features)


@dataclass
class OptimConfig:
    kind: str = "adamw"            # adamw | sgd
    lr: float = 1.0e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    weight_decay: float = 1.0e-4
    cosine: bool = True
    min_lr_ratio: float = 0.05
    warmup_steps: int = 100
    grad_clip: float = 1.0         # global norm; 0 disables


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    steps: int = 5000
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0            # 0 disables periodic eval
    eval_scenes: int = 8
    eval_seed: int = 9000
    proposal_jitter: float = 0.0
    proposal_fp_rate: float = 0.0
    proposal_fn_rate: float = 0.0
    proposal_confusion: float = 0.0


_SECTIONS = ("model", "scene", "loss", "optim")


def _parse_value(current, raw: str):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def parse_run_config(text: str) -> RunConfig:
    """Parse ``section.key = value`` lines ('#' starts a comment)."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        target = cfg
        parts = key.split(".")
        if parts[0] in _SECTIONS:
            target = getattr(cfg, parts[0])
            parts = parts[1:]
            if parts[0] == "norm" and len(parts) == 2:
                target = target.norm
                parts = parts[1:]
        if len(parts) != 1 or not hasattr(target, parts[0]):
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        name = parts[0]
        current = getattr(target, name)
        if isinstance(target, NormRange):
            # frozen dataclass: rebuild
            vals = {f.name: getattr(target, f.name) for f in fields(NormRange)}
            vals[name] = _parse_value(current, raw)
            for sec in _SECTIONS:
                holder = getattr(cfg, sec)
                if getattr(holder, "norm", None) is target:
                    holder.norm = NormRange(**vals)
        else:
            setattr(target, name, _parse_value(current, raw))
    return cfg


def run_config_to_text(cfg: RunConfig) -> str:
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, NormRange):
                for nf in fields(NormRange):
                    lines.append(f"{sec}.norm.{nf.name} = {getattr(v, nf.name)!r}")
            elif isinstance(v, tuple):
                lines.append(f"{sec}.{f.name} = " + ",".join(repr(x) for x in v))
            else:
                lines.append(f"{sec}.{f.name} = {v!r}" if isinstance(v, str) else f"{sec}.{f.name} = {v}")
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """AdamW or momentum SGD over named parameters, cosine schedule."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p in params.items()
        }

    def lr_at(self, t: int) -> float:
        cfg = self.cfg
        if cfg.warmup_steps and t < cfg.warmup_steps:
            return cfg.lr * (t + 1) / cfg.warmup_steps
        if not cfg.cosine:
            return cfg.lr
        frac = (t - cfg.warmup_steps) / max(1, self.total_steps - cfg.warmup_steps)
        frac = min(1.0, max(0.0, frac))
        lo = cfg.lr * cfg.min_lr_ratio
        return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def _clip(self) -> float:
        if not self.cfg.grad_clip:
            return 1.0
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if norm <= self.cfg.grad_clip or norm == 0.0:
            return 1.0
        return self.cfg.grad_clip / norm

    def step(self) -> float:
        cfg = self.cfg
        lr = self.lr_at(self.t)
        self.t += 1
        scale = self._clip()
        for name in self.params:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad * scale
            st = self.state[name]
            if cfg.kind == "adamw":
                st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * g
                st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * g * g
                mh = st["m"] / (1 - cfg.beta1**self.t)
                vh = st["v"] / (1 - cfg.beta2**self.t)
                p.data -= (lr * (mh / (np.sqrt(vh) + cfg.eps) + cfg.weight_decay * p.data)).astype(p.data.dtype)
            elif cfg.kind == "sgd":
                st["m"] = cfg.momentum * st["m"] + g
                p.data -= (lr * (st["m"] + cfg.weight_decay * p.data)).astype(p.data.dtype)
            else:
                raise ValueError(f"unknown optimizer {cfg.kind!r}")
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# train / eval drivers
# ---------------------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    loss: float
    l3d: float
    l3d_extra: float
    positive_pairs: int
    lr: float

    def line(self) -> str:
        return (f"step {self.step} loss {self.loss:.6f} l3d {self.l3d:.6f} "
                f"l3d_extra {self.l3d_extra:.6f} positive_pairs {self.positive_pairs} "
                f"lr {self.lr:.6g}")


def _check_finite(breakdown) -> None:
    for tag, val in (("total", float(breakdown.total.data)), ("l3d", breakdown.l3d),
                     ("l3d_extra", breakdown.l3d_extra)):
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite training loss term '{tag}' ({val})")


def _frame_roi_inputs(scene: Scene, frame: int, run: RunConfig, rng) -> list:
    out = []
    for view in range(len(scene.cams)):
        props = oracle_2d_proposals(scene, view, frame, rng, run.proposal_jitter,
                                    run.proposal_fp_rate, run.proposal_fn_rate,
                                    run.proposal_confusion)
        out.extend((p.feature, p.class_scores, view) for p in props)
    return out


def train(run: RunConfig, out_dir: str | None = None, resume: str | None = None,
          log=None) -> tuple[ModelParams, list[StepLog]]:
    """Stream synthetic scenes through the decoder and fit the parameters."""
    rng = np.random.default_rng(run.seed)
    run.model.feat_dim = run.scene.feat_dim
    run.model.roi_feat_dim = run.scene.feat_dim
    run.model.num_classes = run.scene.num_classes
    run.model.num_depths = run.scene.num_depths
    params = init_model(run.model, rng)
    named = params.named()
    opt = Optimizer(named, run.optim, run.steps)
    start_step = 0
    if resume:
        _, start_step = checkpoint.load_into(resume, named)

    scene = None
    rays = None
    frame_idx = 0
    queue = run.model.make_memory_queue()
    logs: list[StepLog] = []

    for step in range(start_step, run.steps):
        if scene is None or frame_idx >= len(scene.frames):
            scene = generate_scene(rng, run.scene)
            rays = rays_for_scene(scene)
            frame_idx = 0
            queue.clear()
        frame = scene.frames[frame_idx]
        feats = render_all_features(scene, frame_idx, rng)

        mem_view = None
        if run.model.use_temporal and run.model.use_memory and len(queue):
            mem_view = ego_compensate(queue, frame.ego, frame.timestamp)

        result = decoder_forward(params, feats, rays, mem_view, training=True)
        gts = scene.gt_in_ego(frame_idx)
        breakdown = detection_loss(result.layer_preds, gts, result.group_rows, run.loss)
        _check_finite(breakdown)
        opt.zero_grad()
        breakdown.total.backward()
        lr = opt.step()

        if run.model.use_temporal and run.model.use_memory:
            roi_inputs = _frame_roi_inputs(scene, frame_idx, run, rng)
            update_memory(params, queue, result, roi_inputs, scene.cams,
                          frame.ego, frame.timestamp)
        frame_idx += 1

        entry = StepLog(step=step, loss=float(breakdown.total.data), l3d=breakdown.l3d,
                        l3d_extra=breakdown.l3d_extra,
                        positive_pairs=breakdown.positive_pairs, lr=lr)
        logs.append(entry)
        if log is not None and (step % run.log_every == 0 or step == run.steps - 1):
            log(entry.line())

        if run.eval_every and (step + 1) % run.eval_every == 0 and log is not None:
            report = evaluate_model(params, run, run.eval_scenes, run.eval_seed)
            log(f"eval step {step + 1} mAP {report.mean_ap:.4f} "
                f"AP@2m {report.ap_per_threshold[2.0]:.4f}")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), params, run, run.steps)
        with open(os.path.join(out_dir, "train_log.txt"), "w") as f:
            f.write("\n".join(l.line() for l in logs) + "\n")
    return params, logs


def save_checkpoint(path: str, params: ModelParams, run: RunConfig, step: int) -> None:
    checkpoint.save(path, {n: t.data for n, t in params.named().items()},
                    run_config_to_text(run), step)


def load_checkpoint(path: str) -> tuple[ModelParams, RunConfig, int]:
    tensors, config_text, step = checkpoint.load(path)
    run = parse_run_config(config_text)
    params = init_model(run.model, np.random.default_rng(run.seed))
    checkpoint.load_into(path, params.named())
    return params, run, step


def predict_scene(params: ModelParams, run: RunConfig, scene: Scene,
                  noise_rng: np.random.Generator) -> list[list]:
    """Inference over a scene's frames; default query group only."""
    rays = rays_for_scene(scene)
    queue = params.cfg.make_memory_queue()
    preds_per_frame = []
    for fi, frame in enumerate(scene.frames):
        feats = render_all_features(scene, fi, noise_rng)
        mem_view = None
        if params.cfg.use_temporal and params.cfg.use_memory and len(queue):
            mem_view = ego_compensate(queue, frame.ego, frame.timestamp)
        result = decoder_forward(params, feats, rays, mem_view, training=False)
        preds_per_frame.append(world_boxes(result.layer_preds[-1]))
        if params.cfg.use_temporal and params.cfg.use_memory:
            roi_inputs = _frame_roi_inputs(scene, fi, run, noise_rng)
            update_memory(params, queue, result, roi_inputs, scene.cams,
                          frame.ego, frame.timestamp)
    return preds_per_frame


def evaluate_model(params: ModelParams, run: RunConfig, num_scenes: int,
                   seed: int, scenes: list[Scene] | None = None) -> MetricsReport:
    """Detection metrics over freshly generated (or given) eval scenes."""
    rng = np.random.default_rng(seed)
    all_preds, all_gts = [], []
    for s in range(num_scenes if scenes is None else len(scenes)):
        scene = generate_scene(rng, run.scene) if scenes is None else scenes[s]
        preds = predict_scene(params, run, scene, rng)
        all_preds.extend(preds)
        all_gts.extend(scene.gt_in_ego(fi) for fi in range(len(scene.frames)))
    return evaluate(all_preds, all_gts)
