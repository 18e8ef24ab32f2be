"""Training loop, checkpoints and full-view voting inference."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, AdamState, read_checkpoint, write_checkpoint
from .data import (
    BLOCK_SIZE,
    PointView,
    augment_rotation,
    encode_input,
    parse_key_values,
    plan_chunks,
    sample_training_block,
)
from .model import MODEL_KEYS, ModelConfig, SaliencyNet, level_sizes, plan_geometry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    block_size: int = BLOCK_SIZE
    seed: int = 0
    votes: int = 3
    checkpoint_every: int = 0
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.votes < 1:
            raise ValueError("epochs, batch_size and votes must be positive")
        level_sizes(self.block_size)
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            raw = kv[f.name]
            out[f.name] = float(raw) if f.type in ("float", float) else int(raw)
        return cls(**out)


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
CONFIG_KEYS = MODEL_KEYS + TRAIN_KEYS


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Flat key=value file holding every model and training key (no extras)."""
    kv = parse_key_values(text, CONFIG_KEYS)
    return ModelConfig.from_mapping(kv), TrainConfig.from_mapping(kv)


def config_text(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    return model_cfg.to_text() + train_cfg.to_text()


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def record_step(self, step: int, epoch: int, loss: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step counter must increase")
        self.steps.append({"step": step, "epoch": epoch, "loss": loss, "time": time.time()})

    def record_eval(self, step: int, epoch: int, metrics: dict) -> None:
        self.evals.append({"step": step, "epoch": epoch, **metrics})

    @property
    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def to_csv(self, path) -> None:
        metric_keys = sorted({k for e in self.evals for k in e} - {"step", "epoch"})
        by_step = {e["step"]: e for e in self.evals}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "epoch"] + metric_keys)
            for s in self.steps:
                e = by_step.get(s["step"], {})
                w.writerow([s["step"], repr(s["loss"]), s["epoch"]] + [e.get(k, "") for k in metric_keys])


@dataclass
class TrainResult:
    model: SaliencyNet
    optimizer: Adam
    log: RunLog


def make_batch(views: list[PointView], order: np.ndarray, block_size: int,
               rng: np.random.Generator, augment: bool = True):
    """Features (B, n, 9) and labels (B, n) for the views at ``order``."""
    feats, labels = [], []
    for i in order:
        view = views[i]
        if augment:
            view = augment_rotation(view, rng)
        idx = sample_training_block(view, block_size, rng)
        feats.append(encode_input(view).features[idx])
        labels.append(view.labels[idx])
    return np.stack(feats), np.stack(labels)


def train(
    views: list[PointView],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    *,
    resume: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, float, SaliencyNet], bool] | None = None,
    augment: bool = True,
) -> TrainResult:
    """Adam on per-point cross-entropy over randomly drawn blocks.

    An epoch visits every view once in a random order, in batches of
    ``batch_size`` blocks. All randomness for epoch ``e`` comes from a
    generator seeded with ``(seed, e)``, so a run resumed from an
    epoch-boundary checkpoint continues exactly as the uninterrupted run.
    ``on_step`` may return True to stop early.
    """
    if not views:
        raise ValueError("training needs at least one view")
    if not all(v.has_labels for v in views):
        raise ValueError("train views require labels")
    model_cfg = model_cfg or ModelConfig()
    model = SaliencyNet(model_cfg, seed=cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(views) / cfg.batch_size)
    start_epoch = 0
    if resume is not None:
        ck = read_checkpoint(resume)
        model.load_state_dict(ck.tensors)
        if ck.adam is not None:
            opt.state = ck.adam
        if opt.state.step % steps_per_epoch:
            raise ValueError("can only resume from an epoch boundary")
        start_epoch = opt.state.step // steps_per_epoch

    runlog = RunLog()
    model.train()
    stop = False
    for epoch in range(start_epoch, cfg.epochs):
        opt.state.lr = cfg.lr * cfg.lr_decay ** epoch
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(views))
        for s in range(0, len(views), cfg.batch_size):
            feats, labels = make_batch(views, order[s:s + cfg.batch_size], cfg.block_size, rng, augment)
            geo = plan_geometry(feats[..., :3], model_cfg)
            out = model(feats, geo)
            loss = ad.cross_entropy(out.logits, labels)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step = opt.state.step
            runlog.record_step(step, epoch, loss.item())
            if on_step is not None and on_step(step, loss.item(), model):
                stop = True
            if max_steps is not None and step >= max_steps:
                stop = True
            if stop:
                break
        if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_save(checkpoint_path, model, opt, cfg)
        if stop:
            break
    model.eval()
    return TrainResult(model, opt, runlog)


def infer_full_view(view: PointView, model, votes: int = 3, rng=None,
                    block_size: int = BLOCK_SIZE, batch: int = 4) -> np.ndarray:
    """Salient probability for every point of ``view``.

    Each vote covers the view with a fresh random partition into blocks;
    points visited twice within a vote are averaged, and the final value is
    the mean over votes. ``model`` only needs ``predict(features (B, n, 9))``.
    """
    rng = np.random.default_rng(rng)
    feats = encode_input(view).features
    n = len(view)
    total = np.zeros(n)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        for _ in range(votes):
            plan = plan_chunks(view, block_size, rng)
            acc = np.zeros(n)
            for s in range(0, len(plan.blocks), batch):
                idx = np.stack(plan.blocks[s:s + batch])
                probs = np.asarray(model.predict(feats[idx]), dtype=np.float64)
                acc += np.bincount(idx.ravel(), weights=probs.ravel(), minlength=n)
            total += acc / plan.coverage
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    return total / votes


def checkpoint_save(path, model: SaliencyNet, optimizer: Adam | None = None,
                    train_cfg: TrainConfig | None = None) -> None:
    text = model.cfg.to_text() + (train_cfg.to_text() if train_cfg else "")
    write_checkpoint(path, model.state_dict(), text, optimizer.state if optimizer else None)


def checkpoint_load(path, expected: ModelConfig | None = None) -> tuple[SaliencyNet, AdamState | None]:
    """Rebuild the model stored in ``path``; with ``expected`` the stored model
    configuration must match it."""
    ck = read_checkpoint(path)
    kv = parse_key_values(ck.config_text, CONFIG_KEYS, required=MODEL_KEYS)
    cfg = ModelConfig.from_mapping(kv)
    if expected is not None and expected != cfg:
        raise ValueError("checkpoint was trained with a different model configuration")
    model = SaliencyNet(cfg)
    model.load_state_dict(ck.tensors)
    model.eval()
    return model, ck.adam
