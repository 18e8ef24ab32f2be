"""Finite-difference verification of every parameterized block at float64.

Each block is wrapped as ``f = sum(out * R)`` for a fixed random ``R``;
analytic gradients from one backward pass are compared with central
differences on a sample of entries from every parameter and input tensor.
The error of one tensor is ``|a - n| / max(|a|, |n|, floor)`` over its
sampled entries (2-norms), where ``floor`` is the rounding noise of the
numeric estimate; a block's error is the worst tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import knn_indices
from .model import (
    Encoder,
    FeatureAggregation,
    ModelConfig,
    PointPerceptionBlock,
    PpbConfig,
    SaliencyPerception,
    level_sizes,
    plan_geometry,
)

BLOCKS = ("encoder", "fab", "ppb_semantics", "ppb_multiscale", "spb", "loss")
TOLERANCE = 1e-5
STEP = 1e-4


@dataclass
class CheckResult:
    block: str
    max_rel_error: float
    tensors_checked: int
    worst_tensor: str
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _small_config(reduction: str = "mean_max") -> ModelConfig:
    return ModelConfig(
        k_enc=8, level_dims=(8, 12, 16, 20), fab_dims=(16, 12, 10),
        ppb_semantics=PpbConfig((1, 2, 3, 4)), ppb_multiscale=PpbConfig((1, 9, 25, 49)),
        reduction=reduction, spb_dim=8, head_dim=6,
    )


def _branches(fn) -> tuple[float, list[np.ndarray]]:
    with ad.record_branches() as taken:
        value = fn().item()
    return value, taken


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_function(
    fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    rng: np.random.Generator,
    entries: int = 6,
    step: float = STEP,
) -> tuple[float, str, int]:
    """Worst relative error over ``tensors`` for the scalar produced by ``fn``.

    An entry whose +-step probes land on a different ReLU/max piece than the
    unperturbed point has no valid central difference; it is skipped and
    another entry is drawn. Returns (error, worst tensor, skipped entries).
    """
    for t in tensors.values():
        t.grad = None
    fn().backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in tensors.items()}
    worst, worst_name, skipped = 0.0, "", 0
    with ad.no_grad():
        f0, base = _branches(fn)
        # differences below this are float64 rounding in the numeric estimate
        floor = 100 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / step
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            g = np.abs(analytic[name].reshape(-1))
            # entries with a non-negligible gradient first: a relative comparison
            # of near-zero values only measures the truncation error
            big = g >= 1e-3 * g.max()
            order = np.concatenate([rng.permutation(np.flatnonzero(big)),
                                    rng.permutation(np.flatnonzero(~big))])
            a, num = [], []
            for i in order:
                if len(a) == entries:
                    break
                orig = flat[i]
                flat[i] = orig + step
                up, b_up = _branches(fn)
                flat[i] = orig - step
                down, b_down = _branches(fn)
                flat[i] = orig
                if not (_same(base, b_up) and _same(base, b_down)):
                    skipped += 1
                    continue
                a.append(analytic[name].reshape(-1)[i])
                num.append((up - down) / (2 * step))
            a, num = np.array(a), np.array(num)
            scale = max(np.linalg.norm(a), np.linalg.norm(num), floor)
            err = float(np.linalg.norm(a - num) / scale) if a.size else 0.0
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name, skipped


def _projection(rng, shape):
    return rng.normal(size=shape)


def _inputs(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _blob(rng, B, n):
    """Random positions with well-separated distances (no near ties)."""
    return rng.uniform(-1, 1, size=(B, n, 3))


def check_block(block: str, seed: int = 0, reduction: str = "mean_max",
                normalization: bool = True) -> CheckResult:
    """Check one block; ``normalization=False`` turns every BatchNorm into an identity."""
    if not normalization:
        with ad.normalization_disabled():
            return check_block(block, seed, reduction)
    rng = np.random.default_rng(seed)
    cfg = _small_config(reduction)
    B, N = 2, 1024
    sizes = level_sizes(N)
    pos = _blob(rng, B, N)
    dt = np.float64

    if block == "loss":
        logits = _inputs(rng, (B, 64, 2))
        labels = rng.integers(0, 2, size=(B, 64))
        fn = lambda: ad.cross_entropy(logits, labels)  # noqa: E731
        tensors = {"logits": logits}
    else:
        geo = plan_geometry(pos, cfg)
        if block == "encoder":
            mod = Encoder(cfg, rng, dt)
            x = _inputs(rng, (B, N, cfg.in_channels))
            R = [_projection(rng, (B, n, c)) for n, c in zip(sizes, cfg.level_dims)]

            def fn():
                outs = mod(x, geo)
                total = ad.sum_(ad.mul(outs[0], R[0]))
                for o, r in zip(outs[1:], R[1:]):
                    total = ad.add(total, ad.sum_(ad.mul(o, r)))
                return total
        elif block == "fab":
            mod = FeatureAggregation(cfg, rng, dt)
            levels = [_inputs(rng, (B, n, c)) for n, c in zip(sizes, cfg.level_dims)]
            R = _projection(rng, (B, sizes[0], cfg.fc_dim))
            x = levels
            fn = lambda: ad.sum_(ad.mul(mod(levels, geo), R))  # noqa: E731
        elif block in ("ppb_semantics", "ppb_multiscale"):
            K = ModelConfig().ppb_semantics if block == "ppb_semantics" else cfg.ppb_multiscale
            M, C = (16, 12) if block == "ppb_semantics" else (64, 10)
            p = _blob(rng, B, M)
            groups = [np.stack([knn_indices(p[b], p[b], k)[0] for b in range(B)]) for k in K.K]
            mod = PointPerceptionBlock(C, K, reduction, rng, dt)
            x = _inputs(rng, (B, M, C))
            R = _projection(rng, (B, M, C))
            fn = lambda: ad.sum_(ad.mul(mod(x, p, groups), R))  # noqa: E731
        elif block == "spb":
            mod = SaliencyPerception(cfg, rng, dt)
            f_s = _inputs(rng, (B, sizes[3], cfg.level_dims[3]))
            f_m = _inputs(rng, (B, sizes[0], cfg.fc_dim))
            labels = rng.integers(0, 2, size=(B, N))
            x = [f_s, f_m]
            fn = lambda: ad.cross_entropy(mod(f_s, f_m, geo), labels)  # noqa: E731
        else:
            raise ValueError(f"unknown block {block!r}; choose from {BLOCKS}")
        mod.train()
        tensors = dict(mod.named_parameters())
        xs = x if isinstance(x, list) else [x]
        for i, t in enumerate(xs):
            tensors[f"input{i}"] = t
    err, name, skipped = check_function(fn, tensors, rng)
    return CheckResult(block, err, len(tensors), name, skipped)


def run(blocks=BLOCKS, seed: int = 0, normalization: bool = True) -> list[CheckResult]:
    return [check_block(b, seed, normalization=normalization) for b in blocks]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'block':<16}{'tensors':>8}{'max rel err':>14}{'skipped':>9}  status  worst tensor"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.block:<16}{r.tensors_checked:>8}{r.max_rel_error:>14.3e}{r.skipped:>9}  {status:<6}  {r.worst_tensor}")
    return "\n".join(lines)
