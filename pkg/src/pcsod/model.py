"""Encoder-decoder saliency network for point blocks.

Shapes flow as (B, N, C) tensors; all neighborhood bookkeeping is computed
from coordinates up front (:func:`plan_geometry`) and passed to the blocks
as integer index arrays and constant weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, Module, SharedMLP, Tensor
from .data import parse_key_values
from .geometry import farthest_point_sample, interpolation_weights, knn_indices

LEVELS = 4


@dataclass(frozen=True)
class PpbConfig:
    K: tuple[int, ...]

    def __post_init__(self):
        K = tuple(int(k) for k in self.K)
        if len(K) != 4 or K[0] < 1 or any(b <= a for a, b in zip(K, K[1:])):
            raise ValueError(f"PPB needs 4 strictly increasing neighbor counts >= 1, got {K}")
        object.__setattr__(self, "K", K)


@dataclass(frozen=True)
class ModelConfig:
    k_enc: int = 32
    level_dims: tuple[int, ...] = (64, 128, 256, 512)
    fab_dims: tuple[int, ...] = (256, 128, 128)
    ppb_semantics: PpbConfig = field(default_factory=lambda: PpbConfig((1, 4, 9, 16)))
    ppb_multiscale: PpbConfig = field(default_factory=lambda: PpbConfig((1, 9, 25, 49)))
    reduction: str = "mean_max"
    spb_dim: int = 128
    head_dim: int = 64
    in_channels: int = 9

    def __post_init__(self):
        if len(self.level_dims) != LEVELS or len(self.fab_dims) != LEVELS - 1:
            raise ValueError("need 4 level widths and 3 aggregation widths")
        if self.reduction not in ad.REDUCTIONS:
            raise ValueError(f"reduction must be one of {ad.REDUCTIONS}")
        if self.k_enc < 1:
            raise ValueError("k_enc must be >= 1")

    @property
    def fc_dim(self) -> int:
        return self.fab_dims[-1]

    def to_text(self) -> str:
        rows = []
        for key, value in self.as_items():
            rows.append(f"{key}={value}")
        return "\n".join(rows) + "\n"

    def as_items(self):
        join = lambda xs: ",".join(str(x) for x in xs)  # noqa: E731
        return [
            ("k_enc", self.k_enc),
            ("level_dims", join(self.level_dims)),
            ("fab_dims", join(self.fab_dims)),
            ("ppb_semantics_k", join(self.ppb_semantics.K)),
            ("ppb_multiscale_k", join(self.ppb_multiscale.K)),
            ("reduction", self.reduction),
            ("spb_dim", self.spb_dim),
            ("head_dim", self.head_dim),
        ]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        ints = lambda s: tuple(int(x) for x in s.split(","))  # noqa: E731
        return cls(
            k_enc=int(kv["k_enc"]),
            level_dims=ints(kv["level_dims"]),
            fab_dims=ints(kv["fab_dims"]),
            ppb_semantics=PpbConfig(ints(kv["ppb_semantics_k"])),
            ppb_multiscale=PpbConfig(ints(kv["ppb_multiscale_k"])),
            reduction=kv["reduction"],
            spb_dim=int(kv["spb_dim"]),
            head_dim=int(kv["head_dim"]),
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text, MODEL_KEYS))


MODEL_KEYS = tuple(k for k, _ in ModelConfig().as_items())


# geometry --------------------------------------------------------------------

@dataclass
class BlockGeometry:
    """Index/weight tables for one batch of blocks; arrays carry a leading B axis."""

    positions: list[np.ndarray]          # level 0..4 coordinates, (B, N_l, 3)
    enc_group: list[np.ndarray]          # level 1..4: (B, N_l, k) indices into level l-1
    fab_up: list[tuple[np.ndarray, np.ndarray]]   # 3->2 ... : interpolation into level 3, 2, 1
    ppb_sem: list[np.ndarray]            # per-branch (B, N_4, k_b) into level 4
    ppb_ms: list[np.ndarray]             # per-branch (B, N_1, k_b) into level 1
    spb_sem: tuple[np.ndarray, np.ndarray]        # level 4 -> level 0
    spb_ms: tuple[np.ndarray, np.ndarray]         # level 1 -> level 0


def level_sizes(n: int) -> list[int]:
    if n % 4 ** LEVELS:
        raise ValueError(f"block size {n} must be divisible by {4 ** LEVELS}")
    return [n // 4 ** l for l in range(1, LEVELS + 1)]


def _stack(items):
    return np.stack(items, axis=0)


def plan_geometry(positions: np.ndarray, cfg: ModelConfig) -> BlockGeometry:
    """All sampling, grouping and interpolation tables for (B, N, 3) positions."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 2:
        positions = positions[None]
    B, N, _ = positions.shape
    sizes = level_sizes(N)
    for K, m, name in ((cfg.ppb_semantics.K, sizes[-1], "semantics"),
                       (cfg.ppb_multiscale.K, sizes[0], "multi-scale")):
        if max(K) > m:
            raise ValueError(f"{name} PPB needs {max(K)} neighbors but its level has {m} points")

    levels = [positions]
    groups = []
    for m in sizes:
        prev = levels[-1]
        sel = _stack([farthest_point_sample(prev[b], m).selected_indices for b in range(B)])
        cur = np.take_along_axis(prev, sel[..., None], axis=1)
        k = min(cfg.k_enc, prev.shape[1])
        groups.append(_stack([knn_indices(cur[b], prev[b], k)[0] for b in range(B)]))
        levels.append(cur)

    def interp(src, dst):
        pairs = [interpolation_weights(levels[src][b], levels[dst][b]) for b in range(B)]
        return _stack([p[0] for p in pairs]), _stack([p[1] for p in pairs])

    def branches(level, K):
        pts = levels[level]
        out = []
        for k in K:
            out.append(_stack([knn_indices(pts[b], pts[b], k)[0] for b in range(B)]))
        return out

    return BlockGeometry(
        positions=levels,
        enc_group=groups,
        fab_up=[interp(4, 3), interp(3, 2), interp(2, 1)],
        ppb_sem=branches(4, cfg.ppb_semantics.K),
        ppb_ms=branches(1, cfg.ppb_multiscale.K),
        spb_sem=interp(4, 0),
        spb_ms=interp(1, 0),
    )


def upsample(feat: Tensor, table: tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Inverse-distance interpolation of (B, M, C) features onto finer points."""
    idx, w = table
    nb = ad.gather(feat, idx)
    return ad.sum_(ad.mul(nb, w[..., None].astype(feat.dtype)), axis=2)


def relative_embedding_input(center: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Per-neighbor geometric descriptor [x_i, x_ij, x_i - x_ij, |x_i - x_ij|] (10 values).

    ``center`` is (..., 3) and ``neighbors`` is (..., k, 3).
    """
    c = np.broadcast_to(center[..., None, :], neighbors.shape)
    diff = c - neighbors
    dist = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))
    return np.concatenate([c, neighbors, diff, dist], axis=-1)


# blocks ------------------------------------------------------------------------

class SetAbstraction(Module):
    """Downsampled centers, k-NN groups, relative xyz + features, shared MLP, max."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.mlp = SharedMLP(MlpSpec.of(c_in + 3, c_out, c_out), rng, dtype)

    def __call__(self, feats: Tensor, prev_pos, cur_pos, group) -> Tensor:
        rel = _gather_np(prev_pos, group) - cur_pos[:, :, None, :]
        nb = ad.gather(feats, group)
        x = ad.concat([Tensor(rel.astype(feats.dtype)), nb], axis=-1)
        return ad.max_(self.mlp(x), axis=2)


def _gather_np(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    B = arr.shape[0]
    return arr[np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1)), idx]


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        widths = (cfg.in_channels,) + tuple(cfg.level_dims)
        self.levels = [SetAbstraction(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, feats: Tensor, geo: BlockGeometry) -> list[Tensor]:
        out = []
        for l, sa in enumerate(self.levels):
            feats = sa(feats, geo.positions[l], geo.positions[l + 1], geo.enc_group[l])
            out.append(feats)
        return out


class FeatureAggregation(Module):
    """Top-down: upsample, concatenate with the next lower level, fuse by MLP."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        dims = cfg.level_dims
        self.fuse = []
        c_high = dims[3]
        for lower, width in zip((dims[2], dims[1], dims[0]), cfg.fab_dims):
            self.fuse.append(SharedMLP(MlpSpec.of(c_high + lower, width), rng, dtype))
            c_high = width

    def __call__(self, levels: list[Tensor], geo: BlockGeometry) -> Tensor:
        x = levels[3]
        for stage, lower in enumerate((levels[2], levels[1], levels[0])):
            x = self.fuse[stage](ad.concat([upsample(x, geo.fab_up[stage]), lower], axis=-1))
        return x


class PerceptionBranch(Module):
    def __init__(self, channels: int, reduction: str, rng, dtype=np.float32):
        half = max(1, channels // 2)
        self.reduction = reduction
        self.embed = SharedMLP(MlpSpec.of(10, half, half), rng, dtype)
        width = half + channels
        self.attention = ad.AttentiveScores(width, rng, dtype) if reduction == "attentive" else None
        self.post = SharedMLP(MlpSpec.of(ad.reduced_width(width, reduction), channels), rng, dtype)

    def __call__(self, feats: Tensor, pos: np.ndarray, group: np.ndarray) -> Tensor:
        desc = relative_embedding_input(pos, _gather_np(pos, group))
        e = self.embed(Tensor(desc.astype(feats.dtype)))
        B, M, k, _ = e.shape
        center = ad.expand(ad.reshape(feats, (B, M, 1, feats.shape[-1])), (B, M, k, feats.shape[-1]))
        a = ad.concat([e, center], axis=-1)
        return self.post(ad.reduce(a, self.reduction, self.attention))


class PointPerceptionBlock(Module):
    """Four k-NN branches of increasing reach fused by MLP, plus an MLP skip branch.

    Output width equals input width.
    """

    def __init__(self, channels: int, cfg: PpbConfig, reduction: str, rng, dtype=np.float32):
        self.K = cfg.K
        self.branches = [PerceptionBranch(channels, reduction, rng, dtype) for _ in cfg.K]
        self.fuse = SharedMLP(MlpSpec.of(4 * channels, channels), rng, dtype)
        self.skip = SharedMLP(MlpSpec.of(channels, channels), rng, dtype)

    def __call__(self, feats: Tensor, pos: np.ndarray, groups: list[np.ndarray]) -> Tensor:
        if max(self.K) > feats.shape[1]:
            raise ValueError(f"PPB needs {max(self.K)} neighbors, level has {feats.shape[1]} points")
        outs = [br(feats, pos, g) for br, g in zip(self.branches, groups)]
        return ad.add(self.fuse(ad.concat(outs, axis=-1)), self.skip(feats))


class SaliencyPerception(Module):
    """Upsample global semantics and multi-scale features to every point, gate the
    multi-scale path by a channel softmax, fuse, and predict two logits."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        d = cfg.spb_dim
        self.sem = SharedMLP(MlpSpec.of(cfg.level_dims[3], d), rng, dtype)
        # the gated path ends before the rectifier so the softmax sees signed logits
        self.ms = SharedMLP(MlpSpec((cfg.fc_dim, d), (True,), (False,)), rng, dtype)
        self.fuse = SharedMLP(MlpSpec.of(2 * d, d), rng, dtype)
        self.head = SharedMLP(MlpSpec.of(d, cfg.head_dim, 2, head=True), rng, dtype)

    def enhanced(self, f_s: Tensor, f_m: Tensor, geo: BlockGeometry) -> Tensor:
        s = self.sem(upsample(f_s, geo.spb_sem))
        m = ad.softmax(self.ms(upsample(f_m, geo.spb_ms)), axis=-1)
        return self.fuse(ad.concat([s, m], axis=-1))

    def __call__(self, f_s: Tensor, f_m: Tensor, geo: BlockGeometry) -> Tensor:
        return self.head(self.enhanced(f_s, f_m, geo))


@dataclass
class ForwardResult:
    logits: Tensor
    levels: list[Tensor]
    f_c: Tensor
    f_s: Tensor
    f_m: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        """Salient-class probability per point, (B, N)."""
        z = self.logits.data.astype(np.float64)
        return 1.0 / (1.0 + np.exp(z[..., 0] - z[..., 1]))


class SaliencyNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.fab = FeatureAggregation(cfg, rng, dtype)
        self.ppb_semantics = PointPerceptionBlock(cfg.level_dims[3], cfg.ppb_semantics,
                                                  cfg.reduction, rng, dtype)
        self.ppb_multiscale = PointPerceptionBlock(cfg.fc_dim, cfg.ppb_multiscale,
                                                   cfg.reduction, rng, dtype)
        self.spb = SaliencyPerception(cfg, rng, dtype)

    @property
    def dtype(self):
        return self.spb.head.weights[0].dtype

    def __call__(self, features, geo: BlockGeometry) -> ForwardResult:
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=self.dtype))
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        levels = self.encoder(x, geo)
        f_c = self.fab(levels, geo)
        f_s = self.ppb_semantics(levels[3], geo.positions[4], geo.ppb_sem)
        f_m = self.ppb_multiscale(f_c, geo.positions[1], geo.ppb_ms)
        logits = self.spb(f_s, f_m, geo)
        return ForwardResult(logits, levels, f_c, f_s, f_m)

    def forward_block(self, features: np.ndarray, positions: np.ndarray | None = None) -> ForwardResult:
        """Convenience: plan geometry from (B, N, 9) features (centered xyz) and run."""
        features = np.asarray(features)
        if features.ndim == 2:
            features = features[None]
        pos = features[..., :3] if positions is None else positions
        return self(features, plan_geometry(pos, self.cfg))

    def predict(self, features: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
        with ad.no_grad():
            return self.forward_block(features, positions).probabilities


def with_reduction(cfg: ModelConfig, reduction: str) -> ModelConfig:
    return replace(cfg, reduction=reduction)
