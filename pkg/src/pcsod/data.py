"""Point-cloud views: file I/O, input encoding, sampling, augmentation, synthetic scenes."""
from __future__ import annotations

import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import centroid

BLOCK_SIZE = 4096


class PlyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointView:
    """One fixed-viewpoint capture: positions, colors in [0, 1], optional 0/1 labels."""

    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None
    scene_id: str = ""
    view_id: str = ""

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        n = pos.shape[0]
        if n < 1:
            raise ValueError("a view needs at least one point")
        if col.shape[0] != n:
            raise ValueError(f"{col.shape[0]} colors for {n} points")
        if not np.isfinite(pos).all():
            raise ValueError("positions must be finite")
        if col.min() < 0.0 or col.max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")
        lab = None
        if self.labels is not None:
            lab = np.asarray(self.labels).reshape(-1)
            if lab.shape[0] != n:
                raise ValueError(f"{lab.shape[0]} labels for {n} points")
            if not np.isin(lab, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
            lab = lab.astype(np.int8)
            lab.flags.writeable = False
        pos.flags.writeable = False
        col.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> "PointView":
        lab = None if self.labels is None else self.labels[index]
        return PointView(self.positions[index], self.colors[index], lab, self.scene_id, self.view_id)


# PLY -----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = {"ascii": None, "binary_little_endian": "<", "binary_big_endian": ">"}


def _parse_header(f) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    if f.readline().strip() != b"ply":
        raise PlyError("malformed header: missing 'ply' magic line")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = f.readline()
        if not raw:
            raise PlyError("malformed header: no end_header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3 or parts[1] not in _FORMATS:
                raise PlyError(f"malformed header: unsupported format line {raw!r}")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"malformed header: bad element line {raw!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError("malformed header: property before any element")
            name = elements[-1][0]
            if len(parts) >= 2 and parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise PlyError(f"malformed header: bad property in element {name}: {raw!r}")
        else:
            raise PlyError(f"malformed header: unexpected keyword {key!r}")
    if fmt is None:
        raise PlyError("malformed header: missing format line")
    return fmt, elements


def _read_element(f, fmt: str, name: str, count: int, props) -> np.ndarray:
    if any(t == "list" for _, t in props):
        raise PlyError(f"element {name}: list properties are not supported before vertex data")
    if fmt == "ascii":
        rows = []
        for i in range(count):
            line = f.readline()
            if not line:
                raise PlyError(f"truncated payload in element {name}: {i} of {count} rows")
            vals = line.split()
            if len(vals) < len(props):
                raise PlyError(f"element {name}: row {i} has {len(vals)} values, expected {len(props)}")
            rows.append(vals[:len(props)])
        table = np.array(rows, dtype=np.float64).reshape(count, len(props))
        dtype = np.dtype([(p, np.float64) for p, _ in props])
        out = np.empty(count, dtype=dtype)
        for j, (p, _) in enumerate(props):
            out[p] = table[:, j]
        return out
    dtype = np.dtype([(p, _FORMATS[fmt] + t) for p, t in props])
    need = dtype.itemsize * count
    buf = f.read(need)
    if len(buf) < need:
        raise PlyError(f"truncated payload in element {name}: {len(buf)} of {need} bytes")
    return np.frombuffer(buf, dtype=dtype, count=count)


def load_ply(path) -> PointView:
    """Read a PLY vertex element with x, y, z, red, green, blue and optional label.

    Integer colors are scaled by 1/255; any nonzero label becomes 1.
    """
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = None
        for name, count, props in elements:
            data = _read_element(f, fmt, name, count, props)
            if name == "vertex":
                vertex, vprops = data, dict(props)
                break
    if vertex is None:
        raise PlyError("missing element vertex")
    for req in ("x", "y", "z", "red", "green", "blue"):
        if req not in vprops:
            raise PlyError(f"missing property {req}")
    if len(vertex) < 1:
        raise PlyError("element vertex is empty")
    pos = np.stack([vertex[a].astype(np.float64) for a in "xyz"], axis=1)
    col = np.stack([vertex[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1)
    if vprops["red"] in ("u1", "i1", "u2", "i2", "u4", "i4") or (fmt == "ascii" and col.max() > 1.0):
        col = col / 255.0
    if col.min() < 0 or col.max() > 1:
        raise PlyError("element vertex: colors out of range")
    labels = None
    if "label" in vprops:
        labels = (vertex["label"] > 0).astype(np.int8)
    return PointView(pos, col, labels, scene_id=path.parent.name, view_id=path.stem)


# colormap anchors for scalar export, low -> high
_HEAT = np.array([
    [0.0, 0.0, 0.5], [0.0, 0.0, 1.0], [0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0], [1.0, 0.0, 0.0],
])


def heat_colors(scalar) -> np.ndarray:
    s = np.asarray(scalar, dtype=np.float64).reshape(-1)
    if not np.isfinite(s).all() or s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
        raise ValueError("scalar out of range")
    pos = s * (len(_HEAT) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(_HEAT) - 2)
    frac = (pos - lo)[:, None]
    return _HEAT[lo] * (1 - frac) + _HEAT[lo + 1] * frac


def save_ply(view: PointView, path, format: str = "binary", scalar=None) -> None:
    """Write ``view``; with ``scalar`` (values in [0, 1]) colors become a heat map
    and the scalar is also stored as a float ``saliency`` property."""
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    n = len(view)
    colors = view.colors
    if scalar is not None:
        scalar = np.asarray(scalar, dtype=np.float64).reshape(-1)
        if scalar.shape[0] != n:
            raise ValueError(f"{scalar.shape[0]} scalars for {n} points")
        colors = heat_colors(scalar)
    exact32 = np.array_equal(view.positions.astype(np.float32).astype(np.float64), view.positions)
    ptype, pcode = ("float", "f4") if exact32 else ("double", "f8")
    fields = [("x", pcode), ("y", pcode), ("z", pcode), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if view.labels is not None:
        fields.append(("label", "u1"))
    if scalar is not None:
        fields.append(("saliency", "f4"))
    rec = np.empty(n, dtype=np.dtype([(k, "<" + t) for k, t in fields]))
    for j, a in enumerate("xyz"):
        rec[a] = view.positions[:, j]
    rgb = np.rint(colors * 255.0).astype(np.uint8)
    for j, c in enumerate(("red", "green", "blue")):
        rec[c] = rgb[:, j]
    if view.labels is not None:
        rec["label"] = view.labels
    if scalar is not None:
        rec["saliency"] = scalar

    fmt_line = "ascii 1.0" if format == "ascii" else "binary_little_endian 1.0"
    names = {"f4": "float", "f8": "double", "u1": "uchar"}
    header = ["ply", f"format {fmt_line}", f"element vertex {n}"]
    header += [f"property {ptype if k in ('x', 'y', 'z') else names[t]} {k}" for k, t in fields]
    header.append("end_header")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if format == "binary":
                f.write(rec.tobytes())
            else:
                for row in rec:
                    vals = []
                    for (k, t), v in zip(fields, row):
                        vals.append(repr(float(v)) if t.startswith("f") else str(int(v)))
                    f.write((" ".join(vals) + "\n").encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# input encoding, sampling, augmentation ----------------------------------------

@dataclass(frozen=True, eq=False)
class EncodedInput:
    """N x 9 features: centered xyz, RGB, bounding-box-normalized xyz."""

    features: np.ndarray

    @property
    def centered(self) -> np.ndarray:
        return self.features[:, 0:3]

    @property
    def rgb(self) -> np.ndarray:
        return self.features[:, 3:6]

    @property
    def normalized(self) -> np.ndarray:
        return self.features[:, 6:9]


def encode_input(view: PointView) -> EncodedInput:
    pos = view.positions
    centered = pos - centroid(pos)
    lo = pos.min(axis=0)
    extent = pos.max(axis=0) - lo
    safe = np.where(extent > 0, extent, 1.0)
    normalized = np.where(extent > 0, (pos - lo) / safe, 0.5)
    feats = np.concatenate([centered, view.colors, np.clip(normalized, 0.0, 1.0)], axis=1)
    return EncodedInput(feats)


def sample_training_block(view: PointView, n: int = BLOCK_SIZE, rng=None) -> np.ndarray:
    """``n`` indices drawn uniformly with replacement."""
    rng = np.random.default_rng(rng)
    return rng.integers(0, len(view), size=n)


@dataclass(frozen=True, eq=False)
class ChunkPlan:
    blocks: list[np.ndarray]
    coverage: np.ndarray


def plan_chunks(view: PointView, n: int = BLOCK_SIZE, rng=None) -> ChunkPlan:
    """Cover every point of ``view`` once with blocks of exactly ``n`` indices.

    The final short block is topped up with indices already covered, so
    some points are visited more than once (see ``coverage``).
    """
    rng = np.random.default_rng(rng)
    N = len(view)
    perm = rng.permutation(N)
    blocks = [perm[s:s + n] for s in range(0, N, n)]
    last = blocks[-1]
    if len(last) < n:
        start = N - len(last)
        pool = perm[:start] if start > 0 else last
        pad = rng.choice(pool, size=n - len(last), replace=(n - len(last)) > len(pool))
        blocks[-1] = np.concatenate([last, pad])
    coverage = np.bincount(np.concatenate(blocks), minlength=N)
    return ChunkPlan(blocks, coverage)


def rotate_z(positions: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = np.array(positions, dtype=np.float64, copy=True)
    x, y = positions[:, 0], positions[:, 1]
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out


def augment_rotation(view: PointView, rng=None, angle: float | None = None) -> PointView:
    """Rotate about the vertical axis by ``angle`` (uniform in [0, 2*pi) if omitted)."""
    if angle is None:
        angle = np.random.default_rng(rng).uniform(0.0, 2.0 * math.pi)
    return PointView(rotate_z(view.positions, angle), view.colors, view.labels,
                     view.scene_id, view.view_id)


# synthetic scenes ------------------------------------------------------------

OBJECT_KINDS = ("sphere", "box", "torus", "composite")
RECIPE_KEYS = ("seed", "object_kind", "fraction", "clutter", "illumination")


@dataclass(frozen=True)
class SceneRecipe:
    seed: int
    object_kind: str = "sphere"
    fraction: float = 0.1
    clutter: int = 4
    illumination: float = 1.0

    def __post_init__(self):
        if self.object_kind not in OBJECT_KINDS:
            raise ValueError(f"object_kind must be one of {OBJECT_KINDS}")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.clutter < 0:
            raise ValueError("clutter must be >= 0")
        if self.illumination <= 0:
            raise ValueError("illumination must be positive")

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in RECIPE_KEYS)

    @classmethod
    def from_text(cls, text: str) -> "SceneRecipe":
        kv = parse_key_values(text, RECIPE_KEYS)
        return cls(seed=int(kv["seed"]), object_kind=kv["object_kind"],
                   fraction=float(kv["fraction"]), clutter=int(kv["clutter"]),
                   illumination=float(kv["illumination"]))


def parse_key_values(text: str, keys, required=None) -> dict[str, str]:
    """Parse ``key=value`` lines (``#`` comments allowed); unknown or missing keys raise."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KeyError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in keys:
            raise KeyError(f"unknown key {k!r}")
        if k in out:
            raise KeyError(f"duplicate key {k!r}")
        out[k] = v
    for k in (keys if required is None else required):
        if k not in out:
            raise KeyError(f"missing key {k!r}")
    return out


def _hsv_to_rgb(h, s, v) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64) % 1.0
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return table[i, np.arange(len(i))] if table.ndim == 3 else table[i]


def _box_surface(rng, n, center, half):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
    return center + pts * half


def _sphere_surface(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d


def _torus_surface(rng, n, center, major, minor):
    u = rng.uniform(0, 2 * math.pi, n)
    v = rng.uniform(0, 2 * math.pi, n)
    # area element is proportional to (major + minor cos v)
    keep = rng.uniform(0, major + minor, n) < major + minor * np.cos(v)
    while not keep.all():
        m = ~keep
        v[m] = rng.uniform(0, 2 * math.pi, m.sum())
        keep[m] = rng.uniform(0, major + minor, m.sum()) < major + minor * np.cos(v[m])
    r = major + minor * np.cos(v)
    # ring stands upright in the x-z plane
    return center + np.stack([r * np.cos(u), minor * np.sin(v), r * np.sin(u)], axis=1)


def _salient_object(rng, kind, n, base_xy):
    size = rng.uniform(0.25, 0.45)
    if kind == "sphere":
        c = np.array([*base_xy, size])
        return _sphere_surface(rng, n, c, size)
    if kind == "box":
        half = rng.uniform(0.6, 1.0, 3) * size
        return _box_surface(rng, n, np.array([*base_xy, half[2]]), half)
    if kind == "torus":
        minor = 0.35 * size
        c = np.array([*base_xy, size + minor])
        return _torus_surface(rng, n, c, size, minor)
    # composite: ball resting on a pedestal
    n_box = n // 2
    half = np.array([0.5, 0.5, 0.8]) * size
    box = _box_surface(rng, n_box, np.array([*base_xy, half[2]]), half)
    r = 0.6 * size
    ball = _sphere_surface(rng, n - n_box, np.array([*base_xy, 2 * half[2] + r]), r)
    return np.concatenate([box, ball])


def generate_scene(recipe: SceneRecipe, n_points: int = 8192, return_bounds: bool = False):
    """A room corner (floor + two walls), muted clutter, and one saturated salient object.

    Exactly ``round(fraction * n_points)`` points lie on the salient object
    and carry label 1. Positions are float32-representable and colors lie
    on the 1/255 grid, so the view survives a binary PLY round trip.
    With ``return_bounds`` the object's axis-aligned box (lo, hi) is also
    returned.
    """
    rng = np.random.default_rng(recipe.seed)
    n_obj = max(1, int(round(recipe.fraction * n_points)))
    n_bg = n_points - n_obj
    n_clutter = (n_bg // 4) if recipe.clutter > 0 else 0
    n_wall = n_bg // 4
    n_floor = n_bg - n_clutter - n_wall
    room = 2.5

    floor = np.column_stack([rng.uniform(-room, room, (n_floor, 2)), np.zeros(n_floor)])
    n_back = n_wall // 2
    back = np.column_stack([rng.uniform(-room, room, n_back), np.full(n_back, room),
                            rng.uniform(0, 1.5, n_back)])
    side = np.column_stack([np.full(n_wall - n_back, -room),
                            rng.uniform(-room, room, n_wall - n_back),
                            rng.uniform(0, 1.5, n_wall - n_back)])
    floor_rgb = _hsv_to_rgb(np.full(n_floor, rng.uniform()), np.full(n_floor, 0.1),
                            np.full(n_floor, 0.55)) + rng.normal(0, 0.03, (n_floor, 3))
    wall_tone = rng.uniform(0.7, 0.85)
    wall_rgb = np.full((n_wall, 3), wall_tone) + rng.normal(0, 0.03, (n_wall, 3))

    base_xy = rng.uniform(-0.8, 0.8, 2)
    obj = _salient_object(rng, recipe.object_kind, n_obj, base_xy)
    hue = rng.uniform()
    obj_rgb = _hsv_to_rgb(np.full(n_obj, hue), np.full(n_obj, rng.uniform(0.75, 1.0)),
                          np.full(n_obj, rng.uniform(0.75, 1.0))) + rng.normal(0, 0.03, (n_obj, 3))

    clutter_pts, clutter_rgb = [], []
    if n_clutter:
        per = np.diff(np.linspace(0, n_clutter, recipe.clutter + 1).astype(int))
        for m in per:
            while True:
                xy = rng.uniform(-room + 0.3, room - 0.3, 2)
                if np.linalg.norm(xy - base_xy) > 1.0:
                    break
            half = rng.uniform(0.1, 0.3, 3)
            clutter_pts.append(_box_surface(rng, m, np.array([*xy, half[2]]), half))
            rgb = _hsv_to_rgb(np.full(m, rng.uniform()), np.full(m, rng.uniform(0.0, 0.3)),
                              np.full(m, rng.uniform(0.3, 0.7)))
            clutter_rgb.append(rgb + rng.normal(0, 0.03, (m, 3)))
    parts = [floor, back, side] + clutter_pts + [obj]
    rgbs = [floor_rgb, wall_rgb] + clutter_rgb + [obj_rgb]
    pos = np.concatenate(parts).astype(np.float32).astype(np.float64)
    rgb = np.concatenate(rgbs) * recipe.illumination
    rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    labels = np.zeros(n_points, dtype=np.int8)
    labels[-n_obj:] = 1
    order = rng.permutation(n_points)
    view = PointView(pos[order], rgb[order], labels[order],
                     scene_id=f"synth{recipe.seed}", view_id=recipe.object_kind)
    if return_bounds:
        o = pos[-n_obj:]
        return view, (o.min(axis=0), o.max(axis=0))
    return view


def random_recipe(rng) -> SceneRecipe:
    rng = np.random.default_rng(rng)
    return SceneRecipe(
        seed=int(rng.integers(0, 2**31 - 1)),
        object_kind=str(rng.choice(OBJECT_KINDS)),
        fraction=float(np.round(rng.uniform(0.08, 0.25), 3)),
        clutter=int(rng.integers(2, 7)),
        illumination=float(np.round(rng.uniform(0.7, 1.2), 3)),
    )


# datasets ----------------------------------------------------------------------

def worker_count() -> int:
    env = os.environ.get("PCSOD_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def load_dataset(root, split: str) -> list[PointView]:
    """All ``root/<split>/*.ply`` views in lexicographic file-name order."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"missing split directory {d}")
    files = sorted(d.glob("*.ply"), key=lambda p: p.name)
    if not files:
        raise ValueError(f"split directory {d} holds no .ply files")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        views = list(pool.map(load_ply, files))
    if split == "train" and not all(v.has_labels for v in views):
        raise ValueError("train views require labels")
    return views


_ROW = re.compile(r"[,\s]+")


def import_xyzrgbl(src, dst) -> PointView:
    """Convert a text table with columns x y z r g b label (colors 0-255) to PLY."""
    rows = [
        [float(v) for v in _ROW.split(line.strip())]
        for line in Path(src).read_text().splitlines() if line.strip()
    ]
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 7:
        raise PlyError(f"{src}: expected 7 columns x y z r g b label")
    view = PointView(arr[:, :3], arr[:, 3:6] / 255.0, (arr[:, 6] > 0).astype(np.int8),
                     scene_id=Path(src).parent.name, view_id=Path(src).stem)
    save_ply(view, dst, "binary")
    return view
