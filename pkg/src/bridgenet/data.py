"""Synthetic multi-task scenes and the little-endian tensor archive format.

Scenes are depth-ordered rectangles and ellipses over a sloped background
plane.  Segmentation, depth, surface normals and edges are all derived from
the same geometry, so the tasks are genuinely correlated: edges are exactly
the label boundaries and normals are exactly the depth derivative field.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    num_classes: int = 4
    depth_near: float = 1.0
    depth_far: float = 1.1
    min_extent: int = 14
    max_extent: int = 30
    max_slope: float = 0.002
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not self.depth_near < self.depth_far:
            raise ValueError(f"depth_near {self.depth_near} must be < depth_far {self.depth_far}")
        if self.num_classes < 2:
            raise ValueError("need background plus at least one class")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("invalid shape count range")


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32
    seg: np.ndarray  # H x W int32
    depth: np.ndarray  # H x W float32
    normals: np.ndarray  # 3 x H x W float32
    edges: np.ndarray  # H x W int32 (0/1)
    masks: dict = field(default_factory=dict)  # task -> H x W bool
    shapes: list = field(default_factory=list)  # per-shape coverage and depth, for inspection

    def arrays(self) -> dict:
        out = {
            "image": self.image.astype(np.float32),
            "seg": self.seg.astype(np.int32),
            "depth": self.depth.astype(np.float32),
            "normals": self.normals.astype(np.float32),
            "edges": self.edges.astype(np.int32),
        }
        for name, m in self.masks.items():
            out[f"mask_{name}"] = m.astype(np.int32)
        return out

    @classmethod
    def from_arrays(cls, arrs: dict) -> "Sample":
        masks = {k[5:]: v.astype(bool) for k, v in arrs.items() if k.startswith("mask_")}
        return cls(arrs["image"], arrs["seg"], arrs["depth"], arrs["normals"], arrs["edges"], masks)


# Base colours per class (background first); textures and shading vary per shape.
_PALETTE = np.array([
    [0.45, 0.45, 0.50],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.80, 0.80],
    [0.95, 0.55, 0.15],
])


def _class_colour(k: int) -> np.ndarray:
    if k < len(_PALETTE):
        return _PALETTE[k]
    return Rng(1000 + k).uniform(0.15, 0.95, 3)


def derive_normals(depth: np.ndarray) -> np.ndarray:
    """Unit normals ``(-dd/dx, -dd/dy, 1)`` from central differences (one-sided at borders)."""
    depth = np.asarray(depth, np.float64)
    dy, dx = np.gradient(depth)
    n = np.stack([-dx, -dy, np.ones_like(depth)])
    return (n / np.linalg.norm(n, axis=0, keepdims=True)).astype(np.float32)


def derive_edges(seg: np.ndarray) -> np.ndarray:
    """1 where any 4-neighbour carries a different label."""
    seg = np.asarray(seg)
    e = np.zeros(seg.shape, dtype=bool)
    dv = seg[1:, :] != seg[:-1, :]
    dh = seg[:, 1:] != seg[:, :-1]
    e[1:, :] |= dv
    e[:-1, :] |= dv
    e[:, 1:] |= dh
    e[:, :-1] |= dh
    return e.astype(np.int32)


def generate_scene(cfg: SceneConfig, seed: int) -> Sample:
    rng = Rng((cfg.seed, seed))
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    span = cfg.depth_far - cfg.depth_near
    mid = cfg.depth_near + 0.6 * span

    # background: a plane receding towards the top of the image
    bg_tilt = rng.uniform(0.3, 0.4) * span / s
    depth = cfg.depth_far - bg_tilt * yy
    seg = np.zeros((s, s), np.int32)
    zbuf = np.full((s, s), np.inf)

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        k = int(rng.integers(1, cfg.num_classes))
        h = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        w = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        y0 = int(rng.integers(0, s - h + 1))
        x0 = int(rng.integers(0, s - w + 1))
        if k % 2 == 1:
            cover = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
            cover = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        base = rng.uniform(cfg.depth_near, mid)
        gy, gx = rng.uniform(-cfg.max_slope, cfg.max_slope, 2) * span
        d = base + gy * (yy - y0) + gx * (xx - x0)
        vis = cover & (d < zbuf)
        zbuf[vis] = d[vis]
        seg[vis] = k
        depth[vis] = d[vis]
        shapes.append({"cls": k, "cover": cover, "depth": d})

    normals = derive_normals(depth)
    edges = derive_edges(seg)

    # render: class colour, per-class stripe texture, lambertian shading, noise
    light = np.array([0.3, -0.4, 0.866])
    shade = 0.75 + 0.25 * np.clip(np.tensordot(light, normals.astype(np.float64), axes=1), 0, 1)
    image = np.zeros((3, s, s))
    for k in range(cfg.num_classes):
        m = seg == k
        if not m.any():
            continue
        freq = 0.25 + 0.15 * k
        tex = 0.08 * np.sin(freq * (xx + (k % 2) * yy))
        image[:, m] = (_class_colour(k)[:, None] + tex[m][None]) * shade[m][None]
    image += 0.15 * (depth - cfg.depth_near)[None] / span
    image += cfg.noise * rng.normal(size=image.shape)

    valid = np.ones((s, s), bool)
    masks = {"seg": valid, "depth": valid.copy(), "normals": valid.copy(), "edges": valid.copy()}
    return Sample(image.astype(np.float32), seg, depth.astype(np.float32), normals, edges, masks, shapes)


# ---------------------------------------------------------------------------
# tensor archive

MAGIC = b"BTNR"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
CODES = {np.dtype("<f4"): 1, np.dtype("<i4"): 2}


class FormatError(ValueError):
    """Corrupt or unsupported tensor file."""


class TruncatedError(FormatError):
    pass


class DuplicateNameError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 1
    if arr.dtype.kind in "iub":
        return 2
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    data = np.ascontiguousarray(arr, dtype=DTYPES[code])
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + data.tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Parse one record at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < 7:
        raise TruncatedError("truncated tensor header")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 4 * rank:
        raise TruncatedError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - pos < nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
    return arr, pos + nbytes


def write_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor record")
    return arr


def encode_archive(named) -> bytes:
    items = list(named.items()) if isinstance(named, dict) else list(named)
    seen = set()
    parts = []
    for name, arr in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + encode_tensor(arr))
    return b"".join(parts)


def decode_archive(buf: bytes) -> dict:
    out = {}
    pos = 0
    while pos < len(buf):
        if len(buf) - pos < 4:
            raise TruncatedError("truncated name length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < n:
            raise TruncatedError("truncated name")
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        out[name], pos = decode_tensor(buf, pos)
    return out


def write_archive(path, named):
    """Write ``(name, array)`` pairs (or a dict) in order; names must be unique."""
    data = encode_archive(named)
    tmp = Path(str(path) + ".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_archive(path) -> dict:
    """Ordered ``{name: array}`` from an archive file."""
    return decode_archive(Path(path).read_bytes())


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)


def array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


# ---------------------------------------------------------------------------
# datasets

VAL_SEED_OFFSET = 1_000_000


def build_dataset(cfg: SceneConfig, n_train: int, n_val: int, out_dir) -> Path:
    """Write one archive per sample plus ``manifest.tsv``; returns the manifest path."""
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = text_to_array(scene_config_text(cfg))
    lines = []
    for split, count, offset in (("train", n_train, 0), ("val", n_val, VAL_SEED_OFFSET)):
        (out / split).mkdir(exist_ok=True)
        for i in range(count):
            seed = offset + i
            rel = f"{split}/{i:05d}.btnr"
            arrs = generate_scene(cfg, seed).arrays()
            write_archive(out / rel, [("__scene__", header)] + list(arrs.items()))
            lines.append(f"{split}\t{rel}\t{seed}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def scene_config_text(cfg: SceneConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in vars(cfg).items())


def read_manifest(path) -> list:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            split, rel, seed = line.split("\t")
            rows.append((split, rel, int(seed)))
    return rows


def load_split(data_dir, split: str) -> list:
    data_dir = Path(data_dir)
    out = []
    for s, rel, _ in read_manifest(data_dir / "manifest.tsv"):
        if s == split:
            arrs = read_archive(data_dir / rel)
            arrs.pop("__scene__", None)
            out.append(Sample.from_arrays(arrs))
    return out


def collate(samples, tasks) -> tuple:
    """Batch samples into ``(images, targets, masks)`` keyed by task name."""
    images = np.stack([s.image for s in samples])
    targets, masks = {}, {}
    for t in tasks:
        if t == "seg":
            targets[t] = np.stack([s.seg for s in samples])
        elif t == "depth":
            targets[t] = np.stack([s.depth for s in samples])[:, None]
        elif t == "normals":
            targets[t] = np.stack([s.normals for s in samples])
        elif t == "edges":
            targets[t] = np.stack([s.edges for s in samples])[:, None]
        else:
            raise ValueError(f"unknown task {t!r}")
        masks[t] = np.stack([s.masks.get(t, np.ones(s.seg.shape, bool)) for s in samples])
    return images, targets, masks
