"""Seeded synthetic datasets.

* Glyph images: one small class-coded glyph per image over class-independent
  clutter. Classes differ only in which cells of a 3x3 grid inside the glyph
  frame are filled, so the classifier needs a close look at a small region.
* Attention maps: blobs on a 16x16 grid with box targets derived by the same
  threshold-and-box pipeline used for self-supervision.

Every sample has its own RNG stream seeded from (seed, split, index), so a
dataset is a pure function of its config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .supervision import bbox_to_theta, extract_bbox

TRAIN, TEST = 0, 1


def _rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


# ---------------------------------------------------------------------------
# glyph dataset


@dataclass
class GlyphDatasetConfig:
    image_size: int = 64
    channels: int = 1
    num_classes: int = 10
    glyph_frac: tuple[float, float] = (0.15, 0.35)
    clutter: int = 6
    clutter_intensity: tuple[float, float] = (0.25, 0.6)
    noise: float = 0.03
    n_train: int = 5000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.glyph_frac = tuple(self.glyph_frac)
        self.clutter_intensity = tuple(self.clutter_intensity)
        lo, hi = self.glyph_frac
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("glyph_frac must satisfy 0 < lo <= hi < 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class GlyphDataset:
    images: np.ndarray  # (N, C, S, S) float32, values k/255
    labels: np.ndarray  # (N,) int64
    boxes: np.ndarray  # (N, 4) normalised x0, y0, x1, y1

    def __len__(self) -> int:
        return len(self.labels)


def glyph_codes(num_classes: int) -> np.ndarray:
    """Fixed 3x3 fill patterns, pairwise Hamming distance >= 3."""
    codes: list[int] = []
    for code in range(512):
        if bin(code).count("1") not in (3, 4, 5):
            continue
        if all(bin(code ^ c).count("1") >= 3 for c in codes):
            codes.append(code)
        if len(codes) == num_classes:
            break
    else:
        raise ValueError(f"cannot build {num_classes} distinct glyph codes")
    bits = (np.array(codes)[:, None] >> np.arange(9)) & 1
    return bits.reshape(num_classes, 3, 3).astype(bool)


_FRAME = 0.1
_GRID_LO, _GRID_HI = 0.2, 0.8
_CELL_INSET = 0.025


def _glyph_mask(u: np.ndarray, v: np.ndarray, code: np.ndarray) -> np.ndarray:
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    frame = inside & ((u < _FRAME) | (u >= 1 - _FRAME) | (v < _FRAME) | (v >= 1 - _FRAME))
    cell = (_GRID_HI - _GRID_LO) / 3
    cu = (u - _GRID_LO) / cell
    cv = (v - _GRID_LO) / cell
    ci = np.clip(np.floor(cu).astype(int), 0, 2)
    ri = np.clip(np.floor(cv).astype(int), 0, 2)
    in_grid = (cu >= 0) & (cu < 3) & (cv >= 0) & (cv < 3)
    inset = _CELL_INSET / cell
    in_cell = (cu - ci > inset) & (cu - ci < 1 - inset) & (cv - ri > inset) & (cv - ri < 1 - inset)
    return frame | (in_grid & in_cell & code[ri, ci])


def _supersample(size: int, factor: int = 4) -> np.ndarray:
    return (np.arange(size * factor) + 0.5) / factor


def _render_glyph_sample(cfg: GlyphDatasetConfig, code: np.ndarray, rng: np.random.Generator):
    s = cfg.image_size
    img = np.zeros((s, s))
    # clutter: short class-independent strokes
    xs = _supersample(s)
    for _ in range(cfg.clutter):
        p0 = rng.uniform(0, s, size=2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(3, 8)
        p1 = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        level = rng.uniform(*cfg.clutter_intensity)
        lo = np.floor(np.minimum(p0, p1) - 1).astype(int).clip(0, s)
        hi = np.ceil(np.maximum(p0, p1) + 1).astype(int).clip(0, s)
        if (hi <= lo).any():
            continue
        gx, gy = np.meshgrid(xs[lo[0] * 4 : hi[0] * 4], xs[lo[1] * 4 : hi[1] * 4])
        d = p1 - p0
        t = np.clip(((gx - p0[0]) * d[0] + (gy - p0[1]) * d[1]) / (d @ d), 0, 1)
        dist = np.hypot(gx - p0[0] - t * d[0], gy - p0[1] - t * d[1])
        cov = (dist < 0.6).reshape(hi[1] - lo[1], 4, hi[0] - lo[0], 4).mean(axis=(1, 3))
        region = img[lo[1] : hi[1], lo[0] : hi[0]]
        np.maximum(region, level * cov, out=region)
    # glyph
    side = rng.uniform(*cfg.glyph_frac) * s
    x0 = rng.uniform(0, s - side)
    y0 = rng.uniform(0, s - side)
    c0, c1 = int(np.floor(x0)), int(np.ceil(x0 + side))
    r0, r1 = int(np.floor(y0)), int(np.ceil(y0 + side))
    gx, gy = np.meshgrid(xs[c0 * 4 : c1 * 4], xs[r0 * 4 : r1 * 4])
    cov = _glyph_mask((gx - x0) / side, (gy - y0) / side, code)
    cov = cov.reshape(r1 - r0, 4, c1 - c0, 4).mean(axis=(1, 3))
    region = img[r0:r1, c0:c1]
    region[...] = np.where(cov > 0, cov, region)
    img += cfg.noise * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
    box = np.array([x0, y0, x0 + side, y0 + side]) * 2.0 / s - 1.0
    return img, box


def gen_glyph_split(cfg: GlyphDatasetConfig, split: int) -> GlyphDataset:
    n = cfg.n_train if split == TRAIN else cfg.n_test
    codes = glyph_codes(cfg.num_classes)
    s = cfg.image_size
    images = np.empty((n, cfg.channels, s, s), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % cfg.num_classes
    boxes = np.empty((n, 4))
    for i in range(n):
        img, box = _render_glyph_sample(cfg, codes[labels[i]], _rng(cfg.seed, split, i))
        images[i] = img[None]
        boxes[i] = box
    if not ((boxes >= -1.0) & (boxes <= 1.0)).all():
        raise RuntimeError("glyph placement left the image")
    return GlyphDataset(images, labels, boxes)


def gen_glyph_dataset(cfg: GlyphDatasetConfig) -> tuple[GlyphDataset, GlyphDataset]:
    """(train, test) glyph datasets; labels cycle through the classes."""
    return gen_glyph_split(cfg, TRAIN), gen_glyph_split(cfg, TEST)


# ---------------------------------------------------------------------------
# attention-map dataset


@dataclass
class AttnMapDatasetConfig:
    map_size: int = 16
    shapes: tuple[str, ...] = ("gaussian", "rect")
    noise: float = 0.03
    tau: float = 0.3
    gain: tuple[float, float] = (0.5, 2.0)
    offset: tuple[float, float] = (-0.5, 0.5)
    distractor: float = 0.25
    n_train: int = 5000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.gain = tuple(self.gain)
        self.offset = tuple(self.offset)
        unknown = set(self.shapes) - {"gaussian", "rect"}
        if unknown or not self.shapes:
            raise ValueError(f"unknown blob shapes {sorted(unknown)}")


@dataclass
class AttnMapDataset:
    maps: np.ndarray  # (N, 1, I, J) float32, noisy inputs
    clean: np.ndarray  # (N, 1, I, J) noise-free blobs the targets came from
    thetas: np.ndarray  # (N, 4)
    boxes: np.ndarray  # (N, 4)

    def __len__(self) -> int:
        return len(self.thetas)


def cell_centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def gaussian_blob(n: int, cx: float, cy: float, sx: float, sy: float) -> np.ndarray:
    c = cell_centers(n)
    return np.exp(-0.5 * (((c[None, :] - cx) / sx) ** 2 + ((c[:, None] - cy) / sy) ** 2))


def rect_blob(n: int, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    c = cell_centers(n)
    return (((c[None, :] >= x0) & (c[None, :] <= x1)) & ((c[:, None] >= y0) & (c[:, None] <= y1))).astype(float)


def _blob(cfg: AttnMapDatasetConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.map_size
    kind = cfg.shapes[rng.integers(len(cfg.shapes))]
    if kind == "gaussian":
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        sx, sy = rng.uniform(0.12, 0.6, size=2)
        blob = gaussian_blob(n, cx, cy, sx, sy)
    else:
        w, h = rng.uniform(0.25, 1.6, size=2)
        x0 = rng.uniform(-1.0, 1.0 - w)
        y0 = rng.uniform(-1.0, 1.0 - h)
        blob = rect_blob(n, x0, y0, x0 + w, y0 + h)
        blob *= 0.75 + 0.25 * gaussian_blob(n, x0 + w / 2, y0 + h / 2, w, h)
    if cfg.distractor > 0:
        dx, dy = rng.uniform(-0.8, 0.8, size=2)
        blob = blob + rng.uniform(0, cfg.distractor) * gaussian_blob(n, dx, dy, 0.15, 0.15)
    return blob


def gen_attention_split(cfg: AttnMapDatasetConfig, split: int) -> AttnMapDataset:
    n = cfg.n_train if split == TRAIN else cfg.n_test
    size = cfg.map_size
    maps = np.empty((n, 1, size, size), dtype=np.float32)
    clean = np.empty((n, 1, size, size), dtype=np.float32)
    thetas = np.empty((n, 4))
    boxes = np.empty((n, 4))
    for i in range(n):
        rng = _rng(cfg.seed, split, i)
        while True:
            blob = _blob(cfg, rng)
            box = extract_bbox(blob, cfg.tau)
            if not box.degenerate:
                break
        clean[i, 0] = blob
        boxes[i] = box.as_array()
        thetas[i] = bbox_to_theta(box)
        gain = rng.uniform(*cfg.gain)
        offset = rng.uniform(*cfg.offset)
        maps[i, 0] = offset + gain * blob + cfg.noise * rng.standard_normal(blob.shape)
    return AttnMapDataset(maps, clean, thetas, boxes)


def gen_attention_dataset(cfg: AttnMapDatasetConfig) -> tuple[AttnMapDataset, AttnMapDataset]:
    """(train, test) attention maps with theta targets from the noise-free blobs."""
    return gen_attention_split(cfg, TRAIN), gen_attention_split(cfg, TEST)


# ---------------------------------------------------------------------------
# dump / load
#
# <dir>/config.json      generator config
# <dir>/<split>.jsonl    one JSON object per sample
# <dir>/<split>/NNNNNN.png
#
# Glyph lines: {"path", "label", "box"}; images are 8-bit PNG and reload
# exactly. Attention lines: {"path", "box", "theta", "lo", "hi"}; maps are
# 16-bit PNG holding (map - lo) / (hi - lo) quantised to 65535 levels.


def _write_index(path: Path, rows: list[dict]) -> None:
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _read_index(path: Path) -> list[dict]:
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dump_glyph_dataset(root: str | Path, cfg: GlyphDatasetConfig, splits: dict[str, GlyphDataset]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps({"kind": "glyph", **asdict(cfg)}, indent=2))
    for name, ds in splits.items():
        (root / name).mkdir(exist_ok=True)
        rows = []
        for i in range(len(ds)):
            rel = f"{name}/{i:06d}.png"
            pix = np.round(ds.images[i] * 255).astype(np.uint8)
            mode_img = pix[0] if pix.shape[0] == 1 else np.moveaxis(pix, 0, -1)
            Image.fromarray(mode_img).save(root / rel)
            rows.append({"path": rel, "label": int(ds.labels[i]), "box": ds.boxes[i].tolist()})
        _write_index(root / f"{name}.jsonl", rows)


def load_glyph_split(root: str | Path, name: str) -> GlyphDataset:
    root = Path(root)
    rows = _read_index(root / f"{name}.jsonl")
    images = []
    for row in rows:
        pix = np.asarray(Image.open(root / row["path"]), dtype=np.float32) / 255
        images.append(pix[None] if pix.ndim == 2 else np.moveaxis(pix, -1, 0))
    return GlyphDataset(
        np.stack(images).astype(np.float32),
        np.array([r["label"] for r in rows], dtype=np.int64),
        np.array([r["box"] for r in rows], dtype=np.float64),
    )


def dump_attention_dataset(root: str | Path, cfg: AttnMapDatasetConfig, splits: dict[str, AttnMapDataset]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps({"kind": "attention", **asdict(cfg)}, indent=2))
    for name, ds in splits.items():
        (root / name).mkdir(exist_ok=True)
        rows = []
        for i in range(len(ds)):
            rel = f"{name}/{i:06d}.png"
            m = ds.maps[i, 0].astype(np.float64)
            lo, hi = float(m.min()), float(m.max())
            q = np.round((m - lo) / max(hi - lo, 1e-12) * 65535).astype(np.uint16)
            Image.fromarray(q).save(root / rel)
            rows.append(
                {"path": rel, "box": ds.boxes[i].tolist(), "theta": ds.thetas[i].tolist(), "lo": lo, "hi": hi}
            )
        _write_index(root / f"{name}.jsonl", rows)


def load_attention_split(root: str | Path, name: str) -> AttnMapDataset:
    root = Path(root)
    rows = _read_index(root / f"{name}.jsonl")
    maps = []
    for row in rows:
        q = np.asarray(Image.open(root / row["path"]), dtype=np.float64)
        maps.append(row["lo"] + q / 65535 * (row["hi"] - row["lo"]))
    maps_arr = np.stack(maps)[:, None].astype(np.float32)
    return AttnMapDataset(
        maps_arr,
        np.full_like(maps_arr, np.nan),
        np.array([r["theta"] for r in rows]),
        np.array([r["box"] for r in rows]),
    )
