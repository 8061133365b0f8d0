"""Box metrics and result rows."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..supervision import BBox, theta_to_boxes


def compute_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 for disjoint or degenerate input."""
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def box_iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 4) box arrays (x0, y0, x1, y1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    valid = (area_a > 0) & (area_b > 0)
    return np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)


def box_iou_batch(theta: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU between the (clipped) boxes implied by ``theta`` and reference ``boxes``."""
    return box_iou_arrays(theta_to_boxes(theta, clip=True), boxes)


@dataclass
class MetricsRow:
    """One row of the affine-estimator comparison."""

    architecture: str
    preprocess: bool
    parameters: int
    runtime_ms: float
    sl1_error: float
    iou_gt_08: float
    iou_gt_095: float


@dataclass
class AblationRow:
    """One row of the localization ablation: flags plus accuracy."""

    description: str
    local_losses: bool
    beta_att: float
    beta_aff: float
    accuracy: float
    accuracy_std: float
    runs: int
    test_iou: float


def write_rows(path: str | Path, rows: list) -> None:
    if not rows:
        raise ValueError("no rows to write")
    names = [f.name for f in fields(rows[0])]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(row).items()})


def read_rows(path: str | Path, cls) -> list:
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            vals = {}
            for k, v in raw.items():
                t = types[k]
                if t in (bool, "bool"):
                    vals[k] = v == "True"
                elif t in (int, "int"):
                    vals[k] = int(v)
                elif t in (float, "float"):
                    vals[k] = float(v)
                else:
                    vals[k] = v
            out.append(cls(**vals))
    return out
