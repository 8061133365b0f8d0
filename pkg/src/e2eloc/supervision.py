"""Self-supervision targets and the four loss terms.

Targets come from the classifier's last conv features: their channel mean M
supervises the attention map directly, and a thresholded box around M gives
the target affine parameters. Neither target ever receives a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import functional as F
from .tensor_core.tensor import Tensor


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalised coordinates, both axes in [-1, 1]."""

    x0: float
    y0: float
    x1: float
    y1: float
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    @property
    def area(self) -> float:
        return max(self.x1 - self.x0, 0.0) * max(self.y1 - self.y0, 0.0)


FULL_BOX = (-1.0, -1.0, 1.0, 1.0)


def mean_feature_map(features: Tensor) -> Tensor:
    """Channel mean of (B, C, I, J) features as a detached (B, 1, I, J) target."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    return Tensor(data.mean(axis=1, keepdims=True))


def foreground_mask(m: np.ndarray, tau: float) -> np.ndarray | None:
    """Min-max normalise ``m`` and threshold it; None when ``m`` is constant."""
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return None
    return (m - lo) / (hi - lo) > tau


def extract_bbox(m, tau: float = 0.3) -> BBox:
    """Tightest box around the positions of ``m`` above ``tau`` after min-max scaling.

    ``m`` is an (I, J) or (1, I, J) map. Cell (i, j) covers its full extent,
    so a single hot cell gives a box of one cell. Constant maps and maps with
    no foreground return the full image flagged ``degenerate``.
    """
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    m = m.reshape(m.shape[-2:])
    mask = foreground_mask(m, tau)
    if mask is None or not mask.any():
        return BBox(*FULL_BOX, degenerate=True)
    n_i, n_j = m.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(
        x0=-1.0 + 2.0 * cols[0] / n_j,
        y0=-1.0 + 2.0 * rows[0] / n_i,
        x1=-1.0 + 2.0 * (cols[-1] + 1) / n_j,
        y1=-1.0 + 2.0 * (rows[-1] + 1) / n_i,
    )


def bbox_to_theta(box: BBox) -> np.ndarray:
    """[s_x, s_y, t_x, t_y] whose sampling grid covers exactly ``box``.

    A degenerate box maps to the identity.
    """
    if box.degenerate:
        return np.array([1.0, 1.0, 0.0, 0.0])
    return np.array(
        [
            (box.x1 - box.x0) / 2.0,
            (box.y1 - box.y0) / 2.0,
            (box.x0 + box.x1) / 2.0,
            (box.y0 + box.y1) / 2.0,
        ]
    )


def theta_to_bbox(theta) -> BBox:
    """Inverse of :func:`bbox_to_theta` (no clipping)."""
    sx, sy, tx, ty = (float(v) for v in np.asarray(theta).reshape(4))
    return BBox(tx - sx, ty - sy, tx + sx, ty + sy)


def theta_to_boxes(theta, clip: bool = True) -> np.ndarray:
    """Vectorised (N, 4) thetas -> (N, 4) boxes, clipped to [-1, 1] for metrics."""
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    sx, sy, tx, ty = np.moveaxis(theta, -1, 0)
    hx, hy = np.abs(sx), np.abs(sy)
    box = np.stack([tx - hx, ty - hy, tx + hx, ty + hy], axis=-1)
    return np.clip(box, -1.0, 1.0) if clip else box


def target_thetas(m: Tensor | np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample theta targets for a (B, 1, I, J) batch plus a degenerate mask."""
    data = np.asarray(m.data if isinstance(m, Tensor) else m)
    thetas = np.empty((data.shape[0], 4))
    degenerate = np.zeros(data.shape[0], dtype=bool)
    for b in range(data.shape[0]):
        box = extract_bbox(data[b], tau)
        thetas[b] = bbox_to_theta(box)
        degenerate[b] = box.degenerate
    return thetas, degenerate


# ---------------------------------------------------------------------------
# losses


def loss_att(attention: Tensor, m, lambda_att: float = 16.0) -> Tensor:
    """``lambda_att`` times the mean smooth L1 between attention map and target M."""
    return F.mul(F.smooth_l1(attention, m), lambda_att)


def loss_aff(theta: Tensor, theta_target, lambda_aff: float = 16.0) -> Tensor:
    """``lambda_aff`` times the mean smooth L1 over the four affine parameters."""
    return F.mul(F.smooth_l1(theta, theta_target), lambda_aff)


class ClassCenters:
    """Per-class embedding centres with an EMA update.

    The loss pulls each embedding to its (stored, detached) class centre and
    pushes apart the centres of the classes present in the batch with a
    hinge ``max(0, margin - ||c_a - c_b||)``. For the hinge, each present
    class uses the centre it would have after this batch's EMA update, which
    is differentiable through the batch class means.
    """

    def __init__(self, num_classes: int, dim: int, margin: float = 1.0, decay: float = 0.95):
        self.centers = np.zeros((num_classes, dim))
        self.seen = np.zeros(num_classes, dtype=bool)
        self.margin = margin
        self.decay = decay

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def _check(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"class id outside [0, {self.num_classes})")
        return labels

    def _batch_means(self, embeddings: Tensor, labels: np.ndarray) -> tuple[np.ndarray, Tensor]:
        classes = np.unique(labels)
        onehot = (labels[None, :] == classes[:, None]).astype(embeddings.dtype)
        onehot /= onehot.sum(axis=1, keepdims=True)
        return classes, F.matmul(Tensor(onehot), embeddings)

    def _blended(self, embeddings: Tensor, labels: np.ndarray) -> tuple[np.ndarray, Tensor]:
        classes, means = self._batch_means(embeddings, labels)
        old = self.centers[classes].astype(embeddings.dtype)
        # unseen classes start at their batch mean
        keep = np.where(self.seen[classes], self.decay, 0.0).astype(embeddings.dtype)[:, None]
        return classes, F.add(Tensor(keep * old), F.mul(means, Tensor(1.0 - keep)))

    def loss(self, embeddings: Tensor, labels) -> Tensor:
        labels = self._check(labels)
        own = np.where(self.seen[labels][:, None], self.centers[labels], embeddings.data)
        diff = F.sub(embeddings, Tensor(own.astype(embeddings.dtype)))
        pull = F.mean(F.sum(F.square(diff), axis=1))
        classes, blended = self._blended(embeddings, labels)
        if len(classes) < 2:
            return pull
        a, b = np.triu_indices(len(classes), k=1)
        gap = F.sub(F.take(blended, a, axis=0), F.take(blended, b, axis=0))
        dist = F.sqrt(F.sum(F.square(gap), axis=1))
        hinge = F.mean(F.relu(F.sub(self.margin, dist)))
        return F.add(pull, hinge)

    def update(self, embeddings: Tensor, labels) -> None:
        labels = self._check(labels)
        classes, blended = self._blended(Tensor(embeddings.data), labels)
        self.centers[classes] = blended.data
        self.seen[classes] = True

    def state(self) -> dict[str, np.ndarray]:
        return {"centers": self.centers.copy(), "seen": self.seen.copy()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.centers = state["centers"].copy()
        self.seen = state["seen"].astype(bool).copy()


def loss_emb(embeddings: Tensor, labels, centers: ClassCenters) -> Tensor:
    return centers.loss(embeddings, labels)


def total_loss(ce: Tensor, emb: Tensor, att: Tensor, aff: Tensor, lam: float = 0.1) -> Tensor:
    """L = L_CE + lam * L_emb + L_att + L_aff (att/aff already carry their weights)."""
    return F.add(F.add(F.add(ce, F.mul(emb, lam)), att), aff)
