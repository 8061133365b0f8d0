"""End-to-end training of localizer + classifier on the glyph data."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from ..classifier import Classifier, ClassifierConfig
from ..localization import AffNetConfig, AttNetConfig, Localizer, PreprocessConfig
from ..supervision import ClassCenters, loss_aff, loss_att, mean_feature_map, target_thetas, total_loss
from ..synthdata import GlyphDataset
from ..tensor_core import functional as F
from ..tensor_core.optim import SGD, Adam, step_lr
from ..tensor_core.tensor import Tensor, no_grad
from .config import ExperimentConfig
from .metrics import box_iou_batch

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "epoch",
    "lr",
    "loss",
    "ce",
    "emb",
    "att",
    "aff",
    "train_acc",
    "test_acc",
    "test_iou",
    "mean_scale",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class E2EModel:
    cfg: ExperimentConfig
    localizer: Localizer
    classifier: Classifier
    centers: ClassCenters

    def parameters(self):
        return self.localizer.parameters() + self.classifier.parameters()

    def named_parameters(self):
        yield from (("localizer." + n, p) for n, p in self.localizer.named_parameters())
        yield from (("classifier." + n, p) for n, p in self.classifier.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def model_configs(cfg: ExperimentConfig) -> tuple[AttNetConfig, AffNetConfig, ClassifierConfig]:
    channels = cfg.glyph.channels
    att = AttNetConfig(
        in_channels=channels,
        input_size=64,
        widths=cfg.attnet_widths,
        residual=cfg.attnet_residual,
        map_size=16,
    )
    aff = AffNetConfig(
        map_size=(att.map_size, att.map_size),
        hidden=cfg.hidden,
        preprocess=PreprocessConfig(tau=cfg.tau, steepness=cfg.steepness, binarize=cfg.binarize),
    )
    cls = ClassifierConfig(
        in_channels=channels,
        input_size=cfg.crop_size,
        widths=cfg.classifier_widths,
        pools=cfg.classifier_pools,
        embedding_dim=cfg.embedding_dim,
        num_classes=cfg.glyph.num_classes,
    )
    if cls.feature_size != att.map_size:
        raise ValueError(
            f"classifier last-conv size {cls.feature_size} must equal the attention map size {att.map_size}"
        )
    return att, aff, cls


def build_model(cfg: ExperimentConfig, dtype=np.float32) -> E2EModel:
    att, aff, cls = model_configs(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    localizer = Localizer(att, aff, cfg.crop_size, rng, cfg.beta_att, cfg.beta_aff, dtype=dtype)
    classifier = Classifier(cls, rng, dtype=dtype)
    centers = ClassCenters(cls.num_classes, cls.embedding_dim, cfg.margin, cfg.center_decay)
    return E2EModel(cfg, localizer, classifier, centers)


class Targets(NamedTuple):
    m: Tensor
    theta: np.ndarray
    degenerate: np.ndarray


def compute_targets(model: E2EModel, images: Tensor) -> Targets:
    """Self-supervision targets from the classifier's view of the whole image.

    Runs without recording: M is the channel mean of the last conv features
    for the uncropped image, theta targets are the boxes around M.
    """
    s = model.cfg.crop_size
    with no_grad():
        features = model.classifier(F.resize_bilinear(Tensor(images.data), s, s)).features
    m = mean_feature_map(features)
    theta, degenerate = target_thetas(m, model.cfg.tau)
    return Targets(m, theta.astype(images.dtype), degenerate)


class StepOutput(NamedTuple):
    total: Tensor
    ce: Tensor
    emb: Tensor
    att: Tensor
    aff: Tensor
    logits: Tensor
    embedding: Tensor
    theta: Tensor


def forward_losses(model: E2EModel, images: Tensor, labels: np.ndarray, targets: Targets) -> StepOutput:
    """All four loss terms for one batch with fixed targets (no state updates)."""
    cfg = model.cfg
    loc = model.localizer(images)
    out = model.classifier(loc.crop)
    ce = F.softmax_cross_entropy(out.logits, labels)
    emb = model.centers.loss(out.embedding, labels)
    att = loss_att(loc.attention, targets.m, cfg.lambda_att)
    aff = loss_aff(loc.theta, targets.theta, cfg.lambda_aff)
    total = total_loss(ce, emb, att, aff, cfg.lam)
    return StepOutput(total, ce, emb, att, aff, out.logits, out.embedding, loc.theta)


def predict(model: E2EModel, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and thetas for a stack of images."""
    labels, thetas = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i : i + batch_size])
            loc = model.localizer(x)
            labels.append(model.classifier(loc.crop).logits.data.argmax(axis=1))
            thetas.append(loc.theta.data)
    return np.concatenate(labels), np.concatenate(thetas)


def evaluate(model: E2EModel, ds: GlyphDataset) -> dict[str, float]:
    pred, theta = predict(model, ds.images)
    return {
        "acc": float((pred == ds.labels).mean()),
        "iou": float(box_iou_batch(theta, ds.boxes).mean()),
        "mean_scale": float(np.abs(theta[:, :2]).mean()),
    }


def _dump_batch(out_dir: Path | None, images, labels, epoch: int, step: int) -> str:
    if out_dir is None:
        return "no output dir"
    path = out_dir / f"diverged_epoch{epoch}_step{step}.npz"
    np.savez(path, images=images, labels=labels)
    return str(path)


def _optimizer(kind: str, params, lr: float, momentum: float):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    return Adam(params, lr=lr)


def make_optimizers(model: E2EModel) -> list[tuple[object, float]]:
    """(optimizer, base lr) pairs: classifier first, localizer second."""
    cfg = model.cfg
    return [
        (_optimizer(cfg.optimizer, model.classifier.parameters(), cfg.lr, cfg.momentum), cfg.lr),
        (_optimizer(cfg.loc_optimizer, model.localizer.parameters(), cfg.loc_lr, cfg.momentum), cfg.loc_lr),
    ]


def random_crops(rng: np.random.Generator, n: int, min_scale: float) -> np.ndarray:
    """(n, 4) thetas for random square crops inside the image."""
    scale = rng.uniform(min_scale, 1.0, size=n)
    tx, ty = (rng.uniform(-1.0, 1.0, size=(2, n)) * (1.0 - scale))
    return np.stack([scale, scale, tx, ty], axis=1)


class Pretrained(NamedTuple):
    classifier: dict[str, np.ndarray]
    centers: dict[str, np.ndarray]


def pretrain_classifier(cfg: ExperimentConfig, train: GlyphDataset) -> Pretrained:
    """Classifier weights and class centres after the warm-up on uncropped images.

    The warm-up minimises CE + lam * emb with Adam on random square crops
    (scale in [pretrain_min_scale, 1], fully inside the image) so the
    classifier already copes with zoomed-in views. It depends only on the
    classifier settings, seed and data, so every ablation row with the same
    seed starts from the same weights.
    """
    model = build_model(cfg)
    clf = model.classifier
    if cfg.pretrain_epochs > 0:
        opt = Adam(clf.parameters(), lr=cfg.pretrain_lr)
        rng = np.random.default_rng([cfg.seed, 3])
        s = cfg.crop_size
        for _ in range(cfg.pretrain_epochs):
            order = rng.permutation(len(train))
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                y = train.labels[idx]
                with no_grad():
                    theta = random_crops(rng, len(idx), cfg.pretrain_min_scale).astype(train.images.dtype)
                    x = F.bilinear_sample(Tensor(train.images[idx]), Tensor(theta), s, s)
                clf.zero_grad()
                out = clf(x)
                ce = F.softmax_cross_entropy(out.logits, y)
                F.add(ce, F.mul(model.centers.loss(out.embedding, y), cfg.lam)).backward()
                opt.step()
                model.centers.update(out.embedding, y)
    return Pretrained(clf.state_dict(), model.centers.state())


@dataclass
class TrainResult:
    model: E2EModel
    history: list[dict]
    seconds: float


def train_e2e(
    cfg: ExperimentConfig,
    train: GlyphDataset,
    test: GlyphDataset,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    pretrained: Pretrained | None = None,
) -> TrainResult:
    """Minimise the full loss (Adam or SGD + momentum); one metrics row per epoch.

    Writes ``metrics.csv`` and ``checkpoint.npz`` to ``out_dir`` when given.
    ``max_steps`` stops early (used by tests); a partial epoch still logs.
    ``pretrained`` skips the warm-up by supplying its result.
    """
    from .checkpoint import save_checkpoint

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    if pretrained is None and cfg.pretrain_epochs > 0:
        pretrained = pretrain_classifier(cfg, train)
    if pretrained is not None:
        model.classifier.load_state_dict(pretrained.classifier)
        model.centers.load(pretrained.centers)
    opts = make_optimizers(model)
    order_rng = np.random.default_rng([cfg.seed, 2])
    history: list[dict] = []
    steps = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        for opt, base in opts:
            opt.lr = step_lr(base, epoch, cfg.lr_step, cfg.lr_gamma)
        order = order_rng.permutation(len(train))
        sums = dict.fromkeys(("loss", "ce", "emb", "att", "aff"), 0.0)
        correct = seen = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x, y = Tensor(train.images[idx]), train.labels[idx]
            targets = compute_targets(model, x)
            model.zero_grad()
            res = forward_losses(model, x, y, targets)
            if not np.isfinite(res.total.data):
                where = _dump_batch(out, train.images[idx], y, epoch, steps)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}; batch saved to {where}")
            res.total.backward()
            for opt, _ in opts:
                opt.step()
            model.centers.update(res.embedding, y)
            n = len(idx)
            for key, t in zip(("loss", "ce", "emb", "att", "aff"), (res.total, res.ce, res.emb, res.att, res.aff)):
                sums[key] += float(t.data) * n
            correct += int((res.logits.data.argmax(axis=1) == y).sum())
            seen += n
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        ev = evaluate(model, test)
        row = {"epoch": epoch + 1, "lr": opts[0][0].lr}
        row.update({k: v / seen for k, v in sums.items()})
        row.update(train_acc=correct / seen, test_acc=ev["acc"], test_iou=ev["iou"], mean_scale=ev["mean_scale"])
        history.append(row)
        log.info(
            "epoch %d loss %.4f ce %.4f att %.4f aff %.4f train %.3f test %.3f iou %.3f",
            row["epoch"], row["loss"], row["ce"], row["att"], row["aff"],
            row["train_acc"], row["test_acc"], row["test_iou"],
        )
        if on_epoch is not None:
            on_epoch(row)
        if max_steps is not None and steps >= max_steps:
            break
    if out is not None:
        write_metrics(out / "metrics.csv", history)
        save_checkpoint(out / "checkpoint.npz", model)
    return TrainResult(model, history, time.perf_counter() - start)


def write_metrics(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]
