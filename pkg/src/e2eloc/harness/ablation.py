"""Five-way ablation over the local losses and the two gradient gates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..synthdata import GlyphDataset, gen_glyph_dataset
from .config import ExperimentConfig
from .metrics import AblationRow, write_rows
from .train import pretrain_classifier, train_e2e, write_metrics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSetting:
    description: str
    local_losses: bool
    beta_att: float
    beta_aff: float
    slug: str


SETTINGS = (
    AblationSetting("Baseline", False, 0.0, 0.0, "baseline"),
    AblationSetting("No local supervision", False, 1.0, 1.0, "no_local"),
    AblationSetting("No end-to-end", True, 0.0, 0.0, "no_e2e"),
    AblationSetting("No gradient from AffNet to AttNet", True, 0.0, 1.0, "no_aff_to_att"),
    AblationSetting("End-to-end", True, 1.0, 1.0, "e2e"),
)


def setting_config(cfg: ExperimentConfig, setting: AblationSetting, seed: int) -> ExperimentConfig:
    """``cfg`` with the row's flags applied. Local losses keep cfg's weights when on."""
    lam_att = cfg.lambda_att if setting.local_losses else 0.0
    lam_aff = cfg.lambda_aff if setting.local_losses else 0.0
    return cfg.replace(
        seed=seed,
        beta_att=setting.beta_att,
        beta_aff=setting.beta_aff,
        lambda_att=lam_att,
        lambda_aff=lam_aff,
    )


@dataclass
class AblationResult:
    rows: list[AblationRow]
    # accuracy[setting slug] -> one value per seed, in seed order
    accuracy: dict[str, list[float]]


def run_ablation(
    cfg: ExperimentConfig,
    data: tuple[GlyphDataset, GlyphDataset] | None = None,
    out_dir: str | Path | None = None,
) -> AblationResult:
    """Train every setting for ``cfg.ablation_runs`` seeds and tabulate test accuracy.

    Runs with the same seed share the warm-up weights, the data and the batch
    order, so rows differ only in the flags.
    """
    train, test = data if data is not None else gen_glyph_dataset(cfg.glyph)
    out = Path(out_dir) if out_dir is not None else None
    accuracy: dict[str, list[float]] = {s.slug: [] for s in SETTINGS}
    iou: dict[str, list[float]] = {s.slug: [] for s in SETTINGS}
    for r in range(cfg.ablation_runs):
        seed = cfg.seed + r
        pretrained = pretrain_classifier(cfg.replace(seed=seed), train)
        for setting in SETTINGS:
            run_cfg = setting_config(cfg, setting, seed)
            result = train_e2e(run_cfg, train, test, pretrained=pretrained)
            last = result.history[-1]
            accuracy[setting.slug].append(last["test_acc"])
            iou[setting.slug].append(last["test_iou"])
            log.info("%s seed %d: acc %.4f iou %.3f (%.0fs)", setting.description, seed,
                     last["test_acc"], last["test_iou"], result.seconds)
            if out is not None:
                run_dir = out / f"{setting.slug}_seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                write_metrics(run_dir / "metrics.csv", result.history)
    rows = [
        AblationRow(
            description=s.description,
            local_losses=s.local_losses,
            beta_att=s.beta_att,
            beta_aff=s.beta_aff,
            accuracy=float(np.mean(accuracy[s.slug])),
            accuracy_std=float(np.std(accuracy[s.slug])),
            runs=cfg.ablation_runs,
            test_iou=float(np.mean(iou[s.slug])),
        )
        for s in SETTINGS
    ]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "table2.csv", rows)
    return AblationResult(rows, accuracy)


def check_ablation(rows: list[AblationRow], min_gain: float = 0.05, tolerance: float = 0.02) -> dict[str, bool]:
    """The expected ordering of the ablation rows, one named check each."""
    acc = {r.description: r.accuracy for r in rows}
    base = acc["Baseline"]
    return {
        "end-to-end >= no end-to-end": acc["End-to-end"] >= acc["No end-to-end"],
        "no end-to-end >= baseline": acc["No end-to-end"] >= base,
        "end-to-end - baseline >= 5 points": acc["End-to-end"] - base >= min_gain,
        "no local supervision within 2 points of baseline": abs(acc["No local supervision"] - base) <= tolerance,
    }
