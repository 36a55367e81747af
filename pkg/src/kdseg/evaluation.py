"""Per-region Dice evaluation, the loss-term/skip ablation runner, and
report emission (CSV + markdown + figures).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data.dataset import SegmentationDataset
from .errors import ContractError
from .losses import LossWeights, binarize
from .network import NetworkConfig, SegmentationNetwork
from .training import TrainConfig, run_cross_validation

logger = logging.getLogger(__name__)

REGION_ORDER = ("wt", "tc", "et")

# Loss labels of the ablation rows and the flag settings they stand for.
LOSS_FLAGS = {
    "GT": (False, False),
    "GT+KL": (False, True),
    "GT+KD": (True, False),
    "GT+KL+KD": (True, True),
}

RESULTS_COLUMNS = ("skip", "model", "loss", "region", "mean", "std", "fold0", "fold1", "fold2")


@dataclass
class RegionScores:
    """Mean Dice per region in percent, with per-subject spread."""

    wt: float
    tc: float
    et: float
    wt_std: float = 0.0
    tc_std: float = 0.0
    et_std: float = 0.0
    per_subject: dict = field(default_factory=dict)


@dataclass
class AblationRow:
    skip_connections: int
    model: str  # baseline | teacher | kd-net
    loss: str  # key of LOSS_FLAGS


@dataclass
class AblationSpec:
    """Row set of the ablation table; defaults to the full grid."""

    rows: list[AblationRow]

    def __post_init__(self) -> None:
        for row in self.rows:
            if row.model not in ("baseline", "teacher", "kd-net"):
                raise ContractError(f"unknown model '{row.model}'")
            if row.loss not in LOSS_FLAGS:
                raise ContractError(f"unknown loss label '{row.loss}'")
            if row.model in ("baseline", "teacher") and row.loss != "GT":
                raise ContractError(
                    f"{row.model} rows train with GT only, got '{row.loss}'"
                )


def default_ablation_rows(skips=(4, 0)) -> list[AblationRow]:
    """Baseline, teacher, and the three distillation objectives, for each
    skip-connection setting."""
    rows = []
    for skip in skips:
        rows.append(AblationRow(skip, "baseline", "GT"))
        rows.append(AblationRow(skip, "teacher", "GT"))
        for loss in ("GT+KL", "GT+KD", "GT+KL+KD"):
            rows.append(AblationRow(skip, "kd-net", loss))
    return rows


def hard_dice(pred_binary: Tensor, target_binary: Tensor) -> float:
    """Hard Dice overlap in percent: 200|A∩B| / (|A|+|B|).

    Two empty masks count as perfect agreement (100).
    """
    if pred_binary.shape != target_binary.shape:
        raise ContractError(
            f"shape mismatch: {tuple(pred_binary.shape)} vs "
            f"{tuple(target_binary.shape)}"
        )
    for name, t in (("pred", pred_binary), ("target", target_binary)):
        if not torch.logical_or(t == 0, t == 1).all():
            raise ContractError(f"{name} mask is not binary")
    a = pred_binary.to(torch.float64)
    b = target_binary.to(torch.float64)
    denom = float(a.sum() + b.sum())
    if denom == 0.0:
        return 100.0
    return 200.0 * float((a * b).sum()) / denom


def predict_regions(
    net: SegmentationNetwork, image: Tensor, threshold: float = 0.5
) -> Tensor:
    """Binarized region prediction for one preprocessed image (C, d, h, w)."""
    net.eval()
    with torch.no_grad():
        logits = net(image.unsqueeze(0)).logits[0]
    return binarize(torch.sigmoid(logits), threshold)


def enforce_nesting(regions: Tensor) -> Tensor:
    """Force ET ⊆ TC ⊆ WT by intersecting inner regions with outer ones."""
    wt, tc, et = regions[0], regions[1], regions[2]
    tc = tc * wt
    et = et * tc
    return torch.stack([wt, tc, et])


def evaluate(
    net: SegmentationNetwork,
    dataset: SegmentationDataset,
    threshold: float = 0.5,
    subject_ids=None,
    modality: str | None = None,
    nest: bool = False,
) -> RegionScores:
    """Mean per-region hard Dice of a network over dataset subjects.

    Mono-modal networks evaluate on the channel named by ``modality``;
    multi-modal networks see the full stack. Predicted regions are not
    forced to nest unless ``nest`` is set.
    """
    ids = list(subject_ids) if subject_ids is not None else list(dataset.subject_ids)
    if not ids:
        raise ContractError("cannot evaluate on an empty subject set")
    n_mod = len(dataset.modality_names)
    if net.config.in_channels == n_mod:
        chan = None
    elif net.config.in_channels == 1:
        if modality is None:
            raise ContractError(
                "mono-modal network needs a modality name to evaluate"
            )
        chan = dataset.modality_index(modality)
    else:
        raise ContractError(
            f"network expects {net.config.in_channels} channels; dataset "
            f"has {n_mod} modalities"
        )

    per_subject = {r: [] for r in REGION_ORDER}
    for sid in ids:
        s = dataset.sample(sid)
        image = s.image if chan is None else s.image[chan : chan + 1]
        pred = predict_regions(net, image, threshold)
        if nest:
            pred = enforce_nesting(pred)
        for i, r in enumerate(REGION_ORDER):
            per_subject[r].append(hard_dice(pred[i], s.regions[i]))
    return RegionScores(
        wt=float(np.mean(per_subject["wt"])),
        tc=float(np.mean(per_subject["tc"])),
        et=float(np.mean(per_subject["et"])),
        wt_std=float(np.std(per_subject["wt"])),
        tc_std=float(np.std(per_subject["tc"])),
        et_std=float(np.std(per_subject["et"])),
        per_subject=per_subject,
    )


@dataclass
class AblationEntry:
    """Results of one ablation row: per-fold Dice per region, or a failure."""

    row: AblationRow
    per_fold: dict | None  # region -> [fold dice]
    error: str | None = None

    def mean(self, region: str) -> float:
        return float(np.mean(self.per_fold[region]))

    def std(self, region: str) -> float:
        return float(np.std(self.per_fold[region]))


@dataclass
class AblationResult:
    entries: list[AblationEntry]
    out_dir: Path

    @property
    def failures(self) -> list[AblationEntry]:
        return [e for e in self.entries if e.error is not None]


def _row_dir(out_dir: Path, row: AblationRow) -> Path:
    loss_slug = row.loss.lower().replace("+", "_")
    return out_dir / f"skip{row.skip_connections}" / f"{row.model}_{loss_slug}"


def run_ablation(
    spec: AblationSpec,
    dataset: SegmentationDataset,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    out_dir,
    k: int = 3,
) -> AblationResult:
    """Train and evaluate every ablation row with k-fold cross-validation.

    The teacher for a given skip setting is trained once and shared by all
    kd-net rows of that setting. Row failures are recorded in the table
    instead of aborting the sweep.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[AblationEntry] = []
    teacher_cache: dict = {}

    def teacher_ckpts_for(skip: int) -> list[Path]:
        if skip not in teacher_cache:
            cfg_skip = replace(
                net_cfg, in_channels=1, skip_connections=skip
            )
            tdir = out_dir / f"skip{skip}" / "teacher_gt"
            agg = run_cross_validation(
                train_cfg, dataset, cfg_skip, "teacher", tdir, k=k
            )
            teacher_cache[skip] = [
                tdir / f"fold{i}" / "best.ckpt" for i in range(k)
            ]
            teacher_cache[skip, "agg"] = agg
        return teacher_cache[skip]

    for row in spec.rows:
        cfg_skip = replace(
            net_cfg, in_channels=1, skip_connections=row.skip_connections
        )
        row_dir = _row_dir(out_dir, row)
        try:
            if row.model == "teacher":
                teacher_ckpts_for(row.skip_connections)
                agg = teacher_cache[row.skip_connections, "agg"]
            elif row.model == "baseline":
                agg = run_cross_validation(
                    train_cfg, dataset, cfg_skip, "baseline", row_dir, k=k
                )
            else:
                enable_kd, enable_kl = LOSS_FLAGS[row.loss]
                w = train_cfg.weights
                row_cfg = replace(
                    train_cfg,
                    weights=LossWeights(
                        lam=w.lam,
                        alpha=w.alpha,
                        temperature=w.temperature,
                        enable_kd=enable_kd,
                        enable_kl=enable_kl,
                    ),
                )
                agg = run_cross_validation(
                    row_cfg,
                    dataset,
                    cfg_skip,
                    "student",
                    row_dir,
                    k=k,
                    teacher_ckpts=teacher_ckpts_for(row.skip_connections),
                )
            per_fold = {
                r: agg["dice"][r]["per_fold"] for r in REGION_ORDER
            }
            entries.append(AblationEntry(row=row, per_fold=per_fold))
        except Exception as exc:
            logger.error(
                "ablation row (skip=%d, %s, %s) failed: %s",
                row.skip_connections,
                row.model,
                row.loss,
                exc,
            )
            entries.append(
                AblationEntry(row=row, per_fold=None, error=str(exc))
            )
    return AblationResult(entries=entries, out_dir=out_dir)


def _format_cell(entry: AblationEntry, region: str) -> str:
    if entry.error is not None:
        return "FAILED"
    return f"{entry.mean(region):.2f} ± {entry.std(region):.2f}"


def emit_report(result: AblationResult, run_metadata: dict, out_dir=None):
    """Write results.csv, results.md, meta.json, and the summary figure.

    The CSV holds one row per (ablation entry, region) with per-fold values;
    the markdown mirrors the wide per-region layout. ``run_metadata`` should
    carry at least the seed and the frozen config; its hash is embedded for
    provenance.
    """
    out_dir = Path(out_dir) if out_dir is not None else result.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(run_metadata)
    config_text = meta.get("config", "")
    meta["config_hash"] = hashlib.sha256(
        config_text.encode() if isinstance(config_text, str) else config_text
    ).hexdigest()

    csv_lines = [",".join(RESULTS_COLUMNS)]
    for e in result.entries:
        for region in ("et", "tc", "wt"):
            if e.error is not None:
                cells = ["FAILED"] * 5
            else:
                folds = e.per_fold[region]
                cells = [
                    f"{e.mean(region):.4f}",
                    f"{e.std(region):.4f}",
                ] + [f"{v:.4f}" for v in folds]
            csv_lines.append(
                ",".join(
                    [
                        str(e.row.skip_connections),
                        e.row.model,
                        e.row.loss,
                        region.upper(),
                    ]
                    + cells
                )
            )
    csv_path = out_dir / "results.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n")

    md = [
        "| skips | model | loss | ET | TC | WT |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for e in result.entries:
        md.append(
            "| {} | {} | {} | {} | {} | {} |".format(
                e.row.skip_connections,
                e.row.model,
                e.row.loss,
                _format_cell(e, "et"),
                _format_cell(e, "tc"),
                _format_cell(e, "wt"),
            )
        )
    md.append("")
    md.append(
        f"seed: {meta.get('seed', 'n/a')}  |  config hash: {meta['config_hash']}"
    )
    md.append("Dice in percent, mean ± std over folds, evaluated at the training resolution.")
    md_path = out_dir / "results.md"
    md_path.write_text("\n".join(md) + "\n")

    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, default=str))

    from .figures import plot_ablation

    fig_path = out_dir / "results.png"
    plot_ablation(result, fig_path)
    return {"csv": csv_path, "md": md_path, "meta": meta_path, "figure": fig_path}


def parse_results_csv(path) -> list[dict]:
    """Read results.csv back into a list of row dicts (round-trip check)."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(RESULTS_COLUMNS):
        raise ContractError(f"{path}: unexpected results header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(RESULTS_COLUMNS, parts))
        row["skip"] = int(row["skip"])
        for col in ("mean", "std", "fold0", "fold1", "fold2"):
            if row[col] != "FAILED":
                row[col] = float(row[col])
        rows.append(row)
    return rows
