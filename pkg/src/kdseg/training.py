"""Two-stage training: teacher on ground truth, then a mono-modal student
against the frozen teacher.

A single generic loop drives three modes: ``teacher`` (all modalities, GT
loss only), ``baseline`` (one modality, GT loss only), and ``student`` (one
modality, full objective against a frozen teacher). Every run writes a
frozen config snapshot, a per-epoch metrics CSV, and best/last checkpoints
into its run directory. All randomness (shuffling, flips, init) is keyed on
the config seed, so a run is reproducible from its snapshot alone.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data.dataset import SegmentationDataset, split_folds, save_folds
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import (
    LossWeights,
    gt_loss,
    kd_loss,
    kl_bottleneck_loss,
    total_loss,
)
from .network import (
    NetworkConfig,
    SegmentationNetwork,
    build_network,
    freeze,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "lr",
    "train_kd",
    "train_kl",
    "train_gt",
    "train_total",
    "val_total",
)


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference protocol."""

    epochs: int = 500
    lr: float = 1e-4
    plateau_factor: float = 0.2
    plateau_patience: int = 50
    batch_size: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    student_modality: str = "T1ce"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(
                f"plateau_factor must be in (0, 1), got {self.plateau_factor}"
            )
        if self.plateau_patience < 1:
            raise ConfigError(
                f"plateau_patience must be >= 1, got {self.plateau_patience}"
            )
        if self.batch_size < 1:
            raise ConfigError(
                f"batch_size must be >= 1, got {self.batch_size}"
            )


@dataclass
class TrainState:
    """Plateau-schedule bookkeeping carried across epochs."""

    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    current_lr: float = 1e-4
    rng_state: object = None


def lr_step(
    state: TrainState,
    val_loss: float,
    patience: int = 50,
    factor: float = 0.2,
) -> TrainState:
    """Advance the plateau schedule by one validation result.

    A strict improvement of the running best resets the stall counter; once
    the counter reaches ``patience`` the learning rate is multiplied by
    ``factor`` and the counter resets (the best value is kept).
    """
    if val_loss < state.best_val_loss:
        return replace(
            state,
            epoch=state.epoch + 1,
            best_val_loss=val_loss,
            epochs_since_improvement=0,
        )
    stalled = state.epochs_since_improvement + 1
    if stalled >= patience:
        return replace(
            state,
            epoch=state.epoch + 1,
            epochs_since_improvement=0,
            current_lr=state.current_lr * factor,
        )
    return replace(
        state, epoch=state.epoch + 1, epochs_since_improvement=stalled
    )


@dataclass
class RunResult:
    """Artifacts of one training run."""

    best_ckpt: Path
    last_ckpt: Path
    metrics_path: Path
    best_val_loss: float
    history: list[dict]


def _batches(ids: list[str], batch_size: int):
    for i in range(0, len(ids), batch_size):
        yield ids[i : i + batch_size]


def _collect_batch(dataset, ids, epoch, seed, augment):
    """Stack a batch, applying per-subject flips keyed on (seed, subject,
    epoch) so augmentation is reproducible regardless of batch order."""
    images, regions = [], []
    for sid in ids:
        rng = None
        if augment:
            idx = dataset.subject_ids.index(sid)
            rng = np.random.default_rng([seed, idx, epoch])
        s = dataset.sample(sid, rng)
        images.append(s.image)
        regions.append(s.regions)
    return torch.stack(images), torch.stack(regions)


class _Objective:
    """Per-batch loss terms for one training mode."""

    def __init__(self, mode, weights, teacher=None, modality_index=0):
        if mode not in ("teacher", "baseline", "student"):
            raise ConfigError(f"unknown training mode '{mode}'")
        self.mode = mode
        self.weights = weights
        self.teacher = teacher
        self.modality_index = modality_index

    def net_input(self, images: torch.Tensor) -> torch.Tensor:
        if self.mode == "teacher":
            return images
        i = self.modality_index
        return images[:, i : i + 1]

    def compute(self, net, images, targets):
        """Returns (total, kd, kl, gt) tensors for one batch."""
        out = net(self.net_input(images))
        gt = gt_loss(out.logits, targets)
        zero = torch.zeros((), dtype=gt.dtype)
        if self.mode != "student":
            return gt, zero, zero, gt
        with torch.no_grad():
            t_out = self.teacher(images)
        w = self.weights
        kd = (
            kd_loss(out.logits, t_out.logits, w.temperature)
            if w.enable_kd
            else zero
        )
        kl = (
            kl_bottleneck_loss(out.bottleneck, t_out.bottleneck)
            if w.enable_kl
            else zero
        )
        return total_loss(kd, gt, kl, w), kd, kl, gt


def _write_metrics(path: Path, history: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in history:
        lines.append(
            ",".join(
                f"{row[c]:.10g}" if c != "epoch" else str(row[c])
                for c in METRIC_COLUMNS
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _run_training(
    cfg: TrainConfig,
    net: SegmentationNetwork,
    objective: _Objective,
    dataset: SegmentationDataset,
    train_ids: list[str],
    val_ids: list[str],
    out_dir: Path,
) -> RunResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Frozen snapshot first: the run must be reproducible from it alone.
    from .config import render_config

    (out_dir / "config.ini").write_text(
        render_config(cfg, net.config, dataset)
    )

    if not train_ids or not val_ids:
        raise ConfigError("training and validation sets must be non-empty")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        [p for p in net.parameters() if p.requires_grad],
        lr=cfg.lr,
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    state = TrainState(current_lr=cfg.lr)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    metrics_path = out_dir / "metrics.csv"
    history: list[dict] = []
    best_val = math.inf

    for epoch in range(cfg.epochs):
        net.train()
        for group in opt.param_groups:
            group["lr"] = state.current_lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(
            len(train_ids)
        )
        shuffled = [train_ids[i] for i in order]
        sums = {"kd": 0.0, "kl": 0.0, "gt": 0.0, "total": 0.0}
        for batch_ids in _batches(shuffled, cfg.batch_size):
            images, targets = _collect_batch(
                dataset, batch_ids, epoch, cfg.seed, augment=True
            )
            total, kd, kl, gt = objective.compute(net, images, targets)
            if not torch.isfinite(total):
                _dump_state(out_dir, epoch, batch_ids, total, kd, kl, gt)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; "
                    f"state dumped to {out_dir / 'state_dump.json'}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            n = len(batch_ids)
            sums["kd"] += float(kd.detach()) * n
            sums["kl"] += float(kl.detach()) * n
            sums["gt"] += float(gt.detach()) * n
            sums["total"] += float(total.detach()) * n

        net.eval()
        val_total = 0.0
        with torch.no_grad():
            for sid in val_ids:
                images, targets = _collect_batch(
                    dataset, [sid], epoch, cfg.seed, augment=False
                )
                total, _, _, _ = objective.compute(net, images, targets)
                val_total += float(total)
        val_total /= len(val_ids)

        n_train = len(train_ids)
        row = {
            "epoch": epoch,
            "lr": state.current_lr,
            "train_kd": sums["kd"] / n_train,
            "train_kl": sums["kl"] / n_train,
            "train_gt": sums["gt"] / n_train,
            "train_total": sums["total"] / n_train,
            "val_total": val_total,
        }
        history.append(row)
        logger.info(
            "epoch %d lr %.3g train_kd %.5f train_kl %.5f train_gt %.5f "
            "train_total %.5f val_total %.5f",
            epoch,
            row["lr"],
            row["train_kd"],
            row["train_kl"],
            row["train_gt"],
            row["train_total"],
            row["val_total"],
        )
        if val_total < best_val:
            best_val = val_total
            save_checkpoint(net, best_path)
        state = lr_step(
            state, val_total, cfg.plateau_patience, cfg.plateau_factor
        )

    save_checkpoint(net, last_path)
    _write_metrics(metrics_path, history)
    return RunResult(
        best_ckpt=best_path,
        last_ckpt=last_path,
        metrics_path=metrics_path,
        best_val_loss=best_val,
        history=history,
    )


def _dump_state(out_dir: Path, epoch, batch_ids, total, kd, kl, gt) -> None:
    payload = {
        "epoch": epoch,
        "batch": list(batch_ids),
        "total": float(total),
        "kd": float(kd),
        "kl": float(kl),
        "gt": float(gt),
    }
    (out_dir / "state_dump.json").write_text(json.dumps(payload, indent=2))


def _teacher_net_cfg(net_cfg: NetworkConfig, n_modalities: int):
    return replace(net_cfg, in_channels=n_modalities)


def train_teacher(
    cfg: TrainConfig,
    dataset: SegmentationDataset,
    net_cfg: NetworkConfig,
    train_ids: list[str],
    val_ids: list[str],
    out_dir,
) -> RunResult:
    """Stage one: optimize the multi-modal teacher on the GT loss only."""
    n_mod = len(dataset.modality_names)
    net = build_network(_teacher_net_cfg(net_cfg, n_mod), cfg.seed)
    objective = _Objective("teacher", cfg.weights)
    return _run_training(
        cfg, net, objective, dataset, train_ids, val_ids, out_dir
    )


def train_baseline(
    cfg: TrainConfig,
    dataset: SegmentationDataset,
    net_cfg: NetworkConfig,
    train_ids: list[str],
    val_ids: list[str],
    out_dir,
) -> RunResult:
    """Mono-modal reference: GT loss only, no teacher involved."""
    idx = dataset.modality_index(cfg.student_modality)
    net = build_network(replace(net_cfg, in_channels=1), cfg.seed)
    objective = _Objective("baseline", cfg.weights, modality_index=idx)
    return _run_training(
        cfg, net, objective, dataset, train_ids, val_ids, out_dir
    )


def train_student(
    cfg: TrainConfig,
    teacher_ckpt,
    dataset: SegmentationDataset,
    net_cfg: NetworkConfig,
    train_ids: list[str],
    val_ids: list[str],
    out_dir,
) -> RunResult:
    """Stage two: train the mono-modal student with the full objective.

    The teacher is loaded from its checkpoint, frozen, and run without
    gradients; its parameters are bitwise unchanged by the student run.
    """
    teacher = freeze(load_checkpoint(teacher_ckpt))
    n_mod = len(dataset.modality_names)
    if teacher.config.in_channels != n_mod:
        raise CheckpointError(
            f"teacher expects {teacher.config.in_channels} modalities but "
            f"the dataset provides {n_mod}"
        )
    if (
        teacher.config.depth != net_cfg.depth
        or teacher.config.base_filters != net_cfg.base_filters
    ):
        raise CheckpointError(
            "teacher and student structure differ: teacher depth "
            f"{teacher.config.depth}/filters {teacher.config.base_filters} "
            f"vs student depth {net_cfg.depth}/filters "
            f"{net_cfg.base_filters}; bottlenecks would not align"
        )
    idx = dataset.modality_index(cfg.student_modality)
    net = build_network(replace(net_cfg, in_channels=1), cfg.seed)
    objective = _Objective(
        "student", cfg.weights, teacher=teacher, modality_index=idx
    )
    return _run_training(
        cfg, net, objective, dataset, train_ids, val_ids, out_dir
    )


def run_cross_validation(
    cfg: TrainConfig,
    dataset: SegmentationDataset,
    net_cfg: NetworkConfig,
    stage: str,
    out_dir,
    k: int = 3,
    teacher_ckpts: list | None = None,
) -> dict:
    """Train one stage across k folds and aggregate validation Dice.

    ``stage`` is one of teacher / baseline / student; the student stage
    needs one teacher checkpoint per fold. Returns the aggregate dict also
    written to ``cv_metrics.json``.
    """
    from .evaluation import evaluate

    if stage not in ("teacher", "baseline", "student"):
        raise ConfigError(f"unknown stage '{stage}'")
    if stage == "student":
        if not teacher_ckpts or len(teacher_ckpts) != k:
            raise ConfigError(
                f"student stage needs {k} teacher checkpoints, got "
                f"{0 if not teacher_ckpts else len(teacher_ckpts)}"
            )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = split_folds(dataset.subject_ids, k=k, seed=cfg.seed)
    save_folds(split, out_dir / "folds.csv")

    fold_scores = []
    fold_losses = []
    for fold in range(k):
        fold_dir = out_dir / f"fold{fold}"
        train_ids = split.train_ids(fold)
        val_ids = split.val_ids(fold)
        try:
            if stage == "teacher":
                result = train_teacher(
                    cfg, dataset, net_cfg, train_ids, val_ids, fold_dir
                )
                net = load_checkpoint(result.best_ckpt)
                modality = None
            elif stage == "baseline":
                result = train_baseline(
                    cfg, dataset, net_cfg, train_ids, val_ids, fold_dir
                )
                net = load_checkpoint(result.best_ckpt)
                modality = cfg.student_modality
            else:
                result = train_student(
                    cfg,
                    teacher_ckpts[fold],
                    dataset,
                    net_cfg,
                    train_ids,
                    val_ids,
                    fold_dir,
                )
                net = load_checkpoint(result.best_ckpt)
                modality = cfg.student_modality
            scores = evaluate(net, dataset, subject_ids=val_ids, modality=modality)
        except Exception as exc:
            raise TrainingError(f"fold {fold} failed: {exc}") from exc
        fold_scores.append(scores)
        fold_losses.append(result.best_val_loss)

    per_region = {
        r: [getattr(s, r) for s in fold_scores] for r in ("wt", "tc", "et")
    }
    aggregate = {
        "stage": stage,
        "folds": k,
        "best_val_loss": fold_losses,
        "dice": {
            r: {
                "per_fold": vals,
                "mean": float(np.mean(vals)),
                "std_folds": float(np.std(vals)),
            }
            for r, vals in per_region.items()
        },
        "subject_std": {
            r: float(np.std(sum((s.per_subject[r] for s in fold_scores), [])))
            for r in ("wt", "tc", "et")
        },
    }
    (out_dir / "cv_metrics.json").write_text(json.dumps(aggregate, indent=2))
    return aggregate
