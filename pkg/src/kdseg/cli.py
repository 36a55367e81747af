"""Command-line interface.

Subcommands: ``synth-data`` (write a synthetic dataset), ``train-teacher``
and ``train-student`` (one fold of the two-stage protocol), ``evaluate``
(score a checkpoint), and ``ablate`` (the full cross-validated loss/skip
grid). Every run writes its fully-resolved config before doing work; exit
codes are 0 success, 1 runtime failure, 2 usage error, 3 validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from .config import ResolvedConfig, render_config, resolve_config
from .data.dataset import SegmentationDataset, save_folds, split_folds
from .data.synthetic import synth_generate
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    IngestionError,
    KDSegError,
)
from .evaluation import (
    AblationSpec,
    default_ablation_rows,
    emit_report,
    evaluate,
    run_ablation,
)
from .figures import plot_region_overlay, plot_training_curves
from .network import load_checkpoint
from .training import train_student, train_teacher

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    """What was asked of this run, recorded next to its outputs."""

    command: str
    config_path: str | None
    output_dir: str
    overrides: list[str]


def _write_manifest(out_dir: Path, manifest: RunManifest) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(asdict(manifest), indent=2) + "\n"
    )


def _load_dataset(args, resolved: ResolvedConfig) -> SegmentationDataset:
    root = args.data or resolved.data.root
    if not root:
        raise ConfigError(
            "no dataset given: pass --data or set [data] root in the config"
        )
    # Fold the dataset path into the resolved config so the frozen snapshot
    # alone suffices to re-run the command.
    resolved.data.root = str(root)
    resolved.text = render_config(
        resolved.train, resolved.network, resolved.data
    )
    c = resolved.data.crop_size
    return SegmentationDataset(
        root,
        crop_size=(c, c, c),
        subsample_factor=resolved.data.subsample_factor,
    )


def _freeze_config(out_dir: Path, resolved: ResolvedConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(resolved.text)


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    synth_generate(args.subjects, args.size, args.seed, out, args.jitter)
    manifest = {
        "command": "synth-data",
        "subjects": args.subjects,
        "size": args.size,
        "seed": args.seed,
        "jitter": args.jitter,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.subjects} subjects of size {args.size}^3 to {out}")
    return 0


def _single_fold_ids(dataset, seed: int, fold: int):
    split = split_folds(dataset.subject_ids, k=3, seed=seed)
    return split, split.train_ids(fold), split.val_ids(fold)


def cmd_train_teacher(args) -> int:
    resolved = resolve_config(args.config, args.set)
    dataset = _load_dataset(args, resolved)
    out = Path(args.out)
    _freeze_config(out, resolved)
    _write_manifest(
        out,
        RunManifest("train-teacher", args.config, str(out), list(args.set)),
    )
    split, train_ids, val_ids = _single_fold_ids(
        dataset, resolved.train.seed, args.fold
    )
    save_folds(split, out / "folds.csv")
    result = train_teacher(
        resolved.train, dataset, resolved.network, train_ids, val_ids, out
    )
    plot_training_curves(result.history, out / "loss_curves.png")
    print(
        f"teacher done: best val loss {result.best_val_loss:.5f}, "
        f"checkpoint {result.best_ckpt}"
    )
    return 0


def cmd_train_student(args) -> int:
    resolved = resolve_config(args.config, args.set)
    dataset = _load_dataset(args, resolved)
    out = Path(args.out)
    _freeze_config(out, resolved)
    _write_manifest(
        out,
        RunManifest("train-student", args.config, str(out), list(args.set)),
    )
    split, train_ids, val_ids = _single_fold_ids(
        dataset, resolved.train.seed, args.fold
    )
    save_folds(split, out / "folds.csv")
    result = train_student(
        resolved.train,
        args.teacher,
        dataset,
        resolved.network,
        train_ids,
        val_ids,
        out,
    )
    plot_training_curves(result.history, out / "loss_curves.png")
    print(
        f"student done: best val loss {result.best_val_loss:.5f}, "
        f"checkpoint {result.best_ckpt}"
    )
    return 0


def cmd_evaluate(args) -> int:
    resolved = resolve_config(args.config, args.set)
    net = load_checkpoint(args.ckpt)
    dataset = _load_dataset(args, resolved)
    out = Path(args.out)
    _freeze_config(out, resolved)
    _write_manifest(
        out, RunManifest("evaluate", args.config, str(out), list(args.set))
    )
    ids = None
    if args.fold is not None:
        split, _, ids = _single_fold_ids(
            dataset, resolved.train.seed, args.fold
        )
    modality = (
        resolved.train.student_modality
        if net.config.in_channels == 1
        else None
    )
    scores = evaluate(
        net, dataset, subject_ids=ids, modality=modality, nest=args.nest
    )

    lines = ["region,mean,std"]
    for r in ("wt", "tc", "et"):
        lines.append(
            f"{r.upper()},{getattr(scores, r):.4f},{getattr(scores, r + '_std'):.4f}"
        )
    (out / "scores.csv").write_text("\n".join(lines) + "\n")
    used = ids if ids is not None else dataset.subject_ids
    per = ["subject_id,wt,tc,et"]
    for i, sid in enumerate(used):
        per.append(
            f"{sid},{scores.per_subject['wt'][i]:.4f},"
            f"{scores.per_subject['tc'][i]:.4f},{scores.per_subject['et'][i]:.4f}"
        )
    (out / "per_subject.csv").write_text("\n".join(per) + "\n")

    # Slice overlay of the first evaluated subject for a quick visual check.
    s = dataset.sample(used[0])
    from .evaluation import predict_regions

    if modality is None:
        image = s.image
    else:
        idx = dataset.modality_index(modality)
        image = s.image[idx : idx + 1]
    pred = predict_regions(net, image, args.threshold)
    mid = s.image.shape[-1] // 2
    plot_region_overlay(
        image[0, :, :, mid],
        s.regions.sum(0)[:, :, mid],
        pred.sum(0)[:, :, mid],
        out / "overlay.png",
        title=used[0],
    )
    print(
        f"dice (%): WT {scores.wt:.2f} TC {scores.tc:.2f} ET {scores.et:.2f}"
    )
    return 0


def cmd_ablate(args) -> int:
    resolved = resolve_config(args.config, args.set)
    dataset = _load_dataset(args, resolved)
    out = Path(args.out)
    _freeze_config(out, resolved)
    _write_manifest(
        out, RunManifest("ablate", args.config, str(out), list(args.set))
    )
    if args.skips:
        skips = tuple(int(s) for s in args.skips.split(","))
    else:
        skips = (resolved.network.depth, 0)
    spec = AblationSpec(rows=default_ablation_rows(skips))
    result = run_ablation(
        spec, dataset, resolved.network, resolved.train, out
    )
    paths = emit_report(
        result,
        {"seed": resolved.train.seed, "config": resolved.text},
    )
    print(f"ablation report: {paths['csv']} {paths['md']} {paths['figure']}")
    if result.failures:
        print(f"{len(result.failures)} row(s) failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdseg",
        description=(
            "Distill a multi-modal 3D segmentation teacher into a "
            "mono-modal student"
        ),
    )
    parser.add_argument(
        "--quiet", action="store_true", help="suppress per-epoch progress"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=60)
    p.add_argument("--size", type=int, default=32, help="cubic volume side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--jitter",
        type=float,
        default=0.05,
        help="annotation jitter scale applied to the stored masks",
    )
    p.set_defaults(func=cmd_synth_data)

    def common(p, teacher=False, ckpt=False):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--data", default=None, help="dataset directory")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override (repeatable)",
        )
        if teacher:
            p.add_argument(
                "--teacher", required=True, help="teacher checkpoint path"
            )
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint to score")

    p = sub.add_parser("train-teacher", help="train the multi-modal teacher")
    common(p)
    p.add_argument("--fold", type=int, default=0, choices=(0, 1, 2))
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser(
        "train-student", help="train the mono-modal student via distillation"
    )
    common(p, teacher=True)
    p.add_argument("--fold", type=int, default=0, choices=(0, 1, 2))
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="per-region Dice of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--fold", type=int, default=None, choices=(0, 1, 2))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument(
        "--nest", action="store_true", help="force predicted regions to nest"
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "ablate", help="cross-validated loss-term and skip-connection grid"
    )
    common(p)
    p.add_argument(
        "--skips", default=None, help="comma-separated skip settings"
    )
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ContractError, IngestionError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KDSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort categorization
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
