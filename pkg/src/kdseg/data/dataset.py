"""Subject loading, the preprocessing pipeline facade, and fold splitting.

On-disk layout (BraTS 2018 style): one directory per subject containing
``<subject>_<modality>.nii.gz`` for each modality plus ``<subject>_seg.nii.gz``
with integer labels. The four standard MR contrasts are ordered
(T1, T2, T1ce, Flair); any other modality set is ordered alphabetically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from ..errors import ContractError, IngestionError
from . import nifti
from .preprocess import (
    central_crop,
    normalize_nonzero,
    random_flip,
    regions_from_labels,
    subsample,
)

BRATS_MODALITIES = ("t1", "t2", "t1ce", "flair")


@dataclass
class ModalityStack:
    """Co-registered modality volumes of one subject, (N, D, H, W)."""

    voxels: Tensor
    modality_names: list[str]
    subject_id: str


@dataclass
class RegionTarget:
    """Binary region channels (3, D, H, W) ordered (WT, TC, ET)."""

    regions: Tensor


def canonical_modality_order(names) -> list[str]:
    """Standard MR contrasts in (T1, T2, T1ce, Flair) order, otherwise
    alphabetical."""
    lowered = {n.lower(): n for n in names}
    if set(lowered) == set(BRATS_MODALITIES):
        return [lowered[m] for m in BRATS_MODALITIES]
    return sorted(names)


def _modality_files(dir_path: Path) -> dict[str, Path]:
    sid = dir_path.name
    out: dict[str, Path] = {}
    for f in sorted(dir_path.iterdir()):
        name = f.name
        for suffix in (".nii.gz", ".nii"):
            if name.endswith(suffix) and name.startswith(sid + "_"):
                mod = name[len(sid) + 1 : -len(suffix)]
                if mod:
                    out[mod] = f
                break
    return out


def load_subject(dir_path, modalities=None) -> tuple[ModalityStack, Tensor]:
    """Load one subject directory into a raw stack plus integer labels.

    ``modalities`` fixes the expected modality names; by default they are
    discovered from the file names. Labels must stay within {0, 1, 2, 4}.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise IngestionError(f"subject directory not found: {dir_path}")
    sid = dir_path.name
    files = _modality_files(dir_path)
    seg_path = files.pop("seg", None)
    if seg_path is None:
        raise IngestionError(f"{dir_path}: missing label file {sid}_seg.nii(.gz)")

    if modalities is None:
        names = canonical_modality_order(files.keys())
        if not names:
            raise IngestionError(f"{dir_path}: no modality volumes found")
    else:
        names = list(modalities)
        missing = [m for m in names if m not in files]
        if missing:
            raise IngestionError(
                f"{dir_path}: missing modality files {missing}"
            )

    volumes = []
    for m in names:
        vol = nifti.read_volume(files[m])
        if vol.ndim != 3:
            raise IngestionError(
                f"{files[m]}: expected a 3-D volume, got shape {vol.shape}"
            )
        volumes.append(vol)
    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise IngestionError(
            f"{dir_path}: modality shapes disagree: {sorted(shapes)}"
        )

    labels_np = nifti.read_volume(seg_path)
    if labels_np.shape != volumes[0].shape:
        raise IngestionError(
            f"{seg_path}: label shape {labels_np.shape} does not match "
            f"modality shape {volumes[0].shape}"
        )
    if not np.isin(np.unique(labels_np), (0, 1, 2, 4)).all():
        raise IngestionError(
            f"{seg_path}: labels outside {{0, 1, 2, 4}}: "
            f"{sorted(np.unique(labels_np).tolist())}"
        )

    stack = ModalityStack(
        voxels=torch.from_numpy(
            np.ascontiguousarray(np.stack(volumes))
        ).to(torch.float32),
        modality_names=names,
        subject_id=sid,
    )
    labels = torch.from_numpy(np.ascontiguousarray(labels_np)).to(torch.int64)
    return stack, labels


@dataclass
class FoldSplit:
    """Deterministic partition of subjects into cross-validation folds."""

    fold_assignments: dict[str, int]
    seed: int

    @property
    def n_folds(self) -> int:
        return max(self.fold_assignments.values()) + 1

    def val_ids(self, fold: int) -> list[str]:
        return sorted(
            s for s, f in self.fold_assignments.items() if f == fold
        )

    def train_ids(self, fold: int) -> list[str]:
        return sorted(
            s for s, f in self.fold_assignments.items() if f != fold
        )


def split_folds(subject_ids, k: int = 3, seed: int = 0) -> FoldSplit:
    """Shuffle subjects with the seed and deal them round-robin into k
    folds; fold sizes differ by at most one."""
    ids = sorted(subject_ids)
    if len(ids) < k:
        raise ContractError(
            f"need at least {k} subjects for {k} folds, got {len(ids)}"
        )
    if len(set(ids)) != len(ids):
        raise ContractError("subject ids must be unique")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    assignments = {ids[j]: i % k for i, j in enumerate(order)}
    return FoldSplit(fold_assignments=assignments, seed=seed)


def save_folds(split: FoldSplit, path) -> None:
    lines = ["subject_id,fold"]
    for sid in sorted(split.fold_assignments):
        lines.append(f"{sid},{split.fold_assignments[sid]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_folds(path, seed: int = 0) -> FoldSplit:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != "subject_id,fold":
        raise IngestionError(f"{path}: not a fold table")
    assignments = {}
    for line in text[1:]:
        sid, fold = line.rsplit(",", 1)
        assignments[sid] = int(fold)
    return FoldSplit(fold_assignments=assignments, seed=seed)


@dataclass
class Sample:
    """One training/evaluation example after the full pipeline."""

    subject_id: str
    image: Tensor  # (C, d, h, w)
    regions: Tensor  # (3, d, h, w)


class SegmentationDataset:
    """In-memory dataset applying the fixed preprocessing pipeline.

    Subjects are loaded, normalized, and cropped once; flips (training only)
    and subsampling happen per request so augmentation stays stochastic
    while the expensive steps are cached.
    """

    def __init__(
        self,
        root,
        modalities=None,
        crop_size=(128, 128, 128),
        subsample_factor: int = 2,
    ):
        root = Path(root)
        if not root.is_dir():
            raise IngestionError(f"dataset directory not found: {root}")
        subject_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        if not subject_dirs:
            raise IngestionError(f"no subject directories under {root}")
        self.root = root
        self.crop_size = tuple(crop_size)
        self.subsample_factor = int(subsample_factor)
        self._images: dict[str, Tensor] = {}
        self._regions: dict[str, Tensor] = {}
        self.subject_ids: list[str] = []
        self.modality_names: list[str] | None = None
        for d in subject_dirs:
            stack, labels = load_subject(d, modalities)
            if self.modality_names is None:
                self.modality_names = stack.modality_names
                modalities = self.modality_names
            image = central_crop(
                normalize_nonzero(stack.voxels, stack.modality_names),
                self.crop_size,
            )
            regions = regions_from_labels(central_crop(labels, self.crop_size))
            self._images[stack.subject_id] = image
            self._regions[stack.subject_id] = regions
            self.subject_ids.append(stack.subject_id)

    def __len__(self) -> int:
        return len(self.subject_ids)

    def modality_index(self, name: str) -> int:
        assert self.modality_names is not None
        lowered = [m.lower() for m in self.modality_names]
        if name.lower() not in lowered:
            raise ContractError(
                f"modality '{name}' not in dataset modalities "
                f"{self.modality_names}"
            )
        return lowered.index(name.lower())

    def sample(
        self, subject_id: str, rng: np.random.Generator | None = None
    ) -> Sample:
        """Emit one pipeline output; pass an rng to apply training flips."""
        image = self._images[subject_id]
        regions = self._regions[subject_id]
        if rng is not None:
            image, regions = random_flip(image, regions, rng)
        f = self.subsample_factor
        return Sample(
            subject_id=subject_id,
            image=subsample(image, f),
            regions=subsample(regions, f, binary=True),
        )
