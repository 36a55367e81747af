"""Volume preprocessing: normalization, cropping, flips, subsampling, and
region-target construction.

The pipeline order is fixed: load, normalize over nonzero voxels, central
crop, random flip (training only), subsample. Image and target volumes
always receive the same spatial transforms; region targets are derived from
labels before subsampling so stride picking keeps them binary and nested.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from ..errors import ContractError

# BraTS label vocabulary: 0 background, 1 necrotic/non-enhancing core,
# 2 edema, 4 enhancing tumor.
VALID_LABELS = (0, 1, 2, 4)
REGION_NAMES = ("WT", "TC", "ET")
_REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}


def normalize_nonzero(voxels: Tensor, names=None) -> Tensor:
    """Z-score each modality over its nonzero voxels; zeros stay zero.

    ``voxels`` is (C, D, H, W). Mean and (population) std are computed over
    the nonzero positions of each channel and applied only there, so the
    background keeps its exact-zero encoding.
    """
    if voxels.dim() != 4:
        raise ContractError(
            f"expected (C, D, H, W) voxels, got {voxels.dim()} dims"
        )
    out = voxels.to(torch.float32).clone()
    for c in range(out.shape[0]):
        chan = out[c]
        mask = chan != 0
        label = names[c] if names else f"channel {c}"
        n = int(mask.sum())
        if n < 2:
            raise ContractError(
                f"degenerate modality {label}: fewer than 2 nonzero voxels"
            )
        vals = chan[mask]
        mean = vals.mean()
        std = vals.std(unbiased=False)
        if std == 0:
            raise ContractError(
                f"degenerate modality {label}: constant nonzero region"
            )
        chan[mask] = (vals - mean) / std
    return out


def central_crop(volume: Tensor, size=(128, 128, 128)) -> Tensor:
    """Crop the last three dims to ``size``, centered with floor offsets."""
    if volume.dim() < 3:
        raise ContractError(
            f"expected at least 3 spatial dims, got {volume.dim()}"
        )
    spatial = volume.shape[-3:]
    for d, s in zip(spatial, size):
        if d < s:
            raise ContractError(
                f"volume {tuple(spatial)} smaller than crop {tuple(size)}"
            )
    off = [(d - s) // 2 for d, s in zip(spatial, size)]
    return volume[
        ...,
        off[0] : off[0] + size[0],
        off[1] : off[1] + size[1],
        off[2] : off[2] + size[2],
    ]


def random_flip(stack: Tensor, target: Tensor, rng: np.random.Generator):
    """Flip each spatial axis independently with probability 0.5, applying
    the same flips to images and targets."""
    axes = [i - 3 for i in range(3) if rng.random() < 0.5]
    if axes:
        stack = torch.flip(stack, axes)
        target = torch.flip(target, axes)
    return stack, target


def subsample(volume: Tensor, factor: int = 2, binary: bool = False) -> Tensor:
    """Downsample the last three dims by ``factor``.

    Images (``binary=False``) are mean-pooled; binary volumes are subsampled
    by stride picking (first voxel of each window) so they stay binary.
    """
    if factor < 1:
        raise ContractError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return volume
    for d in volume.shape[-3:]:
        if d % factor != 0:
            raise ContractError(
                f"spatial dims {tuple(volume.shape[-3:])} not divisible "
                f"by factor {factor}"
            )
    if binary:
        return volume[..., ::factor, ::factor, ::factor]
    lead = volume.shape[:-3]
    flat = volume.reshape(1, -1, *volume.shape[-3:]).to(torch.float32)
    pooled = F.avg_pool3d(flat, factor)
    return pooled.reshape(*lead, *pooled.shape[-3:])


def regions_from_labels(labels: Tensor) -> Tensor:
    """Build the nested (WT, TC, ET) region channels from integer labels.

    WT = {1, 2, 4}, TC = {1, 4}, ET = {4}; nesting holds by construction.
    """
    lab = labels.to(torch.int64)
    found = torch.unique(lab).tolist()
    bad = [v for v in found if v not in VALID_LABELS]
    if bad:
        raise ContractError(
            f"labels outside {set(VALID_LABELS)}: found {sorted(bad)}"
        )
    regions = torch.stack(
        [
            torch.isin(lab, torch.tensor(_REGION_LABELS[name]))
            for name in REGION_NAMES
        ]
    )
    return regions.to(torch.float32)
