"""Synthetic two-modality dataset with nested ellipsoidal regions.

Each subject is a noisy volume containing three nested regions (analogous to
whole tumor, core, and enhancing core) built from one ellipsoidal distance
field. Modality ``modA`` shows only the outer (WT) boundary as a bright
shell; modality ``modB`` shows the TC and ET boundaries. A model seeing only
``modA`` therefore cannot observe the inner boundaries directly. The
brightness of the ``modA`` shell co-varies with the core's relative size, so
the inner extent remains statistically inferable from ``modA`` alone; a
multi-modal teacher can read it off ``modB`` exactly.

The stored masks carry per-subject annotation jitter: the TC and ET label
boundaries deviate from the image geometry by a random scale error that
neither modality shows, the way human raters disagree about a faint margin.
A model fitting the masks directly therefore fits some rater noise, while a
converged teacher predicts the image-consistent boundary and its soft
targets act as denoised labels.

Subjects are written in the standard per-subject NIfTI layout so the rest of
the pipeline treats them like any other dataset. Generation is fully
deterministic given the seed, independent of ordering (per-subject streams
are keyed by (seed, subject index)), and gzip output is byte-stable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError
from . import nifti

MODALITIES = ("modA", "modB")

_NOISE_STD = 0.25
_RING_WIDTH_VOX = 1.2
_BRAIN_RADIUS = 0.47
_LABEL_JITTER = 0.05


def _ring(phi: np.ndarray, level: float, width: float) -> np.ndarray:
    return np.exp(-(((phi - level) / width) ** 2))


def generate_subject(
    size: int, rng: np.random.Generator, label_jitter: float = _LABEL_JITTER
):
    """Build one subject: returns (modA, modB, labels) float32/uint8 arrays."""
    center = 0.5 + rng.uniform(-0.08, 0.08, size=3)
    semi_axes = rng.uniform(0.20, 0.28, size=3)
    ratio_tc = float(np.clip(rng.normal(0.62, 0.05), 0.48, 0.76))
    ratio_et = float(np.clip(rng.normal(0.55, 0.07), 0.42, 0.72))
    # The masks are cut at jittered levels, the image rings at clean ones;
    # the deviation is invisible in either modality.
    jz = np.clip(rng.normal(0.0, 1.0, size=2), -2.5, 2.5)
    jit_tc = min(ratio_tc * (1.0 + label_jitter * float(jz[0])), 0.97)
    jit_et = min(ratio_et * (1.0 + label_jitter * float(jz[1])), 0.95)

    coords = (np.arange(size, dtype=np.float32) + 0.5) / size
    gx, gy, gz = np.meshgrid(coords, coords, coords, indexing="ij")
    phi = np.sqrt(
        ((gx - center[0]) / semi_axes[0]) ** 2
        + ((gy - center[1]) / semi_axes[1]) ** 2
        + ((gz - center[2]) / semi_axes[2]) ** 2
    ).astype(np.float32)
    brain = (
        (gx - 0.5) ** 2 + (gy - 0.5) ** 2 + (gz - 0.5) ** 2
    ) <= _BRAIN_RADIUS ** 2

    wt = phi <= 1.0
    tc = phi <= jit_tc
    et = phi <= jit_tc * jit_et
    labels = np.zeros((size, size, size), dtype=np.uint8)
    labels[wt & ~tc] = 2
    labels[tc & ~et] = 1
    labels[et] = 4

    # Ring widths are fixed in voxels, converted to distance-field units.
    width = _RING_WIDTH_VOX / (float(semi_axes.mean()) * size)
    amp_a = 1.8 + 3.0 * (ratio_tc - 0.62)
    mod_a = amp_a * _ring(phi, 1.0, width)
    mod_b = 2.0 * _ring(phi, ratio_tc, width) + 1.6 * _ring(
        phi, ratio_tc * ratio_et, width
    )

    noise_a = rng.normal(0.5, _NOISE_STD, size=phi.shape)
    noise_b = rng.normal(0.5, _NOISE_STD, size=phi.shape)
    mod_a = ((mod_a + noise_a) * brain).astype(np.float32)
    mod_b = ((mod_b + noise_b) * brain).astype(np.float32)
    return mod_a, mod_b, labels


def synth_generate(
    n_subjects: int,
    size: int,
    seed: int,
    out_dir,
    label_jitter: float = _LABEL_JITTER,
) -> Path:
    """Write ``n_subjects`` synthetic subjects under ``out_dir``.

    Layout per subject ``synthNNN``: ``synthNNN_modA.nii.gz``,
    ``synthNNN_modB.nii.gz``, ``synthNNN_seg.nii.gz``.
    """
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be >= 1, got {n_subjects}")
    if size < 16 or size % 8 != 0:
        raise ConfigError(
            f"size must be a multiple of 8 and >= 16, got {size}"
        )
    if not 0.0 <= label_jitter < 0.2:
        raise ConfigError(
            f"label_jitter must be in [0, 0.2), got {label_jitter}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(n_subjects):
        rng = np.random.default_rng([seed, idx])
        mod_a, mod_b, labels = generate_subject(size, rng, label_jitter)
        sid = f"synth{idx:03d}"
        sub = out_dir / sid
        sub.mkdir(exist_ok=True)
        nifti.write_volume(sub / f"{sid}_modA.nii.gz", mod_a)
        nifti.write_volume(sub / f"{sid}_modB.nii.gz", mod_b)
        nifti.write_volume(sub / f"{sid}_seg.nii.gz", labels)
    return out_dir
