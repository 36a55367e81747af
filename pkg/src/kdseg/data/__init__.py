"""Data ingestion, preprocessing, synthesis, and fold splitting."""

from .dataset import (
    BRATS_MODALITIES,
    FoldSplit,
    ModalityStack,
    RegionTarget,
    Sample,
    SegmentationDataset,
    canonical_modality_order,
    load_folds,
    load_subject,
    save_folds,
    split_folds,
)
from .nifti import read_volume, write_volume
from .preprocess import (
    REGION_NAMES,
    VALID_LABELS,
    central_crop,
    normalize_nonzero,
    random_flip,
    regions_from_labels,
    subsample,
)
from .synthetic import MODALITIES as SYNTH_MODALITIES
from .synthetic import generate_subject, synth_generate

__all__ = [
    "BRATS_MODALITIES",
    "FoldSplit",
    "ModalityStack",
    "REGION_NAMES",
    "RegionTarget",
    "SYNTH_MODALITIES",
    "Sample",
    "SegmentationDataset",
    "VALID_LABELS",
    "canonical_modality_order",
    "central_crop",
    "generate_subject",
    "load_folds",
    "load_subject",
    "normalize_nonzero",
    "random_flip",
    "read_volume",
    "regions_from_labels",
    "save_folds",
    "split_folds",
    "subsample",
    "synth_generate",
    "write_volume",
]
