"""Pedestrian heatmap detection on paired visible/thermal images.

A small two-stream fully-convolutional detector, trained with SGD on
box-derived pixel masks, plus a self-training loop that adapts it to an
unlabeled target domain by accumulating confident pseudo-labels and fusing
them across modalities (intersection for the per-modality supervision
heads, union for the multispectral head).

Typical use::

    from vtdetect import MultispectralDetector, DomainAdapter, SynthConfig
    from vtdetect.data import generate_synthetic, make_shift_pair

    src_cfg, tgt_cfg = make_shift_pair(SynthConfig(seed=0))
    det = MultispectralDetector(random_state=0).fit(generate_synthetic(src_cfg, 40))
    adapter = DomainAdapter(detector=det).fit(generate_synthetic(tgt_cfg, 40))
    heatmaps = adapter.predict_proba(test_pairs)

The ``vtdetect`` command line exposes the same pipeline as the
``synth``, ``train-source``, ``adapt`` and ``eval`` subcommands.
"""

from .adaptation import AdaptConfig, SourceSchedule, adapt, init_pseudo, train_source
from .data import ImagePair, SynthConfig, generate_synthetic, load_dataset, make_shift_pair
from .detector import ArchConfig, DetectorParams, Prediction, forward, init_detector
from .errors import (
    ConfigError,
    DatasetError,
    NumericError,
    ShapeMismatchError,
    UndefinedAPError,
)
from .estimators import DomainAdapter, MultispectralDetector
from .evaluation import PRCurve, pixel_ap
from .labels import BoxAnnotation, PseudoLabelState, boxes_to_mask, select_pseudo_positives
from .losses import LossReport, cross_entropy

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ArchConfig",
    "BoxAnnotation",
    "ConfigError",
    "DatasetError",
    "DetectorParams",
    "DomainAdapter",
    "ImagePair",
    "LossReport",
    "MultispectralDetector",
    "NumericError",
    "PRCurve",
    "Prediction",
    "PseudoLabelState",
    "ShapeMismatchError",
    "SourceSchedule",
    "SynthConfig",
    "UndefinedAPError",
    "adapt",
    "boxes_to_mask",
    "cross_entropy",
    "forward",
    "generate_synthetic",
    "init_detector",
    "init_pseudo",
    "load_dataset",
    "make_shift_pair",
    "pixel_ap",
    "select_pseudo_positives",
    "train_source",
]
