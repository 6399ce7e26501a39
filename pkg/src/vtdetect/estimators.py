"""Scikit-learn style estimators wrapping the detector and the adapter.

`MultispectralDetector` is fit on annotated image pairs and predicts
full-size pedestrian probability heatmaps; `DomainAdapter` is a
meta-estimator that fits on *unlabeled* target pairs, starting from an
already-fitted detector.  Both expose get_params/set_params and compose
with sklearn tooling; X is a sequence of ImagePair (or any object with
aligned `visible`/`thermal` arrays plus optional `annotation`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .adaptation import AdaptConfig, SourceSchedule, adapt, train_source
from .data import ImagePair
from .detector import ArchConfig, forward, upsample_prediction
from .errors import ConfigError
from .evaluation import pixel_ap
from .labels import BoxAnnotation, boxes_to_mask


def check_image_pairs(X, require_annotations: bool = False) -> list[ImagePair]:
    """Validate an input collection of image pairs."""
    pairs = list(X)
    if not pairs:
        raise ValueError("X must contain at least one image pair")
    for pair in pairs:
        for attr in ("visible", "thermal"):
            if not hasattr(pair, attr):
                raise TypeError(f"image pairs must expose {attr!r} arrays")
        if np.asarray(pair.visible).shape != np.asarray(pair.thermal).shape:
            raise ValueError(f"pair {getattr(pair, 'image_id', '?')} is misaligned")
        if require_annotations and getattr(pair, "annotation", None) is None:
            raise ValueError(
                f"pair {getattr(pair, 'image_id', '?')} lacks a box annotation"
            )
    return pairs


def _with_annotations(pairs, y) -> list[ImagePair]:
    if y is None:
        return pairs
    y = list(y)
    if len(y) != len(pairs):
        raise ValueError(f"len(y)={len(y)} does not match {len(pairs)} pairs")
    out = []
    for pair, ann in zip(pairs, y):
        if ann is not None and not isinstance(ann, BoxAnnotation):
            ann = BoxAnnotation(getattr(pair, "image_id", "pair"), list(ann))
        out.append(ImagePair(
            getattr(pair, "image_id", "pair"),
            pair.visible, pair.thermal, ann, getattr(pair, "tag", None),
        ))
    return out


class MultispectralDetector(BaseEstimator):
    """Two-stream visible/thermal heatmap detector with an sklearn interface.

    Parameters mirror the architecture and source-training schedule; `fit`
    expects annotated pairs (boxes either attached to the pairs or passed as
    y), `predict_proba` returns one full-resolution fused heatmap per pair
    and `score` is pooled pixel-level average precision.
    """

    def __init__(self, stream_channels=(8, 16, 16), fusion_channels=16,
                 kernel_size=3, downsamples=1, init_gain=1.0,
                 schedule=((8, 3e-2), (2, 3e-3)), clip_norm=10.0,
                 loss_form="sum", random_state=0):
        self.stream_channels = stream_channels
        self.fusion_channels = fusion_channels
        self.kernel_size = kernel_size
        self.downsamples = downsamples
        self.init_gain = init_gain
        self.schedule = schedule
        self.clip_norm = clip_norm
        self.loss_form = loss_form
        self.random_state = random_state

    def _arch(self) -> ArchConfig:
        return ArchConfig(
            stream_channels=tuple(self.stream_channels),
            fusion_channels=self.fusion_channels,
            kernel_size=self.kernel_size,
            downsamples=self.downsamples,
            init_gain=self.init_gain,
        )

    def fit(self, X, y=None):
        pairs = _with_annotations(check_image_pairs(X), y)
        pairs = check_image_pairs(pairs, require_annotations=True)
        schedule = SourceSchedule(
            phases=tuple((int(e), float(lr)) for e, lr in self.schedule),
            clip_norm=self.clip_norm,
            loss_form=self.loss_form,
        )
        self.loss_history_ = []
        self.params_ = train_source(
            pairs, self._arch(), schedule, seed=self.random_state,
            on_step=lambda step, lr, report: self.loss_history_.append(
                report.per_pixel_total()
            ),
        )
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        pairs = check_image_pairs(X)
        out = []
        for pair in pairs:
            pred = forward(self.params_, pair)
            h, w = np.asarray(pair.visible).shape
            out.append(upsample_prediction(pred, h, w).y_m)
        return out

    def predict(self, X, threshold: float = 0.5) -> list[np.ndarray]:
        return [p >= threshold for p in self.predict_proba(X)]

    def score(self, X, y=None) -> float:
        pairs = _with_annotations(check_image_pairs(X), y)
        heatmaps = self.predict_proba(pairs)
        masks = []
        for pair in pairs:
            if getattr(pair, "annotation", None) is None:
                raise ValueError(f"pair {getattr(pair, 'image_id', '?')} lacks ground truth")
            h, w = np.asarray(pair.visible).shape
            masks.append(boxes_to_mask(pair.annotation, h, w, h, w))
        return pixel_ap(heatmaps, masks).ap


class DomainAdapter(BaseEstimator):
    """Self-training domain adaptation as a meta-estimator.

    Takes a fitted MultispectralDetector and unlabeled target pairs;
    `fit` leaves the source detector untouched and exposes the adapted copy
    as `detector_`, with the per-iteration records in `history_`.
    """

    def __init__(self, detector=None, iterations=4, epochs_per_iteration=1,
                 lr=5e-4, tau=0.8, tau_end=None, clip_norm=10.0,
                 eq7_subtrahend="visible", loss_form="sum",
                 cleanup_min_component=0, random_state=0):
        self.detector = detector
        self.iterations = iterations
        self.epochs_per_iteration = epochs_per_iteration
        self.lr = lr
        self.tau = tau
        self.tau_end = tau_end
        self.clip_norm = clip_norm
        self.eq7_subtrahend = eq7_subtrahend
        self.loss_form = loss_form
        self.cleanup_min_component = cleanup_min_component
        self.random_state = random_state

    def _config(self) -> AdaptConfig:
        return AdaptConfig(
            iterations=self.iterations,
            epochs_per_iteration=self.epochs_per_iteration,
            lr=self.lr,
            tau_start=self.tau,
            tau_end=self.tau if self.tau_end is None else self.tau_end,
            clip_norm=self.clip_norm,
            shuffle_seed=self.random_state,
            eq7_subtrahend=self.eq7_subtrahend,
            loss_form=self.loss_form,
            cleanup_min_component=self.cleanup_min_component,
        )

    def fit(self, X, y=None):
        if self.detector is None:
            raise ConfigError("DomainAdapter requires a fitted detector")
        if not hasattr(self.detector, "params_"):
            raise NotFittedError("the detector must be fitted before adaptation")
        pairs = check_image_pairs(X)
        params, states, history = adapt(self.detector.params_, pairs, self._config())
        self.detector_ = clone_fitted(self.detector, params)
        self.states_ = states
        self.history_ = history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "detector_")
        return self.detector_.predict_proba(X)

    def predict(self, X, threshold: float = 0.5):
        check_is_fitted(self, "detector_")
        return self.detector_.predict(X, threshold=threshold)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "detector_")
        return self.detector_.score(X, y)


def clone_fitted(detector: MultispectralDetector, params) -> MultispectralDetector:
    """A new fitted MultispectralDetector carrying the given parameters."""
    out = MultispectralDetector(**detector.get_params())
    out.params_ = params
    out.loss_history_ = []
    return out
