"""Pixel-masked cross entropy and the three-branch detection objectives.

The loss over one probability map is the plain sum of per-pixel binary cross
entropies restricted to a supervised-pixel set; probabilities are clamped to
[1e-7, 1 - 1e-7] inside the logs.  Optimization uses this sum form by
default; `form="mean"` divides each branch by its supervised-pixel count,
and per-pixel means are always available for logging via
`LossReport.per_pixel`.
"""

from __future__ import annotations

import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .detector import Prediction
from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

CLAMP = 1e-7

LOSS_FORMS = ("sum", "mean")

PredictionGrads = namedtuple("PredictionGrads", ["m", "v", "t"])


@dataclass
class LossReport:
    """Branch-wise loss values and the pixel counts they were computed over."""

    multispectral: float
    visible: float
    thermal: float
    pixels_multispectral: int
    pixels_visible: int
    pixels_thermal: int

    @property
    def total(self) -> float:
        return self.multispectral + self.visible + self.thermal

    def per_pixel(self) -> tuple[float, float, float]:
        """Branch losses normalized by their supervised-pixel counts."""
        return (
            self.multispectral / max(self.pixels_multispectral, 1),
            self.visible / max(self.pixels_visible, 1),
            self.thermal / max(self.pixels_thermal, 1),
        )

    def per_pixel_total(self) -> float:
        return sum(self.per_pixel())


def cross_entropy(pred: np.ndarray, labels: np.ndarray,
                  pixels: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked binary cross entropy and its gradient with respect to `pred`.

    Returns the summed loss over `pixels` and a dense gradient map that is
    exactly zero outside the pixel set.  An empty pixel set yields loss 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pixels = np.asarray(pixels, dtype=bool)
    if pred.shape != labels.shape or pred.shape != pixels.shape:
        raise ShapeMismatchError(
            f"shape mismatch: pred {pred.shape}, labels {labels.shape}, pixels {pixels.shape}"
        )
    grad = np.zeros_like(pred)
    if not pixels.any():
        logger.debug("cross_entropy over an empty pixel set; returning 0")
        return 0.0, grad
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    y = labels.astype(np.float64)
    terms = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    loss = float(terms[pixels].sum())
    # The clamp flattens the loss outside (CLAMP, 1-CLAMP), so the gradient
    # there is zero; inside it is the usual (p - y) / (p (1 - p)).
    active = pixels & (pred > CLAMP) & (pred < 1.0 - CLAMP)
    grad[active] = (p[active] - y[active]) / (p[active] * (1.0 - p[active]))
    return loss, grad


def _apply_form(loss: float, grad: np.ndarray, count: int, form: str) -> tuple[float, np.ndarray]:
    if form == "sum" or count == 0:
        return loss, grad
    return loss / count, grad / count


def _check_form(form: str) -> None:
    if form not in LOSS_FORMS:
        raise ValueError(f"loss form must be one of {LOSS_FORMS}, got {form!r}")


def multi_detection_loss_source(pred: Prediction, labels: np.ndarray, pixels: np.ndarray,
                                form: str = "sum") -> tuple[LossReport, PredictionGrads]:
    """Source-domain objective: all three branches share one label map and pixel set."""
    _check_form(form)
    n = int(np.asarray(pixels, dtype=bool).sum())
    loss_m, grad_m = _apply_form(*cross_entropy(pred.y_m, labels, pixels), n, form)
    loss_v, grad_v = _apply_form(*cross_entropy(pred.y_v, labels, pixels), n, form)
    loss_t, grad_t = _apply_form(*cross_entropy(pred.y_t, labels, pixels), n, form)
    report = LossReport(
        multispectral=loss_m, visible=loss_v, thermal=loss_t,
        pixels_multispectral=n, pixels_visible=n, pixels_thermal=n,
    )
    return report, PredictionGrads(grad_m, grad_v, grad_t)


def multi_detection_loss_adapt(pred: Prediction,
                               labels_m: np.ndarray, labels_v: np.ndarray, labels_t: np.ndarray,
                               pixels: np.ndarray, pixels_v: np.ndarray, pixels_t: np.ndarray,
                               form: str = "sum") -> tuple[LossReport, PredictionGrads]:
    """Adaptation objective: branch-specific labels and supervised-pixel sets."""
    _check_form(form)
    n_m = int(np.asarray(pixels, dtype=bool).sum())
    n_v = int(np.asarray(pixels_v, dtype=bool).sum())
    n_t = int(np.asarray(pixels_t, dtype=bool).sum())
    loss_m, grad_m = _apply_form(*cross_entropy(pred.y_m, labels_m, pixels), n_m, form)
    loss_v, grad_v = _apply_form(*cross_entropy(pred.y_v, labels_v, pixels_v), n_v, form)
    loss_t, grad_t = _apply_form(*cross_entropy(pred.y_t, labels_t, pixels_t), n_t, form)
    report = LossReport(
        multispectral=loss_m, visible=loss_v, thermal=loss_t,
        pixels_multispectral=n_m, pixels_visible=n_v, pixels_thermal=n_t,
    )
    return report, PredictionGrads(grad_m, grad_v, grad_t)
