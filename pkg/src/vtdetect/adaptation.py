"""Source-domain training and the self-training adaptation loop.

Training is image-centric SGD with batch size one and global-norm gradient
clipping.  Adaptation alternates, per outer iteration:

1. a selection phase that forwards every target image with the parameters
   frozen (no backward pass anywhere) and unions the confident pixels of the
   two supervision heads into the accumulated pseudo sets, then
2. a training phase that derives per-branch labels and supervised-pixel
   sets from the pseudo state (intersection for the supervision heads,
   union for the multispectral head, unconfirmed positives excluded from
   negative supervision) and runs SGD epochs on the three-branch objective.

Parameter hashes are recorded around every selection phase so the
no-update-without-backprop property is checkable after the fact.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImagePair
from .detector import (
    ArchConfig,
    DetectorParams,
    backward_from_heads,
    _forward_cached,
    forward,
    init_detector,
    save_checkpoint,
)
from .errors import ConfigError, NumericError
from .labels import (
    EQ7_SUBTRAHENDS,
    PseudoLabelState,
    boxes_to_mask,
    fuse_complementarity,
    fuse_similarity,
    remove_small_components,
    select_pseudo_positives,
    training_pixel_sets,
    update_pseudo_annotations,
    save_pseudo_states,
)
from .losses import (
    LOSS_FORMS,
    LossReport,
    multi_detection_loss_adapt,
    multi_detection_loss_source,
)
from .tensor_ops import GradStore, clip_gradients, sgd_step

logger = logging.getLogger(__name__)

# Desk-scale source schedule: a high-rate phase and a 10x-lower polish phase,
# mirroring the usual two-stage fine-tuning rhythm.
DEFAULT_SOURCE_PHASES = ((8, 3e-2), (2, 3e-3))


@dataclass(frozen=True)
class SourceSchedule:
    """SGD phases for supervised source training: (epochs, learning rate)."""

    phases: tuple[tuple[int, float], ...] = DEFAULT_SOURCE_PHASES
    clip_norm: float = 10.0
    loss_form: str = "sum"

    def __post_init__(self) -> None:
        for epochs, lr in self.phases:
            if epochs < 0:
                raise ConfigError(f"phase epochs must be >= 0, got {epochs}")
            if lr <= 0:
                raise ConfigError(f"phase learning rate must be positive, got {lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}")


@dataclass(frozen=True)
class AdaptConfig:
    """Hyperparameters of the adaptation loop."""

    iterations: int = 4
    epochs_per_iteration: int = 1
    lr: float = 5e-4
    tau_start: float = 0.8
    tau_end: float = 0.8
    clip_norm: float = 10.0
    shuffle_seed: int = 0
    eq7_subtrahend: str = "visible"
    loss_form: str = "sum"
    cleanup_min_component: int = 0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.epochs_per_iteration < 0:
            raise ConfigError(f"epochs_per_iteration must be >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("tau_start", "tau_end"):
            v = getattr(self, name)
            if not 0.5 < v < 1.0:
                raise ConfigError(f"{name} must be in (0.5, 1), got {v}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.eq7_subtrahend not in EQ7_SUBTRAHENDS:
            raise ConfigError(f"eq7_subtrahend must be one of {EQ7_SUBTRAHENDS}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}")
        if self.cleanup_min_component < 0 or self.checkpoint_every < 0:
            raise ConfigError("cleanup_min_component and checkpoint_every must be >= 0")

    def tau_at(self, k: int) -> float:
        """Linear confidence-threshold schedule over the outer iterations."""
        if self.iterations == 1:
            return self.tau_start
        frac = k / (self.iterations - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass
class IterationRecord:
    """One adaptation iteration's history row."""

    iteration: int
    tau: float
    loss_multispectral: float
    loss_visible: float
    loss_thermal: float
    pseudo_visible: int
    pseudo_thermal: int
    hash_before_select: str
    hash_after_select: str
    ap: float | None = None

    @property
    def loss_total(self) -> float:
        return self.loss_multispectral + self.loss_visible + self.loss_thermal


HISTORY_COLUMNS = [
    "iteration", "tau", "loss_total", "loss_multispectral", "loss_visible",
    "loss_thermal", "pseudo_visible", "pseudo_thermal",
    "hash_before_select", "hash_after_select", "ap",
]


def emit_history(history: list[IterationRecord], path) -> None:
    """Write per-iteration CSV; floats use repr so parsing back is exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in history:
            writer.writerow([
                rec.iteration,
                repr(rec.tau),
                repr(rec.loss_total),
                repr(rec.loss_multispectral),
                repr(rec.loss_visible),
                repr(rec.loss_thermal),
                rec.pseudo_visible,
                rec.pseudo_thermal,
                rec.hash_before_select,
                rec.hash_after_select,
                "" if rec.ap is None else repr(rec.ap),
            ])


def read_history(path) -> list[IterationRecord]:
    rows = list(csv.reader(Path(path).open()))
    if not rows or rows[0] != HISTORY_COLUMNS:
        raise ConfigError(f"{path}: not an adaptation history CSV")
    out = []
    for r in rows[1:]:
        out.append(IterationRecord(
            iteration=int(r[0]),
            tau=float(r[1]),
            loss_multispectral=float(r[3]),
            loss_visible=float(r[4]),
            loss_thermal=float(r[5]),
            pseudo_visible=int(r[6]),
            pseudo_thermal=int(r[7]),
            hash_before_select=r[8],
            hash_after_select=r[9],
            ap=None if r[10] == "" else float(r[10]),
        ))
    return out


def _full_pixel_set(shape: tuple[int, int]) -> np.ndarray:
    return np.ones(shape, dtype=bool)


def _source_step(params: DetectorParams, grads: GradStore, pair: ImagePair,
                 lr: float, schedule: SourceSchedule) -> LossReport:
    pred, cache = _forward_cached(params, pair)
    ph, pw = pred.shape
    h, w = pair.shape
    labels = boxes_to_mask(pair.annotation, h, w, ph, pw)
    pixels = _full_pixel_set((ph, pw))
    report, head_grads = multi_detection_loss_source(
        pred, labels, pixels, form=schedule.loss_form
    )
    backward_from_heads(params, cache, head_grads.m, head_grads.v, head_grads.t, grads)
    clip_gradients(grads, schedule.clip_norm)
    sgd_step(params.named_tensors(), grads, lr)
    return report


def train_source(dataset: list[ImagePair], arch: ArchConfig,
                 schedule: SourceSchedule = SourceSchedule(), seed: int = 0,
                 on_step: Callable[[int, float, LossReport], None] | None = None,
                 ) -> DetectorParams:
    """Supervised training on the annotated source domain.

    Deterministic for a fixed seed: the seed drives both initialization and
    the per-epoch shuffling.  Aborts with the failing step index on numeric
    failure.
    """
    if not dataset:
        raise ConfigError("source dataset is empty")
    for pair in dataset:
        if pair.annotation is None:
            raise ConfigError(f"source image {pair.image_id!r} has no annotation")

    params = init_detector(arch, seed)
    grads = GradStore(params.named_tensors())
    order_rng = np.random.default_rng(seed + 1)
    step = 0
    for epochs, lr in schedule.phases:
        for _ in range(epochs):
            for idx in order_rng.permutation(len(dataset)):
                try:
                    report = _source_step(params, grads, dataset[idx], lr, schedule)
                except NumericError as exc:
                    raise NumericError(f"source training failed at step {step}: {exc}") from exc
                if on_step is not None:
                    on_step(step, lr, report)
                step += 1
    return params


def init_pseudo(params: DetectorParams, dataset: list[ImagePair],
                tau: float) -> dict[str, PseudoLabelState]:
    """Seed pseudo annotations from the supervision heads of a trained detector."""
    states: dict[str, PseudoLabelState] = {}
    for pair in dataset:
        pred = forward(params, pair)
        states[pair.image_id] = PseudoLabelState(
            select_pseudo_positives(pred.y_v, tau),
            select_pseudo_positives(pred.y_t, tau),
        )
    return states


def _selection_phase(params: DetectorParams, dataset: list[ImagePair],
                     states: dict[str, PseudoLabelState], tau: float,
                     min_component: int) -> None:
    for pair in dataset:
        pred = forward(params, pair)
        new_v = select_pseudo_positives(pred.y_v, tau)
        new_t = select_pseudo_positives(pred.y_t, tau)
        if min_component > 1:
            new_v = remove_small_components(new_v, min_component)
            new_t = remove_small_components(new_t, min_component)
        update_pseudo_annotations(states[pair.image_id], new_v, new_t)


def _adapt_step(params: DetectorParams, grads: GradStore, pair: ImagePair,
                state: PseudoLabelState, config: AdaptConfig) -> LossReport:
    pred, cache = _forward_cached(params, pair)
    labels_v, labels_t = fuse_similarity(state)
    labels_m = fuse_complementarity(state)
    pixels = _full_pixel_set(pred.shape)
    pixels_v, pixels_t = training_pixel_sets(state, pixels, config.eq7_subtrahend)
    report, head_grads = multi_detection_loss_adapt(
        pred, labels_m, labels_v, labels_t, pixels, pixels_v, pixels_t,
        form=config.loss_form,
    )
    backward_from_heads(params, cache, head_grads.m, head_grads.v, head_grads.t, grads)
    clip_gradients(grads, config.clip_norm)
    sgd_step(params.named_tensors(), grads, config.lr)
    return report


def _mean_losses(reports: list[LossReport]) -> tuple[float, float, float]:
    if not reports:
        return 0.0, 0.0, 0.0
    per_pixel = np.array([r.per_pixel() for r in reports])
    means = per_pixel.mean(axis=0)
    return float(means[0]), float(means[1]), float(means[2])


def adapt(params_source: DetectorParams, dataset: list[ImagePair],
          config: AdaptConfig = AdaptConfig(),
          eval_fn: Callable[[DetectorParams], float] | None = None,
          out_dir=None,
          ) -> tuple[DetectorParams, dict[str, PseudoLabelState], list[IterationRecord]]:
    """Adapt a source-trained detector to unannotated target images.

    Returns the adapted parameters, the final per-image pseudo states and
    the per-iteration history.  `eval_fn`, when given, is called with the
    current parameters after each iteration and its value recorded (e.g. AP
    against held-out ground truth).  On numeric failure the last completed
    iteration's parameters are checkpointed under `out_dir` before the error
    propagates.
    """
    if not dataset:
        raise ConfigError("target dataset is empty")
    params = params_source.copy()
    grads = GradStore(params.named_tensors())
    order_rng = np.random.default_rng(config.shuffle_seed)
    states = init_pseudo(params, dataset, config.tau_at(0))
    history: list[IterationRecord] = []
    last_good = params.copy()

    for k in range(config.iterations):
        tau = config.tau_at(k)
        hash_before = params.params_hash()
        _selection_phase(params, dataset, states, tau, config.cleanup_min_component)
        hash_after = params.params_hash()
        if hash_before != hash_after:
            raise RuntimeError(
                "selection phase modified detector parameters; this is a bug"
            )

        reports: list[LossReport] = []
        try:
            for _ in range(config.epochs_per_iteration):
                for idx in order_rng.permutation(len(dataset)):
                    pair = dataset[idx]
                    reports.append(
                        _adapt_step(params, grads, pair, states[pair.image_id], config)
                    )
        except NumericError as exc:
            if out_dir is not None:
                out_dir = Path(out_dir)
                out_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(last_good, out_dir / "detector.last-good.ckpt")
                save_pseudo_states(states, out_dir / "pseudo.last-good.state")
                logger.error("numeric failure at iteration %d; last good state saved", k)
            raise NumericError(f"adaptation failed at iteration {k}: {exc}") from exc

        loss_m, loss_v, loss_t = _mean_losses(reports)
        total_v = sum(int(st.visible.sum()) for st in states.values())
        total_t = sum(int(st.thermal.sum()) for st in states.values())
        history.append(IterationRecord(
            iteration=k,
            tau=tau,
            loss_multispectral=loss_m,
            loss_visible=loss_v,
            loss_thermal=loss_t,
            pseudo_visible=total_v,
            pseudo_thermal=total_t,
            hash_before_select=hash_before,
            hash_after_select=hash_after,
            ap=None if eval_fn is None else float(eval_fn(params)),
        ))
        last_good = params.copy()

        if out_dir is not None and config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, out_dir / f"detector.iter{k:03d}.ckpt")
            save_pseudo_states(states, out_dir / f"pseudo.iter{k:03d}.state")

    return params, states, history
