"""Label machinery: box masks, pseudo-label state and cross-modal fusion.

Masks are boolean numpy arrays at prediction resolution.  Pseudo-label
positives only ever accumulate (set union across iterations); the fusion
rules derive per-branch training labels from them:

* similarity: visible and thermal supervision labels are the intersection
  of the two accumulated pseudo sets,
* complementarity: the multispectral label is their union,
* training-pixel sets drop accumulated-but-unconfirmed pseudo positives so
  they are never punished as negatives.

Pseudo-state checkpoint format (binary, little-endian):

    magic    8 bytes  b"VTPSEUDO"
    version  uint32   currently 1
    count    uint32   number of images, sorted by id
    per image:
        id           uint32 length + UTF-8 bytes
        k            uint32 iteration counter
        last_update  uint32
        h, w         uint32 mask shape
        per mask (visible then thermal):
            runs     uint32 number of runs
            run      (uint32 start, uint32 length) over the row-major
                     flattened mask, positions of consecutive ones
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

PSEUDO_MAGIC = b"VTPSEUDO"
PSEUDO_VERSION = 1

EQ7_SUBTRAHENDS = ("visible", "thermal")


@dataclass
class BoxAnnotation:
    """Axis-aligned pedestrian boxes (x, y, w, h) in full-resolution pixels."""

    image_id: str
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for box in self.boxes:
            if len(box) != 4:
                raise ConfigError(f"box must be (x, y, w, h), got {box!r}")
            if box[2] < 1 or box[3] < 1:
                raise ConfigError(f"box width/height must be >= 1, got {box!r}")


def boxes_to_mask(ann: BoxAnnotation | None, image_h: int, image_w: int,
                  pred_h: int, pred_w: int) -> np.ndarray:
    """Rasterize boxes onto the prediction grid.

    A grid cell is foreground when its center, mapped back to image
    coordinates, falls inside any box (boxes clamped to the image first;
    boxes that clamp to nothing contribute nothing).
    """
    if image_h % pred_h or image_w % pred_w:
        raise ShapeMismatchError(
            f"prediction grid {pred_h}x{pred_w} must divide image {image_h}x{image_w}"
        )
    mask = np.zeros((pred_h, pred_w), dtype=bool)
    if ann is None or not ann.boxes:
        return mask
    sy = image_h / pred_h
    sx = image_w / pred_w
    cy = (np.arange(pred_h) + 0.5) * sy
    cx = (np.arange(pred_w) + 0.5) * sx
    for x, y, w, h in ann.boxes:
        x0, x1 = max(x, 0.0), min(x + w, float(image_w))
        y0, y1 = max(y, 0.0), min(y + h, float(image_h))
        if x1 <= x0 or y1 <= y0:
            logger.warning("box (%s, %s, %s, %s) on %s clamps to nothing; skipped",
                           x, y, w, h, ann.image_id)
            continue
        rows = (cy >= y0) & (cy < y1)
        cols = (cx >= x0) & (cx < x1)
        mask |= rows[:, None] & cols[None, :]
    return mask


def select_pseudo_positives(pred_map: np.ndarray, threshold: float) -> np.ndarray:
    """Confident-pixel selection: mask is 1 exactly where pred >= threshold.

    Minimizing per-pixel cross entropy over binary labels alone flips pixels
    at 0.5; restricting positives to confident scores pushes the cut to
    `threshold`, which must lie in (0.5, 1).
    """
    if not 0.5 < threshold < 1.0:
        raise ConfigError(f"confidence threshold must be in (0.5, 1), got {threshold}")
    return np.asarray(pred_map) >= threshold


@dataclass
class PseudoLabelState:
    """Accumulated pseudo positives for one image, per modality."""

    visible: np.ndarray
    thermal: np.ndarray
    k: int = 0
    last_update: int = 0

    def __post_init__(self) -> None:
        self.visible = np.asarray(self.visible, dtype=bool)
        self.thermal = np.asarray(self.thermal, dtype=bool)
        if self.visible.shape != self.thermal.shape:
            raise ShapeMismatchError(
                f"pseudo masks disagree: {self.visible.shape} vs {self.thermal.shape}"
            )

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "PseudoLabelState":
        return cls(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))

    def counts(self) -> tuple[int, int]:
        return int(self.visible.sum()), int(self.thermal.sum())


def update_pseudo_annotations(state: PseudoLabelState, new_visible: np.ndarray,
                              new_thermal: np.ndarray) -> PseudoLabelState:
    """Union the freshly selected positives into the accumulated sets; bump k."""
    new_visible = np.asarray(new_visible, dtype=bool)
    new_thermal = np.asarray(new_thermal, dtype=bool)
    if new_visible.shape != state.visible.shape or new_thermal.shape != state.thermal.shape:
        raise ShapeMismatchError(
            f"update masks {new_visible.shape}/{new_thermal.shape} do not match "
            f"state {state.visible.shape}"
        )
    before = state.counts()
    state.visible |= new_visible
    state.thermal |= new_thermal
    state.k += 1
    if state.counts() != before:
        state.last_update = state.k
    return state


def fuse_similarity(state: PseudoLabelState) -> tuple[np.ndarray, np.ndarray]:
    """Visible and thermal training labels: the intersection of the pseudo sets."""
    inter = state.visible & state.thermal
    return inter, inter.copy()


def fuse_complementarity(state: PseudoLabelState) -> np.ndarray:
    """Multispectral training label: the union of the pseudo sets."""
    return state.visible | state.thermal


def training_pixel_sets(state: PseudoLabelState, full_set: np.ndarray,
                        eq7_subtrahend: str = "visible") -> tuple[np.ndarray, np.ndarray]:
    """Per-modality supervised-pixel sets.

    Visible: drop all accumulated visible pseudo positives from the full set,
    then re-admit the cross-modality-confirmed ones.  Thermal: same shape,
    but the dropped set is configurable; the "visible" setting reproduces the
    source formulation verbatim, "thermal" the symmetric variant.
    """
    if eq7_subtrahend not in EQ7_SUBTRAHENDS:
        raise ConfigError(
            f"eq7_subtrahend must be one of {EQ7_SUBTRAHENDS}, got {eq7_subtrahend!r}"
        )
    full_set = np.asarray(full_set, dtype=bool)
    if full_set.shape != state.visible.shape:
        raise ShapeMismatchError(
            f"pixel set shape {full_set.shape} does not match state {state.visible.shape}"
        )
    label_v, label_t = fuse_similarity(state)
    pixels_v = (full_set & ~state.visible) | label_v
    dropped = state.visible if eq7_subtrahend == "visible" else state.thermal
    pixels_t = (full_set & ~dropped) | label_t
    return pixels_v, pixels_t


def remove_small_components(mask: np.ndarray, min_pixels: int) -> np.ndarray:
    """Drop 4-connected components smaller than min_pixels (speckle cleanup)."""
    if min_pixels <= 1:
        return mask.copy()
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    seen = np.zeros_like(mask)
    h, w = mask.shape
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or seen[si, sj]:
                continue
            stack = [(si, sj)]
            seen[si, sj] = True
            component = []
            while stack:
                i, j = stack.pop()
                component.append((i, j))
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
            if len(component) >= min_pixels:
                for i, j in component:
                    out[i, j] = True
    return out


def mask_to_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Run-length encode a boolean mask over its row-major flattening."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    padded = np.concatenate(([False], flat, [False]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(s), int(e - s)) for s, e in zip(changes[0::2], changes[1::2])]


def runs_to_mask(runs: list[tuple[int, int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        if start < 0 or start + length > flat.size:
            raise ConfigError(f"run ({start}, {length}) exceeds mask of {flat.size} pixels")
        flat[start : start + length] = True
    return flat.reshape(shape)


def serialize_pseudo_states(states: dict[str, PseudoLabelState]) -> bytes:
    buf = io.BytesIO()
    buf.write(PSEUDO_MAGIC)
    buf.write(struct.pack("<I", PSEUDO_VERSION))
    buf.write(struct.pack("<I", len(states)))
    for image_id in sorted(states):
        st = states[image_id]
        id_b = image_id.encode("utf-8")
        buf.write(struct.pack("<I", len(id_b)))
        buf.write(id_b)
        h, w = st.visible.shape
        buf.write(struct.pack("<IIII", st.k, st.last_update, h, w))
        for mask in (st.visible, st.thermal):
            runs = mask_to_runs(mask)
            buf.write(struct.pack("<I", len(runs)))
            for start, length in runs:
                buf.write(struct.pack("<II", start, length))
    return buf.getvalue()


def deserialize_pseudo_states(blob: bytes) -> dict[str, PseudoLabelState]:
    view = io.BytesIO(blob)

    def read(fmt: str):
        size = struct.calcsize(fmt)
        data = view.read(size)
        if len(data) != size:
            raise ConfigError("pseudo-state checkpoint truncated")
        return struct.unpack(fmt, data)

    if view.read(len(PSEUDO_MAGIC)) != PSEUDO_MAGIC:
        raise ConfigError("not a pseudo-state checkpoint")
    (version,) = read("<I")
    if version != PSEUDO_VERSION:
        raise ConfigError(f"unsupported pseudo-state version {version}")
    (count,) = read("<I")
    states: dict[str, PseudoLabelState] = {}
    for _ in range(count):
        (id_len,) = read("<I")
        image_id = view.read(id_len).decode("utf-8")
        k, last_update, h, w = read("<IIII")
        masks = []
        for _ in range(2):
            (n_runs,) = read("<I")
            runs = [read("<II") for _ in range(n_runs)]
            masks.append(runs_to_mask(runs, (h, w)))
        states[image_id] = PseudoLabelState(masks[0], masks[1], k=k, last_update=last_update)
    return states


def save_pseudo_states(states: dict[str, PseudoLabelState], path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_pseudo_states(states))


def load_pseudo_states(path) -> dict[str, PseudoLabelState]:
    with open(path, "rb") as fh:
        return deserialize_pseudo_states(fh.read())
