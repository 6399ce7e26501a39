"""Dataset I/O and the synthetic paired-image generator.

A dataset is a directory tree::

    root/
      visible/<id>.pgm        binary PGM (P5, maxval 255), grayscale
      thermal/<id>.pgm        same ids and shapes as visible/
      annotations/<id>.txt    optional; one "x y w h" box per line (pixels)
      tags.txt                optional; "<id> <tag>" per line (e.g. day/night)

Images are loaded as float64 in [0, 1] (value / 255).  The generator
produces pedestrians as soft-edged upright elliptical blobs over a textured
background, already quantized to 255ths so that a generated dataset and its
on-disk round trip are identical.

Domain-shift knobs model a camera/site change: `brightness_offset` shifts
the visible background level (thermal is illumination-invariant),
`contrast_scale` scales pedestrian-vs-background contrast in both
modalities, `noise_multiplier` scales both sensor noises, and the per-
modality dropout probabilities make individual pedestrians nearly vanish
from one modality.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .labels import BoxAnnotation

# Per-pedestrian width/height ratio range; pedestrians are taller than wide.
_ASPECT_RANGE = (0.45, 0.62)
# Blob profile: flat plateau, then a linear soft edge out to the ellipse rim.
_PLATEAU = 0.85
# Contrast multiplier for a pedestrian dropped from one modality.
_FAINT_FACTOR = 0.2


@dataclass
class ImagePair:
    """One aligned visible/thermal grayscale pair, values in [0, 1]."""

    image_id: str
    visible: np.ndarray
    thermal: np.ndarray
    annotation: BoxAnnotation | None = None
    tag: str | None = None

    def __post_init__(self) -> None:
        self.visible = np.asarray(self.visible, dtype=np.float64)
        self.thermal = np.asarray(self.thermal, dtype=np.float64)
        if self.visible.shape != self.thermal.shape:
            raise DatasetError(
                f"{self.image_id}: modalities misaligned "
                f"({self.visible.shape} vs {self.thermal.shape})"
            )
        for name, img in (("visible", self.visible), ("thermal", self.thermal)):
            if img.ndim != 2:
                raise DatasetError(f"{self.image_id}: {name} image must be 2-d")
            if img.min() < 0.0 or img.max() > 1.0:
                raise DatasetError(f"{self.image_id}: {name} values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    @property
    def labeled(self) -> bool:
        return self.annotation is not None


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DatasetError(f"PGM images must be 2-d, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a float64 [0, 1] image."""
    path = Path(path)
    blob = path.read_bytes()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(blob):
        m = re.compile(rb"\s*(#[^\n]*\n)*\s*(\S+)").match(blob, pos)
        if not m:
            break
        tokens.append(m.group(2))
        pos = m.end()
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DatasetError(f"{path.name}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DatasetError(f"{path.name}: malformed PGM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path.name}: expected maxval 255, got {maxval}")
    pixels = blob[pos + 1 :]  # single whitespace byte after maxval
    if len(pixels) != w * h:
        raise DatasetError(
            f"{path.name}: expected {w * h} pixel bytes, found {len(pixels)}"
        )
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


def write_annotation(path, ann: BoxAnnotation) -> None:
    lines = []
    for x, y, w, h in ann.boxes:
        vals = [int(v) if float(v).is_integer() else v for v in (x, y, w, h)]
        lines.append(" ".join(str(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_annotation(path, image_id: str) -> BoxAnnotation:
    boxes = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{Path(path).name}:{line_no}: expected 'x y w h', got {line!r}")
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise DatasetError(f"{Path(path).name}:{line_no}: non-numeric box value") from exc
        boxes.append((x, y, w, h))
    try:
        return BoxAnnotation(image_id, boxes)
    except ConfigError as exc:
        raise DatasetError(f"{Path(path).name}: {exc}") from exc


def load_dataset(root) -> list[ImagePair]:
    """Load all pairs under `root`, sorted by image id."""
    root = Path(root)
    vis_dir = root / "visible"
    thm_dir = root / "thermal"
    ann_dir = root / "annotations"
    vis = {p.stem: p for p in vis_dir.glob("*.pgm")} if vis_dir.is_dir() else {}
    thm = {p.stem: p for p in thm_dir.glob("*.pgm")} if thm_dir.is_dir() else {}
    for stem in sorted(set(vis) - set(thm)):
        raise DatasetError(f"{vis[stem].name}: visible image has no thermal counterpart")
    for stem in sorted(set(thm) - set(vis)):
        raise DatasetError(f"{thm[stem].name}: thermal image has no visible counterpart")

    tags: dict[str, str] = {}
    tags_file = root / "tags.txt"
    if tags_file.is_file():
        for line_no, line in enumerate(tags_file.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(maxsplit=1)
            if len(parts) != 2:
                raise DatasetError(f"tags.txt:{line_no}: expected '<id> <tag>'")
            tags[parts[0]] = parts[1]

    pairs = []
    for stem in sorted(vis):
        visible = read_pgm(vis[stem])
        thermal = read_pgm(thm[stem])
        if visible.shape != thermal.shape:
            raise DatasetError(
                f"{vis[stem].name}: shape {visible.shape} does not match "
                f"thermal {thermal.shape}"
            )
        ann_path = ann_dir / f"{stem}.txt"
        annotation = read_annotation(ann_path, stem) if ann_path.is_file() else None
        pairs.append(ImagePair(stem, visible, thermal, annotation, tags.get(stem)))
    return pairs


def write_dataset(pairs: list[ImagePair], root) -> None:
    """Write pairs as the documented directory tree."""
    root = Path(root)
    (root / "visible").mkdir(parents=True, exist_ok=True)
    (root / "thermal").mkdir(parents=True, exist_ok=True)
    any_ann = any(p.annotation is not None for p in pairs)
    if any_ann:
        (root / "annotations").mkdir(exist_ok=True)
    tag_lines = []
    for pair in pairs:
        write_pgm(root / "visible" / f"{pair.image_id}.pgm", pair.visible)
        write_pgm(root / "thermal" / f"{pair.image_id}.pgm", pair.thermal)
        if pair.annotation is not None:
            write_annotation(root / "annotations" / f"{pair.image_id}.txt", pair.annotation)
        if pair.tag is not None:
            tag_lines.append(f"{pair.image_id} {pair.tag}")
    if tag_lines:
        (root / "tags.txt").write_text("\n".join(tag_lines) + "\n")


@dataclass(frozen=True)
class SynthConfig:
    """Scene generator parameters, including domain-shift knobs."""

    height: int = 64
    width: int = 64
    count_range: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (5.0, 9.0)  # blob semi-height in pixels
    contrast_visible: float = 0.55
    contrast_thermal: float = 0.30
    background_level: float = 0.35
    texture_amplitude: float = 0.10
    noise_visible: float = 0.03
    noise_thermal: float = 0.03
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_multiplier: float = 1.0
    dropout_visible: float = 0.0
    dropout_thermal: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"image size must be at least 8x8, got {self.height}x{self.width}")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"count_range must satisfy 0 <= lo <= hi, got {self.count_range}")
        lo, hi = self.size_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"size_range must satisfy 0 < lo <= hi, got {self.size_range}")
        if hi * 2 + 4 > min(self.height, self.width):
            raise ConfigError("size_range too large for the image size")
        for name in ("noise_visible", "noise_thermal"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("dropout_visible", "dropout_thermal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.noise_multiplier < 0 or self.contrast_scale < 0:
            raise ConfigError("noise_multiplier and contrast_scale must be >= 0")


def _blob_profile(h: int, w: int, cx: float, cy: float, sx: float, sy: float) -> np.ndarray:
    """Soft-edged ellipse: 1 on the plateau, linear falloff to the rim.

    Sampled at pixel centers (i + 0.5, j + 0.5), matching the center-in-box
    convention used when boxes are rasterized to masks.
    """
    ys = (np.arange(h) + 0.5 - cy) / sy
    xs = (np.arange(w) + 0.5 - cx) / sx
    r = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)
    return np.clip((1.0 - r) / (1.0 - _PLATEAU), 0.0, 1.0)


def _texture(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    """Smooth zero-mean background texture: two random low-frequency gratings."""
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(2):
        fy = rng.integers(1, 4)
        fx = rng.integers(1, 4)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return amplitude * field / 2.0


def generate_synthetic(config: SynthConfig, n_images: int,
                       id_prefix: str = "img") -> list[ImagePair]:
    """Deterministically generate annotated visible/thermal pairs.

    Pedestrians are visible as bright soft ellipses in the thermal channel
    and contrast-configurable in the visible channel; each box tightly
    bounds its blob's support.
    """
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    pairs = []
    for n in range(n_images):
        vis = np.full((h, w), config.background_level + config.brightness_offset)
        thm = np.full((h, w), config.background_level)
        vis += _texture(rng, h, w, config.texture_amplitude)
        thm += _texture(rng, h, w, config.texture_amplitude)

        boxes = []
        count = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
        for _ in range(count):
            semi_y = rng.uniform(*config.size_range)
            semi_x = semi_y * rng.uniform(*_ASPECT_RANGE)
            margin_x, margin_y = semi_x + 1.0, semi_y + 1.0
            cx = rng.uniform(margin_x, w - margin_x)
            cy = rng.uniform(margin_y, h - margin_y)
            faint_vis = rng.random() < config.dropout_visible
            faint_thm = rng.random() < config.dropout_thermal

            profile = _blob_profile(h, w, cx, cy, semi_x, semi_y)
            c_vis = config.contrast_visible * config.contrast_scale
            c_thm = config.contrast_thermal * config.contrast_scale
            vis += profile * c_vis * (_FAINT_FACTOR if faint_vis else 1.0)
            thm += profile * c_thm * (_FAINT_FACTOR if faint_thm else 1.0)

            # The blob's support is exactly the ellipse, so its continuous
            # bounding box is the tightest annotation.
            boxes.append((cx - semi_x, cy - semi_y, 2.0 * semi_x, 2.0 * semi_y))

        vis += config.noise_visible * config.noise_multiplier * rng.standard_normal((h, w))
        thm += config.noise_thermal * config.noise_multiplier * rng.standard_normal((h, w))
        # Quantize to PGM levels so in-memory data equals its disk round trip.
        vis = np.round(np.clip(vis, 0.0, 1.0) * 255.0) / 255.0
        thm = np.round(np.clip(thm, 0.0, 1.0) * 255.0) / 255.0

        image_id = f"{id_prefix}{n:04d}"
        pairs.append(ImagePair(image_id, vis, thm, BoxAnnotation(image_id, boxes)))
    return pairs


# Reference domain shift used by the synth CLI defaults.
DEFAULT_SHIFT = {
    "brightness": -0.15,
    "contrast": 0.8,
    "noise": 2.0,
    "dropout_visible": 0.3,
}


def make_shift_pair(base: SynthConfig,
                    brightness: float = DEFAULT_SHIFT["brightness"],
                    contrast: float = DEFAULT_SHIFT["contrast"],
                    noise: float = DEFAULT_SHIFT["noise"],
                    dropout_visible: float = DEFAULT_SHIFT["dropout_visible"],
                    ) -> tuple[SynthConfig, SynthConfig]:
    """Source config (the base) and a shifted target config.

    With neutral knobs (0, 1, 1, 0) the two configs are identical; seeds are
    left untouched so callers split them per dataset.
    """
    target = replace(
        base,
        brightness_offset=base.brightness_offset + brightness,
        contrast_scale=base.contrast_scale * contrast,
        noise_multiplier=base.noise_multiplier * noise,
        dropout_visible=dropout_visible,
    )
    return base, target
