"""Command-line interface: synth, train-source, adapt and eval subcommands.

Every run is described by plain-text ``key = value`` config files; command
line flags override file values, and each command writes the fully resolved
configuration into its output directory, so any run can be replayed
byte-identically with ``--config <out>/<command>.resolved.cfg``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .adaptation import (
    AdaptConfig,
    DEFAULT_SOURCE_PHASES,
    SourceSchedule,
    adapt,
    emit_history,
    train_source,
)
from .data import (
    DEFAULT_SHIFT,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    make_shift_pair,
    write_dataset,
)
from .detector import ArchConfig, forward, load_checkpoint, save_checkpoint, upsample_prediction
from .errors import ConfigError, DatasetError, NumericError, ShapeMismatchError, UndefinedAPError
from .evaluation import emit_heatmap, emit_pr_csv, pixel_ap
from .labels import boxes_to_mask, save_pseudo_states

# Per-split seed offsets for the synth command, so no two splits share images.
TARGET_TRAIN_SEED_OFFSET = 10_000
TARGET_TEST_SEED_OFFSET = 20_000


def read_kv_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file; '#' starts a comment, blanks ignored."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_kv_config(path, values: dict) -> None:
    lines = [f"{key} = {values[key]}" for key in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


class _Resolver:
    """Layered option lookup: defaults, then config file, then CLI flags."""

    def __init__(self, defaults: dict, file_values: dict, args: argparse.Namespace,
                 flag_names: dict[str, str]):
        self.resolved: dict[str, str] = {k: _fmt(v) for k, v in defaults.items()}
        for key, value in file_values.items():
            if key not in self.resolved:
                raise ConfigError(f"unknown config key {key!r}")
            self.resolved[key] = value
        for key, attr in flag_names.items():
            value = getattr(args, attr, None)
            if value is not None:
                self.resolved[key] = _fmt(value)

    def get(self, key: str) -> str:
        return self.resolved[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.resolved[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} must be an integer") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.resolved[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} must be a number") from exc

    def get_ints(self, key: str) -> tuple[int, ...]:
        return tuple(int(v) for v in self.resolved[key].split(","))

    def require_path(self, key: str) -> Path:
        value = self.resolved[key]
        if not value:
            raise ConfigError(f"missing required path {key!r} (flag or config)")
        return Path(value)


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    phases = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            epochs, lr = part.split(":")
            phases.append((int(epochs), float(lr)))
        except ValueError as exc:
            raise ConfigError(
                f"schedule phase {part!r} must be 'epochs:lr'"
            ) from exc
    if not phases:
        raise ConfigError("schedule must contain at least one phase")
    return tuple(phases)


def _schedule_str(phases) -> str:
    return ",".join(f"{e}:{repr(float(lr))}" for e, lr in phases)


def _out_dir(resolver: _Resolver) -> Path:
    out = resolver.require_path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "out": "",
    "seed": 0,
    "n_source": 40,
    "n_target_train": 40,
    "n_target_test": 20,
    "height": SynthConfig.height,
    "width": SynthConfig.width,
    "count_range": SynthConfig.count_range,
    "size_range": SynthConfig.size_range,
    "contrast_visible": SynthConfig.contrast_visible,
    "contrast_thermal": SynthConfig.contrast_thermal,
    "background_level": SynthConfig.background_level,
    "texture_amplitude": SynthConfig.texture_amplitude,
    "noise_visible": SynthConfig.noise_visible,
    "noise_thermal": SynthConfig.noise_thermal,
    "shift_brightness": DEFAULT_SHIFT["brightness"],
    "shift_contrast": DEFAULT_SHIFT["contrast"],
    "shift_noise": DEFAULT_SHIFT["noise"],
    "shift_dropout_visible": DEFAULT_SHIFT["dropout_visible"],
}


def cmd_synth(args) -> int:
    file_values = read_kv_config(args.config) if args.config else {}
    r = _Resolver(SYNTH_DEFAULTS, file_values, args, {"out": "out", "seed": "seed"})
    out = _out_dir(r)
    base = SynthConfig(
        height=r.get_int("height"),
        width=r.get_int("width"),
        count_range=r.get_ints("count_range"),
        size_range=tuple(float(v) for v in r.get("size_range").split(",")),
        contrast_visible=r.get_float("contrast_visible"),
        contrast_thermal=r.get_float("contrast_thermal"),
        background_level=r.get_float("background_level"),
        texture_amplitude=r.get_float("texture_amplitude"),
        noise_visible=r.get_float("noise_visible"),
        noise_thermal=r.get_float("noise_thermal"),
        seed=r.get_int("seed"),
    )
    src_cfg, tgt_cfg = make_shift_pair(
        base,
        brightness=r.get_float("shift_brightness"),
        contrast=r.get_float("shift_contrast"),
        noise=r.get_float("shift_noise"),
        dropout_visible=r.get_float("shift_dropout_visible"),
    )
    seed = r.get_int("seed")
    splits = [
        ("source", src_cfg, r.get_int("n_source"), seed),
        ("target-train", tgt_cfg, r.get_int("n_target_train"), seed + TARGET_TRAIN_SEED_OFFSET),
        ("target-test", tgt_cfg, r.get_int("n_target_test"), seed + TARGET_TEST_SEED_OFFSET),
    ]
    for name, cfg, count, split_seed in splits:
        pairs = generate_synthetic(replace(cfg, seed=split_seed), count, id_prefix="img")
        write_dataset(pairs, out / name)
        print(f"wrote {count} pairs to {out / name}")
    write_kv_config(out / "synth.resolved.cfg", r.resolved)
    return 0


# ---------------------------------------------------------------------------
# train-source
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": "",
    "out": "",
    "seed": 0,
    "schedule": _schedule_str(DEFAULT_SOURCE_PHASES),
    "clip_norm": 10.0,
    "loss_form": "sum",
    "stream_channels": ArchConfig.stream_channels,
    "fusion_channels": ArchConfig.fusion_channels,
    "kernel_size": ArchConfig.kernel_size,
    "downsamples": ArchConfig.downsamples,
    "init_gain": ArchConfig.init_gain,
}


def _apply_epochs_lr_override(r: _Resolver, args) -> None:
    # --epochs/--lr replace the whole schedule with one phase.
    if getattr(args, "epochs", None) is not None or getattr(args, "lr", None) is not None:
        phases = _parse_schedule(r.get("schedule"))
        epochs = args.epochs if args.epochs is not None else sum(e for e, _ in phases)
        lr = args.lr if args.lr is not None else phases[0][1]
        r.resolved["schedule"] = _schedule_str(((epochs, lr),))


def cmd_train_source(args) -> int:
    file_values = read_kv_config(args.config) if args.config else {}
    r = _Resolver(TRAIN_DEFAULTS, file_values, args,
                  {"data": "data", "out": "out", "seed": "seed", "clip_norm": "clip_norm"})
    _apply_epochs_lr_override(r, args)
    out = _out_dir(r)
    dataset = load_dataset(r.require_path("data"))
    arch = ArchConfig(
        stream_channels=r.get_ints("stream_channels"),
        fusion_channels=r.get_int("fusion_channels"),
        kernel_size=r.get_int("kernel_size"),
        downsamples=r.get_int("downsamples"),
        init_gain=r.get_float("init_gain"),
    )
    schedule = SourceSchedule(
        phases=_parse_schedule(r.get("schedule")),
        clip_norm=r.get_float("clip_norm"),
        loss_form=r.get("loss_form"),
    )
    rows = []
    params = train_source(
        dataset, arch, schedule, seed=r.get_int("seed"),
        on_step=lambda step, lr, report: rows.append((step, lr, report)),
    )
    save_checkpoint(params, out / "detector.ckpt")
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,lr,loss_total,loss_multispectral,loss_visible,loss_thermal\n")
        for step, lr, report in rows:
            m, v, t = report.per_pixel()
            fh.write(f"{step},{repr(lr)},{repr(m + v + t)},{repr(m)},{repr(v)},{repr(t)}\n")
    write_kv_config(out / "train-source.resolved.cfg", r.resolved)
    print(f"trained on {len(dataset)} pairs; checkpoint at {out / 'detector.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# adapt
# ---------------------------------------------------------------------------

ADAPT_DEFAULTS = {
    "checkpoint": "",
    "data": "",
    "out": "",
    "seed": 0,
    "iterations": AdaptConfig.iterations,
    "epochs": AdaptConfig.epochs_per_iteration,
    "lr": AdaptConfig.lr,
    "tau": AdaptConfig.tau_start,
    "tau_end": "",
    "clip_norm": AdaptConfig.clip_norm,
    "eq7_subtrahend": AdaptConfig.eq7_subtrahend,
    "loss_form": AdaptConfig.loss_form,
    "cleanup_min_component": AdaptConfig.cleanup_min_component,
    "checkpoint_every": AdaptConfig.checkpoint_every,
}


def cmd_adapt(args) -> int:
    file_values = read_kv_config(args.config) if args.config else {}
    r = _Resolver(ADAPT_DEFAULTS, file_values, args, {
        "checkpoint": "checkpoint", "data": "data", "out": "out", "seed": "seed",
        "iterations": "iterations", "epochs": "epochs", "lr": "lr", "tau": "tau",
        "clip_norm": "clip_norm", "eq7_subtrahend": "eq7_subtrahend",
    })
    out = _out_dir(r)
    params = load_checkpoint(r.require_path("checkpoint"))
    dataset = load_dataset(r.require_path("data"))
    tau = r.get_float("tau")
    config = AdaptConfig(
        iterations=r.get_int("iterations"),
        epochs_per_iteration=r.get_int("epochs"),
        lr=r.get_float("lr"),
        tau_start=tau,
        tau_end=tau if r.get("tau_end") == "" else r.get_float("tau_end"),
        clip_norm=r.get_float("clip_norm"),
        shuffle_seed=r.get_int("seed"),
        eq7_subtrahend=r.get("eq7_subtrahend"),
        loss_form=r.get("loss_form"),
        cleanup_min_component=r.get_int("cleanup_min_component"),
        checkpoint_every=r.get_int("checkpoint_every"),
    )
    adapted, states, history = adapt(params, dataset, config, out_dir=out)
    save_checkpoint(adapted, out / "detector.ckpt")
    save_pseudo_states(states, out / "pseudo.state")
    emit_history(history, out / "history.csv")
    write_kv_config(out / "adapt.resolved.cfg", r.resolved)
    print(f"adapted over {config.iterations} iterations; checkpoint at {out / 'detector.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "checkpoint": "",
    "data": "",
    "out": "",
}


def cmd_eval(args) -> int:
    file_values = read_kv_config(args.config) if args.config else {}
    r = _Resolver(EVAL_DEFAULTS, file_values, args,
                  {"checkpoint": "checkpoint", "data": "data", "out": "out"})
    out = _out_dir(r)
    params = load_checkpoint(r.require_path("checkpoint"))
    dataset = load_dataset(r.require_path("data"))
    if not dataset:
        raise DatasetError("evaluation dataset is empty")

    heatmap_dir = out / "heatmaps"
    heatmap_dir.mkdir(exist_ok=True)
    scores, masks, tags = [], [], []
    for pair in dataset:
        pred = forward(params, pair)
        h, w = pair.shape
        full = upsample_prediction(pred, h, w)
        emit_heatmap(full.y_m, heatmap_dir / f"{pair.image_id}.pgm")
        scores.append(full.y_m)
        masks.append(boxes_to_mask(pair.annotation, h, w, h, w))
        tags.append(pair.tag)

    curve = pixel_ap(scores, masks)
    emit_pr_csv(curve, out / "pr.csv")
    lines = [f"AP={repr(curve.ap)}"]
    for tag in sorted({t for t in tags if t is not None}):
        tag_scores = [s for s, t in zip(scores, tags) if t == tag]
        tag_masks = [m for m, t in zip(masks, tags) if t == tag]
        try:
            tag_ap = pixel_ap(tag_scores, tag_masks).ap
            lines.append(f"AP[{tag}]={repr(tag_ap)}")
        except UndefinedAPError:
            lines.append(f"AP[{tag}]=undefined")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    write_kv_config(out / "eval.resolved.cfg", r.resolved)
    for line in lines:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtdetect",
        description="Visible/thermal pedestrian heatmap detection with "
                    "self-training domain adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, paths=()):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory")
        for name in paths:
            p.add_argument(f"--{name}", help=f"{name} path")

    p = sub.add_parser("synth", help="generate the synthetic source/target benchmark")
    common(p)
    p.add_argument("--seed", type=int, help="base generator seed")

    p = sub.add_parser("train-source", help="train the detector on annotated source data")
    common(p, paths=("data",))
    p.add_argument("--seed", type=int, help="init and shuffle seed")
    p.add_argument("--epochs", type=int, help="override: single-phase epoch count")
    p.add_argument("--lr", type=float, help="override: single-phase learning rate")
    p.add_argument("--clip-norm", dest="clip_norm", type=float, help="gradient clip norm")

    p = sub.add_parser("adapt", help="adapt a source checkpoint to unlabeled target data")
    common(p, paths=("checkpoint", "data"))
    p.add_argument("--seed", type=int, help="batch order seed")
    p.add_argument("--iterations", type=int, help="outer self-training iterations")
    p.add_argument("--epochs", type=int, help="SGD epochs per iteration")
    p.add_argument("--tau", type=float, help="confidence threshold in (0.5, 1)")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--clip-norm", dest="clip_norm", type=float, help="gradient clip norm")
    p.add_argument("--eq7-subtrahend", dest="eq7_subtrahend",
                   choices=["visible", "thermal"],
                   help="which pseudo set is dropped from thermal supervision")

    p = sub.add_parser("eval", help="evaluate a checkpoint: pixel AP, PR curve, heatmaps")
    common(p, paths=("checkpoint", "data"))

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, NumericError, ShapeMismatchError,
            UndefinedAPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
