"""Flat key=value run configuration shared by every command.

One `key = value` pair per line, ``#`` starts a comment. Every key has a
documented default; unknown keys are rejected so typos fail loudly. The
effective merged configuration can be serialized back out (and is echoed
into each run's output directory) and re-parses to an equal configuration.
"""

from __future__ import annotations

from typing import Callable, Optional

from .errors import ConfigError
from .losses import LossWeights, default_weights
from .scenes import SceneSpec
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() == "none" else int(text)


def _parse_str(text: str) -> str:
    return text.strip()


class _Key:
    def __init__(self, default, parse: Callable, doc: str):
        self.default = default
        self.parse = parse
        self.doc = doc


_KEYS: dict[str, _Key] = {
    # reproducibility
    "seed": _Key(0, int, "master seed: dataset generation and training RNG"),
    "deterministic": _Key(True, _parse_bool, "single-thread fully reproducible mode"),
    # scene generation
    "width": _Key(128, int, "frame width in pixels (divisible by 4)"),
    "height": _Key(64, int, "frame height in pixels (divisible by 4)"),
    "num_frames": _Key(20, int, "frames per sequence"),
    "num_sprites": _Key(4, int, "moving sprites per scene"),
    "speed_min": _Key(0.5, float, "slowest sprite speed, pixels/frame"),
    "speed_max": _Key(2.0, float, "fastest sprite speed, pixels/frame"),
    "accel_min": _Key(0.0, float, "smallest sprite acceleration, pixels/frame^2"),
    "accel_max": _Key(0.05, float, "largest sprite acceleration, pixels/frame^2"),
    "size_min": _Key(4, int, "smallest sprite radius, pixels"),
    "size_max": _Key(8, int, "largest sprite radius, pixels"),
    "num_train": _Key(64, int, "training sequences in a generated dataset"),
    "num_val": _Key(16, int, "validation sequences in a generated dataset"),
    # optimization
    "base_lr": _Key(0.001, float, "initial learning rate of the poly schedule"),
    "power": _Key(0.9, float, "poly schedule exponent"),
    "weight_decay": _Key(0.0005, float, "L2 decay folded into the SGD update"),
    "momentum": _Key(0.9, float, "SGD momentum"),
    "batch_size": _Key(1, int, "samples per SGD step"),
    "max_iterations": _Key(5000, int, "training iterations"),
    "unroll_pairs": _Key(4, int, "history pairs fed to the recurrent aggregator"),
    "step_size": _Key(1, int, "temporal stride between input pair frames"),
    "future_jump": _Key(3, int, "frames between the last input and the target"),
    "grad_clip": _Key(10.0, float, "global gradient-norm ceiling (0 disables)"),
    "lambda1": _Key(1.0, float, "weight of the segmentation loss"),
    "lambda2": _Key(1.0, float, "initial weight of the RGB reconstruction loss"),
    "flow_weight": _Key(0.0, float, "optional direct flow supervision weight"),
    "log_every": _Key(50, int, "iterations between log lines"),
    "checkpoint_every": _Key(1000, int, "iterations between checkpoint writes"),
    # model
    "channels": _Key(16, int, "feature width of the pair encoder and LSTM"),
    "seg_mode": _Key("oracle", _parse_str, "segmentation backbone: oracle or learned"),
    "seg_width": _Key(16, int, "feature width of the learned backbone"),
    "fuse_variant": _Key("warp", _parse_str, "future fusion: warp, concat, or add"),
    "use_lstm": _Key(True, _parse_bool, "aggregate pairs recurrently (off: last pair only)"),
    "train_seg": _Key(False, _parse_bool, "unfreeze the learned backbone during training"),
    "recurrent_fine_tune": _Key(False, _parse_bool, "train through the auto-regressive chain"),
    "sub_step": _Key(None, _parse_opt_int, "auto-regressive sub-step (none: half the jump)"),
    # ablation sweep
    "ablate_iterations": _Key(1200, int, "training budget per ablation grid cell"),
}


class RunConfig:
    """Parsed configuration; every known key is an attribute."""

    def __init__(self, values: Optional[dict] = None):
        self._values = {name: key.default for name, key in _KEYS.items()}
        for name, value in (values or {}).items():
            if name not in _KEYS:
                raise ConfigError(f"unknown config key {name!r}")
            self._values[name] = value

    def __getattr__(self, name: str):
        values = object.__getattribute__(self, "_values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def set(self, name: str, value) -> None:
        if name not in _KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        self._values[name] = value

    def set_text(self, name: str, text: str) -> None:
        if name not in _KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        try:
            self._values[name] = _KEYS[name].parse(text)
        except ValueError as e:
            raise ConfigError(f"config key {name!r}: {e}") from e

    # -- serialization --------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
            name, _, value = line.partition("=")
            try:
                cfg.set_text(name.strip(), value.strip())
            except ConfigError as e:
                raise ConfigError(f"config line {lineno}: {e}") from e
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for name, key in _KEYS.items():
            value = self._values[name]
            rendered = "none" if value is None else (str(value).lower() if isinstance(value, bool) else str(value))
            lines.append(f"# {key.doc}")
            lines.append(f"{name} = {rendered}")
        return "\n".join(lines) + "\n"

    # -- derived objects -------------------------------------------------------

    def scene_spec(self, seed: Optional[int] = None) -> SceneSpec:
        return SceneSpec(
            seed=self.seed if seed is None else seed,
            width=self.width,
            height=self.height,
            num_frames=self.num_frames,
            num_sprites=self.num_sprites,
            speed_range=(self.speed_min, self.speed_max),
            accel_range=(self.accel_min, self.accel_max),
            size_range=(self.size_min, self.size_max),
        )

    def loss_weights(self) -> LossWeights:
        base = default_weights(self.max_iterations)
        return LossWeights(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            anneal_schedule=tuple(
                (it, min(v, self.lambda2)) for it, v in base.anneal_schedule
            ),
        )

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            base_lr=self.base_lr,
            power=self.power,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            unroll_pairs=self.unroll_pairs,
            step_size=self.step_size,
            future_jump=self.future_jump,
            seed=self.seed,
            loss_weights=self.loss_weights(),
            channels=self.channels,
            seg_mode=self.seg_mode,
            seg_width=self.seg_width,
            fuse_variant=self.fuse_variant,
            use_lstm=self.use_lstm,
            grad_clip=self.grad_clip,
            train_seg=self.train_seg,
            recurrent_fine_tune=self.recurrent_fine_tune,
            sub_step=self.sub_step,
            flow_weight=self.flow_weight,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )
        kw.update(overrides)
        return TrainConfig(**kw)
