"""Flat ``key = value`` run configuration shared by every subcommand.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are an error. Values given on the command line override the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .detect import DoGParams, FastParams
from .errors import SonarMatchError
from .match import MatchConfig
from .net import ArchConfig, LossConfig
from .patches import AugmentConfig
from .train import TrainConfig


class ConfigError(SonarMatchError):
    """Bad configuration key or value (a usage error)."""


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {
    "seed": Key(int, 42, "global RNG seed"),
    "patch_size": Key(int, 32, "patch side in pixels (even); half-widths m = n = patch_size/2"),
    "threshold": Key(float, 0.5, "similarity threshold for accepting a match"),
    "dedup_radius": Key(float, 3.0, "cross-map fusion duplicate radius in pixels"),
    "dog_octaves": Key(int, 3, "DoG octaves"),
    "dog_scales": Key(int, 3, "DoG scales per octave"),
    "dog_sigma": Key(float, 1.6, "DoG base sigma"),
    "dog_contrast": Key(float, 0.015, "DoG contrast threshold"),
    "dog_edge": Key(float, 10.0, "DoG edge ratio threshold"),
    "fast_threshold": Key(float, 0.08, "FAST intensity threshold"),
    "fast_arc": Key(int, 9, "FAST contiguous arc length"),
    "fast_nms_radius": Key(float, 4.0, "FAST non-maximum suppression radius"),
    "channels": Key(_int_tuple, (8, 16, 32), "conv widths, comma separated"),
    "embed_dim": Key(int, 64, "embedding length"),
    "head_hidden": Key(int, 32, "decision head hidden units"),
    "loss_lambda": Key(float, 0.1, "contrastive term weight"),
    "loss_margin": Key(float, 1.0, "contrastive margin"),
    "epochs": Key(int, 100, "training epochs"),
    "batch_size": Key(int, 32, "minibatch size"),
    "lr": Key(float, 1e-3, "Adam learning rate"),
    "lr_schedule": Key(str, "constant", "constant or cosine"),
    "validation_fraction": Key(float, 0.2, "held-out share of correspondences during training"),
    "aug_noise": Key(float, 0.02, "augmentation Gaussian noise sigma"),
    "aug_rotation": Key(float, 8.0, "augmentation max rotation in degrees"),
    "aug_translation": Key(float, 1.0, "augmentation max shift in pixels"),
    "aug_scale_min": Key(float, 1.0, "augmentation min scale"),
    "aug_scale_max": Key(float, 1.0, "augmentation max scale"),
    "ransac_iterations": Key(int, 1000, "RANSAC iterations"),
    "inlier_tolerance": Key(float, 2.0, "RANSAC and evaluation inlier tolerance in pixels"),
    "min_inliers": Key(int, 3, "minimum RANSAC consensus"),
    "max_correspondences": Key(int, 64, "cap on training correspondences per image pair"),
    "hard_negatives": Key(_bool, False, "use near-miss negatives when building datasets"),
    "d_ratio": Key(float, 0.85, "baseline ratio-test threshold"),
    "size": Key(int, 256, "synthetic image side"),
    "gamma_a": Key(float, 0.7, "gamma of survey A"),
    "gamma_b": Key(float, 1.6, "gamma of survey B"),
    "speckle": Key(float, 0.3, "speckle strength"),
    "noise_sigma": Key(float, 0.0, "additive noise sigma"),
    "shading": Key(str, "left", "shading side of survey A (left, right, none)"),
    "max_rotation": Key(float, 8.0, "max survey misalignment rotation in degrees"),
    "max_shift": Key(float, 12.0, "max survey misalignment shift in pixels"),
    "pairs": Key(int, 20, "experiment: number of survey pairs"),
    "train_pairs": Key(int, 16, "experiment: pairs used for training"),
}


class RunConfig(Mapping[str, Any]):
    """Immutable resolved settings where explicit overrides beat the file and the file beats defaults."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        resolved = {k: key.default for k, key in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            resolved[k] = v
        self._values = resolved

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def merged(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """New config with ``overrides`` applied; ``None`` values are ignored."""
        return RunConfig({**self._values, **{k: v for k, v in overrides.items() if v is not None}})

    # -- typed views ---------------------------------------------------------

    @property
    def half(self) -> int:
        if self["patch_size"] % 2 or self["patch_size"] < 8:
            raise ConfigError("patch_size must be even and >= 8")
        return self["patch_size"] // 2

    def dog(self) -> DoGParams:
        return DoGParams(self["dog_octaves"], self["dog_scales"], self["dog_sigma"], self["dog_contrast"],
                         self["dog_edge"])

    def fast(self) -> FastParams:
        return FastParams(self["fast_threshold"], self["fast_arc"], self["fast_nms_radius"])

    def arch(self) -> ArchConfig:
        return ArchConfig(self["channels"], self["embed_dim"], self["head_hidden"])

    def loss(self) -> LossConfig:
        return LossConfig(self["loss_lambda"], self["loss_margin"])

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self["aug_noise"], self["aug_rotation"], self["aug_translation"],
                             (self["aug_scale_min"], self["aug_scale_max"]))

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self["epochs"], batch_size=self["batch_size"], seed=self["seed"], lr=self["lr"],
                           lr_schedule=self["lr_schedule"], loss=self.loss(), augment=self.augment(),
                           validation_fraction=self["validation_fraction"])

    def match(self) -> MatchConfig:
        return MatchConfig(m=self.half, n=self.half, threshold=self["threshold"],
                           ransac_iterations=self["ransac_iterations"], inlier_tolerance=self["inlier_tolerance"],
                           min_inliers=self["min_inliers"], seed=self["seed"], dedup_radius=self["dedup_radius"],
                           dog=self.dog(), fast=self.fast())

    def experiment(self):
        from .experiment import ExperimentConfig
        return ExperimentConfig(
            seed=self["seed"], n_pairs=self["pairs"], n_train=self["train_pairs"], size=self["size"],
            gamma_a=self["gamma_a"], gamma_b=self["gamma_b"], speckle=self["speckle"],
            noise_sigma=self["noise_sigma"], shading=self["shading"], max_rotation=self["max_rotation"],
            max_shift=self["max_shift"], patch_size=self["patch_size"],
            max_correspondences=self["max_correspondences"], threshold=self["threshold"],
            d_ratio=self["d_ratio"], inlier_tolerance=self["inlier_tolerance"], arch=self.arch(),
            train=self.train(), dog=self.dog(), fast=self.fast())


def parse_value(key: str, text: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return KEYS[key].parse(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path: str | os.PathLike | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        with open(path) as fh:
            file_values = parse_config_text(fh.read(), str(path))
    return RunConfig(file_values).merged(overrides or {})


def format_config(cfg: RunConfig) -> str:
    """Round-trippable text form, one documented key per line."""
    lines = []
    for k, key in KEYS.items():
        v = cfg[k]
        text = ",".join(str(c) for c in v) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else str(v)
        lines.append(f"{k} = {text}  # {key.help}")
    return "\n".join(lines) + "\n"
