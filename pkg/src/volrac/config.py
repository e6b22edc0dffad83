"""Run configuration: key = value files with command-line overrides.

A config file holds one ``key = value`` assignment per line; ``#`` starts a
comment. Divisibility constraints are validated before any work starts and
violations are reported by name.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .artifacts import ARTIFACT_ORDER, ArtifactConfig
from .model import ModelConfig, config_violations
from .train import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed config file or constraint violation."""


_INT_KEYS = {
    "side", "patch", "window", "embed", "heads", "layers",
    "batch", "steps", "seed", "eval_interval", "accumulation",
    "artifact_seed", "phantom_ellipsoids", "phantom_background_order",
}
_FLOAT_KEYS = {"lr", "beta1", "beta2", "epsilon", "split", "probability"}
_STR_KEYS = {"loss"}
_BOOL_KEYS = {"freeze_corruption"}

DEFAULTS = {
    "side": 32,
    "patch": 4,
    "window": 2,
    "embed": 32,
    "heads": 4,
    "layers": 4,
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "accumulation": 8,
    "loss": "squared",
    "batch": 2,
    "steps": 2000,
    "seed": 0,
    "split": 0.8,
    "eval_interval": 50,
    "freeze_corruption": False,
    "artifact_seed": 0,
    "probability": 0.125,
    "phantom_ellipsoids": 4,
    "phantom_background_order": 2,
}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if key in _STR_KEYS:
            return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_file(path) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def apply_overrides(values: dict, overrides) -> dict:
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        out[key] = _parse_value(key, raw)
    return out


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    optimizer: OptimizerConfig
    train: TrainConfig
    artifact: ArtifactConfig
    phantom_ellipsoids: int = 4
    phantom_background_order: int = 2


def build_run_config(values: dict) -> RunConfig:
    merged = dict(DEFAULTS)
    merged.update(values)

    bad = config_violations(
        merged["side"], merged["patch"], merged["window"],
        merged["embed"], merged["heads"], merged["layers"],
    )
    if bad:
        raise ConfigError("; ".join(bad))

    try:
        model = ModelConfig(
            side=merged["side"], patch=merged["patch"], window=merged["window"],
            embed=merged["embed"], heads=merged["heads"], layers=merged["layers"],
        )
        optimizer = OptimizerConfig(
            learning_rate=merged["lr"], beta1=merged["beta1"], beta2=merged["beta2"],
            epsilon=merged["epsilon"], accumulation_steps=merged["accumulation"],
        )
        train = TrainConfig(
            loss_kind=merged["loss"], batch_size=merged["batch"], max_steps=merged["steps"],
            seed=merged["seed"], split=merged["split"], eval_interval=merged["eval_interval"],
            freeze_corruption=merged["freeze_corruption"],
        )
        artifact = ArtifactConfig(
            probabilities=(float(merged["probability"]),) * len(ARTIFACT_ORDER),
            seed=merged["artifact_seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        model=model, optimizer=optimizer, train=train, artifact=artifact,
        phantom_ellipsoids=merged["phantom_ellipsoids"],
        phantom_background_order=merged["phantom_background_order"],
    )


def load_run_config(path=None, overrides=None) -> RunConfig:
    values = parse_config_file(path) if path else {}
    values = apply_overrides(values, overrides)
    return build_run_config(values)
