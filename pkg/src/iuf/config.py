"""Flat ``section.key=value`` run configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

from .exceptions import ConfigurationError
from .losses import LossWeights
from .optim import UpdateConfig

COMPONENTS = ("oasa", "scl", "us")

# key -> (type, default). Types: int, float, str, bool ("on"/"off"), "opt_float" (may be empty)
SCHEMA = {
    "protocol": (str, "3-1"),
    "seed": (int, 0),
    "out": (str, ""),
    "data.source": (str, "synthetic"),
    "data.n_objects": (int, 4),
    "data.n_train": (int, 40),
    "data.n_test_normal": (int, 10),
    "data.n_test_defective": (int, 10),
    "data.image_size": (int, 64),
    "data.mvtec_root": (str, ""),
    "model.target": (str, "features"),
    "model.patch_size": (int, 8),
    "model.model_dim": (int, 128),
    "model.latent_channels": (int, 64),
    "model.n_heads": (int, 4),
    "model.n_max_objects": (int, 16),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 8),
    "loss.lambda0": (float, 1.0),
    "loss.lambda1": (float, 0.5),
    "loss.lambda2": (float, 0.01),
    "loss.scl_keep_ratio": (float, 0.25),
    "optim.lr": (float, 0.15),
    "optim.beta": ("opt_float", None),
    "optim.kappa": (float, 0.5),
    "optim.retain_mode": (str, "pull"),
    "components.oasa": (bool, True),
    "components.scl": (bool, True),
    "components.us": (bool, True),
    "eval.smoothing_sigma": (float, 1.0),
    "eval.heatmaps": (bool, True),
}

# keys that do not change what a run computes
_UNHASHED = ("out",)

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _coerce(key, raw):
    kind = SCHEMA[key][0]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "opt_float":
            return None if raw in (None, "", "none", "None") else float(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid value {raw!r} for config key {key!r}", key=key) from None


def _render(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text) -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})", key=key)
        values[key] = _coerce(key, raw)
    return values


@dataclass
class RunConfig:
    values: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigurationError(f"unknown config key {k!r}", key=k)
            merged[k] = _coerce(k, v)
        self.values = merged
        self.validate()

    def validate(self):
        v = self.values
        if v["data.source"] not in ("synthetic", "mvtec"):
            raise ConfigurationError("data.source must be 'synthetic' or 'mvtec'", key="data.source")
        if v["data.source"] == "mvtec" and not v["data.mvtec_root"]:
            raise ConfigurationError("data.mvtec_root is required for mvtec runs", key="data.mvtec_root")
        for key in ("data.n_objects", "data.n_train", "data.n_test_normal", "data.n_test_defective",
                    "train.epochs", "train.batch_size"):
            if v[key] < 1:
                raise ConfigurationError(f"{key} must be >= 1", key=key)
        if v["model.target"] not in ("features", "pixels"):
            raise ConfigurationError("model.target must be 'features' or 'pixels'", key="model.target")
        self.loss_weights()
        self.update_config()

    @classmethod
    def from_text(cls, text):
        return cls(parse_config_text(text))

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, object]):
        return RunConfig({**self.values, **overrides})

    def to_text(self):
        return "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values))

    def config_hash(self):
        canon = "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values) if k not in _UNHASHED)
        return hashlib.sha256(canon.encode()).hexdigest()

    def components(self):
        return {c: self.values[f"components.{c}"] for c in COMPONENTS}

    def loss_weights(self):
        v = self.values
        return LossWeights(v["loss.lambda0"], v["loss.lambda1"], v["loss.lambda2"], v["loss.scl_keep_ratio"])

    def update_config(self):
        v = self.values
        return UpdateConfig(lr=v["optim.lr"], beta=v["optim.beta"], kappa=v["optim.kappa"],
                            retain_mode=v["optim.retain_mode"])

    def estimator_params(self):
        v = self.values
        return dict(
            image_size=v["data.image_size"], patch_size=v["model.patch_size"], model_dim=v["model.model_dim"],
            latent_channels=v["model.latent_channels"], n_heads=v["model.n_heads"],
            n_max_objects=v["model.n_max_objects"], target=v["model.target"], lambda0=v["loss.lambda0"],
            lambda1=v["loss.lambda1"], lambda2=v["loss.lambda2"], scl_keep_ratio=v["loss.scl_keep_ratio"],
            learning_rate=v["optim.lr"], retention=v["optim.beta"], suppression_gain=v["optim.kappa"],
            retain_mode=v["optim.retain_mode"], epochs=v["train.epochs"], batch_size=v["train.batch_size"],
            use_oasa=v["components.oasa"], use_scl=v["components.scl"], use_us=v["components.us"],
            smoothing_sigma=v["eval.smoothing_sigma"], random_state=v["seed"],
        )


def ablate(cfg: RunConfig, which) -> RunConfig:
    """Switch one component off. Idempotent."""
    if which not in COMPONENTS:
        raise ConfigurationError(f"unknown ablation {which!r}; expected one of {COMPONENTS}", key="ablate")
    overrides = {f"components.{which}": False}
    if which == "scl":
        overrides["loss.lambda2"] = 0.0
    elif which == "us":
        overrides["optim.beta"] = 0.0
    return cfg.with_overrides(overrides)


def ablation_label(cfg: RunConfig):
    off = [c.upper() for c in COMPONENTS if not cfg.components()[c]]
    return "full" if not off else " + ".join(f"w/o {c}" for c in off)
