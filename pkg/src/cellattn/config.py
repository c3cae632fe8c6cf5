"""Flat ``key = value`` run configuration with dotted section keys.

Every key has a default (listed in :data:`DEFAULTS`); unknown keys are errors.
Lines starting with ``#`` are comments. Example::

    seed = 0
    data.root = synth_data
    model.family = rcan_densenet
    train.epochs = 30
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from cellattn.models import ConfigError, ModelConfig, full_config, mini_config
from cellattn.train import TrainConfig

# key -> (default, description)
DEFAULTS = {
    "seed": ("0", "seed for initialization, splitting and batch order"),
    "data.root": ("", "directory-per-class image dataset (required for train)"),
    "data.resize": ("", "square side images are resized to; empty means model.input_size"),
    "data.fractions": ("0.7,0.2,0.1", "train/validation/test fractions"),
    "data.lenient": ("false", "skip undecodable images instead of failing"),
    "model.preset": ("mini", "mini (desk scale) or full (ResNet-50 / DenseNet-121 depth)"),
    "model.family": ("rcan_densenet", "resnet, densenet, ran_resnet or rcan_densenet"),
    "train.lr": ("0.001", "Adam learning rate"),
    "train.beta1": ("0.9", "Adam first-moment decay"),
    "train.beta2": ("0.999", "Adam second-moment decay"),
    "train.eps": ("1e-08", "Adam epsilon"),
    "train.epochs": ("50", "number of epochs"),
    "train.batch_size": ("16", "mini-batch size"),
    "train.early_stop": ("false", "stop after train.patience epochs without validation improvement"),
    "train.patience": ("5", "early-stopping patience in epochs"),
}
# remaining ModelConfig fields are accepted as model.<field>; empty = preset value
_MODEL_FIELDS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("family", "seed")]
for _name in _MODEL_FIELDS:
    DEFAULTS[f"model.{_name}"] = ("", f"override of the preset's {_name}")


def parse_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def load(path):
    with open(path) as fh:
        return parse_text(fh.read(), str(path))


@dataclass
class RunConfig:
    values: dict  # every key in DEFAULTS, as strings

    @classmethod
    def from_values(cls, values, seed=None, epochs=None):
        merged = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        if seed is not None:
            merged["seed"] = str(seed)
        if epochs is not None:
            merged["train.epochs"] = str(epochs)
        rc = cls(merged)
        rc.model_config()  # validate eagerly
        rc.train_config()
        rc.fractions()
        return rc

    def get(self, key):
        return self.values[key]

    def _typed(self, key, kind):
        raw = self.values[key]
        try:
            if kind is bool:
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return low in ("true", "1", "yes")
            return kind(raw)
        except ValueError:
            raise ConfigError(f"invalid value {raw!r} for {key}") from None

    @property
    def seed(self):
        return self._typed("seed", int)

    def model_config(self):
        preset = self.values["model.preset"]
        family = self.values["model.family"]
        if preset not in ("mini", "full"):
            raise ConfigError(f"model.preset must be 'mini' or 'full', got {preset!r}")
        base = (mini_config if preset == "mini" else full_config)(family)
        overrides = {name: self.values[f"model.{name}"] for name in _MODEL_FIELDS
                     if self.values[f"model.{name}"] != ""}
        fields = {k: v for k, v in (line.split("=", 1) for line in base.to_text().splitlines())}
        fields.update(overrides)
        fields["seed"] = str(self.seed)
        try:
            return ModelConfig.from_strings(fields).validate()
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from None

    def train_config(self):
        try:
            return TrainConfig(
                lr=self._typed("train.lr", float),
                beta1=self._typed("train.beta1", float),
                beta2=self._typed("train.beta2", float),
                eps=self._typed("train.eps", float),
                epochs=self._typed("train.epochs", int),
                batch_size=self._typed("train.batch_size", int),
                seed=self.seed,
                early_stop=self._typed("train.early_stop", bool),
                patience=self._typed("train.patience", int),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"train: {exc}") from None

    def fractions(self):
        try:
            fr = tuple(float(v) for v in self.values["data.fractions"].split(","))
        except ValueError:
            raise ConfigError(f"invalid value {self.values['data.fractions']!r} for data.fractions") from None
        if len(fr) != 3 or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError("data.fractions must be three numbers summing to 1")
        return fr

    def resize(self):
        raw = self.values["data.resize"]
        return int(raw) if raw else self.model_config().input_size

    def lenient(self):
        return self._typed("data.lenient", bool)

    def to_text(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))


def describe_defaults():
    width = max(len(k) for k in DEFAULTS)
    return "\n".join(f"{k.ljust(width)}  {v or '(empty)':>14}  {doc}" for k, (v, doc) in DEFAULTS.items())
