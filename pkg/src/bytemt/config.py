"""``key = value`` experiment files.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected before
anything runs. ``scheme = byte-embeddingless`` is shorthand for
``scheme = byte`` plus ``mode = embeddingless``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .model import ConfigError, ModelConfig
from .tokenization import Vocab
from .training import TrainConfig

_INT = int
_FLOAT = float


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


KEYS = {
    # data
    "data_dir": str,
    "scheme": str,
    "batch_bytes": _INT,
    # model
    "mode": str,
    "model_dim": _INT,
    "ffn_dim": _INT,
    "layers": _INT,
    "heads": _INT,
    "dropout": _FLOAT,
    "token_dropout": _FLOAT,
    "max_len": _INT,
    "positions": str,
    "freeze_scales": _bool,
    "dtype": str,
    # optimisation
    "peak_lr": _FLOAT,
    "warmup": _INT,
    "weight_decay": _FLOAT,
    "steps": _INT,
    "seed": _INT,
    "validate_every": _INT,
    "keep_top_k": _INT,
    "label_smoothing": _FLOAT,
    "adam_beta1": _FLOAT,
    "adam_beta2": _FLOAT,
    "adam_eps": _FLOAT,
    "clip_norm": _FLOAT,
}

DESK_DEFAULTS = {
    "scheme": "byte",
    "batch_bytes": "4000",
    "mode": "embedding",
    "model_dim": "64",
    "ffn_dim": "128",
    "layers": "2",
    "heads": "2",
    "dropout": "0.2",
    "token_dropout": "0",
    "max_len": "1024",
    "positions": "sinusoidal",
    "freeze_scales": "false",
    "dtype": "float32",
    "peak_lr": "5e-4",
    "warmup": "4000",
    "weight_decay": "1e-4",
    "steps": "5000",
    "seed": "1",
    "validate_every": "200",
    "keep_top_k": "5",
    "label_smoothing": "0.1",
    "adam_beta1": "0.9",
    "adam_beta2": "0.98",
    "adam_eps": "1e-8",
    "clip_norm": "0",
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, object]

    @classmethod
    def build(cls, *layers: Mapping[str, str]) -> "RunConfig":
        raw = dict(DESK_DEFAULTS)
        for layer in layers:
            raw.update(layer)
        if raw["scheme"] == "byte-embeddingless":
            raw["scheme"], raw["mode"] = "byte", "embeddingless"
        values = {}
        for key, value in raw.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            try:
                values[key] = KEYS[key](value)
            except ValueError as err:
                raise ConfigError(f"bad value for {key}: {err}") from None
        if values["scheme"] not in ("byte", "char", "bpe"):
            raise ConfigError(f"unknown scheme {values['scheme']!r}")
        cfg = cls(values)
        cfg.train_config()  # validate eagerly
        return cfg

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        return cls.build(parse_config_text(text, str(path)), overrides or {})

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def label(self) -> str:
        if self["scheme"] == "byte" and self["mode"] == "embeddingless":
            return "byte-embeddingless"
        return str(self["scheme"])

    def model_config(self, vocab: Vocab) -> ModelConfig:
        return ModelConfig(
            mode=self["mode"], vocab_size=len(vocab), model_dim=self["model_dim"],
            ffn_dim=self["ffn_dim"], layers=self["layers"], heads=self["heads"],
            dropout=self["dropout"], token_dropout=self["token_dropout"], max_len=self["max_len"],
            pad_id=vocab.pad_id, bos_id=vocab.bos_id, eos_id=vocab.eos_id,
            positions=self["positions"], freeze_scales=self["freeze_scales"], dtype=self["dtype"],
        )

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                peak_lr=self["peak_lr"], warmup=self["warmup"], weight_decay=self["weight_decay"],
                steps=self["steps"], token_dropout=self["token_dropout"], seed=self["seed"],
                validate_every=self["validate_every"], keep_top_k=self["keep_top_k"],
                label_smoothing=self["label_smoothing"], betas=(self["adam_beta1"], self["adam_beta2"]),
                eps=self["adam_eps"], clip_norm=self["clip_norm"],
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def with_values(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, values={**self.values, **changes})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())
