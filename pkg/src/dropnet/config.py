"""Flat ``key = value`` run configuration with a single schema."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .model import PRESETS, ModelConfig, parse_placement, placement_for_model
from .train import TrainConfig

SEED_ENV = "DROPNET_SEED"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    k.name: k
    for k in [
        Key("train_path", str, "", "training corpus (jsonl or tsv)"),
        Key("val_path", str, "", "validation corpus"),
        Key("test_path", str, "", "optional test corpus"),
        Key("format", str, "auto", "corpus format: jsonl, tsv or auto (by extension)"),
        Key("max_train_examples", int, 0, "use only the first N training examples (0 = all)"),
        Key("max_eval_examples", int, 0, "use only the first N validation/test examples (0 = all)"),
        Key("embeddings_path", str, "", "optional pretrained vectors, 'token v1 .. vD' per line"),
        Key("embedding_dim", int, 300, "word vector width"),
        Key("trainable_embeddings", _bool, True, "fine-tune the embedding table"),
        Key("min_count", int, 1, "minimum token frequency for the vocabulary"),
        Key("hidden_units", int, 300, "LSTM units per direction"),
        Key("preset", str, "", f"named configuration: {', '.join(PRESETS)}"),
        Key("model_id", int, 2, "dropout placement by model number 1..13"),
        Key("placement", str, "", "explicit comma-separated dropout sites; overrides model_id"),
        Key("drop_rate", float, 0.4, "probability of dropping a unit"),
        Key("inverted_dropout", _bool, False, "scale by 1/retain at train time instead of retain at eval"),
        Key("epochs", int, 50, "maximum epochs"),
        Key("batch_size", int, 32, "mini-batch size"),
        Key("learning_rate", float, 0.001, "Adam step size"),
        Key("l2_lambda", float, 1e-6, "L2 weight on weight matrices"),
        Key("patience", int, 5, "epochs without validation improvement before stopping"),
        Key("seed", int, 1, f"random seed (the {SEED_ENV} environment variable overrides it)"),
        Key("log_wallclock", _bool, False, "write real epoch durations to metrics.csv (breaks byte-identical reruns)"),
        Key("output_dir", str, "runs/default", "directory for metrics.csv, summary.json and model.ckpt"),
    ]
}


def schema_help() -> str:
    width = max(len(k) for k in SCHEMA)
    lines = ["configuration keys (file lines 'key = value', or --set key=value):"]
    for k in SCHEMA.values():
        lines.append(f"  {k.name:<{width}}  {k.help} [default: {k.default!r}]")
    return "\n".join(lines)


def parse_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def parse_overrides(items) -> dict[str, str]:
    raw = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        raw[key.strip()] = value.strip()
    return raw


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def placement(self) -> frozenset[str]:
        if self.values["placement"]:
            return parse_placement(self.values["placement"])
        return placement_for_model(self.values["model_id"])

    def model_kwargs(self) -> dict:
        """ModelConfig fields other than vocabulary and class count."""
        v = self.values
        return dict(
            embedding_dim=v["embedding_dim"],
            hidden_units=v["hidden_units"],
            placement=self.placement(),
            drop_rate=v["drop_rate"],
            seed=v["seed"],
            inverted_dropout=v["inverted_dropout"],
            trainable_embeddings=v["trainable_embeddings"],
        )

    def model_config(self, vocab_size: int, num_classes: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_classes=num_classes, **self.model_kwargs())

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            learning_rate=v["learning_rate"],
            l2_lambda=v["l2_lambda"],
            patience=v["patience"],
            seed=v["seed"],
            log_wallclock=v["log_wallclock"],
        )


def resolve(raw: dict[str, str], env=None) -> RunConfig:
    """Validate raw strings against the schema.

    Precedence, lowest first: schema defaults, preset, explicit keys,
    ``DROPNET_SEED``.
    """
    env = os.environ if env is None else env
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration key {unknown[0]!r}", key=unknown[0])
    values = {k.name: k.default for k in SCHEMA.values()}
    typed = {}
    for key, text in raw.items():
        try:
            typed[key] = SCHEMA[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key=key) from None
    preset = typed.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", key="preset")
        values.update(PRESETS[preset])
    values.update(typed)
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", key="seed") from None
    if values["format"] not in ("auto", "jsonl", "tsv"):
        raise ConfigError(f"format must be auto, jsonl or tsv, got {values['format']!r}", key="format")
    if not 0.0 <= values["drop_rate"] < 1.0:
        raise ConfigError(f"drop_rate must lie in [0, 1), got {values['drop_rate']}", key="drop_rate")
    cfg = RunConfig(values)
    cfg.placement()
    cfg.train_config()
    return cfg


def load(path=None, overrides=None, env=None) -> RunConfig:
    raw = parse_file(path) if path else {}
    raw.update(parse_overrides(overrides))
    return resolve(raw, env)
