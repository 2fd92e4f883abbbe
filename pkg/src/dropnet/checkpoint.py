"""Single-file model checkpoints.

Layout (all header lines UTF-8, ``\\n``-terminated)::

    DROPNET-CHECKPOINT 1
    config <ModelConfig as one-line JSON>
    labels <JSON list of class names>
    vocab <JSON list of tokens, index order>
    tensor <name> <extent>x<extent>...
    ...                                   (one line per tensor, payload order)
    end
    <payload>

The payload is every tensor listed in the manifest, in manifest order, as
row-major little-endian float64 with no padding between tensors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .errors import CheckpointVersionError
from .model import ModelConfig, NLIModel

MAGIC = "DROPNET-CHECKPOINT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: NLIModel
    vocab: Vocabulary
    label_names: tuple[str, ...]


def save(path, model: NLIModel, vocab: Vocabulary, label_names) -> None:
    state = model.state_dict()
    lines = [
        f"{MAGIC} {VERSION}",
        "config " + json.dumps(model.config.to_dict(), sort_keys=True),
        "labels " + json.dumps(list(label_names)),
        "vocab " + json.dumps(vocab.tokens, ensure_ascii=False),
    ]
    for name, t in state.items():
        lines.append(f"tensor {name} " + "x".join(str(n) for n in t.shape))
    lines.append("end")
    with Path(path).open("wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for t in state.values():
            fh.write(np.ascontiguousarray(t.data, dtype=_LE_F64).tobytes())


def _readline(fh) -> str:
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointVersionError("truncated checkpoint header")
    try:
        return raw[:-1].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointVersionError("checkpoint header is not valid UTF-8") from None


def load(path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        first = fh.readline()
        try:
            magic, version = first.decode("utf-8").split()
        except (UnicodeDecodeError, ValueError):
            raise CheckpointVersionError(f"{path}: not a {MAGIC} file") from None
        if magic != MAGIC:
            raise CheckpointVersionError(f"{path}: not a {MAGIC} file")
        if version != str(VERSION):
            raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")

        fields: dict[str, str] = {}
        manifest: list[tuple[str, tuple[int, ...]]] = []
        while True:
            line = _readline(fh)
            if line == "end":
                break
            key, _, rest = line.partition(" ")
            if key == "tensor":
                name, _, dims = rest.partition(" ")
                try:
                    shape = tuple(int(n) for n in dims.split("x"))
                except ValueError:
                    raise CheckpointVersionError(f"{path}: bad tensor line {line!r}") from None
                manifest.append((name, shape))
            elif key in ("config", "labels", "vocab"):
                fields[key] = rest
            else:
                raise CheckpointVersionError(f"{path}: unexpected header line {line!r}")
        payload = fh.read()

    try:
        config = ModelConfig.from_dict(json.loads(fields["config"]))
        labels = tuple(json.loads(fields["labels"]))
        vocab = Vocabulary(json.loads(fields["vocab"]), frozen=True)
    except (KeyError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointVersionError(f"{path}: incomplete checkpoint header ({exc})") from None

    model = NLIModel(config)
    state = model.state_dict()
    if [n for n, _ in manifest] != list(state):
        raise CheckpointVersionError(f"{path}: tensor manifest does not match the model layout")
    expected = sum(int(np.prod(s)) for _, s in manifest) * _LE_F64.itemsize
    if len(payload) != expected:
        raise CheckpointVersionError(f"{path}: payload has {len(payload)} bytes, manifest needs {expected}")
    offset = 0
    for name, shape in manifest:
        if state[name].shape != shape:
            raise CheckpointVersionError(f"{path}: tensor {name} has shape {shape}, model expects {state[name].shape}")
        n = int(np.prod(shape))
        state[name].data[...] = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=offset).reshape(shape)
        offset += n * _LE_F64.itemsize
    return Checkpoint(model, vocab, labels)
