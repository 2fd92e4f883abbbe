"""Embedding, LSTM/BiLSTM, dense and dropout layers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PAD = 0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Minimal parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


class Embedding(Module):
    """Lookup table whose row ``pad_index`` is pinned to zero."""

    def __init__(self, table: np.ndarray, trainable: bool = True, pad_index: int = PAD):
        table = np.array(table, dtype=np.float64)
        table[pad_index] = 0.0
        self.table = Tensor(table, requires_grad=trainable)
        self._pad_index = pad_index
        self._trainable = trainable

    @classmethod
    def random(cls, rng: np.random.Generator, vocab_size: int, dim: int, trainable: bool = True):
        return cls(glorot_uniform(rng, vocab_size, dim, (vocab_size, dim)), trainable)

    @property
    def pad_index(self) -> int:
        return self._pad_index

    @property
    def trainable(self) -> bool:
        return self._trainable

    def named_parameters(self, prefix: str = ""):
        # frozen tables still belong in checkpoints, so they are listed separately
        if self._trainable:
            yield f"{prefix}table", self.table

    def __call__(self, indices) -> Tensor:
        return embed(indices, self)


def embed(tokens, table: Embedding) -> Tensor:
    """Embed integer token ids; output has a trailing feature axis."""
    return T.lookup(table.table, tokens, padding_idx=table.pad_index)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class LSTM(Module):
    """One-directional LSTM with fused gate weights.

    ``W`` has shape ``[d + h, 4h]`` and acts on ``[x_t; h_prev]``.  Gate blocks
    along the last axis are input, forget, output, candidate.
    """

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int):
        self.input_dim = input_dim
        self.hidden = hidden
        blocks = [glorot_uniform(rng, input_dim + hidden, hidden, (input_dim + hidden, hidden)) for _ in range(4)]
        self.W = Tensor(np.concatenate(blocks, axis=1), requires_grad=True)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}W", self.W
        yield f"{prefix}b", self.b

    def run(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
        """Run over ``x`` of shape ``[B, L, d]``; returns hidden states ``[B, L, h]``.

        Where ``mask`` is 0 the state is carried through unchanged.
        """
        B, L, _ = x.shape
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        outputs: list[Tensor | None] = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            h_new, c_new = lstm_step(x[:, t, :], h, c, self)
            m = mask[:, t : t + 1].astype(np.float64)
            if m.all():
                h, c = h_new, c_new
            else:
                keep = Tensor(m)
                carry = Tensor(1.0 - m)
                h = h_new * keep + h * carry
                c = c_new * keep + c * carry
            outputs[t] = h
        return T.stack(outputs, axis=1)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTM) -> tuple[Tensor, Tensor]:
    hdim = params.hidden
    if x_t.shape[-1] != params.input_dim or h_prev.shape[-1] != hdim or c_prev.shape[-1] != hdim:
        raise DimensionError(
            f"lstm_step: got x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for input_dim={params.input_dim}, hidden={hdim}"
        )
    z = T.matmul(T.concat([x_t, h_prev], axis=-1), params.W) + params.b
    i = T.sigmoid(z[..., 0:hdim])
    f = T.sigmoid(z[..., hdim : 2 * hdim])
    o = T.sigmoid(z[..., 2 * hdim : 3 * hdim])
    g = T.tanh(z[..., 3 * hdim :])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


class BiLSTM(Module):
    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int):
        self.fwd = LSTM(rng, input_dim, hidden)
        self.bwd = LSTM(rng, input_dim, hidden)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return bilstm(x, mask, self.fwd, self.bwd)


def bilstm(x: Tensor, mask: np.ndarray, params_fwd: LSTM, params_bwd: LSTM) -> Tensor:
    """Concatenate forward and backward hidden states per position: ``[B, L, 2h]``."""
    mask = np.asarray(mask)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"bilstm: input {x.shape} does not match mask {mask.shape}")
    forward = params_fwd.run(x, mask)
    backward = params_bwd.run(x, mask, reverse=True)
    return T.concat([forward, backward], axis=-1)


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------


class Dense(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.W = Tensor(glorot_uniform(rng, n_in, n_out, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.W, self.b)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"dense: input {x.shape}, weight {W.shape}, bias {b.shape}")
    return T.matmul(x, W) + b


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


@dataclass
class DropoutSpec:
    """Drop probability ``rate``; units survive with probability ``1 - rate``.

    Train mode multiplies by a fresh Bernoulli(retain) zero-one mask.  Eval mode
    multiplies by the retain probability.  ``inverted`` switches to the
    alternative convention (train scaled by 1/retain, eval identity).
    """

    rate: float
    mode: str = "train"
    rng: np.random.Generator | None = None
    inverted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}", key="drop_rate")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def retain(self) -> float:
        return 1.0 - self.rate

    def sample_mask(self, shape) -> np.ndarray:
        if self.rng is None:
            raise ConfigError("train-mode dropout needs an rng")
        return (self.rng.random(shape) < self.retain).astype(np.float64)


def apply_dropout(x: Tensor, spec: DropoutSpec, mask: np.ndarray | None = None) -> Tensor:
    """Apply dropout per ``spec``; ``mask`` replaces sampling when given."""
    if spec.rate == 0.0:
        return x
    if spec.mode == "eval":
        return x if spec.inverted else x * spec.retain
    if mask is None:
        mask = spec.sample_mask(x.shape)
    if spec.inverted:
        mask = mask / spec.retain
    return x * Tensor(mask)


class Dropout:
    """Dropout controller shared by a model's sites.

    Masks can be recorded during one pass and replayed verbatim in later
    passes, which is what a finite-difference check in train mode needs.
    """

    def __init__(self, rate: float, rng: np.random.Generator, inverted: bool = False):
        DropoutSpec(rate)  # validates
        self.rate = rate
        self.rng = rng
        self.inverted = inverted
        self._recorded: list[np.ndarray] | None = None
        self._replay: list[np.ndarray] | None = None
        self._cursor = 0

    def spec(self, mode: str) -> DropoutSpec:
        return DropoutSpec(self.rate, mode, self.rng, self.inverted)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        spec = self.spec(mode)
        if mode == "eval" or self.rate == 0.0:
            return apply_dropout(x, spec)
        if self._replay is not None:
            mask = self._replay[self._cursor]
            if mask.shape != x.shape:
                raise DimensionError(f"replayed dropout mask {mask.shape} does not fit input {x.shape}")
            self._cursor += 1
        else:
            mask = spec.sample_mask(x.shape)
            if self._recorded is not None:
                self._recorded.append(mask)
        return apply_dropout(x, spec, mask)

    def record(self) -> list[np.ndarray]:
        """Start recording sampled masks; returns the list they are appended to."""
        self._recorded = []
        self._replay = None
        return self._recorded

    def replay(self, masks: list[np.ndarray]) -> None:
        """Reuse ``masks`` in order for every subsequent train-mode pass."""
        self._recorded = None
        self._replay = masks
        self._cursor = 0

    def rewind(self) -> None:
        self._cursor = 0

    def release(self) -> None:
        self._recorded = None
        self._replay = None
        self._cursor = 0
