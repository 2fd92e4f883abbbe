"""BiLSTM encoder with intra- and inter-sentence attention for NLI.

Layout: every sequence tensor is ``[batch, time, features]``; masks are
``[batch, time]`` arrays with 1 on real tokens.  Dropout can be switched on
independently at five sites (see :data:`SITES`).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .layers import PAD, BiLSTM, Dense, Dropout, Embedding, Module, glorot_uniform
from .tensor import Tensor

SITES = ("embedding", "recurrent", "intra_attention", "inter_attention", "mlp")

_E, _R, _IA, _XA, _M = SITES
PLACEMENTS: dict[int, frozenset[str]] = {
    1: frozenset(),
    2: frozenset({_E}),
    3: frozenset({_R}),
    4: frozenset({_E, _R}),
    5: frozenset({_R, _IA}),
    6: frozenset({_XA, _M}),
    7: frozenset({_R, _XA, _M}),
    8: frozenset({_E, _XA, _M}),
    9: frozenset({_E, _R, _XA, _M}),
    10: frozenset({_R, _IA, _XA, _M}),
    11: frozenset({_E, _IA, _XA, _M}),
    12: frozenset(SITES),
    # listed with the same layers as model 9; used at 100 hidden units
    13: frozenset({_E, _R, _XA, _M}),
}


def placement_for_model(model_id: int) -> frozenset[str]:
    try:
        return PLACEMENTS[int(model_id)]
    except KeyError:
        raise ConfigError(f"model id must be in 1..13, got {model_id}", key="model_id") from None


def parse_placement(spec: str | Iterable[str]) -> frozenset[str]:
    """Parse a comma-separated site list (or iterable of names) into a placement."""
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    names = [n for n in names if n and n != "none"]
    unknown = sorted(set(names) - set(SITES))
    if unknown:
        raise ConfigError(f"unknown dropout site(s) {unknown}; valid sites are {list(SITES)}", key="placement")
    return frozenset(names)


# Named configurations following the dropout-usage recommendations.
PRESETS: dict[str, dict] = {
    "baseline": {"model_id": 1, "drop_rate": 0.0, "hidden_units": 300},
    # large corpora: regularise the embedding layer
    "large-data": {"model_id": 2, "drop_rate": 0.4, "hidden_units": 300},
    # small corpora: regularise the recurrent layer
    "small-data": {"model_id": 3, "drop_rate": 0.1, "hidden_units": 300},
    # one lower layer plus MLP input/output, at a moderate rate
    "large-data-multi": {"model_id": 8, "drop_rate": 0.2, "hidden_units": 300},
    "small-data-multi": {"model_id": 7, "drop_rate": 0.2, "hidden_units": 300},
    # reduced width for a small corpus
    "small-data-compact": {"model_id": 13, "drop_rate": 0.4, "hidden_units": 100},
}


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int = 3
    embedding_dim: int = 300
    hidden_units: int = 300
    placement: frozenset[str] = field(default_factory=frozenset)
    drop_rate: float = 0.0
    seed: int = 1
    inverted_dropout: bool = False
    trainable_embeddings: bool = True

    def __post_init__(self):
        self.placement = parse_placement(self.placement)
        for key in ("vocab_size", "num_classes", "embedding_dim", "hidden_units"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}", key=key)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}", key="num_classes")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}", key="drop_rate")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = sorted(self.placement, key=SITES.index)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Attention blocks
# ---------------------------------------------------------------------------


class IntraAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.W_y = Tensor(glorot_uniform(rng, dim, dim, (dim, dim)), requires_grad=True)
        self.W_h = Tensor(glorot_uniform(rng, dim, dim, (dim, dim)), requires_grad=True)
        self.w = Tensor(glorot_uniform(rng, dim, 1, (dim,)), requires_grad=True)

    def __call__(self, Y: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        return intra_attention(Y, mask, self.W_y, self.W_h, self.w)


def intra_attention(Y: Tensor, mask: np.ndarray, W_y: Tensor, W_h: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Self-attention of a sentence over its own positions.

    ``M = tanh(Y W_y + mean(Y) W_h)`` with the pooled term repeated across time,
    ``alpha = softmax(M w)`` over valid positions, and each position of ``Y``
    scaled by its weight.  Returns ``(alpha [B, L], R [B, L, 2h])``.
    """
    mask = np.asarray(mask)
    if Y.ndim != 3 or mask.shape != Y.shape[:2]:
        raise DimensionError(f"intra_attention: Y {Y.shape} does not match mask {mask.shape}")
    m3 = mask[:, :, None]
    pooled = T.reduce("mean", Y, axis=1, mask=m3, keepdims=True)  # [B, 1, 2h]
    M = T.tanh(T.matmul(Y, W_y) + T.matmul(pooled, W_h))
    scores = T.reduce("sum", M * w, axis=-1)  # [B, L]
    alpha = T.softmax(scores, axis=1, mask=mask)
    R = Y * alpha.reshape(alpha.shape + (1,))
    return alpha, R


@dataclass
class InterAttention:
    """Outputs of :func:`inter_attention` (weights kept for inspection)."""

    interaction: Tensor  # [B, Lp, Lh]
    weights_p: Tensor  # rows normalised over hypothesis positions
    weights_h: Tensor  # columns normalised over premise positions
    Rt_p: Tensor
    Rt_h: Tensor


def inter_attention(R_p: Tensor, R_h: Tensor, mask_p: np.ndarray, mask_h: np.ndarray) -> InterAttention:
    """Soft alignment between two sentences through ``I = R_p R_h^T``."""
    if R_p.ndim != 3 or R_h.ndim != 3 or R_p.shape[0] != R_h.shape[0] or R_p.shape[2] != R_h.shape[2]:
        raise DimensionError(f"inter_attention: incompatible shapes {R_p.shape} and {R_h.shape}")
    mask_p = np.asarray(mask_p)
    mask_h = np.asarray(mask_h)
    interaction = T.matmul(R_p, T.transpose(R_h))
    weights_p = T.softmax(interaction, axis=2, mask=mask_h[:, None, :])
    weights_h = T.softmax(interaction, axis=1, mask=mask_p[:, :, None])
    Rt_p = T.matmul(weights_p, R_h)
    Rt_h = T.matmul(T.transpose(weights_h), R_p)
    return InterAttention(interaction, weights_p, weights_h, Rt_p, Rt_h)


def fuse(Rt: Tensor, R: Tensor) -> Tensor:
    if Rt.shape != R.shape:
        raise DimensionError(f"fuse: shapes {Rt.shape} and {R.shape} differ")
    return Rt * R


def relation_vector(F_p: Tensor, F_h: Tensor, mask_p: np.ndarray, mask_h: np.ndarray) -> Tensor:
    """``[avg(F_p); max(F_p); avg(F_h); max(F_h)]`` pooled over valid time steps."""
    mp = np.asarray(mask_p)[:, :, None]
    mh = np.asarray(mask_h)[:, :, None]
    return T.concat(
        [
            T.reduce("mean", F_p, axis=1, mask=mp),
            T.reduce("max", F_p, axis=1, mask=mp),
            T.reduce("mean", F_h, axis=1, mask=mh),
            T.reduce("max", F_h, axis=1, mask=mh),
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    embedded: Tensor
    encoded: Tensor
    alpha_p: Tensor
    alpha_h: Tensor
    R_p: Tensor
    R_h: Tensor
    inter: InterAttention
    F_p: Tensor
    F_h: Tensor
    relation: Tensor
    logits: Tensor
    probs: Tensor


def _pad_to(a: np.ndarray, length: int) -> np.ndarray:
    if a.shape[1] == length:
        return a
    out = np.full((a.shape[0], length), PAD, dtype=a.dtype)
    out[:, : a.shape[1]] = a
    return out


class NLIModel(Module):
    def __init__(self, config: ModelConfig, embeddings: np.ndarray | None = None):
        self._config = config
        init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        if embeddings is None:
            self.embedding = Embedding.random(rng, config.vocab_size, config.embedding_dim, config.trainable_embeddings)
        else:
            if embeddings.shape != (config.vocab_size, config.embedding_dim):
                raise ConfigError(
                    f"embedding table shape {embeddings.shape} != ({config.vocab_size}, {config.embedding_dim})",
                    key="embedding_dim",
                )
            self.embedding = Embedding(embeddings, config.trainable_embeddings)
        h2 = 2 * config.hidden_units
        self.encoder = BiLSTM(rng, config.embedding_dim, config.hidden_units)
        self.intra = IntraAttention(rng, h2)
        self.hidden = Dense(rng, 4 * h2, h2)
        self.classifier = Dense(rng, h2, config.num_classes)
        self._dropout = Dropout(config.drop_rate, np.random.default_rng(drop_seq), config.inverted_dropout)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def dropout(self) -> Dropout:
        return self._dropout

    def state_dict(self) -> dict[str, Tensor]:
        """All persistent tensors, frozen embedding table included."""
        state = {"embedding.table": self.embedding.table}
        state.update((k, v) for k, v in self.named_parameters() if k != "embedding.table")
        return state

    def _drop(self, site: str, x: Tensor, mode: str) -> Tensor:
        if site in self._config.placement:
            return self._dropout(x, mode)
        return x

    def trace(self, premise, premise_mask, hypothesis, hypothesis_mask, mode: str = "eval") -> ForwardTrace:
        """Run the full pipeline and keep every intermediate."""
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        premise = np.asarray(premise)
        hypothesis = np.asarray(hypothesis)
        mask_p = np.asarray(premise_mask, dtype=np.float64)
        mask_h = np.asarray(hypothesis_mask, dtype=np.float64)
        if premise.ndim != 2 or hypothesis.ndim != 2 or premise.shape[0] != hypothesis.shape[0]:
            raise DimensionError(f"premise {premise.shape} and hypothesis {hypothesis.shape} must be [B, L] with equal B")
        if premise.shape[1] == 0 or hypothesis.shape[1] == 0:
            raise ContractError("empty sequence: premise and hypothesis need at least one token")
        B, Lp = premise.shape
        Lh = hypothesis.shape[1]
        L = max(Lp, Lh)

        # both sentences go through one shared encoder as a 2B batch
        tokens = np.concatenate([_pad_to(premise, L), _pad_to(hypothesis, L)], axis=0)
        mask = np.concatenate([_pad_to(mask_p, L), _pad_to(mask_h, L)], axis=0)

        x = self._drop("embedding", self.embedding(tokens), mode)
        Y = self._drop("recurrent", self.encoder(x, mask), mode)
        alpha, R = self.intra(Y, mask)
        R = self._drop("intra_attention", R, mode)

        R_p, R_h = R[:B, :Lp, :], R[B:, :Lh, :]
        inter = inter_attention(R_p, R_h, mask_p, mask_h)
        F_p = fuse(inter.Rt_p, R_p)
        F_h = fuse(inter.Rt_h, R_h)
        F_p = self._drop("inter_attention", F_p, mode)
        F_h = self._drop("inter_attention", F_h, mode)

        rel = relation_vector(F_p, F_h, mask_p, mask_h)
        hidden = T.tanh(self.hidden(self._drop("mlp", rel, mode)))
        logits = self.classifier(self._drop("mlp", hidden, mode))
        probs = T.softmax(logits, axis=-1)
        return ForwardTrace(
            embedded=x,
            encoded=Y,
            alpha_p=alpha[:B, :Lp],
            alpha_h=alpha[B:, :Lh],
            R_p=R_p,
            R_h=R_h,
            inter=inter,
            F_p=F_p,
            F_h=F_h,
            relation=rel,
            logits=logits,
            probs=probs,
        )

    def forward(self, batch, mode: str = "eval") -> Tensor:
        """Class probabilities ``[B, num_classes]`` for a :class:`~dropnet.data.Batch`."""
        return self.trace(batch.premise, batch.premise_mask, batch.hypothesis, batch.hypothesis_mask, mode).probs

    __call__ = forward
