"""Loss, Adam, early-stopped training, evaluation and the placement x rate grid."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Example, Vocabulary, batchify
from .errors import ConfigError, NumericalError
from .model import ModelConfig, NLIModel, placement_for_model
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log(probs[label])`` over the batch, probabilities floored at 1e-12."""
    labels = np.atleast_1d(np.asarray(labels))
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if ((labels < 0) | (labels >= k)).any():
        raise IndexError(f"label out of range [0, {k}): {labels[(labels < 0) | (labels >= k)][0]}")
    picked = probs[np.arange(n), labels]
    return T.reduce("mean", T.log(picked, floor=PROB_FLOOR)) * -1.0


def is_weight_matrix(name: str, param: Tensor) -> bool:
    return param.ndim == 2 and not name.startswith("embedding.")


def l2_penalty(params: Mapping[str, Tensor], lam: float) -> Tensor:
    """``lam`` times the sum of squares of all weight matrices (no biases, no embeddings)."""
    if lam < 0:
        raise ConfigError(f"l2_lambda must be >= 0, got {lam}", key="l2_lambda")
    total = Tensor(0.0)
    if lam == 0:
        return total
    for name, p in params.items():
        if is_weight_matrix(name, p):
            total = total + T.reduce("sum", p * p)
    return total * lam


class Adam:
    """Bias-corrected Adam over a fixed set of named parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adam_step(params: Mapping[str, Tensor], state: Adam) -> None:
    """Apply one update using the gradients currently stored on ``params``."""
    if set(params) != set(state.params):
        raise ValueError("parameter set differs from the optimizer's")
    state.step()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.001
    l2_lambda: float = 1e-6
    patience: int = 5
    seed: int = 1
    log_wallclock: bool = False

    def __post_init__(self):
        for key in ("epochs", "batch_size", "patience"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}", key=key)
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}", key="learning_rate")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}", key="l2_lambda")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch), *(f"{x:.10f}" for x in (self.train_loss, self.train_acc, self.val_loss, self.val_acc)),
                f"{self.seconds:.3f}"]


@dataclass
class TrainReport:
    best_epoch: int
    best_val_acc: float
    best_val_loss: float
    epochs_run: int
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_state: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    stopped_early: bool = False

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in self.metrics:
            w.writerow(m.row())
        return buf.getvalue()


def evaluate(model: NLIModel, data: Sequence[Example], vocab: Vocabulary, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy; ties go to the lower class index."""
    if not data:
        raise ValueError("evaluate needs at least one example")
    correct = 0
    loss_sum = 0.0
    with T.no_grad():
        for batch in batchify(data, vocab, batch_size):
            probs = model.forward(batch, "eval")
            correct += int((np.argmax(probs.data, axis=1) == batch.labels).sum())
            loss_sum += cross_entropy(probs, batch.labels).item() * len(batch)
    return correct / len(data), loss_sum / len(data)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: NLIModel,
    train_data: Sequence[Example],
    val_data: Sequence[Example],
    vocab: Vocabulary,
    config: TrainConfig,
    metrics_path: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainReport:
    """Early-stopped training; the model ends holding its best-validation weights.

    Train loss/accuracy are averages over the epoch's train-mode batches.
    """
    if not train_data or not val_data:
        raise ValueError("train and validation data must be non-empty")
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    best = TrainReport(best_epoch=0, best_val_acc=-1.0, best_val_loss=math.inf, epochs_run=0)
    stale = 0
    metrics_file = None
    writer = None
    if metrics_path is not None:
        metrics_file = Path(metrics_path).open("w", newline="", encoding="utf-8")
        writer = csv.writer(metrics_file, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            loss_sum = 0.0
            correct = 0
            for bi, batch in enumerate(batchify(train_data, vocab, config.batch_size, _epoch_seed(config.seed, epoch))):
                opt.zero_grad()
                probs = model.forward(batch, "train")
                data_loss = cross_entropy(probs, batch.labels)
                loss = data_loss + l2_penalty(params, config.l2_lambda)
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {bi}")
                T.backward(loss)
                opt.step()
                loss_sum += data_loss.item() * len(batch)
                correct += int((np.argmax(probs.data, axis=1) == batch.labels).sum())
            val_acc, val_loss = evaluate(model, val_data, vocab)
            seconds = time.perf_counter() - start if config.log_wallclock else 0.0
            m = EpochMetrics(epoch, loss_sum / len(train_data), correct / len(train_data), val_loss, val_acc, seconds)
            best.metrics.append(m)
            best.epochs_run = epoch
            if writer is not None:
                writer.writerow(m.row())
                metrics_file.flush()
            if on_epoch is not None:
                on_epoch(m)
            logger.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                        epoch, m.train_loss, m.train_acc, val_loss, val_acc)
            if val_acc > best.best_val_acc:
                best.best_epoch, best.best_val_acc, best.best_val_loss = epoch, val_acc, val_loss
                best.best_state = {k: t.data.copy() for k, t in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    best.stopped_early = epoch < config.epochs
                    break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    for k, t in model.state_dict().items():
        t.data[...] = best.best_state[k]
    return best


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_MODELS = tuple(range(1, 14))


def derive_seed(base_seed: int, model_id: int, rate: float) -> int:
    """Seed from cell identity only, so results do not depend on execution order."""
    digest = hashlib.sha256(f"{base_seed}:{model_id}:{rate!r}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class CellSpec:
    model_id: int
    rate: float
    seed: int
    model_kwargs: dict
    train_config: TrainConfig
    out_dir: str | None


@dataclass
class CellResult:
    model_id: int
    rate: float
    best_val_acc: float | None
    best_epoch: int | None = None
    error: str | None = None


# module-level so worker processes can reach it after fork
_GRID_DATA: dict = {}


def _run_cell(spec: CellSpec) -> CellResult:
    train_data, val_data, vocab, embeddings = (_GRID_DATA[k] for k in ("train", "val", "vocab", "embeddings"))
    try:
        mc = ModelConfig(**{**spec.model_kwargs, "placement": placement_for_model(spec.model_id),
                            "drop_rate": spec.rate, "seed": spec.seed})
        tc = TrainConfig(**{**asdict(spec.train_config), "seed": spec.seed})
        model = NLIModel(mc, embeddings)
        metrics_path = None
        if spec.out_dir is not None:
            cell_dir = Path(spec.out_dir) / f"model{spec.model_id:02d}_dr{spec.rate}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = cell_dir / "metrics.csv"
        report = train(model, train_data, val_data, vocab, tc, metrics_path)
        return CellResult(spec.model_id, spec.rate, report.best_val_acc, report.best_epoch)
    except Exception as exc:  # a failed cell must not sink the grid
        logger.warning("cell model=%d rate=%s failed: %s", spec.model_id, spec.rate, exc)
        return CellResult(spec.model_id, spec.rate, None, error=f"{exc.__class__.__name__}: {exc}")


@dataclass
class GridResult:
    models: list[int]
    rates: list[float]
    cells: dict[tuple[int, float], CellResult]

    def value(self, model_id: int, rate: float) -> float | None:
        return self.cells[(model_id, rate)].best_val_acc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", *(f"dr_{r}" for r in self.rates)])
        for mid in self.models:
            row = [str(mid)]
            for r in self.rates:
                v = self.value(mid, r)
                row.append("failed" if v is None else f"{v:.6f}")
            w.writerow(row)
        return buf.getvalue()


def grid_search(
    train_data: Sequence[Example],
    val_data: Sequence[Example],
    vocab: Vocabulary,
    model_kwargs: dict,
    train_config: TrainConfig,
    models: Sequence[int] = DEFAULT_MODELS,
    rates: Sequence[float] = DEFAULT_RATES,
    out_dir: str | Path | None = None,
    parallel: int = 1,
    embeddings: np.ndarray | None = None,
) -> GridResult:
    """Train one model per (placement, rate) cell.

    The baseline placement (model 1) has no dropout site, so it is trained once
    and its score repeated across every rate column.
    """
    if not models or not rates:
        raise ConfigError("grid needs at least one model id and one rate")
    for mid in models:
        placement_for_model(mid)
    models, rates = list(models), list(rates)
    specs: list[CellSpec] = []
    for mid in models:
        cell_rates = [0.0] if not placement_for_model(mid) else rates
        for r in cell_rates:
            specs.append(CellSpec(mid, r, derive_seed(train_config.seed, mid, r), dict(model_kwargs), train_config,
                                  None if out_dir is None else str(Path(out_dir) / "cells")))

    _GRID_DATA.update(train=train_data, val=val_data, vocab=vocab, embeddings=embeddings)
    try:
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                results = list(pool.map(_run_cell, specs))
        else:
            results = [_run_cell(s) for s in specs]
    finally:
        _GRID_DATA.clear()

    cells: dict[tuple[int, float], CellResult] = {}
    for res in results:
        if res.rate == 0.0 and not placement_for_model(res.model_id):
            for r in rates:
                cells[(res.model_id, r)] = res
        else:
            cells[(res.model_id, res.rate)] = res
    grid = GridResult(models, rates, cells)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.csv").write_text(grid.to_csv(), encoding="utf-8")
        failures = {f"{k[0]}@{k[1]}": v.error for k, v in cells.items() if v.error}
        if failures:
            (out / "failures.json").write_text(json.dumps(failures, indent=2), encoding="utf-8")
    return grid
