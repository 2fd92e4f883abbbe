"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

STEP = 1e-5
# Denominator floor for relative error: FD round-off on an O(1) loss is ~1e-11
# absolute, so entries with both gradients below this are judged on that scale.
REL_FLOOR = 1e-6
# loss evaluations are trusted to this many ulps when bounding FD round-off
ROUNDOFF_ULPS = 8


def numerical_grad(f: Callable[[], float], param: Tensor, step: float = STEP,
                   with_noise: bool = False):
    """Central differences of scalar ``f`` with respect to every entry of ``param``.

    With ``with_noise`` also return the per-entry round-off bound of each
    difference, ``ROUNDOFF_ULPS * eps * max(|f+|, |f-|) / (2 step)``.
    """
    grad = np.zeros_like(param.data)
    noise = np.zeros_like(param.data)
    nflat = noise.reshape(-1)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
        nflat[i] = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(abs(up), abs(down)) / (2.0 * step)
    return (grad, noise) if with_noise else grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR,
                   noise: np.ndarray | float = 0.0) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``, after discounting FD round-off ``noise``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.maximum(np.abs(analytic - numeric) - noise, 0.0) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = STEP,
) -> dict[str, float]:
    """Worst elementwise relative error per named parameter.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def f() -> float:
        return loss_fn().item()

    worst = {}
    for name, p in params.items():
        numeric, noise = numerical_grad(f, p, step, with_noise=True)
        worst[name] = float(relative_error(analytic[name], numeric, noise=noise).max()) if p.size else 0.0
    return worst


def tiny_model_suite(seed: int = 0, hidden: int = 4, vocab_size: int = 10, embedding_dim: int = 5,
                     max_len: int = 3, batch: int = 2, drop_rate: float = 0.3) -> dict[str, dict[str, float]]:
    """Full-model check on a tiny configuration with every dropout site active.

    Returns worst relative error per parameter for ``eval`` mode and for
    ``train`` mode with one recorded mask replayed on every evaluation.
    """
    from .data import Batch
    from .model import SITES, ModelConfig, NLIModel
    from .train import cross_entropy

    rng = np.random.default_rng(seed)
    config = ModelConfig(vocab_size=vocab_size, num_classes=3, embedding_dim=embedding_dim, hidden_units=hidden,
                         placement=frozenset(SITES), drop_rate=drop_rate, seed=seed)
    model = NLIModel(config)

    def sentences(lengths):
        idx = np.zeros((batch, max(lengths)), dtype=np.int64)
        for i, n in enumerate(lengths):
            idx[i, :n] = rng.integers(1, vocab_size, size=n)
        return idx, (idx != 0).astype(np.float64)

    prem, pmask = sentences([max_len, max(1, max_len - 1)])
    hyp, hmask = sentences([max(1, max_len - 1), max_len])
    labels = rng.integers(0, 3, size=batch)
    data = Batch(prem, hyp, pmask, hmask, labels, np.arange(batch))
    params = model.parameters()

    results = {}
    results["eval"] = check_gradients(lambda: cross_entropy(model.forward(data, "eval"), labels), params)

    masks = model.dropout.record()
    model.forward(data, "train")
    model.dropout.replay(masks)

    def train_loss():
        model.dropout.rewind()
        return cross_entropy(model.forward(data, "train"), labels)

    try:
        results["train"] = check_gradients(train_loss, params)
    finally:
        model.dropout.release()
    return results
