"""Adam + weighted BCE training with validation-loss early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndgrad as nd
from .metrics import balanced_accuracy, sigmoid
from .model import MultiStreamModel, forward_batch, prepare

log = logging.getLogger(__name__)


class DegenerateTaskError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    patience: int = 5
    seed: int = 0
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stopped_early: bool = False
    pos_weight: float = 1.0
    val_loss_weighted: bool = True
    train_balanced_accuracy: float | None = None

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def compute_pos_weight(labels: Sequence[int]) -> float:
    """#negatives / #positives."""
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTaskError(f"need both classes to weight the loss (pos={n_pos}, neg={n_neg})")
    return n_neg / n_pos


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        if m.shape != p.shape or g.shape != p.shape:
            raise nd.DimensionError(f"adam: {k} shapes param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def batch_loss(model: MultiStreamModel, x: np.ndarray, y: np.ndarray, pos_weight: float,
               training: bool = False, rng=None) -> nd.Tensor:
    logits, _, _ = forward_batch(model, x, training, rng)
    return nd.mean(nd.bce_with_logits(logits, y, pos_weight))


def dataset_loss(model: MultiStreamModel, x: np.ndarray, y: np.ndarray, pos_weight: float,
                 batch_size: int = 32) -> float:
    """Mean weighted BCE in eval mode, accumulated chunk by chunk in fixed order."""
    total = 0.0
    with nd.no_grad():
        for i in range(0, len(y), batch_size):
            logits, _, _ = forward_batch(model, x[i:i + batch_size], training=False)
            total += float(np.sum(nd.bce_with_logits(logits, y[i:i + batch_size], pos_weight).data))
    return total / len(y)


def predict_logits(model: MultiStreamModel, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with nd.no_grad():
        for i in range(0, len(x), batch_size):
            logits, _, _ = forward_batch(model, x[i:i + batch_size], training=False)
            out.append(logits.data)
    return np.concatenate(out)


def train(
    model: MultiStreamModel,
    train_trials,
    val_trials,
    cfg: TrainConfig,
    val_loss_fn: Callable[[MultiStreamModel], float] | None = None,
) -> tuple[MultiStreamModel, TrainHistory]:
    """Train in place and return (best-validation snapshot, history).

    ``train_trials``/``val_trials`` are lists of SensorTrial. pos_weight comes
    from the training labels only. ``val_loss_fn`` overrides validation scoring
    (used by tests to script a loss sequence).
    """
    if not train_trials:
        raise DegenerateTaskError("training split is empty")
    if not val_trials and val_loss_fn is None:
        raise DegenerateTaskError("validation split is empty")
    y_tr = np.array([t.label for t in train_trials], dtype=np.float64)
    pos_weight = compute_pos_weight(y_tr)
    x_tr = prepare(model.cfg, np.stack([t.signal for t in train_trials]))
    if val_loss_fn is None:
        y_va = np.array([t.label for t in val_trials], dtype=np.float64)
        x_va = prepare(model.cfg, np.stack([t.signal for t in val_trials]))

        def val_loss_fn(m):
            return dataset_loss(m, x_va, y_va, pos_weight, cfg.batch_size)

    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    hist = TrainHistory(pos_weight=pos_weight)
    best_state = model.state_dict()
    best = math.inf
    wait = 0
    n = len(y_tr)
    params = {k: p.data for k, p in model.params.items()}
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            loss = batch_loss(model, x_tr[idx], y_tr[idx], pos_weight, training=True, rng=dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite training loss {value} at epoch {epoch}, batch {b + 1}")
            nd.backward(loss)
            adam_step(params, {k: p.grad for k, p in model.params.items()}, state, cfg.lr)
            total += value * len(idx)
        hist.train_loss.append(total / n)
        vl = float(val_loss_fn(model))
        if not math.isfinite(vl):
            raise NonFiniteLossError(f"non-finite validation loss {vl} at epoch {epoch}")
        hist.val_loss.append(vl)
        log.info("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], vl)
        if vl < best:
            best = vl
            hist.best_epoch = epoch
            best_state = model.state_dict()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                hist.stopped_early = True
                break
    model.load_state_dict(best_state)
    scores = sigmoid(predict_logits(model, x_tr, cfg.batch_size))
    try:
        hist.train_balanced_accuracy = balanced_accuracy(y_tr.astype(int), scores)
    except ValueError:
        hist.train_balanced_accuracy = None
    return model, hist
