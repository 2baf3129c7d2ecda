"""Adam training loop with stratified validation and best-epoch restore."""

from __future__ import annotations

import copy
import io
import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fusenet_uq import tensor as T
from fusenet_uq.data import DataError, LabeledSet, split_indices
from fusenet_uq.metrics import evaluate_predictions
from fusenet_uq.models import Model, predict_proba
from fusenet_uq.rng import stream
from fusenet_uq.tensor import GradTape, ShapeError, Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        # 0 is accepted: a frozen run is a useful degenerate case
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype)
    return state


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch, train_loss, train_acc, val_loss, val_acc):
        self.rows.append((epoch, train_loss, train_acc, val_loss, val_acc))

    def column(self, name: str) -> list:
        i = HISTORY_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for e, tl, ta, vl, va in self.rows:
            w.writerow([e, f"{tl:.6f}", f"{ta:.6f}", f"{vl:.6f}", f"{va:.6f}"])
        return buf.getvalue()


def _snapshot(model: Model) -> tuple:
    return (
        {k: p.data.copy() for k, p in model.parameters().items()},
        copy.deepcopy(model.buffers()),
    )


def _restore(model: Model, snap: tuple):
    params, bufs = snap
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    for k, b in model.buffers().items():
        b.mean[...] = bufs[k].mean
        b.var[...] = bufs[k].var


def _loss_acc(model: Model, ds: LabeledSet, batch_size: int = 100) -> tuple:
    probs = predict_proba(model, ds.x, "deterministic", batch_size=batch_size)
    picked = np.maximum(probs[np.arange(len(ds)), ds.y], T.CE_FLOOR)
    return float(-np.log(picked).mean()), float((probs.argmax(1) == ds.y).mean())


def fit(
    model: Model,
    dataset: LabeledSet,
    config: Optional[TrainConfig] = None,
    val_set: Optional[LabeledSet] = None,
) -> tuple:
    """Minimise mean cross-entropy; returns ``(model, history)``.

    Without ``val_set`` a stratified ``val_fraction`` of ``dataset`` is held
    out. The parameters (and batchnorm statistics) of the epoch with the best
    validation accuracy are restored at the end; ties go to the lower
    validation loss.
    """
    config = config or TrainConfig()
    k = model.spec.num_classes
    if len(dataset) == 0 or dataset.y.min() < 0 or dataset.y.max() >= k:
        raise DataError(f"training labels must lie in [0, {k})")
    if val_set is None:
        tr, va = split_indices(dataset.y, (1 - config.val_fraction, config.val_fraction), config.seed)
        train_set, val_set = dataset.subset(tr), dataset.subset(va)
    else:
        train_set = dataset
    missing = sorted(set(range(k)) - set(train_set.y.tolist()))
    if missing:
        raise DataError(f"classes {missing} have no training samples")

    params = model.parameters()
    state = AdamState()
    order_rng = stream(config.seed, 1)
    drop_rng = stream(config.seed, 2)
    history = History()
    best = (-1.0, np.inf)
    snap = _snapshot(model)
    stale = 0
    dtype = next(iter(params.values())).dtype
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        loss_sum = correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = Tensor(train_set.x[idx], dtype=dtype)
            yb = train_set.y[idx]
            with GradTape() as tape:
                logits = model.logits(xb, "train", drop_rng)
                loss = T.softmax_cross_entropy(logits, yb)
            tape.backward(loss)
            adam_step(params, {k_: p.grad for k_, p in params.items()}, state, config)
            loss_sum += loss.item() * len(idx)
            correct += float((logits.data.argmax(1) == yb).sum())
        val_loss, val_acc = _loss_acc(model, val_set)
        history.append(epoch, loss_sum / n, correct / n, val_loss, val_acc)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, loss_sum / n, val_loss, val_acc)
        if not np.isfinite(loss_sum):
            log.warning("non-finite training loss at epoch %d", epoch)
        if (val_acc, -val_loss) > (best[0], -best[1]):
            best = (val_acc, val_loss)
            snap = _snapshot(model)
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, snap)
    for p in params.values():
        p.grad = None
    return model, history


def evaluate(
    model,
    dataset: LabeledSet,
    mode: str = "deterministic",
    ensemble=None,
) -> tuple:
    """Predict ``dataset`` and score it; returns ``(probs, MetricsReport)``.

    ``mode`` is ``"deterministic"`` (dropout off) or ``"emcd"``; the latter
    averages Monte Carlo dropout passes over ``model`` (a model or a list of
    ensemble members) using ``ensemble`` (an :class:`EnsembleConfig`).
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    models = list(model) if isinstance(model, (list, tuple)) else [model]
    if mode == "deterministic":
        probs = np.mean([predict_proba(m, dataset.x) for m in models], axis=0) if len(models) > 1 else predict_proba(models[0], dataset.x)
    elif mode == "emcd":
        from fusenet_uq.uncertainty import EnsembleConfig, emcd_predict

        cfg = ensemble or EnsembleConfig(num_models=len(models))
        probs = emcd_predict(models, dataset.x, cfg).class_mean
    else:
        raise ValueError(f"mode must be 'deterministic' or 'emcd', got {mode!r}")
    return probs, evaluate_predictions(dataset.y, probs, models[0].spec.num_classes)
