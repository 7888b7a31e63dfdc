"""Loss, AdamW, normalization and the train / evaluate loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .model import Bundle, ModelParameters, forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class NonFiniteGradient(FloatingPointError):
    pass


# ------------------------------------------------------------------ loss

def relative_l2_loss(pred, truth) -> Tensor:
    """Mean over samples of ``||pred - truth||_F / ||truth||_F``.

    A 2-D input is one sample; a 3-D input is a batch along axis 0.
    """
    pred = T.as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    batched = truth.ndim == 3
    axes = (1, 2) if batched else None
    norms = np.sqrt(np.sum(truth * truth, axis=axes))
    if np.any(norms == 0):
        raise ValueError("relative L2 undefined: a target field has zero norm")
    diff = pred - Tensor(truth)
    err = T.sqrt(T.sum_(T.square(diff), axis=axes))
    return T.mean(err / Tensor(norms))


def relative_l2_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample relative L2 as plain arrays (no tape)."""
    pred, truth = np.atleast_3d(pred), np.atleast_3d(truth)
    num = np.sqrt(np.sum((pred - truth) ** 2, axis=(1, 2)))
    den = np.sqrt(np.sum(truth ** 2, axis=(1, 2)))
    if np.any(den == 0):
        raise ValueError("relative L2 undefined: a target field has zero norm")
    return num / den


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, named_params, grads=None) -> OptimizerState:
    """One AdamW update in place.

    Weight decay is decoupled: each parameter is first shrunk by
    ``1 - lr * wd`` and then moved by the bias-corrected Adam direction.
    ``grads`` defaults to each parameter's ``.grad`` (missing means zero).
    """
    named_params = list(named_params)
    grad_list = []
    for i, (name, p) in enumerate(named_params):
        g = (grads[i] if grads is not None else p.grad)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
        grad_list.append(g)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for (name, p), g in zip(named_params, grad_list):
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first[name], state.second[name] = m, v
        decayed = p.data * (1.0 - state.lr * state.weight_decay)
        p.data = decayed - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ------------------------------------------------------------------ normalization

@dataclass
class Normalizer:
    """Per-channel standardization of inputs ``[a | x]`` and targets ``u``."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    MIN_STD = 1e-8

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        x = np.concatenate([s.inputs() for s in ds.samples], axis=0)
        u = np.concatenate([s.u for s in ds.samples], axis=0)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), cls.MIN_STD),
                   u.mean(axis=0), np.maximum(u.std(axis=0), cls.MIN_STD))

    @classmethod
    def identity(cls, d_in: int, d_out: int) -> "Normalizer":
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out))

    def encode_inputs(self, x):
        return (np.asarray(x) - self.in_mean) / self.in_std

    def decode_inputs(self, z):
        return np.asarray(z) * self.in_std + self.in_mean

    def encode_targets(self, u):
        return (np.asarray(u) - self.out_mean) / self.out_std

    def decode_targets(self, z):
        """Works on arrays and on tape tensors (then differentiable)."""
        if isinstance(z, Tensor):
            return z * Tensor(self.out_std) + Tensor(self.out_mean)
        return np.asarray(z) * self.out_std + self.out_mean

    def arrays(self) -> dict[str, np.ndarray]:
        return {"in_mean": self.in_mean, "in_std": self.in_std,
                "out_mean": self.out_mean, "out_std": self.out_std}


# ------------------------------------------------------------------ loops

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-4
    shuffle_seed: int = 0
    decay_step: int = 0          # 0 keeps the learning rate constant
    decay_gamma: float = 0.5


@dataclass
class TrainResult:
    params: ModelParameters
    best_state: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict]
    optimizer: OptimizerState


def predict(params: ModelParameters, bundle: Bundle, inputs: np.ndarray,
            normalizer: Normalizer) -> Tensor:
    """Physical-unit prediction for node inputs ``[.., N, d_init]`` on one geometry."""
    out = forward(params, bundle, normalizer.encode_inputs(inputs))
    return normalizer.decode_targets(out)


def _groups(indices, bundles):
    """Batch members grouped by geometry, in first-appearance order."""
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(id(bundles[i]), []).append(i)
    return list(groups.values())


def batch_loss(params, ds: Dataset, bundles, indices, normalizer) -> Tensor:
    """Mean relative L2 over ``indices``; samples sharing a geometry run as one batch."""
    total = None
    for group in _groups(indices, bundles):
        x = np.stack([ds.samples[i].inputs() for i in group])
        u = np.stack([ds.samples[i].u for i in group])
        pred = predict(params, bundles[group[0]], x, normalizer)
        part = relative_l2_loss(pred, u) * float(len(group))
        total = part if total is None else total + part
    return total / float(len(indices))


def evaluate(params: ModelParameters, ds: Dataset, bundles, normalizer: Normalizer,
             batch_size: int = 20, return_predictions: bool = False):
    """Per-sample relative L2 (and MSE) of denormalized predictions."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rel = np.empty(len(ds))
    mse = np.empty(len(ds))
    preds = [None] * len(ds)
    for lo in range(0, len(ds), batch_size):
        for group in _groups(range(lo, min(lo + batch_size, len(ds))), bundles):
            b = bundles[group[0]]
            if b.embedding.dim != params.config.n_anchors:
                raise ValueError(f"geometry embedding width {b.embedding.dim} != frozen "
                                 f"{params.config.n_anchors}")
            x = np.stack([ds.samples[i].inputs() for i in group])
            u = np.stack([ds.samples[i].u for i in group])
            p = predict(params, b, x, normalizer).data
            rel[group] = relative_l2_errors(p, u)
            mse[group] = np.mean((p - u) ** 2, axis=(1, 2))
            for j, i in enumerate(group):
                preds[i] = p[j]
    out = {"relative_l2": rel, "mse": mse, "mean_relative_l2": float(rel.mean()),
           "mean_squared_relative_l2": float(np.mean(rel ** 2)), "mean_mse": float(mse.mean())}
    if return_predictions:
        out["predictions"] = preds
    return out


def train(params: ModelParameters, train_ds: Dataset, train_bundles, normalizer: Normalizer,
          config: TrainConfig, val_ds: Dataset | None = None, val_bundles=None,
          on_epoch=None) -> TrainResult:
    """Seeded mini-batch AdamW on the mean relative L2.

    The best epoch is chosen on the validation set when one is given,
    otherwise on the training loss. ``on_epoch(row)`` is called after
    every epoch with the history row.
    """
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    if config.epochs < 0 or config.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(config.shuffle_seed)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    named = params.named_parameters()
    history: list[dict] = []
    best_state, best_epoch, best_score = params.state_dict(), 0, math.inf
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        if config.decay_step and epoch > 1 and (epoch - 1) % config.decay_step == 0:
            opt.lr *= config.decay_gamma
        order = rng.permutation(len(train_ds))
        losses, sizes = [], []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            params.zero_grad()
            loss = batch_loss(params, train_ds, train_bundles, idx, normalizer)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, f"loss {value}")
            T.backward(loss)
            try:
                adam_step(opt, named)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            losses.append(value)
            sizes.append(len(idx))
        train_loss = float(np.dot(losses, sizes) / np.sum(sizes))
        row = {"epoch": epoch, "train_loss": train_loss}
        if val_ds is not None and len(val_ds):
            metrics = evaluate(params, val_ds, val_bundles, normalizer, config.batch_size)
            row["val_loss"] = metrics["mean_relative_l2"]
            row["val_mse"] = metrics["mean_mse"]
            row["val_sq_rel"] = metrics["mean_squared_relative_l2"]
            score = row["val_loss"]
        else:
            row["val_loss"] = row["val_mse"] = row["val_sq_rel"] = float("nan")
            score = train_loss
        if not math.isfinite(score):
            raise TrainingDiverged(epoch, "validation loss is not finite")
        row["wall_seconds"] = time.perf_counter() - start
        history.append(row)
        if score < best_score:
            best_score, best_epoch, best_state = score, epoch, params.state_dict()
        logger.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_loss,
                    row["val_loss"], row["wall_seconds"])
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(params, best_state, best_epoch, history, opt)


HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "wall_seconds", "val_mse", "val_sq_rel"]


def write_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return path


def read_history(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
