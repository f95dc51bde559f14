"""Backpropagation-through-time training with Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument, NumericalFailure
from . import autograd as ag
from .model import ModelState, PredictiveModel, cell_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 40
    sequence_length: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be >= 1")
        if self.sequence_length < 2:
            raise InvalidArgument("sequence_length must be >= 2 (t=0 is unscored)")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * (0.5 if epoch >= math.ceil(self.epochs / 2) else 1.0)


def time_weight(t: int) -> float:
    return 0.0 if t == 0 else 1.0


def sequence_loss(model: PredictiveModel, seq: np.ndarray, track_grad: bool = True):
    """Loss ``sum_t w_t sum_l lambda_l mean(E_l[t])`` for a ``(B, T, H, W)`` batch.

    Returns ``(loss_value, grads)``; ``grads`` maps parameter names to arrays
    (``None`` when ``track_grad`` is false).
    """
    cfg = model.config
    B, T, H, W = seq.shape
    P = {n: ag.Tensor(p, requires_grad=track_grad) for n, p in model.params.items()}
    st = ModelState.zeros(cfg, B, H, W, model.dtype)
    R, C, E = ([ag.Tensor(v) for v in xs] for xs in (st.R, st.C, st.E))
    frames = seq.astype(model.dtype, copy=False)[..., None]
    terms = []
    for t in range(T):
        R, C, E, _, errs = cell_step(cfg, P, R, C, E, ag.Tensor(frames[:, t]))
        wt = time_weight(t)
        for lam, e in zip(cfg.loss_level_weights, errs):
            if wt * lam:
                terms.append(ag.scale(e, wt * lam))
    if not terms:
        return 0.0, {n: np.zeros_like(p) for n, p in model.params.items()} if track_grad else None
    loss = terms[0]
    for term in terms[1:]:
        loss = ag.add(loss, term)
    value = float(loss.data)
    if not track_grad:
        return value, None
    ag.backward(loss)
    grads = {n: (P[n].grad if P[n].grad is not None else np.zeros_like(P[n].data)) for n in model.params}
    return value, grads


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}
        self.t = 0

    def update(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for n, p in params.items():
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            step = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p -= step.astype(p.dtype, copy=False)


def make_windows(sequences, length: int) -> np.ndarray:
    """Cut non-overlapping ``length``-frame windows from each sequence -> ``(N, T, H, W)``."""
    out = []
    for s in sequences:
        arr = np.asarray(getattr(s, "frames", s))
        for start in range(0, len(arr) - length + 1, length):
            out.append(arr[start : start + length])
    if not out:
        raise InvalidArgument(f"no sequence is long enough for a {length}-frame window")
    return np.stack(out)


def _check_normal_only(dataset) -> None:
    for s in dataset:
        labels = getattr(s, "frame_labels", None)
        if labels is not None and any(k != "normal" for k in labels):
            raise InvalidArgument("training data must contain only normal-labelled frames")


def train(model: PredictiveModel, dataset, tp: TrainParams, progress=None):
    """Train a copy of ``model`` on normal frame sequences.

    ``dataset`` is an iterable of FrameSequence (or raw ``(T, H, W)``
    arrays). Returns ``(trained_model, per_epoch_mean_loss)``.
    """
    dataset = list(dataset)
    _check_normal_only(dataset)
    windows = make_windows(dataset, tp.sequence_length)
    model = model.copy()
    opt = Adam(model.params, tp.beta1, tp.beta2, tp.eps)
    rng = np.random.default_rng(tp.seed)
    history = []
    for epoch in range(tp.epochs):
        order = rng.permutation(len(windows))
        lr = tp.lr_at(epoch)
        losses = []
        for b in range(0, len(order), tp.batch_size):
            batch = windows[order[b : b + tp.batch_size]]
            value, grads = sequence_loss(model, batch)
            if not math.isfinite(value):
                raise NumericalFailure(f"non-finite loss at epoch {epoch}")
            opt.update(model.params, grads, lr)
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.6f lr %.2e", epoch + 1, tp.epochs, history[-1], lr)
        if progress is not None:
            progress(epoch, history[-1])
    return model, history
