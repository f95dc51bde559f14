"""Multi-level predictive-coding network for next-frame prediction.

One time step (levels ``l = 0..L-1``, level 0 at pixel resolution):

top-down, ``l = L-1 .. 0``
    ``x_l = concat(E_l[t-1], up2(R_{l+1}[t]))`` (no second term at the top)
    ``i, f, o, g = split(conv(concat(x_l, R_l[t-1])))``
    ``C_l = sigmoid(f) * C_l + sigmoid(i) * tanh(g)``
    ``R_l = sigmoid(o) * tanh(C_l)``
bottom-up, ``l = 0 .. L-1``
    ``Ahat_l = relu(conv(R_l))``, clamped to ``<= 1`` at level 0
    ``A_0 = frame``, ``A_l = maxpool2(relu(conv(E_{l-1})))``
    ``E_l = concat(relu(A_l - Ahat_l), relu(Ahat_l - A_l))``

``Ahat_0`` emitted at step ``t`` is the prediction of ``frame[t]``; it only
depends on frames ``0..t-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from . import autograd as ag


@dataclass(frozen=True)
class ModelConfig:
    num_levels: int = 3
    channels_per_level: tuple = (8, 16, 32)
    kernel_size: int = 3
    input_channels: int = 1
    loss_level_weights: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        object.__setattr__(self, "loss_level_weights", tuple(float(w) for w in self.loss_level_weights))
        if self.num_levels < 1:
            raise InvalidArgument("num_levels must be >= 1")
        if len(self.channels_per_level) != self.num_levels:
            raise InvalidArgument("channels_per_level needs one entry per level")
        if len(self.loss_level_weights) != self.num_levels or min(self.loss_level_weights) < 0:
            raise InvalidArgument("loss_level_weights needs one nonnegative entry per level")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgument("kernel_size must be odd")
        if self.input_channels != 1:
            raise InvalidArgument("only single-channel (grayscale) input is supported")

    def a_channels(self, level: int) -> int:
        return self.input_channels if level == 0 else self.channels_per_level[level]

    def r_channels(self, level: int) -> int:
        return self.channels_per_level[level]

    def lstm_in_channels(self, level: int) -> int:
        up = self.r_channels(level + 1) if level + 1 < self.num_levels else 0
        return 2 * self.a_channels(level) + up + self.r_channels(level)

    def param_shapes(self) -> dict:
        """Parameter shapes in canonical (checkpoint) order. Conv weights are ``(k, k, C_in, C_out)``."""
        k = self.kernel_size
        shapes = {}
        for l in range(self.num_levels):
            r = self.r_channels(l)
            shapes[f"lstm{l}.weight"] = (k, k, self.lstm_in_channels(l), 4 * r)
            shapes[f"lstm{l}.bias"] = (4 * r,)
            shapes[f"ahat{l}.weight"] = (k, k, r, self.a_channels(l))
            shapes[f"ahat{l}.bias"] = (self.a_channels(l),)
        for l in range(1, self.num_levels):
            shapes[f"a{l}.weight"] = (k, k, 2 * self.a_channels(l - 1), self.a_channels(l))
            shapes[f"a{l}.bias"] = (self.a_channels(l),)
        return shapes


@dataclass
class PredictiveModel:
    config: ModelConfig
    params: dict  # name -> ndarray, canonical order

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "PredictiveModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".weight"):
                bound = 1.0 / np.sqrt(shape[0] * shape[1] * shape[2])
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            else:
                b = np.zeros(shape, dtype=dtype)
                if name.startswith("lstm"):
                    r = shape[0] // 4
                    b[r : 2 * r] = 1.0  # forget gate
                params[name] = b
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "PredictiveModel":
        return cls(config, {n: np.zeros(s, dtype=dtype) for n, s in config.param_shapes().items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "PredictiveModel":
        return PredictiveModel(self.config, {n: p.copy() for n, p in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ModelState:
    R: list
    C: list
    E: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int, height: int, width: int, dtype=np.float32) -> "ModelState":
        _check_dims(config, height, width)
        R, C, E = [], [], []
        for l in range(config.num_levels):
            h, w = height >> l, width >> l
            R.append(np.zeros((batch, h, w, config.r_channels(l)), dtype=dtype))
            C.append(np.zeros((batch, h, w, config.r_channels(l)), dtype=dtype))
            E.append(np.zeros((batch, h, w, 2 * config.a_channels(l)), dtype=dtype))
        return cls(R, C, E)

    def copy(self) -> "ModelState":
        return ModelState([r.copy() for r in self.R], [c.copy() for c in self.C], [e.copy() for e in self.E])


def _check_dims(config: ModelConfig, height: int, width: int) -> None:
    div = 2 ** (config.num_levels - 1)
    if height % div or width % div:
        raise InvalidArgument(f"frame dims {height}x{width} must be divisible by {div}")


def cell_step(config: ModelConfig, P: dict, R: list, C: list, E: list, frame: ag.Tensor):
    """Differentiable step on Tensors. ``frame`` is ``(B, H, W, 1)``.

    Returns new ``(R, C, E)`` lists, the level-0 prediction and per-level
    ``mean(E_l)`` Tensors.
    """
    L = config.num_levels
    R_new, C_new = [None] * L, [None] * L
    for l in reversed(range(L)):
        inputs = [E[l]]
        if l + 1 < L:
            inputs.append(ag.upsample2(R_new[l + 1]))
        inputs.append(R[l])
        gates = ag.conv2d(ag.concat(inputs), P[f"lstm{l}.weight"], P[f"lstm{l}.bias"])
        r = config.r_channels(l)
        i = ag.sigmoid(ag.channel_slice(gates, 0, r))
        f = ag.sigmoid(ag.channel_slice(gates, r, 2 * r))
        o = ag.sigmoid(ag.channel_slice(gates, 2 * r, 3 * r))
        g = ag.tanh(ag.channel_slice(gates, 3 * r, 4 * r))
        C_new[l] = ag.add(ag.mul(f, C[l]), ag.mul(i, g))
        R_new[l] = ag.mul(o, ag.tanh(C_new[l]))

    E_new, err_means = [None] * L, [None] * L
    A = frame
    prediction = None
    for l in range(L):
        if l > 0:
            A = ag.maxpool2(ag.relu(ag.conv2d(E_new[l - 1], P[f"a{l}.weight"], P[f"a{l}.bias"])))
        ahat = ag.relu(ag.conv2d(R_new[l], P[f"ahat{l}.weight"], P[f"ahat{l}.bias"]))
        if l == 0:
            ahat = ag.clamp_max(ahat, 1.0)
            prediction = ahat
        E_new[l] = ag.concat([ag.relu(ag.sub(A, ahat)), ag.relu(ag.sub(ahat, A))])
        err_means[l] = ag.mean(E_new[l])
    return R_new, C_new, E_new, prediction, err_means


def _as_batch(frame: np.ndarray, dtype) -> np.ndarray:
    f = np.asarray(frame, dtype=dtype)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3:
        raise InvalidArgument("frame must be (H, W) or (B, H, W)")
    return f[..., None]


def step(model: PredictiveModel, state: ModelState, frame: np.ndarray):
    """One inference step. Returns ``(new_state, predicted_frame, per_level_error_means)``.

    ``predicted_frame`` has the shape of ``frame`` and was formed before
    ``frame`` was seen.
    """
    x = _as_batch(frame, model.dtype)
    B, H, W, _ = x.shape
    _check_dims(model.config, H, W)
    if state.R[0].shape[:3] != (B, H, W):
        raise InvalidArgument(f"state is for {state.R[0].shape[:3]}, frame batch is {(B, H, W)}")
    P = {n: ag.Tensor(p) for n, p in model.params.items()}
    wrap = lambda xs: [ag.Tensor(v) for v in xs]  # noqa: E731
    R, C, E, pred, errs = cell_step(model.config, P, wrap(state.R), wrap(state.C), wrap(state.E), ag.Tensor(x))
    new_state = ModelState([t.data for t in R], [t.data for t in C], [t.data for t in E])
    pred = pred.data[..., 0]
    if np.ndim(frame) == 2:
        pred = pred[0]
    return new_state, pred, [float(e.data) for e in errs]


def rollout(model: PredictiveModel, frames, state: ModelState | None = None, return_state: bool = False):
    """One-step-ahead predictions for a ``(T, H, W)`` or ``(B, T, H, W)`` frame array.

    Output has the input's shape; entry ``t`` is predicted from frames ``< t``
    (entry 0 comes from the initial state alone and is not meaningful).
    """
    arr = np.asarray(getattr(frames, "frames", frames))
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise InvalidArgument("rollout expects (T, H, W) or (B, T, H, W) frames")
    B, T, H, W = arr.shape
    if T < 2:
        raise InvalidArgument("rollout needs at least 2 frames")
    if state is None:
        state = ModelState.zeros(model.config, B, H, W, model.dtype)
    preds = np.empty(arr.shape, dtype=model.dtype)
    for t in range(T):
        state, p, _ = step(model, state, arr[:, t])
        preds[:, t] = p
    out = preds[0] if single else preds
    return (out, state) if return_state else out


def windowed_rollout(model: PredictiveModel, frames, window: int, batch: int = 64) -> np.ndarray:
    """One-step predictions for a ``(T, H, W)`` sequence from fresh, bounded contexts.

    Rollouts restart every ``h = window // 2`` frames. Frame ``t >= window`` is
    predicted by the rollout started at ``(t // h - 1) * h``, so it sees between
    ``h`` and ``2h - 1`` preceding frames; frames ``t < window`` use the
    rollout from frame 0. This keeps long recordings within the context
    lengths seen in training, where a free-running state drifts.
    """
    arr = np.asarray(getattr(frames, "frames", frames))
    if arr.ndim != 3:
        raise InvalidArgument("windowed_rollout expects a (T, H, W) sequence")
    if window < 2:
        raise InvalidArgument("window must be >= 2")
    T = len(arr)
    if T <= window:
        return rollout(model, arr)
    h = window // 2
    source = np.zeros(T, dtype=np.int64)
    source[window:] = (np.arange(window, T) // h - 1) * h
    starts = np.unique(source)
    by_len = {}
    for st in starts:
        by_len.setdefault(int(min(window, T - st)), []).append(int(st))
    chunk_preds = {}
    for length, group in by_len.items():
        for b in range(0, len(group), batch):
            sel = group[b : b + batch]
            out = rollout(model, np.stack([arr[st : st + length] for st in sel]))
            chunk_preds.update(zip(sel, out))
    preds = np.empty(arr.shape, dtype=model.dtype)
    for t in range(T):
        preds[t] = chunk_preds[int(source[t])][t - source[t]]
    return preds


def baseline_previous_frame(frames) -> np.ndarray:
    """Predict each frame by its predecessor (entry 0 repeats frame 0)."""
    arr = np.asarray(getattr(frames, "frames", frames))
    if arr.ndim != 3 or len(arr) < 2:
        raise InvalidArgument("baseline needs a (T, H, W) sequence with T >= 2")
    return np.concatenate([arr[:1], arr[:-1]])
