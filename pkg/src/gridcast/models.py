"""Thread-gap and reply-count models over a shared TCN stack.

ThreadArrivalModel reads the stack's channel vector at the window's
bottom-right (anchor) cell and maps it through two dense layers with a
PReLU in between; a softplus keeps the predicted gap non-negative. The
prediction estimates the next thread's arrival offset in interval units.

ReplyCountModel keeps the stack fully convolutional and maps channels
to one plane with a 1x1 conv plus softplus. Output cell (i, j)
estimates the count one row below, counts[i+1, j], i.e. targets are
shifted up one row so a cell only ever predicts its own future.
Supervision is either the bottom-right corner cell only (default) or
every cell whose shifted target exists and is past arrival.

Training is plain minibatch MSE with Adam. Fixed seeds give identical
loss histories and parameter trajectories; nothing here depends on
wall-clock or iteration order ambiguity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .grid import CHANNEL_ORDER, Channel, Segment, TargetKind
from .nn import (
    ConvLayer,
    DenseLayer,
    Parameter,
    PReLULayer,
    adam_step,
    mse_loss,
    sigmoid,
    softplus,
)
from .tcn import TCNStack


class TrainingDiverged(RuntimeError):
    pass


LOSS_MODES = ("corner", "full")
MODEL_KINDS = ("thread", "reply")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    channels: tuple[Channel, ...] = CHANNEL_ORDER
    window: tuple[int, int] = (16, 12)
    n_filters: int = 16
    k_h: int = 3
    k_w: int = 3
    n_blocks: int = 3
    loss_mode: str = "corner"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if min(self.window) < 1 or self.n_filters < 1 or self.n_blocks < 1:
            raise ValueError("window, n_filters and n_blocks must be >= 1")
        if self.k_h < 1 or self.k_w < 1:
            raise ValueError("kernel dims must be >= 1")

    def to_json_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "channels": [c.name for c in self.channels],
            "window": list(self.window),
            "n_filters": self.n_filters,
            "k_h": self.k_h,
            "k_w": self.k_w,
            "n_blocks": self.n_blocks,
            "loss_mode": self.loss_mode,
        }
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            kind=d["kind"],
            channels=tuple(Channel[name] for name in d["channels"]),
            window=tuple(d["window"]),
            n_filters=int(d["n_filters"]),
            k_h=int(d["k_h"]),
            k_w=int(d["k_w"]),
            n_blocks=int(d["n_blocks"]),
            loss_mode=d.get("loss_mode", "corner"),
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0


class _ModelBase:
    config: ModelConfig
    stack: TCNStack

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def channels(self) -> tuple[Channel, ...]:
        return self.config.channels

    @property
    def window(self) -> tuple[int, int]:
        return self.config.window

    def params(self) -> list[Parameter]:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def named_params(self) -> list[tuple[str, Parameter]]:
        return [(p.name, p) for p in self.params()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state the model needs at eval time."""
        out = []
        for block in self.stack.blocks:
            base = block.norm.gamma.name.rsplit(".", 1)[0]
            out.append((f"{base}.running_mean", block.norm.running.mean))
            out.append((f"{base}.running_var", block.norm.running.var))
        return out

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        for bname, arr in self.named_buffers():
            if bname == name:
                arr[...] = array
                return
        raise KeyError(f"no buffer named {name!r}")


class ThreadArrivalModel(_ModelBase):
    """Predicts the row gap to the next thread from the anchor cell."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        if config.kind != "thread":
            raise ValueError("config.kind must be 'thread'")
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        f = config.n_filters
        self.stack = TCNStack.build(
            rng, len(config.channels), f, config.k_h, config.k_w,
            config.n_blocks, dtype=dtype,
        )
        self.fc1 = DenseLayer(rng, f, f, dtype=dtype, name="head.fc1")
        self.act = PReLULayer(f, axis=-1, dtype=dtype, name="head.act")
        self.fc2 = DenseLayer(rng, f, 1, dtype=dtype, name="head.fc2")
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """x: (N, C, h, w) -> predicted gaps (N,), all >= 0."""
        u = self.stack.forward(x, train)
        anchor = u[:, :, -1, -1]
        z = self.fc2.forward(self.act.forward(self.fc1.forward(anchor)))[:, 0]
        self._cache = (u.shape, z)
        return softplus(z)

    def backward(self, grad_pred: np.ndarray) -> None:
        u_shape, z = self._cache
        gz = (grad_pred * sigmoid(z))[:, None]
        g_anchor = self.fc1.backward(self.act.backward(self.fc2.backward(gz)))
        gu = np.zeros(u_shape, dtype=g_anchor.dtype)
        gu[:, :, -1, -1] = g_anchor
        self.stack.backward(gu)

    def params(self) -> list[Parameter]:
        return self.stack.params() + self.fc1.params() + self.act.params() + self.fc2.params()

    def predict_gap(self, features: np.ndarray, col_index: int | None = None) -> float:
        """Single-window eval-mode prediction; col_index is unused here
        (ground-truth stand-ins key off it)."""
        x = features.astype(self.dtype)[None]
        return float(self.forward(x, train=False)[0])

    def astype(self, dtype) -> "ThreadArrivalModel":
        clone = object.__new__(ThreadArrivalModel)
        clone.config = self.config
        clone.dtype = dtype
        clone.stack = self.stack.astype(dtype)
        clone.fc1 = self.fc1.astype(dtype)
        clone.act = self.act.astype(dtype)
        clone.fc2 = self.fc2.astype(dtype)
        clone._cache = None
        return clone


class ReplyCountModel(_ModelBase):
    """Per-cell next-row count estimates, fully convolutional."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        if config.kind != "reply":
            raise ValueError("config.kind must be 'reply'")
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        f = config.n_filters
        self.stack = TCNStack.build(
            rng, len(config.channels), f, config.k_h, config.k_w,
            config.n_blocks, dtype=dtype,
        )
        self.head = ConvLayer(rng, f, 1, 1, 1, tau=1, dtype=dtype, name="head.conv")
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """x: (N, C, h, w) -> (N, h, w); cell (i, j) estimates counts[i+1, j]."""
        u = self.stack.forward(x, train)
        z = self.head.forward(u)[:, 0]
        self._cache = z
        return softplus(z)

    def backward(self, grad_pred: np.ndarray) -> None:
        z = self._cache
        gz = (grad_pred * sigmoid(z))[:, None]
        gu = self.head.backward(gz)
        self.stack.backward(gu)

    def params(self) -> list[Parameter]:
        return self.stack.params() + self.head.params()

    def predict_grid(self, features: np.ndarray) -> np.ndarray:
        x = features.astype(self.dtype)[None]
        return self.forward(x, train=False)[0]

    def predict_next_row(
        self, features: np.ndarray, row_index: int | None = None
    ) -> np.ndarray:
        """Predicted counts for the row just below the window, one value
        per window column. row_index is for ground-truth stand-ins."""
        return self.predict_grid(features)[-1, :]

    def astype(self, dtype) -> "ReplyCountModel":
        clone = object.__new__(ReplyCountModel)
        clone.config = self.config
        clone.dtype = dtype
        clone.stack = self.stack.astype(dtype)
        clone.head = self.head.astype(dtype)
        clone._cache = None
        return clone


def build_model(config: ModelConfig, seed=0, dtype=np.float32):
    if config.kind == "thread":
        return ThreadArrivalModel(config, seed=seed, dtype=dtype)
    return ReplyCountModel(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# training


@dataclass
class _Batchset:
    x: np.ndarray
    y: np.ndarray
    wgt: np.ndarray | None
    mode: str  # "thread" | "corner" | "full"

    def __len__(self) -> int:
        return self.x.shape[0]


def _prepare(model, segments: list[Segment], dtype) -> _Batchset:
    if not segments:
        raise ValueError("no segments to train on")
    if model.kind == "thread":
        if any(s.kind is not TargetKind.THREAD_GAP for s in segments):
            raise ValueError("thread model wants THREAD_GAP segments")
        x = np.stack([s.features for s in segments]).astype(dtype)
        y = np.array([float(s.target) for s in segments], dtype=np.float64)
        return _Batchset(x=x, y=y, wgt=None, mode="thread")
    if any(s.kind is not TargetKind.NEXT_ROW for s in segments):
        raise ValueError("reply model wants NEXT_ROW segments")
    if model.config.loss_mode == "corner":
        keep = [s for s in segments if np.asarray(s.target_weight)[-1] > 0]
        if not keep:
            raise ValueError("every segment's corner cell is masked")
        x = np.stack([s.features for s in keep]).astype(dtype)
        y = np.array([np.asarray(s.target)[-1] for s in keep], dtype=np.float64)
        return _Batchset(x=x, y=y, wgt=None, mode="corner")
    keep = [s for s in segments if s.full_weight is not None and s.full_weight.sum() > 0]
    if not keep:
        raise ValueError("every segment is fully masked")
    x = np.stack([s.features for s in keep]).astype(dtype)
    y = np.stack([s.full_target for s in keep]).astype(np.float64)
    wgt = np.stack([s.full_weight for s in keep]).astype(np.float64)
    return _Batchset(x=x, y=y, wgt=wgt, mode="full")


def _batch_loss(model, bs: _Batchset, sel: np.ndarray, train: bool):
    """Returns (loss, grad wrt raw model output, weight mass)."""
    pred = model.forward(bs.x[sel], train)
    if bs.mode == "thread":
        loss, g = mse_loss(pred, bs.y[sel])
        return loss, g, float(len(sel))
    if bs.mode == "corner":
        loss, gc = mse_loss(pred[:, -1, -1], bs.y[sel])
        g = np.zeros_like(pred, dtype=np.float64)
        g[:, -1, -1] = gc
        return loss, g, float(len(sel))
    w = bs.wgt[sel]
    loss, g = mse_loss(pred, bs.y[sel], w)
    return loss, g, float(w.sum())


def train(model, segments: list[Segment], cfg: TrainConfig) -> list[float]:
    """Minibatch Adam on MSE; returns per-epoch mean training loss.

    Weight decay applies only to the reply model's convolution filters
    (Parameter.decay flags them); everything about the run is a pure
    function of (initial weights, segments, cfg.seed).
    """
    bs = _prepare(model, segments, model.dtype)
    rng = np.random.default_rng(cfg.seed)
    decay = cfg.weight_decay if model.kind == "reply" else 0.0
    params = model.params()
    history: list[float] = []
    n = len(bs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        num, mass = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            model.zero_grads()
            loss, g, m = _batch_loss(model, bs, sel, train=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {len(history)}")
            model.backward(g)
            for p in params:
                adam_step(
                    p, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                    weight_decay=decay if p.decay else 0.0,
                )
            num += loss * m
            mass += m
        history.append(num / mass)
    return history


def dataset_loss(model, segments: list[Segment], batch_size: int = 256) -> float:
    """Eval-mode mean loss over a segment set (same support as training)."""
    bs = _prepare(model, segments, model.dtype)
    num, mass = 0.0, 0.0
    for start in range(0, len(bs), batch_size):
        sel = np.arange(start, min(start + batch_size, len(bs)))
        loss, _, m = _batch_loss(model, bs, sel, train=False)
        num += loss * m
        mass += m
    return num / mass


# ---------------------------------------------------------------------------
# hyperparameter grid search


@dataclass(frozen=True)
class SearchSpace:
    n_filters: tuple[int, ...] = (16, 32, 64, 128)
    kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    n_blocks: tuple[int, ...] = (3, 4, 5, 6, 7)


def enumerate_space(space: SearchSpace) -> list[tuple[int, int, int]]:
    """(n_filters, k, n_blocks) triples in deterministic order."""
    return list(product(space.n_filters, space.kernel_sizes, space.n_blocks))


@dataclass(frozen=True)
class SearchEntry:
    config: ModelConfig
    val_loss: float


@dataclass(frozen=True)
class GridSearchResult:
    best: ModelConfig
    entries: tuple[SearchEntry, ...]


def grid_search(
    base: ModelConfig,
    train_segments: list[Segment],
    val_segments: list[Segment],
    train_cfg: TrainConfig,
    space: SearchSpace = SearchSpace(),
    budget_epochs: int | None = None,
    seed: int = 0,
) -> GridSearchResult:
    """Exhaustive sweep over filters x kernel x depth; lowest validation
    loss wins, first configuration breaking ties. Candidates are
    independent, so the loop could run in parallel; evaluation order
    never affects the winner."""
    epochs = budget_epochs if budget_epochs is not None else train_cfg.epochs
    entries: list[SearchEntry] = []
    best_idx, best_loss = -1, np.inf
    for idx, (f, k, b) in enumerate(enumerate_space(space)):
        cfg = replace(base, n_filters=f, k_h=k, k_w=k, n_blocks=b)
        model = build_model(cfg, seed=np.random.default_rng([seed, idx]))
        train(model, train_segments, replace(train_cfg, epochs=epochs))
        val = dataset_loss(model, val_segments)
        entries.append(SearchEntry(config=cfg, val_loss=val))
        if val < best_loss:
            best_idx, best_loss = idx, val
    return GridSearchResult(best=entries[best_idx].config, entries=tuple(entries))


# ---------------------------------------------------------------------------
# gap -> wall-clock time


def arrival_time(t_prev: float, o_hat: float, d: float, mode: str = "simulate") -> float:
    """Next thread time from a predicted gap in interval units.

    simulate: quantise the gap to whole intervals (round half to even)
    so the result lands on the grid lattice. measure: keep the real
    value for error measurement against true timestamps.
    """
    if o_hat < 0:
        raise ValueError(f"negative gap prediction {o_hat}")
    if d <= 0:
        raise ValueError(f"interval length must be positive, got {d}")
    if mode == "simulate":
        return t_prev + round(o_hat) * d
    if mode == "measure":
        return t_prev + o_hat * d
    raise ValueError(f"unknown arrival_time mode {mode!r}")
