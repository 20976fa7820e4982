"""Evaluation protocols and the interval-length sensitivity sweep.

Three measurement protocols, all deterministic given (seed, config):

* thread arrival: for each test thread j, convert the predicted gap to
  a wall-clock time from the true previous arrival and compare against
  the true next arrival, in hours;
* reply counts: one-step-ahead row predictions compared cell-wise to
  true counts on post-arrival cells;
* adaptive: seeded start points, closed-loop simulation of the next
  n_threads cascades, per-step arrival error (hours) and per-cascade
  reply totals at checkpoints 2d..10d (counts), each cascade's window
  taken relative to its own (predicted vs true) arrival row.

Thread errors are aggregated in seconds and converted to hours once,
so integer-lattice fixtures telescope without float drift.

Baselines are wrapped as predictor objects satisfying the same duck
protocol as trained models, so model and baseline pass through the
identical measurement path.

The d-sweep retrains both models per candidate interval length and
scores them in d-comparable units: thread MAE in hours with the gap
quantised to the grid lattice (simulate mode, the representation-facing
cost), and reply MAE as absolute error of self-fed rolled-out totals
over a fixed future span in seconds. Fine grids pay compounding
roll-out and rounding error; coarse grids pay quantisation and lose
within-cascade detail; the combined normalised score bottoms out at an
interior d.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .baselines import BaselineKind
from .forecast import ForecastState, adaptive_forecast, roll_reply_row
from .grid import (
    CHANNEL_ORDER,
    Channel,
    EventStream,
    Grid,
    GridError,
    GridSpec,
    TargetKind,
    assemble_features,
    build_grid,
    frontier_segments,
    rows_covering,
    slice_segments,
    window_at,
)
from .models import (
    ModelConfig,
    TrainConfig,
    arrival_time,
    build_model,
    train,
)

SECONDS_PER_HOUR = 3600.0


class EvalTask(Enum):
    THREAD_ARRIVAL = "thread_arrival"
    REPLY_COUNT = "reply_count"
    ADAPTIVE_THREAD = "adaptive_thread"
    ADAPTIVE_REPLY = "adaptive_reply"
    BREAKOUT = "breakout"


@dataclass(frozen=True)
class EvalReport:
    task: EvalTask
    mae: float
    rmse: float
    unit: str
    n: int
    stddev: float
    config_digest: str
    label: str = ""

    def __post_init__(self):
        if self.mae < 0 or self.n < 1:
            raise ValueError("report needs mae >= 0 and n >= 1")
        if self.rmse < self.mae - 1e-12:
            raise ValueError(f"rmse {self.rmse} < mae {self.mae}")


def mae(pred, truth) -> float:
    p, t = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae of empty vectors")
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def config_digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _report(task, abs_errors, unit, digest, label="", stddev=None) -> EvalReport:
    e = np.asarray(abs_errors, dtype=np.float64)
    return EvalReport(
        task=task,
        mae=float(e.mean()),
        rmse=float(np.sqrt((e**2).mean())),
        unit=unit,
        n=int(e.size),
        stddev=float(e.std()) if stddev is None else float(stddev),
        config_digest=digest,
        label=label,
    )


def _seconds_report(task, errors_s, digest, label="", stddev_s=None) -> EvalReport:
    e = np.asarray(errors_s, dtype=np.float64)
    sd = float(e.std()) if stddev_s is None else float(stddev_s)
    return EvalReport(
        task=task,
        mae=float(e.mean()) / SECONDS_PER_HOUR,
        rmse=float(np.sqrt((e**2).mean())) / SECONDS_PER_HOUR,
        unit="hours",
        n=int(e.size),
        stddev=sd / SECONDS_PER_HOUR,
        config_digest=digest,
        label=label,
    )


# ---------------------------------------------------------------------------
# baseline adapters: same duck protocol as the trained models


@dataclass
class MeanGapBaseline:
    """HISTORICAL_MEAN for the thread task: constant mean training gap,
    expressed in interval units."""

    gap_intervals: float
    window: tuple[int, int] = (1, 1)
    channels: tuple[Channel, ...] = (Channel.COUNTS,)
    kind: str = BaselineKind.HISTORICAL_MEAN.value

    def predict_gap(self, features, col_index=None) -> float:
        return float(self.gap_intervals)


@dataclass
class PersistenceGapBaseline:
    """Repeats the previous observed gap; needs the true arrival record."""

    thread_times: np.ndarray
    d: float
    window: tuple[int, int] = (1, 1)
    channels: tuple[Channel, ...] = (Channel.COUNTS,)
    kind: str = BaselineKind.PERSISTENCE.value

    def predict_gap(self, features, col_index=None) -> float:
        j = (col_index or 1) - 1
        if j < 1:
            return 0.0
        return float((self.thread_times[j] - self.thread_times[j - 1]) / self.d)


@dataclass
class MeanRowBaseline:
    """HISTORICAL_MEAN for the reply task: global training-cell mean."""

    mean_count: float
    window: tuple[int, int] = (1, 1)
    channels: tuple[Channel, ...] = (Channel.COUNTS,)
    kind: str = BaselineKind.HISTORICAL_MEAN.value

    def predict_next_row(self, features, row_index=None) -> np.ndarray:
        return np.full(features.shape[-1], self.mean_count, dtype=np.float64)


@dataclass
class PersistenceRowBaseline:
    window: tuple[int, int] = (1, 1)
    channels: tuple[Channel, ...] = (Channel.COUNTS,)
    kind: str = BaselineKind.PERSISTENCE.value

    def predict_next_row(self, features, row_index=None) -> np.ndarray:
        return np.maximum(features[0, -1, :].astype(np.float64), 0.0)


def train_mean_gap_intervals(thread_times, n_train_cols: int, d: float) -> float:
    tt = np.asarray(thread_times, dtype=np.float64)[:n_train_cols]
    if tt.size < 2:
        raise ValueError("need at least two training threads for a mean gap")
    return float(np.diff(tt).mean() / d)


def train_mean_cell_count(grid: Grid, row_lo: int, row_hi: int) -> float:
    """Mean count over post-arrival training cells."""
    sel = grid.mask[row_lo:row_hi] == 0
    if not sel.any():
        raise ValueError("no post-arrival cells in the training rows")
    return float(grid.counts[row_lo:row_hi][sel].mean())


# ---------------------------------------------------------------------------
# non-adaptive protocols


def evaluate_thread_arrival(
    model,
    grid: Grid,
    thread_times,
    indices=None,
    mode: str = "measure",
    digest: str = "",
) -> EvalReport:
    """Per-thread next-arrival error in hours.

    Each test index j anchors a window at thread j and predicts thread
    j+1's time from thread j's true time. `mode` picks real-valued
    ("measure", the default) or lattice-quantised ("simulate") times.
    """
    tt = np.asarray(thread_times, dtype=np.float64)
    if tt.shape != (grid.spec.n_cols,):
        raise ValueError("need one true thread time per grid column")
    if indices is None:
        indices = [
            j
            for j in range(grid.spec.n_cols - 1)
            if grid.arrival_rows[j] < grid.spec.n_rows
        ]
    indices = list(indices)
    if not indices:
        raise ValueError("no evaluable thread indices")
    h, w = model.window
    data = assemble_features(grid, model.channels).data
    errors_s = []
    for j in indices:
        if not 0 <= j <= grid.spec.n_cols - 2:
            raise IndexError(f"thread index {j} out of range")
        if grid.arrival_rows[j] >= grid.spec.n_rows:
            raise IndexError(f"thread {j} arrives beyond the grid rows")
        win = window_at(data, int(grid.arrival_rows[j]), j, h, w)
        o_hat = float(model.predict_gap(win, j + 1))
        t_pred = arrival_time(tt[j], o_hat, grid.spec.d, mode=mode)
        errors_s.append(abs(t_pred - tt[j + 1]))
    return _seconds_report(EvalTask.THREAD_ARRIVAL, errors_s, digest)


def evaluate_reply_counts(
    model,
    grid: Grid,
    n_intervals: int,
    start_row: int | None = None,
    columns=None,
    digest: str = "",
) -> EvalReport:
    """One-step-ahead per-cell errors over n_intervals consecutive rows.

    Each row r in [start_row, start_row + n_intervals) is predicted from
    true history up to r-1; scored on post-arrival cells only.
    """
    n_rows, n_cols = grid.spec.n_rows, grid.spec.n_cols
    if n_intervals < 1:
        raise ValueError("n_intervals must be >= 1")
    if start_row is None:
        start_row = n_rows - n_intervals
    if start_row < 1 or start_row + n_intervals > n_rows:
        raise ValueError(
            f"rows [{start_row}, {start_row + n_intervals}) fall outside the grid"
        )
    cols = np.arange(n_cols) if columns is None else np.asarray(list(columns))
    h, _ = model.window
    data = assemble_features(grid, model.channels).data
    mask = grid.mask
    errors = []
    for r in range(start_row, start_row + n_intervals):
        win = window_at(data, r - 1, n_cols - 1, h, n_cols)
        pred = np.asarray(model.predict_next_row(win, r), dtype=np.float64)
        live = cols[mask[r, cols] == 0]
        errors.extend(np.abs(pred[live] - grid.counts[r, live]))
    if not errors:
        raise ValueError("no post-arrival cells to score")
    return _report(EvalTask.REPLY_COUNT, errors, "count", digest)


# ---------------------------------------------------------------------------
# adaptive protocol


def evaluate_adaptive(
    thread_model,
    reply_model,
    grid: Grid,
    thread_times,
    n_threads: int = 6,
    checkpoints: tuple[int, ...] = (2, 4, 6, 8, 10),
    n_start_points: int = 20,
    seed: int = 0,
    n_intervals: int | None = None,
    digest: str = "",
) -> tuple[list[EvalReport], list[EvalReport]]:
    """Closed-loop evaluation from seeded start points.

    Returns per-step thread reports (hours, one per step 1..n_threads)
    and per-checkpoint reply reports (counts, windows of 2d..10d from
    each cascade's own arrival row). Standard deviations are over start
    points (reply checkpoints first average within a start point).
    """
    tt = np.asarray(thread_times, dtype=np.float64)
    if tt.shape != (grid.spec.n_cols,):
        raise ValueError("need one true thread time per grid column")
    if n_threads < 1:
        raise ValueError("n_threads must be >= 1")
    max_cp = max(checkpoints)
    n_rows, n_cols = grid.spec.n_rows, grid.spec.n_cols
    valid = [
        j0
        for j0 in range(1, n_cols - n_threads)
        if grid.arrival_rows[j0 + n_threads] + max_cp <= n_rows
        and grid.arrival_rows[j0] < n_rows
    ]
    if not valid:
        raise ValueError(
            "insufficient test data for the requested horizons"
        )
    rng = np.random.default_rng(seed)
    take = min(n_start_points, len(valid))
    starts = sorted(rng.choice(np.array(valid), size=take, replace=False).tolist())
    roll = n_intervals if n_intervals is not None else max_cp

    step_err_s = np.zeros((take, n_threads))
    cp_err = {cp: np.zeros((take, n_threads)) for cp in checkpoints}
    for si, j0 in enumerate(starts):
        a0 = int(grid.arrival_rows[j0])
        sub = Grid(
            spec=GridSpec(grid.spec.d, grid.spec.t0, a0 + 1, j0 + 1),
            counts=grid.counts[: a0 + 1, : j0 + 1].copy(),
            arrival_rows=grid.arrival_rows[: j0 + 1].copy(),
        )
        state = ForecastState.from_grid(sub, thread_times=tt[: j0 + 1].tolist())
        adaptive_forecast(state, thread_model, reply_model, n_threads, roll)
        while state.n_rows < int(state.arrival_rows[-1]) + max_cp:
            roll_reply_row(state, reply_model)
        for k in range(1, n_threads + 1):
            col = j0 + k
            step_err_s[si, k - 1] = abs(state.thread_times[col] - tt[col])
            r_hat = int(state.arrival_rows[col])
            r_true = int(grid.arrival_rows[col])
            for cp in checkpoints:
                pred = int(state.counts[r_hat : r_hat + cp, col].sum())
                true = int(grid.counts[r_true : r_true + cp, col].sum())
                cp_err[cp][si, k - 1] = abs(pred - true)

    thread_reports = [
        _seconds_report(
            EvalTask.ADAPTIVE_THREAD,
            step_err_s[:, k - 1],
            digest,
            label=f"step {k}",
        )
        for k in range(1, n_threads + 1)
    ]
    reply_reports = []
    for cp in checkpoints:
        errs = cp_err[cp]
        reply_reports.append(
            _report(
                EvalTask.ADAPTIVE_REPLY,
                errs.reshape(-1),
                "count",
                digest,
                label=f"{cp}d",
                stddev=float(errs.mean(axis=1).std()),
            )
        )
    return thread_reports, reply_reports


# ---------------------------------------------------------------------------
# interval-length sweep


@dataclass(frozen=True)
class SweepConfig:
    t0: float = 0.0
    train_frac: float = 0.7
    window: tuple[int, int] = (12, 8)
    channels: tuple[Channel, ...] = CHANNEL_ORDER
    n_filters: int = 8
    k: int = 3
    n_blocks: int = 2
    loss_mode: str = "full"
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    span_seconds: float = 3600.0


@dataclass(frozen=True)
class SweepRow:
    d: float
    thread_mae_hours: float
    reply_mae_counts: float
    n_thread: int
    n_reply: int


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    best_d: float
    scores: tuple[float, ...]


def _self_fed_span_mae(model, grid: Grid, r_split: int, span_int: int) -> tuple[float, int]:
    """Roll the reply model over its own outputs for span_int rows from
    each aligned start in the test region; absolute error of per-column
    totals against truth. Thread arrival rows are taken as known.

    Only recently-arrived columns are scored: threads whose arrival
    falls within one span before or inside the rolled window. Columns
    that went quiet long before the start would reward a degenerate
    always-zero forecast equally at every d and drown out the signal
    the sweep is after."""
    n_rows = grid.spec.n_rows
    starts = list(range(r_split, n_rows - span_int + 1, span_int))
    if not starts:
        raise GridError("test region shorter than the evaluation span")
    errors = []
    for r0 in starts:
        sub = Grid(
            spec=GridSpec(grid.spec.d, grid.spec.t0, r0, grid.spec.n_cols),
            counts=grid.counts[:r0].copy(),
            arrival_rows=grid.arrival_rows.copy(),
        )
        state = ForecastState.from_grid(sub)
        for _ in range(span_int):
            roll_reply_row(state, model)
        pred = state.counts[r0 : r0 + span_int]
        arr = grid.arrival_rows
        cols = np.where((arr >= r0 - span_int) & (arr < r0 + span_int))[0]
        true = grid.counts[r0 : r0 + span_int]
        for c in cols:
            errors.append(abs(int(pred[:, c].sum()) - int(true[:, c].sum())))
    if not errors:
        raise GridError("no recently-arrived columns in the sweep test region")
    return float(np.mean(errors)), len(errors)


def sweep_interval_length(
    stream: EventStream, d_values, cfg: SweepConfig = SweepConfig()
) -> SweepResult:
    """Rebuild, retrain, and score both tasks for every candidate d.

    Scores are d-comparable: thread MAE in hours with lattice-quantised
    predictions, reply MAE in counts over a fixed span of
    cfg.span_seconds. The selected d minimises the sum of per-task MAEs
    normalised by their column minima; ties go to the smaller d.
    """
    if len(list(d_values)) == 0:
        raise GridError("empty candidate set")
    ds = sorted(float(d) for d in d_values)
    rows = []
    for d in ds:
        n_rows = rows_covering(stream, d, cfg.t0)
        if n_rows < 2:
            raise GridError(f"d={d} too large: fewer than 2 rows materialise")
        grid = build_grid(stream, d, cfg.t0, n_rows)
        tensor = assemble_features(grid, cfg.channels)
        h, w = cfg.window
        r_split = min(max(int(n_rows * cfg.train_frac), 1), n_rows - 1)
        col_split = int(np.searchsorted(grid.arrival_rows, r_split))
        tt = stream.thread_times

        th_cfg = ModelConfig(
            kind="thread", channels=cfg.channels, window=cfg.window,
            n_filters=cfg.n_filters, k_h=cfg.k, k_w=cfg.k, n_blocks=cfg.n_blocks,
        )
        th_segments = slice_segments(
            tensor, grid, h, w, TargetKind.THREAD_GAP, col_range=(0, col_split)
        )
        test_idx = [
            j for j in range(col_split, grid.spec.n_cols - 1)
            if grid.arrival_rows[j] < n_rows
        ]
        if len(th_segments) < 2 or not test_idx:
            raise GridError(f"d={d}: not enough threads on either side of the split")
        tc = TrainConfig(
            lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs,
            batch_size=cfg.batch_size, seed=cfg.seed,
        )
        th_model = build_model(th_cfg, seed=np.random.default_rng([cfg.seed, 1]))
        train(th_model, th_segments, tc)
        th_report = evaluate_thread_arrival(
            th_model, grid, tt, test_idx, mode="simulate"
        )

        rp_cfg = ModelConfig(
            kind="reply", channels=cfg.channels, window=cfg.window,
            n_filters=cfg.n_filters, k_h=cfg.k, k_w=cfg.k, n_blocks=cfg.n_blocks,
            loss_mode=cfg.loss_mode,
        )
        rp_segments = frontier_segments(tensor, grid, h, w, row_range=(0, r_split))
        rp_model = build_model(rp_cfg, seed=np.random.default_rng([cfg.seed, 2]))
        train(rp_model, rp_segments, tc)
        span_int = max(1, round(cfg.span_seconds / d))
        reply_mae, n_reply = _self_fed_span_mae(rp_model, grid, r_split, span_int)

        rows.append(
            SweepRow(
                d=d,
                thread_mae_hours=th_report.mae,
                reply_mae_counts=reply_mae,
                n_thread=th_report.n,
                n_reply=n_reply,
            )
        )
    t = np.array([r.thread_mae_hours for r in rows])
    rmae = np.array([r.reply_mae_counts for r in rows])
    tiny = 1e-12
    scores = t / max(t.min(), tiny) + rmae / max(rmae.min(), tiny)
    best = int(np.argmin(scores))
    return SweepResult(rows=tuple(rows), best_d=rows[best].d, scores=tuple(scores))
