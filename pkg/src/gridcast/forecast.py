"""Closed-loop simulation: alternating thread-gap and reply-count rolls.

The forecaster owns a growing copy of the grid. One iteration predicts
the gap to the next thread from the newest cascade's anchor window,
appends a column whose arrival row advances by the rounded gap (the
wall-clock time chains unrounded, so timing error telescopes cleanly),
then rolls the reply model forward a fixed number of rows across every
column. Appended cells obey the same discipline as real grids:
pre-arrival cells stay structural zeros, an arrival cell carries at
least the thread post itself, and the sentinel and relative-time
channels are rebuilt from the arrival rows for every prediction, never
cached.

Model protocol (duck-typed so ground-truth stand-ins drop in):
  - gap predictors expose .window, .channels and
    predict_gap(features, col_index) -> float >= 0, where col_index is
    the index of the column being created;
  - row predictors expose .window, .channels and
    predict_next_row(features, row_index) -> per-column floats >= 0,
    where row_index is the absolute grid row being predicted.
Trained models ignore the index arguments.

Breakout verdicts accumulate the raw (unrounded) per-interval
predictions for the target column on top of the observed prefix and
compare against twice the average cascade size, strictly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    Channel,
    EventStream,
    Grid,
    GridError,
    GridSpec,
    assemble_features,
    window_at,
)
from .models import arrival_time


@dataclass
class ForecastState:
    d: float
    t0: float
    counts: np.ndarray
    arrival_rows: np.ndarray
    simulated: np.ndarray  # True where cells were model-filled
    thread_times: list[float]
    n_observed_cols: int
    n_observed_rows: int

    @property
    def n_rows(self) -> int:
        return self.counts.shape[0]

    @property
    def n_cols(self) -> int:
        return self.counts.shape[1]

    @property
    def simulated_thread_times(self) -> list[float]:
        return self.thread_times[self.n_observed_cols :]

    @classmethod
    def from_grid(cls, grid: Grid, thread_times: list[float] | None = None) -> "ForecastState":
        """Seed a simulation from an observed grid. Pass the true thread
        timestamps when known; otherwise arrival rows quantise them."""
        if thread_times is None:
            thread_times = [
                grid.spec.t0 + float(r) * grid.spec.d for r in grid.arrival_rows
            ]
        if len(thread_times) != grid.spec.n_cols:
            raise GridError("one thread time per column, please")
        return cls(
            d=grid.spec.d,
            t0=grid.spec.t0,
            counts=grid.counts.copy(),
            arrival_rows=grid.arrival_rows.copy(),
            simulated=np.zeros_like(grid.counts, dtype=bool),
            thread_times=list(thread_times),
            n_observed_cols=grid.spec.n_cols,
            n_observed_rows=grid.spec.n_rows,
        )

    def to_grid(self) -> Grid:
        spec = GridSpec(d=self.d, t0=self.t0, n_rows=self.n_rows, n_cols=self.n_cols)
        return Grid(
            spec=spec,
            counts=self.counts.copy(),
            arrival_rows=self.arrival_rows.copy(),
        )

    def features(self, channels: tuple[Channel, ...]) -> np.ndarray:
        """Channel stack over the whole current state, rebuilt fresh."""
        return assemble_features(self.to_grid(), channels).data


def roll_reply_row(state: ForecastState, reply_model) -> np.ndarray:
    """Append one predicted row across all columns.

    Returns the model's raw per-column estimates before rounding and
    mask discipline; the state itself stores rounded integer counts.
    """
    h, _ = reply_model.window
    new_row = state.n_rows
    data = state.features(reply_model.channels)
    window = window_at(data, state.n_rows - 1, state.n_cols - 1, h, state.n_cols)
    raw = np.asarray(reply_model.predict_next_row(window, new_row), dtype=np.float64)
    if raw.shape != (state.n_cols,):
        raise GridError(f"row prediction shape {raw.shape} != ({state.n_cols},)")
    if np.any(raw < 0):
        raise GridError("negative reply-count prediction")
    vals = np.maximum(np.round(raw), 0).astype(np.int64)
    vals[state.arrival_rows > new_row] = 0  # still pre-arrival
    at_arrival = state.arrival_rows == new_row
    vals[at_arrival] = np.maximum(vals[at_arrival], 1)  # thread post itself
    state.counts = np.vstack([state.counts, vals[None, :]])
    state.simulated = np.vstack(
        [state.simulated, np.ones((1, state.n_cols), dtype=bool)]
    )
    return raw


def append_thread_column(state: ForecastState, o_hat: float) -> int:
    """Add the next simulated cascade; returns its arrival row."""
    if o_hat < 0:
        raise GridError(f"negative gap prediction {o_hat}")
    t_next = arrival_time(state.thread_times[-1], o_hat, state.d, mode="measure")
    r_next = int(state.arrival_rows[-1]) + int(round(o_hat))
    col = np.zeros((state.n_rows, 1), dtype=np.int64)
    if r_next < state.n_rows:
        col[r_next, 0] = 1  # thread post lands inside already-rolled rows
    state.counts = np.hstack([state.counts, col])
    state.simulated = np.hstack(
        [state.simulated, np.ones((state.n_rows, 1), dtype=bool)]
    )
    state.arrival_rows = np.append(state.arrival_rows, r_next)
    state.thread_times.append(t_next)
    return r_next


def adaptive_forecast(
    state: ForecastState,
    thread_model,
    reply_model,
    n_threads: int,
    n_intervals: int,
) -> ForecastState:
    """Alternate gap prediction and reply rolls, mutating the state.

    Before each gap prediction the newest column's anchor row is
    materialised (rolling extra rows if a long gap outran the grid).
    """
    if n_threads < 0 or n_intervals < 0:
        raise GridError("n_threads and n_intervals must be >= 0")
    h, w = thread_model.window
    for _ in range(n_threads):
        while state.arrival_rows[-1] >= state.n_rows:
            roll_reply_row(state, reply_model)
        data = state.features(thread_model.channels)
        window = window_at(
            data, int(state.arrival_rows[-1]), state.n_cols - 1, h, w
        )
        o_hat = float(thread_model.predict_gap(window, state.n_cols))
        append_thread_column(state, o_hat)
        for _ in range(n_intervals):
            roll_reply_row(state, reply_model)
    return state


# ---------------------------------------------------------------------------
# breakout identification


def average_cascade_size(stream: EventStream) -> float:
    """Mean cascade size, thread post included."""
    if len(stream) == 0:
        raise GridError("empty stream has no average size")
    return float(np.mean([c.size for c in stream.cascades]))


@dataclass(frozen=True)
class BreakoutVerdict:
    cascade_id: str
    start_duration: float
    prefix_total: float
    predicted_total: float
    threshold: float
    is_breakout: bool


@dataclass(frozen=True)
class BreakoutCurvePoint:
    start_duration: float
    correct_rate: float
    n: int


def breakout_classify(
    state: ForecastState,
    column: int,
    reply_model,
    l_bar: float,
    horizon_intervals: int,
    cascade_id: str = "",
    start_duration: float = 0.0,
) -> BreakoutVerdict:
    """Verdict for one cascade from its observed prefix state.

    predicted_total = observed prefix + raw rolled-out estimates over
    horizon_intervals rows; breakout iff strictly above 2 * l_bar.
    With horizon 0 (or no model) the verdict uses the prefix alone.
    Holding the model's outputs fixed, the verdict is monotone in the
    prefix: more observed events never flip breakout to non-breakout.
    """
    if l_bar <= 0:
        raise GridError("average cascade size must be positive")
    if horizon_intervals < 0:
        raise GridError("horizon must be >= 0")
    if not 0 <= column < state.n_cols:
        raise GridError(f"column {column} outside state")
    total = float(state.counts[:, column].sum())
    prefix = total
    if horizon_intervals > 0 and reply_model is not None:
        for _ in range(horizon_intervals):
            raw = roll_reply_row(state, reply_model)
            total += float(raw[column])
    threshold = 2.0 * l_bar
    return BreakoutVerdict(
        cascade_id=cascade_id,
        start_duration=start_duration,
        prefix_total=prefix,
        predicted_total=total,
        threshold=threshold,
        is_breakout=total > threshold,
    )


def build_breakout_state(
    grid: Grid, column: int, class_row: int, context_cols: int = 16
) -> tuple[ForecastState, int]:
    """Truncate a grid to what was observable at `class_row` for the
    given cascade: rows [0, class_row) and a trailing window of columns
    ending at the cascade's own. Returns (state, target column index
    within the state)."""
    if not 0 <= column < grid.spec.n_cols:
        raise GridError(f"no column {column} in grid")
    if class_row < 1:
        raise GridError("need at least one observed row")
    if class_row > grid.spec.n_rows:
        raise GridError(
            f"prefix needs {class_row} rows but the grid has {grid.spec.n_rows}"
        )
    c0 = max(0, column - context_cols + 1)
    spec = GridSpec(
        d=grid.spec.d, t0=grid.spec.t0, n_rows=class_row, n_cols=column - c0 + 1
    )
    sub = Grid(
        spec=spec,
        counts=grid.counts[:class_row, c0 : column + 1].copy(),
        arrival_rows=grid.arrival_rows[c0 : column + 1].copy(),
    )
    return ForecastState.from_grid(sub), column - c0


def default_breakout_horizon(stream: EventStream, d: float, pct: float = 95.0) -> int:
    """Cascade lifetime (intervals, ceiling) at the given percentile."""
    lifetimes = [
        math.ceil((c.last_event_time - c.thread_time) / d) for c in stream.cascades
    ]
    if not lifetimes:
        raise GridError("empty stream")
    return int(np.percentile(lifetimes, pct, method="lower"))


def breakout_curve(
    stream: EventStream,
    grid: Grid,
    reply_model,
    start_durations: list[float],
    horizon_intervals: int | None = None,
    context_cols: int = 16,
) -> list[BreakoutCurvePoint]:
    """Correct-verdict rate at each start duration over the whole stream.

    Durations must be positive multiples of the grid's interval length.
    Ground truth: final cascade size strictly above twice the stream's
    average. The roll-out horizon shrinks with the duration (observed
    intervals replace predicted ones) and never goes negative. For
    cascades arriving near the grid bottom the observed prefix is
    clamped to the materialised rows.
    """
    if len(stream) != grid.spec.n_cols:
        raise GridError("stream and grid disagree on cascade count")
    l_bar = average_cascade_size(stream)
    if horizon_intervals is None:
        horizon_intervals = default_breakout_horizon(stream, grid.spec.d)
    truth = [c.size > 2.0 * l_bar for c in stream.cascades]
    points = []
    for s in start_durations:
        s_int = round(s / grid.spec.d)
        if s_int < 1 or abs(s_int * grid.spec.d - s) > 1e-9 * max(1.0, abs(s)):
            raise GridError(f"start duration {s} is not a positive multiple of d")
        correct = 0
        for j, casc in enumerate(stream.cascades):
            class_row = min(int(grid.arrival_rows[j]) + s_int, grid.spec.n_rows)
            state, col = build_breakout_state(grid, j, class_row, context_cols)
            remaining = max(0, horizon_intervals - s_int)
            verdict = breakout_classify(
                state,
                col,
                reply_model if remaining > 0 else None,
                l_bar,
                remaining,
                cascade_id=casc.thread_id,
                start_duration=s,
            )
            correct += int(verdict.is_breakout == truth[j])
        points.append(
            BreakoutCurvePoint(
                start_duration=s, correct_rate=correct / len(stream), n=len(stream)
            )
        )
    return points
