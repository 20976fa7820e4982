"""Shared fixtures: tiny streams, grids, stub predictors, strategies."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from gridcast.grid import EventStream, Grid, ThreadCascade, build_grid
from gridcast.models import ModelConfig, build_model


# ---------------------------------------------------------------------------
# hand-built streams


def cascade(tid: str, t: float, *replies: float) -> ThreadCascade:
    return ThreadCascade(thread_id=tid, thread_time=t, reply_times=tuple(sorted(replies)))


@pytest.fixture
def small_stream() -> EventStream:
    """Three cascades on a 60 s lattice; 9 events total."""
    return EventStream.from_cascades(
        [
            cascade("a", 0.0, 10.0, 70.0, 130.0),
            cascade("b", 65.0, 66.0, 200.0),
            cascade("c", 240.0, 250.0),
        ]
    )


@pytest.fixture
def small_grid(small_stream) -> Grid:
    return build_grid(small_stream, d=60.0, t0=0.0, n_rows=5)


def lattice_stream(gaps_intervals, d: float = 300.0, replies_per=0) -> EventStream:
    """Threads exactly on the d-lattice with the given integer gaps."""
    t = 0.0
    cascades = []
    times = [0.0]
    for g in gaps_intervals:
        times.append(times[-1] + g * d)
    for i, t in enumerate(times):
        reps = tuple(t + 1.0 + k for k in range(replies_per))
        cascades.append(ThreadCascade(f"t{i:03d}", t, reps))
    return EventStream(tuple(cascades))


# ---------------------------------------------------------------------------
# stub predictors (duck-typed like trained models)


class ConstGapStub:
    """Always predicts the same gap, in interval units."""

    def __init__(self, gap: float, window=(4, 3), channels=None):
        from gridcast.grid import CHANNEL_ORDER

        self.gap = gap
        self.window = window
        self.channels = channels or CHANNEL_ORDER
        self.kind = "thread"

    def predict_gap(self, features, col_index=None) -> float:
        return float(self.gap)


class TrueGapStub:
    """Replays the true gap (in intervals) to the column being created,
    plus a constant offset."""

    def __init__(self, thread_times, d: float, offset: float = 0.0, window=(4, 3)):
        from gridcast.grid import CHANNEL_ORDER

        self.tt = np.asarray(thread_times, dtype=np.float64)
        self.d = float(d)
        self.offset = float(offset)
        self.window = window
        self.channels = CHANNEL_ORDER
        self.kind = "thread"

    def predict_gap(self, features, col_index=None) -> float:
        j = int(col_index)
        return float((self.tt[j] - self.tt[j - 1]) / self.d + self.offset)


class ConstRowStub:
    """Always predicts the same value for every column of the next row."""

    def __init__(self, value: float, window=(4, 3)):
        from gridcast.grid import CHANNEL_ORDER

        self.value = float(value)
        self.window = window
        self.channels = CHANNEL_ORDER
        self.kind = "reply"

    def predict_next_row(self, features, row_index=None) -> np.ndarray:
        return np.full(features.shape[-1], self.value, dtype=np.float64)


class TrueRowStub:
    """Replays the true grid row (plus offset) for the row being predicted.

    Columns beyond the reference grid, and rows below it, read zero.
    Assumes state columns align one-to-one with reference columns.
    """

    def __init__(self, grid: Grid, offset: float = 0.0, window=(4, 3)):
        from gridcast.grid import CHANNEL_ORDER

        self.grid = grid
        self.offset = float(offset)
        self.window = window
        self.channels = CHANNEL_ORDER
        self.kind = "reply"

    def predict_next_row(self, features, row_index=None) -> np.ndarray:
        n = features.shape[-1]
        out = np.zeros(n, dtype=np.float64)
        r = int(row_index)
        if r < self.grid.spec.n_rows:
            m = min(n, self.grid.spec.n_cols)
            out[:m] = self.grid.counts[r, :m]
        live = np.ones(n, dtype=bool)
        m = min(n, self.grid.spec.n_cols)
        live[:m] = self.grid.arrival_rows[:m] <= r
        out[live] += self.offset
        return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# model builders


def tiny_config(kind: str, **kw) -> ModelConfig:
    base = dict(window=(6, 4), n_filters=4, k_h=2, k_w=2, n_blocks=1)
    base.update(kw)
    return ModelConfig(kind=kind, **base)


def tiny_model(kind: str, seed: int = 0, dtype=np.float32, **kw):
    return build_model(tiny_config(kind, **kw), seed=seed, dtype=dtype)


def zero_weights(model) -> None:
    for p in model.params():
        p.value[...] = 0


# ---------------------------------------------------------------------------
# hypothesis strategies


@st.composite
def stream_strategy(draw, max_cascades: int = 5, max_replies: int = 6):
    """Small streams with half-integer timestamps (exact in float64)."""
    n = draw(st.integers(1, max_cascades))
    used = set()
    cascades = []
    for i in range(n):
        t2 = draw(st.integers(0, 2000).filter(lambda v: v not in used))
        used.add(t2)
        t = t2 / 2.0
        n_rep = draw(st.integers(0, max_replies))
        reps = sorted(t + draw(st.integers(0, 4000)) / 2.0 for _ in range(n_rep))
        cascades.append(ThreadCascade(f"c{i:02d}", t, tuple(reps)))
    return EventStream.from_cascades(cascades)


def brute_force_counts(stream: EventStream, d: float, t0: float, n_rows: int):
    """Independent double-loop counting oracle over half-open intervals."""
    n_cols = len(stream)
    counts = np.zeros((n_rows, n_cols), dtype=np.int64)
    dropped = 0
    for j, casc in enumerate(stream.cascades):
        for t in (casc.thread_time,) + casc.reply_times:
            placed = False
            for i in range(n_rows):
                if t0 + i * d <= t < t0 + (i + 1) * d:
                    counts[i, j] += 1
                    placed = True
                    break
            if not placed:
                dropped += 1
    return counts, dropped
