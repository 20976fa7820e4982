"""Gridding of thread-reply event streams.

A discussion forum emits cascades: a thread post followed by replies. We
bucket each cascade's events into fixed-length time intervals and lay the
result out as a matrix with one column per cascade (in thread arrival
order) and one row per interval. Cells before a cascade's arrival are
structural zeros, distinguished from observed zero counts by a sentinel
mask channel. A relative-time channel encodes intervals elapsed since
each cascade's arrival, normalised per column.

All functions here are pure; grids and feature tensors are cheap to
rebuild and nothing in this module caches derived channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class GridError(ValueError):
    """Invalid inputs for grid construction or slicing."""


@dataclass(frozen=True)
class ThreadCascade:
    """One thread post plus its replies, times in epoch seconds."""

    thread_id: str
    thread_time: float
    reply_times: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.thread_id:
            raise GridError("cascade needs a non-empty thread_id")
        times = self.reply_times
        for a, b in zip(times, times[1:]):
            if b < a:
                raise GridError(f"replies of {self.thread_id!r} not sorted")
        if times and times[0] < self.thread_time:
            raise GridError(
                f"reply precedes thread post in cascade {self.thread_id!r}"
            )

    @property
    def size(self) -> int:
        """Cascade size: the thread post itself plus all replies."""
        return 1 + len(self.reply_times)

    @property
    def last_event_time(self) -> float:
        return self.reply_times[-1] if self.reply_times else self.thread_time


@dataclass(frozen=True)
class EventStream:
    """Cascades ordered by (thread_time, thread_id)."""

    cascades: tuple[ThreadCascade, ...]

    def __post_init__(self):
        keys = [(c.thread_time, c.thread_id) for c in self.cascades]
        for a, b in zip(keys, keys[1:]):
            if not a < b:
                raise GridError(f"cascades out of order near {b[1]!r}")

    @classmethod
    def from_cascades(cls, cascades: Iterable[ThreadCascade]) -> "EventStream":
        ordered = sorted(cascades, key=lambda c: (c.thread_time, c.thread_id))
        return cls(tuple(ordered))

    def __len__(self) -> int:
        return len(self.cascades)

    @property
    def thread_times(self) -> np.ndarray:
        return np.array([c.thread_time for c in self.cascades], dtype=np.float64)

    def subset(self, lo: int, hi: int) -> "EventStream":
        return EventStream(self.cascades[lo:hi])


@dataclass(frozen=True)
class GridSpec:
    """Interval length d (seconds), stream epoch t0, and matrix shape."""

    d: float
    t0: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.d <= 0:
            raise GridError(f"interval length must be positive, got {self.d}")
        if self.n_rows < 1 or self.n_cols < 0:
            raise GridError(f"bad grid shape {self.n_rows}x{self.n_cols}")


class Channel(Enum):
    """Feature channels in canonical order."""

    COUNTS = 0
    RELTIME = 1
    MASK = 2


CHANNEL_ORDER = (Channel.COUNTS, Channel.RELTIME, Channel.MASK)

# Named channel subsets selectable from the CLI.
CHANNEL_SETS: dict[str, tuple[Channel, ...]] = {
    "S": (Channel.COUNTS,),
    "M": (Channel.COUNTS, Channel.RELTIME),
    "full": CHANNEL_ORDER,
}


def canonical_channels(channels: Iterable[Channel]) -> tuple[Channel, ...]:
    chans = set(channels)
    if not chans:
        raise GridError("channel set is empty")
    if Channel.COUNTS not in chans:
        raise GridError("channel set missing COUNTS")
    return tuple(c for c in CHANNEL_ORDER if c in chans)


@dataclass(frozen=True)
class Grid:
    """Count matrix plus per-column arrival rows.

    counts[i, j] is the number of events of cascade j (thread post
    included) inside interval i. arrival_rows[j] is the interval index
    of cascade j's thread post; it may be >= n_rows when the post falls
    beyond the materialised window. dropped_events counts events past
    the last row.
    """

    spec: GridSpec
    counts: np.ndarray
    arrival_rows: np.ndarray
    dropped_events: int = 0

    def __post_init__(self):
        if self.counts.shape != (self.spec.n_rows, self.spec.n_cols):
            raise GridError(
                f"counts shape {self.counts.shape} does not match spec "
                f"{(self.spec.n_rows, self.spec.n_cols)}"
            )
        if self.arrival_rows.shape != (self.spec.n_cols,):
            raise GridError("arrival_rows length must equal n_cols")

    @property
    def mask(self) -> np.ndarray:
        """Sentinel channel: 1 on structural-zero cells before arrival."""
        rows = np.arange(self.spec.n_rows)[:, None]
        return (rows < self.arrival_rows[None, :]).astype(np.uint8)

    def validate(self) -> None:
        """Deep invariant check, meant for tests and ingest paths."""
        if np.any(self.counts < 0):
            raise GridError("negative cell count")
        if self.counts[self.mask.astype(bool)].any():
            raise GridError("nonzero count on a pre-arrival cell")
        in_window = self.arrival_rows < self.spec.n_rows
        cols = np.where(in_window)[0]
        if np.any(self.counts[self.arrival_rows[cols], cols] < 1):
            raise GridError("arrival cell missing its thread event")
        if np.any(np.diff(self.arrival_rows) < 0):
            raise GridError("arrival rows not non-decreasing")


def interval_index(t: float, t0: float, d: float) -> int:
    """Index i with t0 + i*d <= t < t0 + (i+1)*d under float comparison.

    Plain floor((t - t0) / d) can land one off when (t - t0) / d rounds
    across an integer; nudge until the half-open test holds exactly.
    """
    i = math.floor((t - t0) / d)
    while t0 + (i + 1) * d <= t:
        i += 1
    while t0 + i * d > t:
        i -= 1
    return i


def build_grid(stream: EventStream, d: float, t0: float, n_rows: int) -> Grid:
    """Bucket every cascade of the stream into a count grid.

    Events at or beyond row n_rows are dropped (tallied, not an error).
    Events before t0 are an error: the epoch must precede the stream.
    """
    if d <= 0:
        raise GridError(f"interval length must be positive, got {d}")
    if len(stream) == 0:
        raise GridError("cannot grid an empty stream")
    if n_rows < 1:
        raise GridError("need at least one row")

    n_cols = len(stream)
    counts = np.zeros((n_rows, n_cols), dtype=np.int64)
    arrival = np.zeros(n_cols, dtype=np.int64)
    dropped = 0
    for j, casc in enumerate(stream.cascades):
        if casc.thread_time < t0:
            raise GridError(
                f"event before t0 in cascade {casc.thread_id!r}: "
                f"{casc.thread_time} < {t0}"
            )
        arrival[j] = interval_index(casc.thread_time, t0, d)
        for t in (casc.thread_time,) + casc.reply_times:
            i = interval_index(t, t0, d)
            if i < n_rows:
                counts[i, j] += 1
            else:
                dropped += 1
    spec = GridSpec(d=d, t0=t0, n_rows=n_rows, n_cols=n_cols)
    return Grid(spec=spec, counts=counts, arrival_rows=arrival, dropped_events=dropped)


def rows_covering(stream: EventStream, d: float, t0: float) -> int:
    """Smallest row count that keeps every event of the stream in window."""
    last = max(c.last_event_time for c in stream.cascades)
    return interval_index(last, t0, d) + 1


def relative_time_channel(grid: Grid) -> np.ndarray:
    """Intervals since arrival, scaled to [0, 1] by each column's maximum.

    Pre-arrival cells are zero. A column whose maximum is zero (arrival
    in the last row, or beyond the window) stays all zero rather than
    dividing by zero.
    """
    rows = np.arange(grid.spec.n_rows, dtype=np.int64)[:, None]
    raw = np.maximum(rows - grid.arrival_rows[None, :], 0).astype(np.float64)
    # columns with arrival beyond the window never start counting
    beyond = grid.arrival_rows >= grid.spec.n_rows
    raw[:, beyond] = 0.0
    colmax = raw.max(axis=0)
    denom = np.where(colmax > 0, colmax, 1.0)
    return raw / denom[None, :]


def assemble_features(
    grid: Grid,
    channels: Iterable[Channel] = CHANNEL_ORDER,
    dtype=np.float64,
) -> "FeatureTensor":
    """Stack the requested channels into a C x H x W tensor."""
    chans = canonical_channels(channels)
    planes = []
    for ch in chans:
        if ch is Channel.COUNTS:
            planes.append(grid.counts.astype(dtype))
        elif ch is Channel.RELTIME:
            planes.append(relative_time_channel(grid).astype(dtype))
        else:
            planes.append(grid.mask.astype(dtype))
    return FeatureTensor(channels=chans, data=np.stack(planes), spec=grid.spec)


@dataclass(frozen=True)
class FeatureTensor:
    """Channel-stacked view of a grid, shape (C, n_rows, n_cols)."""

    channels: tuple[Channel, ...]
    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        expect = (len(self.channels), self.spec.n_rows, self.spec.n_cols)
        if self.data.shape != expect:
            raise GridError(f"feature tensor shape {self.data.shape} != {expect}")


def pad_top_left(matrix: np.ndarray, pad_rows: int, pad_cols: int) -> np.ndarray:
    """Zero-pad above and to the left; the causal direction only."""
    if pad_rows < 0 or pad_cols < 0:
        raise GridError("padding must be non-negative")
    widths = [(0, 0)] * (matrix.ndim - 2) + [(pad_rows, 0), (pad_cols, 0)]
    return np.pad(matrix, widths)


def window_at(data: np.ndarray, row: int, col: int, h: int, w: int) -> np.ndarray:
    """h x w window whose bottom-right cell is (row, col), zero-padded
    top-left where it overhangs the tensor."""
    r0, c0 = row - h + 1, col - w + 1
    block = data[..., max(r0, 0) : row + 1, max(c0, 0) : col + 1]
    return pad_top_left(block, max(0, -r0), max(0, -c0))


class TargetKind(Enum):
    THREAD_GAP = "thread_gap"
    NEXT_ROW = "next_row"


@dataclass(frozen=True)
class Segment:
    """One training window plus its supervision.

    For THREAD_GAP the target is the integer row gap to the next thread.
    For NEXT_ROW the target is the count row just below the window over
    the window's columns; target_weight zeroes columns that are padding
    or still pre-arrival at the target row. full_target / full_weight
    carry the up-shifted count matrix for whole-window supervision,
    weights zero on padded cells, pre-arrival cells, and rows whose
    shifted source falls outside the grid.
    """

    features: np.ndarray
    kind: TargetKind
    anchor: tuple[int, int]
    target: float | np.ndarray
    target_weight: float | np.ndarray = 1.0
    full_target: np.ndarray | None = None
    full_weight: np.ndarray | None = None


def zeros_gap(grid: Grid, j: int) -> int:
    """Row gap between consecutive thread arrivals (columns j and j+1)."""
    if not 0 <= j <= grid.spec.n_cols - 2:
        raise GridError(f"no successor column for j={j}")
    return int(grid.arrival_rows[j + 1] - grid.arrival_rows[j])


def slice_segments(
    tensor: FeatureTensor,
    grid: Grid,
    h: int,
    w: int,
    kind: TargetKind,
    stride: int = 1,
    row_range: tuple[int, int] | None = None,
    col_range: tuple[int, int] | None = None,
) -> list[Segment]:
    """Cut training windows out of a feature tensor.

    NEXT_ROW: one segment per anchor row i, window rows (i-h+1 .. i) by
    the grid's trailing w columns, target row i+1. row_range restricts
    the anchor rows (half-open), e.g. for a train/test time split.

    THREAD_GAP: one segment per column j that has a successor, window
    anchored bottom-right at (arrival_rows[j], j); columns whose arrival
    lies beyond the materialised rows are skipped. col_range restricts j.
    """
    if h < 1 or w < 1 or stride < 1:
        raise GridError("window dims and stride must be >= 1")
    if tensor.spec != grid.spec:
        raise GridError("feature tensor and grid describe different specs")
    n_rows, n_cols = grid.spec.n_rows, grid.spec.n_cols
    segments: list[Segment] = []

    if kind is TargetKind.NEXT_ROW:
        lo, hi = row_range if row_range is not None else (0, n_rows - 1)
        lo, hi = max(lo, 0), min(hi, n_rows - 1)
        col_lo = n_cols - w
        real = np.arange(col_lo, n_cols) >= 0  # left-pad flags, length w
        mask = grid.mask
        for i in range(lo, hi, stride):
            feats = window_at(tensor.data, i, n_cols - 1, h, w)
            target = np.zeros(w, dtype=np.float64)
            weight = np.zeros(w, dtype=np.float64)
            cols = np.arange(max(col_lo, 0), n_cols)
            target[real] = grid.counts[i + 1, cols]
            weight[real] = 1.0 - mask[i + 1, cols]
            full_t = np.zeros((h, w), dtype=np.float64)
            full_w = np.zeros((h, w), dtype=np.float64)
            for r in range(h):
                g = i - h + 1 + r  # source grid row of window row r
                if 0 <= g + 1 < n_rows:
                    full_t[r, real] = grid.counts[g + 1, cols]
                    full_w[r, real] = 1.0 - mask[g + 1, cols]
            segments.append(
                Segment(
                    features=feats,
                    kind=kind,
                    anchor=(i, n_cols - 1),
                    target=target,
                    target_weight=weight,
                    full_target=full_t,
                    full_weight=full_w,
                )
            )
        return segments

    lo, hi = col_range if col_range is not None else (0, n_cols - 1)
    lo, hi = max(lo, 0), min(hi, n_cols - 1)
    for j in range(lo, hi, stride):
        a = int(grid.arrival_rows[j])
        if a >= n_rows:
            continue  # anchor cell never materialised
        feats = window_at(tensor.data, a, j, h, w)
        segments.append(
            Segment(
                features=feats,
                kind=kind,
                anchor=(a, j),
                target=float(zeros_gap(grid, j)),
            )
        )
    return segments


def frontier_segments(
    tensor: FeatureTensor,
    grid: Grid,
    h: int,
    w: int,
    stride: int = 1,
    row_range: tuple[int, int] | None = None,
) -> list[Segment]:
    """Next-row windows whose right edge tracks the arrived frontier.

    slice_segments pins NEXT_ROW windows to the grid's trailing w
    columns; on a grid covering a whole stream those cascades arrive
    near the bottom rows, so at most anchor rows every supervised cell
    is still pre-arrival and carries zero weight. For training we
    instead anchor each window at (i, J_i) where J_i is the newest
    column already arrived by row i -- the geometry the rolling
    forecast sees live -- so the corner target is always a real cell.
    Anchor rows before the first arrival are skipped.
    """
    if h < 1 or w < 1 or stride < 1:
        raise GridError("window dims and stride must be >= 1")
    if tensor.spec != grid.spec:
        raise GridError("feature tensor and grid describe different specs")
    n_rows, n_cols = grid.spec.n_rows, grid.spec.n_cols
    lo, hi = row_range if row_range is not None else (0, n_rows - 1)
    lo, hi = max(lo, 0), min(hi, n_rows - 1)
    mask = grid.mask
    arrivals = grid.arrival_rows
    segments: list[Segment] = []
    for i in range(lo, hi, stride):
        j_hi = int(np.searchsorted(arrivals, i, side="right")) - 1
        if j_hi < 0:
            continue  # nothing arrived yet
        feats = window_at(tensor.data, i, j_hi, h, w)
        cols = np.arange(max(0, j_hi - w + 1), j_hi + 1)
        real = np.zeros(w, dtype=bool)
        real[w - len(cols) :] = True
        target = np.zeros(w, dtype=np.float64)
        weight = np.zeros(w, dtype=np.float64)
        target[real] = grid.counts[i + 1, cols]
        weight[real] = 1.0 - mask[i + 1, cols]
        full_t = np.zeros((h, w), dtype=np.float64)
        full_w = np.zeros((h, w), dtype=np.float64)
        for r in range(h):
            g = i - h + 1 + r  # source grid row of window row r
            if 0 <= g + 1 < n_rows:
                full_t[r, real] = grid.counts[g + 1, cols]
                full_w[r, real] = 1.0 - mask[g + 1, cols]
        segments.append(
            Segment(
                features=feats,
                kind=TargetKind.NEXT_ROW,
                anchor=(i, j_hi),
                target=target,
                target_weight=weight,
                full_target=full_t,
                full_weight=full_w,
            )
        )
    return segments
