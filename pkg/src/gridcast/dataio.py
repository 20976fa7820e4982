"""Event-log parsing and on-disk formats.

Event logs are newline-delimited JSON records:

    {"thread_id": "abc", "kind": "thread", "ts": 1690001234.5}
    {"thread_id": "abc", "kind": "reply",  "ts": 1690001301.0}

Records may arrive in any order; unknown fields are ignored; exact
duplicate records are dropped with a warning count. A reply whose
thread never appears, a reply before its thread post, or a malformed
line is an error that names the offending line.

Grids serialise to a small binary container mirroring the checkpoint
layout (magic, version, JSON header, little-endian payload, CRC-32).
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import EventStream, Grid, GridSpec, ThreadCascade

log = logging.getLogger("gridcast")

GRID_MAGIC = b"GCASTGRD"
GRID_VERSION = 1


class EventParseError(ValueError):
    pass


class GridFileError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    thread_id: str
    kind: str
    ts: float


@dataclass(frozen=True)
class ParseStats:
    threads: int
    replies: int
    duplicates: int


def _record(line: str, line_no: int) -> EventRecord | None:
    text = line.strip()
    if not text:
        return None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EventParseError(f"line {line_no}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise EventParseError(f"line {line_no}: expected a JSON object")
    try:
        thread_id, kind, ts = obj["thread_id"], obj["kind"], obj["ts"]
    except KeyError as exc:
        raise EventParseError(f"line {line_no}: missing field {exc.args[0]!r}") from exc
    if not isinstance(thread_id, str) or not thread_id:
        raise EventParseError(f"line {line_no}: thread_id must be a non-empty string")
    if kind not in ("thread", "reply"):
        raise EventParseError(f"line {line_no}: kind must be 'thread' or 'reply'")
    if not isinstance(ts, (int, float)) or isinstance(ts, bool):
        raise EventParseError(f"line {line_no}: ts must be a number")
    return EventRecord(thread_id=thread_id, kind=kind, ts=float(ts))


def parse_events_with_stats(path: str | Path) -> tuple[EventStream, ParseStats]:
    seen: set[tuple[str, str, float]] = set()
    threads: dict[str, tuple[float, int]] = {}
    replies: dict[str, list[float]] = {}
    duplicates = 0
    n_replies = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            rec = _record(line, line_no)
            if rec is None:
                continue
            key = (rec.thread_id, rec.kind, rec.ts)
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            if rec.kind == "thread":
                if rec.thread_id in threads:
                    prev_ts, prev_line = threads[rec.thread_id]
                    raise EventParseError(
                        f"line {line_no}: thread {rec.thread_id!r} already posted "
                        f"at ts {prev_ts} (line {prev_line})"
                    )
                threads[rec.thread_id] = (rec.ts, line_no)
            else:
                replies.setdefault(rec.thread_id, []).append(rec.ts)
                n_replies += 1
    cascades = []
    for tid, reply_ts in replies.items():
        if tid not in threads:
            raise EventParseError(f"reply without a thread: {tid!r}")
    for tid, (t_thread, line_no) in threads.items():
        reply_ts = sorted(replies.get(tid, []))
        if reply_ts and reply_ts[0] < t_thread:
            raise EventParseError(
                f"thread {tid!r} (line {line_no}): reply at ts {reply_ts[0]} "
                f"precedes the thread post at ts {t_thread}"
            )
        cascades.append(
            ThreadCascade(thread_id=tid, thread_time=t_thread, reply_times=tuple(reply_ts))
        )
    stream = EventStream.from_cascades(cascades)
    return stream, ParseStats(threads=len(threads), replies=n_replies, duplicates=duplicates)


def parse_events(path: str | Path) -> EventStream:
    stream, stats = parse_events_with_stats(path)
    if stats.duplicates:
        log.warning("dropped %d duplicate event records", stats.duplicates)
    return stream


def serialize_events(stream: EventStream, path: str | Path) -> None:
    """Canonical order: each cascade's thread line, then its replies."""
    with open(path, "w", encoding="utf-8") as fh:
        for casc in stream.cascades:
            fh.write(json.dumps(
                {"thread_id": casc.thread_id, "kind": "thread", "ts": casc.thread_time}
            ))
            fh.write("\n")
            for ts in casc.reply_times:
                fh.write(json.dumps(
                    {"thread_id": casc.thread_id, "kind": "reply", "ts": ts}
                ))
                fh.write("\n")


# ---------------------------------------------------------------------------
# grid container


def save_grid(grid: Grid, path: str | Path) -> None:
    counts = np.ascontiguousarray(grid.counts, dtype="<i8").tobytes()
    arrival = np.ascontiguousarray(grid.arrival_rows, dtype="<i8").tobytes()
    payload = counts + arrival
    header = {
        "d": grid.spec.d,
        "t0": grid.spec.t0,
        "n_rows": grid.spec.n_rows,
        "n_cols": grid.spec.n_cols,
        "dropped_events": grid.dropped_events,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", GRID_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_grid(path: str | Path) -> Grid:
    raw = Path(path).read_bytes()
    if len(raw) < len(GRID_MAGIC) + 12 or raw[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise GridFileError(f"{path}: not a grid file (bad magic)")
    off = len(GRID_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != GRID_VERSION:
        raise GridFileError(f"{path}: grid format version {version}, expected {GRID_VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFileError(f"{path}: unreadable header: {exc}") from exc
    off += hlen
    payload = raw[off:]
    if len(payload) != header["payload_bytes"]:
        raise GridFileError(f"{path}: truncated payload")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise GridFileError(f"{path}: payload CRC mismatch")
    n_rows, n_cols = header["n_rows"], header["n_cols"]
    cells = n_rows * n_cols * 8
    counts = np.frombuffer(payload[:cells], dtype="<i8").reshape(n_rows, n_cols)
    arrival = np.frombuffer(payload[cells:], dtype="<i8")
    spec = GridSpec(d=header["d"], t0=header["t0"], n_rows=n_rows, n_cols=n_cols)
    return Grid(
        spec=spec,
        counts=counts.astype(np.int64),
        arrival_rows=arrival.astype(np.int64),
        dropped_events=header["dropped_events"],
    )


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
