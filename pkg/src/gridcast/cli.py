"""Command-line surface.

Subcommands: ingest, synth, grid, train-thread, train-reply,
grid-search, predict, adaptive, breakout, evaluate, sweep-d. Every
command reads settings from an optional --config JSON file with flags
overriding file values. Success prints a one-line JSON summary on
stdout and exits 0; failures print a one-line JSON error on stderr and
exit nonzero (2 for usage/config problems, 1 for runtime errors).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunSettings, load_settings, parse_float_list, parse_int_list
from .dataio import (
    load_grid,
    parse_events_with_stats,
    save_grid,
    serialize_events,
    write_csv,
)
from .evaluate import (
    SweepConfig,
    config_digest,
    evaluate_adaptive,
    evaluate_reply_counts,
    evaluate_thread_arrival,
    sweep_interval_length,
)
from .forecast import ForecastState, adaptive_forecast, breakout_curve
from .grid import (
    CHANNEL_SETS,
    Grid,
    TargetKind,
    assemble_features,
    build_grid,
    frontier_segments,
    rows_covering,
    slice_segments,
    window_at,
)
from .models import (
    SearchSpace,
    TrainConfig,
    arrival_time,
    build_model,
    grid_search,
    train,
)
from .synth import SynthParams, synth_generate


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) without a parsable line
        raise ConfigError(message)


def _say(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_SETTING_FLAGS = [
    ("--d", "d", float),
    ("--t0", "t0", float),
    ("--rows", "rows", int),
    ("--seed", "seed", int),
    ("--channels", "channels", str),
    ("--loss-mode", "loss_mode", str),
    ("--filter-shape", "filter_shape", str),
    ("--window-h", "window_h", int),
    ("--window-w", "window_w", int),
    ("--n-filters", "n_filters", int),
    ("--kernel-size", "kernel_size", int),
    ("--n-blocks", "n_blocks", int),
    ("--lr", "lr", float),
    ("--weight-decay", "weight_decay", float),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--train-frac", "train_frac", float),
    ("--lambda-thread", "lambda_thread", float),
    ("--mu-reply", "mu_reply", float),
    ("--theta", "theta", float),
    ("--horizon", "horizon", float),
    ("--breakout-fraction", "breakout_fraction", float),
    ("--breakout-boost", "breakout_boost", float),
    ("--n-threads", "n_threads", int),
    ("--n-intervals", "n_intervals", int),
    ("--n-start-points", "n_start_points", int),
    ("--span-seconds", "span_seconds", float),
    ("--context-cols", "context_cols", int),
    ("--horizon-intervals", "horizon_intervals", int),
    ("--search-filters", "search_filters", str),
    ("--search-kernels", "search_kernels", str),
    ("--search-blocks", "search_blocks", str),
    ("--budget-epochs", "budget_epochs", int),
]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON settings file")
    for flag, dest, typ in _SETTING_FLAGS:
        sub.add_argument(flag, dest=dest, type=typ, default=None)


def _settings(args) -> RunSettings:
    overrides = {
        dest: getattr(args, dest, None) for _, dest, _ in _SETTING_FLAGS
    }
    if getattr(args, "channels", None) is not None and args.channels not in CHANNEL_SETS:
        raise ConfigError(f"--channels must be one of {sorted(CHANNEL_SETS)}")
    return load_settings(getattr(args, "config", None), overrides)


def _stream(args):
    stream, _ = parse_events_with_stats(args.inp)
    if len(stream) == 0:
        raise ConfigError(f"{args.inp}: no cascades")
    return stream


def _grid_for(stream, s: RunSettings) -> Grid:
    rows = s.rows if s.rows > 0 else rows_covering(stream, s.d, s.t0)
    return build_grid(stream, s.d, s.t0, rows)


def _split(grid: Grid, frac: float) -> tuple[int, int]:
    """Time split: last rows and the threads arriving in them are test."""
    r_split = min(max(int(grid.spec.n_rows * frac), 1), grid.spec.n_rows - 1)
    col_split = int(np.searchsorted(grid.arrival_rows, r_split))
    return r_split, col_split


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> None:
    stream, stats = parse_events_with_stats(args.inp)
    if args.out:
        serialize_events(stream, args.out)
    _say(
        {
            "threads": stats.threads,
            "replies": stats.replies,
            "duplicates": stats.duplicates,
            "out": args.out or "",
        }
    )


def cmd_synth(args) -> None:
    s = _settings(args)
    params = SynthParams(
        lambda_thread=s.lambda_thread,
        mu_reply=s.mu_reply,
        theta=s.theta,
        horizon=s.horizon,
        breakout_fraction=s.breakout_fraction,
        breakout_boost=s.breakout_boost,
        seed=s.seed,
    )
    stream = synth_generate(params)
    serialize_events(stream, args.out)
    _say(
        {
            "threads": len(stream),
            "events": int(sum(c.size for c in stream.cascades)),
            "out": args.out,
        }
    )


def cmd_grid(args) -> None:
    s = _settings(args)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    save_grid(grid, args.out)
    _say(
        {
            "rows": grid.spec.n_rows,
            "cols": grid.spec.n_cols,
            "dropped": grid.dropped_events,
            "sha256": _sha256(args.out),
        }
    )


def _train_segments(grid, s: RunSettings, kind: str):
    tensor = assemble_features(grid, CHANNEL_SETS[s.channels])
    r_split, col_split = _split(grid, s.train_frac)
    if kind == "thread":
        segs = slice_segments(
            tensor, grid, s.window_h, s.window_w, TargetKind.THREAD_GAP,
            col_range=(0, col_split),
        )
    else:
        # windows track the arrived frontier so the supervised corner is
        # always a live cell; see frontier_segments
        segs = frontier_segments(
            tensor, grid, s.window_h, s.window_w, row_range=(0, r_split)
        )
    if not segs:
        raise ConfigError("training split produced no segments")
    return segs


def _train_one(args, kind: str) -> None:
    s = _settings(args)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    segs = _train_segments(grid, s, kind)
    model = build_model(s.model_config(kind), seed=s.seed)
    tc = TrainConfig(
        lr=s.lr, weight_decay=s.weight_decay, epochs=s.epochs,
        batch_size=s.batch_size, seed=s.seed,
    )
    history = train(model, segs, tc)
    meta = {
        "epochs": s.epochs,
        "final_loss": history[-1],
        "seed": s.seed,
        "segments": len(segs),
    }
    save_checkpoint(model, args.out, meta)
    _say({"final_loss": history[-1], "segments": len(segs), "out": args.out})


def cmd_train_thread(args) -> None:
    _train_one(args, "thread")


def cmd_train_reply(args) -> None:
    _train_one(args, "reply")


def cmd_grid_search(args) -> None:
    s = _settings(args)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    segs = _train_segments(grid, s, args.task)
    n_val = max(1, len(segs) // 5)
    train_segs, val_segs = segs[:-n_val], segs[-n_val:]
    space = SearchSpace(
        n_filters=tuple(parse_int_list(s.search_filters)),
        kernel_sizes=tuple(parse_int_list(s.search_kernels)),
        n_blocks=tuple(parse_int_list(s.search_blocks)),
    )
    tc = TrainConfig(
        lr=s.lr, weight_decay=s.weight_decay, epochs=s.epochs,
        batch_size=s.batch_size, seed=s.seed,
    )
    result = grid_search(
        s.model_config(args.task), train_segs, val_segs, tc, space,
        budget_epochs=s.budget_epochs or None, seed=s.seed,
    )
    if args.out:
        write_csv(
            args.out,
            ["n_filters", "kernel", "n_blocks", "val_loss"],
            [
                (e.config.n_filters, e.config.k_h, e.config.n_blocks, e.val_loss)
                for e in result.entries
            ],
        )
    best = result.best
    _say(
        {
            "best_n_filters": best.n_filters,
            "best_kernel": best.k_h,
            "best_n_blocks": best.n_blocks,
            "candidates": len(result.entries),
            "out": args.out or "",
        }
    )


def cmd_predict(args) -> None:
    s = _settings(args)
    model, _ = load_checkpoint(args.checkpoint)
    if args.grid:
        grid = load_grid(args.grid)
    else:
        grid = _grid_for(_stream(args), s)
    data = assemble_features(grid, model.channels).data
    h, w = model.window
    rows = []
    if model.kind == "thread":
        header = ["col", "o_hat", "t_next"]
        for j in range(grid.spec.n_cols):
            a = int(grid.arrival_rows[j])
            if a >= grid.spec.n_rows:
                continue
            win = window_at(data, a, j, h, w)
            o_hat = model.predict_gap(win, j + 1)
            t_prev = grid.spec.t0 + a * grid.spec.d
            rows.append((j, o_hat, arrival_time(t_prev, o_hat, grid.spec.d)))
    else:
        header = ["col", "next_count"]
        win = window_at(
            data, grid.spec.n_rows - 1, grid.spec.n_cols - 1, h, grid.spec.n_cols
        )
        pred = model.predict_next_row(win, grid.spec.n_rows)
        rows = [(j, float(pred[j])) for j in range(grid.spec.n_cols)]
    write_csv(args.out, header, rows)
    _say({"rows": len(rows), "kind": model.kind, "out": args.out})


def cmd_adaptive(args) -> None:
    s = _settings(args)
    thread_model, _ = load_checkpoint(args.thread_checkpoint)
    reply_model, _ = load_checkpoint(args.reply_checkpoint)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    state = ForecastState.from_grid(grid, thread_times=stream.thread_times.tolist())
    adaptive_forecast(state, thread_model, reply_model, s.n_threads, s.n_intervals)
    rows = [
        (k + 1, int(state.arrival_rows[grid.spec.n_cols + k]), t)
        for k, t in enumerate(state.simulated_thread_times)
    ]
    write_csv(args.out, ["step", "arrival_row", "time_seconds"], rows)
    if args.out_grid:
        save_grid(state.to_grid(), args.out_grid)
    _say(
        {
            "simulated_threads": len(rows),
            "rows_total": state.n_rows,
            "out": args.out,
            "out_grid": args.out_grid or "",
        }
    )


def cmd_breakout(args) -> None:
    s = _settings(args)
    reply_model, _ = load_checkpoint(args.checkpoint)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    if args.durations:
        durations = parse_float_list(args.durations)
    else:
        durations = [k * s.d for k in range(1, 11)]
    horizon = s.horizon_intervals if s.horizon_intervals >= 0 else None
    points = breakout_curve(
        stream, grid, reply_model, durations,
        horizon_intervals=horizon, context_cols=s.context_cols,
    )
    write_csv(
        args.out,
        ["start_duration_s", "correct_rate", "n"],
        [(p.start_duration, p.correct_rate, p.n) for p in points],
    )
    _say(
        {
            "points": len(points),
            "first_rate": points[0].correct_rate,
            "last_rate": points[-1].correct_rate,
            "out": args.out,
        }
    )


def cmd_evaluate(args) -> None:
    s = _settings(args)
    stream = _stream(args)
    grid = _grid_for(stream, s)
    r_split, col_split = _split(grid, s.train_frac)
    tt = stream.thread_times
    digest = config_digest({"task": args.task, "seed": s.seed, "d": s.d})
    reports = []
    if args.task == "thread":
        model, _ = load_checkpoint(args.checkpoint)
        idx = [
            j for j in range(col_split, grid.spec.n_cols - 1)
            if grid.arrival_rows[j] < grid.spec.n_rows
        ]
        reports.append(
            evaluate_thread_arrival(model, grid, tt, idx, digest=digest)
        )
    elif args.task == "reply":
        model, _ = load_checkpoint(args.checkpoint)
        reports.append(
            evaluate_reply_counts(
                model, grid, grid.spec.n_rows - r_split, start_row=r_split,
                digest=digest,
            )
        )
    else:
        thread_model, _ = load_checkpoint(args.thread_checkpoint)
        reply_model, _ = load_checkpoint(args.reply_checkpoint)
        th, rp = evaluate_adaptive(
            thread_model, reply_model, grid, tt,
            n_threads=s.n_threads, n_start_points=s.n_start_points,
            seed=s.seed, digest=digest,
        )
        reports = th + rp
    write_csv(
        args.out,
        ["task", "label", "unit", "n", "mae", "rmse", "stddev", "config_digest"],
        [
            (r.task.value, r.label, r.unit, r.n, r.mae, r.rmse, r.stddev, r.config_digest)
            for r in reports
        ],
    )
    _say({"reports": len(reports), "mae_first": reports[0].mae, "out": args.out})


def cmd_sweep_d(args) -> None:
    s = _settings(args)
    stream = _stream(args)
    cfg = SweepConfig(
        t0=s.t0,
        train_frac=s.train_frac,
        window=(s.window_h, s.window_w),
        channels=CHANNEL_SETS[s.channels],
        n_filters=s.n_filters,
        k=s.kernel_size,
        n_blocks=s.n_blocks,
        loss_mode=s.loss_mode,
        epochs=s.epochs,
        batch_size=s.batch_size,
        lr=s.lr,
        weight_decay=s.weight_decay,
        seed=s.seed,
        span_seconds=s.span_seconds,
    )
    result = sweep_interval_length(stream, parse_float_list(args.d_values), cfg)
    write_csv(
        args.out,
        ["d", "thread_mae_hours", "reply_mae_counts", "n_thread", "n_reply", "score"],
        [
            (r.d, r.thread_mae_hours, r.reply_mae_counts, r.n_thread, r.n_reply, sc)
            for r, sc in zip(result.rows, result.scores)
        ],
    )
    _say({"best_d": result.best_d, "candidates": len(result.rows), "out": args.out})


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="gridcast", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, func, **kwargs):
        p = subs.add_parser(name, **kwargs)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = sub("ingest", cmd_ingest, help="validate and canonicalise an event log")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default=None)

    p = sub("synth", cmd_synth, help="generate a synthetic event log")
    p.add_argument("--out", required=True)

    p = sub("grid", cmd_grid, help="bucket an event log into a grid file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub("train-thread", cmd_train_thread, help="train the thread-gap model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub("train-reply", cmd_train_reply, help="train the reply-count model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub("grid-search", cmd_grid_search, help="hyperparameter sweep")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", choices=["thread", "reply"], required=True)
    p.add_argument("--out", default=None)

    p = sub("predict", cmd_predict, help="write model predictions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default=None)
    p.add_argument("--in", dest="inp", default=None)
    p.add_argument("--out", required=True)

    p = sub("adaptive", cmd_adaptive, help="closed-loop cascade simulation")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--thread-checkpoint", required=True)
    p.add_argument("--reply-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-grid", default=None)

    p = sub("breakout", cmd_breakout, help="breakout classification curve")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--durations", default=None, help="comma list of seconds")
    p.add_argument("--out", required=True)

    p = sub("evaluate", cmd_evaluate, help="run an evaluation protocol")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", choices=["thread", "reply", "adaptive"], required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--thread-checkpoint", default=None)
    p.add_argument("--reply-checkpoint", default=None)
    p.add_argument("--out", required=True)

    p = sub("sweep-d", cmd_sweep_d, help="interval-length sensitivity sweep")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--d-values", required=True, help="comma list of seconds")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
