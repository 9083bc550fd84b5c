"""Dataset persistence: a flat binary container for trajectory datasets and
a CSV schema shared by export and ingestion.

Binary layout: an 8-byte magic, six little-endian uint64 header words
(state dim, obs dim, mode count, horizon, trajectory count, labels flag),
then per trajectory the initial state, states, observations and (when the
flag is set) mode labels, all as little-endian float64.

CSV schema: one row per step with columns traj, t, x1..xs, y1..yo, j.
Rows with t = 0 carry the initial state (y and j cells empty); mode cells
are empty when labels are hidden.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .ssm import Trajectory

_MAGIC = b"JMFTRJ01"
_HEADER = struct.Struct("<6Q")


class StorageFormatError(ValueError):
    """A file does not match the expected layout; the message names the
    offending row or column where that is known."""


def _labels_or_none(trajectory: Trajectory):
    if not trajectory.labels_visible:
        return None
    try:
        return trajectory.mode_labels
    except Exception:
        return None


def save_trajectories(path, trajectories, num_modes: int | None = None) -> None:
    """Write a fixed-horizon dataset to ``path`` (see the module docstring
    for the layout). Mode labels are stored only if every trajectory carries
    visible labels."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("refusing to write an empty dataset")
    T = trajectories[0].horizon
    s = trajectories[0].states.shape[1]
    o = trajectories[0].observations.shape[1]
    if any(tr.horizon != T or tr.states.shape[1] != s
           or tr.observations.shape[1] != o for tr in trajectories):
        raise ValueError("all trajectories must share horizon and dimensions")
    labels = [_labels_or_none(tr) for tr in trajectories]
    has_labels = all(lab is not None for lab in labels)
    if num_modes is None:
        num_modes = int(max(lab.max() for lab in labels)) if has_labels else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(s, o, num_modes, T, len(trajectories), int(has_labels)))
        for tr, lab in zip(trajectories, labels):
            fh.write(np.ascontiguousarray(tr.x0, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(tr.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(tr.observations, dtype="<f8").tobytes())
            if has_labels:
                fh.write(np.ascontiguousarray(lab, dtype="<f8").tobytes())


def load_trajectories(path):
    """Read a dataset written by save_trajectories; returns (trajectories,
    num_modes)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise StorageFormatError(f"{path}: not a trajectory container (bad magic)")
    s, o, M, T, count, has_labels = _HEADER.unpack_from(raw, 8)
    per = (s + T * s + T * o + (T if has_labels else 0)) * 8
    expected = 8 + _HEADER.size + per * count
    if len(raw) != expected:
        raise StorageFormatError(
            f"{path}: expected {expected} bytes for {count} trajectories, found {len(raw)}")
    out = []
    offset = 8 + _HEADER.size
    for _ in range(count):
        block = np.frombuffer(raw, dtype="<f8", count=per // 8, offset=offset)
        offset += per
        pos = 0
        x0 = block[pos:pos + s]
        pos += s
        states = block[pos:pos + T * s].reshape(T, s)
        pos += T * s
        obs = block[pos:pos + T * o].reshape(T, o)
        pos += T * o
        labels = None
        if has_labels:
            labels = block[pos:pos + T].astype(np.int64)
        out.append(Trajectory(x0, states, obs, labels))
    return out, int(M)


def _fmt(value: float) -> str:
    return repr(float(value))


def export_dataset_csv(path, trajectories) -> None:
    """Write trajectories as CSV (module docstring schema). Round trips with
    ingest_dataset_csv up to float formatting, which repr makes exact."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("refusing to write an empty dataset")
    s = trajectories[0].states.shape[1]
    o = trajectories[0].observations.shape[1]
    header = (["traj", "t"] + [f"x{i+1}" for i in range(s)]
              + [f"y{i+1}" for i in range(o)] + ["j"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, tr in enumerate(trajectories):
            labels = _labels_or_none(tr)
            writer.writerow([idx, 0] + [_fmt(v) for v in tr.x0]
                            + [""] * o + [""])
            for t in range(tr.horizon):
                row = [idx, t + 1]
                row += [_fmt(v) for v in tr.states[t]]
                row += [_fmt(v) for v in tr.observations[t]]
                row.append("" if labels is None else int(labels[t]))
                writer.writerow(row)


def _parse_cell(row_num: int, name: str, value: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise StorageFormatError(
            f"row {row_num}: column {name!r} is not a number: {value!r}") from None


def ingest_dataset_csv(path, state_dim: int, obs_dim: int,
                       columns: dict | None = None):
    """Read trajectories from CSV.

    ``columns`` remaps the schema: keys "traj", "t", "mode" name single
    columns, "x" and "y" list the state and observation columns in order.
    A missing traj column treats the file as one trajectory; t = 0 rows
    carry the initial state (zeros when absent); the mode column is
    optional. Malformed files raise StorageFormatError naming the row and
    column."""
    columns = dict(columns or {})
    x_cols = columns.get("x", [f"x{i+1}" for i in range(state_dim)])
    y_cols = columns.get("y", [f"y{i+1}" for i in range(obs_dim)])
    t_col = columns.get("t", "t")
    traj_col = columns.get("traj", "traj")
    mode_col = columns.get("mode", "j")
    if len(x_cols) != state_dim or len(y_cols) != obs_dim:
        raise ValueError("column map must list state_dim x and obs_dim y columns")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise StorageFormatError(f"{path}: empty file")
        fields = set(reader.fieldnames)
        for name in [t_col, *x_cols]:
            if name not in fields:
                raise StorageFormatError(f"{path}: missing column {name!r}")
        missing_y = [name for name in y_cols if name not in fields]
        if missing_y:
            raise StorageFormatError(f"{path}: missing column {missing_y[0]!r}")
        have_traj = traj_col in fields
        have_mode = mode_col in fields
        groups: dict = {}
        order: list = []
        for row_num, row in enumerate(reader, start=2):
            key = row[traj_col] if have_traj else "0"
            if key not in groups:
                groups[key] = []
                order.append(key)
            t = _parse_cell(row_num, t_col, row[t_col])
            if t != int(t) or t < 0:
                raise StorageFormatError(
                    f"row {row_num}: column {t_col!r} must be a step index >= 0, got {row[t_col]!r}")
            x = [_parse_cell(row_num, name, row[name]) for name in x_cols]
            y = j = None
            if int(t) > 0:
                y = [_parse_cell(row_num, name, row[name]) for name in y_cols]
                if have_mode and (row[mode_col] or "").strip():
                    j = int(_parse_cell(row_num, mode_col, row[mode_col]))
                    if j < 1:
                        raise StorageFormatError(
                            f"row {row_num}: column {mode_col!r} must be a 1-based mode label")
            groups[key].append((int(t), x, y, j, row_num))
    out = []
    for key in order:
        rows = sorted(groups[key], key=lambda item: item[0])
        x0 = np.zeros(state_dim)
        if rows and rows[0][0] == 0:
            x0 = np.asarray(rows[0][1])
            rows = rows[1:]
        if not rows:
            raise StorageFormatError(f"trajectory {key!r} has no steps")
        steps = [item[0] for item in rows]
        if steps != list(range(1, len(rows) + 1)):
            bad = next(t for i, t in enumerate(steps) if t != i + 1)
            raise StorageFormatError(
                f"trajectory {key!r}: steps must run 1..T without gaps, found t={bad}")
        states = np.array([item[1] for item in rows])
        obs = np.array([item[2] for item in rows])
        labels = [item[3] for item in rows]
        if any(lab is None for lab in labels):
            labels = None
        out.append(Trajectory(x0, states, obs,
                              None if labels is None else np.array(labels)))
    return out


def write_rows_csv(path, fieldnames, rows) -> None:
    """Write dict rows to CSV with a fixed column order (missing keys empty)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
