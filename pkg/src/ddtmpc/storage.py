"""File formats: data trajectories, run logs, metrics, and plot series.

Everything here is plain text (CSV, JSON, JSON lines) with round-trip-exact
float formatting, so repeated runs of the same seeded experiment produce
byte-identical files and any plotting tool can consume the series.
"""

import json
from pathlib import Path

import numpy as np

from .hankel import DataTrajectory


class DataFormatError(ValueError):
    """A file does not match the expected layout; message names the line."""


def _fmt(value):
    # repr of a Python float is the shortest string that round-trips
    return repr(float(value))


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def sidecar_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def save_data(data, csv_path, seed=None, generator=None):
    """Write a DataTrajectory as CSV plus a JSON sidecar.

    The CSV holds one row per step under the header ``k,u_1..u_m,y_1..y_p``;
    the sidecar records the shape and provenance fields ``{m, p, N, seed,
    generator}`` and round-trips bit-exactly.
    """
    csv_path = Path(csv_path)
    m, p = data.m, data.p
    header = (["k"] + [f"u_{i + 1}" for i in range(m)]
              + [f"y_{i + 1}" for i in range(p)])
    lines = [",".join(header)]
    for k in range(data.length):
        row = [str(k)] + [_fmt(v) for v in data.u[k]] + \
            [_fmt(v) for v in data.y[k]]
        lines.append(",".join(row))
    _write_text(csv_path, "\n".join(lines) + "\n")
    sidecar = {"m": m, "p": p, "N": data.length,
               "seed": seed, "generator": generator}
    _write_text(sidecar_path(csv_path), json.dumps(sidecar, indent=2) + "\n")
    return csv_path


def load_data(csv_path):
    """Read a data CSV (and its sidecar when present).

    Returns:
        ``(DataTrajectory, sidecar_dict_or_None)``.

    Raises:
        DataFormatError: On any malformed content; the message carries the
            offending 1-based line number.
    """
    csv_path = Path(csv_path)
    try:
        raw = csv_path.read_text(encoding="utf-8")
    except OSError as err:
        raise DataFormatError(f"cannot read {csv_path}: {err}") from err
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{csv_path}: line 1: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    m = sum(1 for h in header if h.startswith("u_"))
    p = sum(1 for h in header if h.startswith("y_"))
    expected = (["k"] + [f"u_{i + 1}" for i in range(m)]
                + [f"y_{i + 1}" for i in range(p)])
    if m == 0 or p == 0 or header != expected:
        raise DataFormatError(
            f"{csv_path}: line 1: header must read k,u_1..u_m,y_1..y_p,"
            f" got {lines[0]!r}")
    u_rows, y_rows = [], []
    for idx, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 1 + m + p:
            raise DataFormatError(
                f"{csv_path}: line {idx}: expected {1 + m + p} columns,"
                f" got {len(cells)}")
        try:
            k = int(cells[0])
            values = [float(c) for c in cells[1:]]
        except ValueError as err:
            raise DataFormatError(
                f"{csv_path}: line {idx}: {err}") from err
        if k != idx - 2:
            raise DataFormatError(
                f"{csv_path}: line {idx}: time index {k} out of order")
        u_rows.append(values[:m])
        y_rows.append(values[m:])
    data = DataTrajectory(np.array(u_rows), np.array(y_rows))
    side = sidecar_path(csv_path)
    sidecar = None
    if side.exists():
        sidecar = json.loads(side.read_text(encoding="utf-8"))
        for key, val in (("m", m), ("p", p), ("N", data.length)):
            if sidecar.get(key) != val:
                raise DataFormatError(
                    f"{side}: field {key!r} says {sidecar.get(key)},"
                    f" but the CSV has {val}")
    return data, sidecar


def save_log_csv(log, path):
    """Flat per-step table: t, inputs, outputs, equilibrium pair, cost,
    status."""
    if log.records:
        m = log.records[0].u_applied.shape[0]
        p = log.records[0].y_measured.shape[0]
    else:
        m = p = 0
    header = (["t"] + [f"u_{i + 1}" for i in range(m)]
              + [f"y_{i + 1}" for i in range(p)]
              + [f"us_{i + 1}" for i in range(m)]
              + [f"ys_{i + 1}" for i in range(p)]
              + ["cost", "status"])
    lines = [",".join(header)]
    for rec in log.records:
        row = ([str(rec.t)]
               + [_fmt(v) for v in rec.u_applied]
               + [_fmt(v) for v in rec.y_measured]
               + [_fmt(v) for v in rec.u_s]
               + [_fmt(v) for v in rec.y_s]
               + [_fmt(rec.cost_regularized), rec.status])
        lines.append(",".join(row))
    _write_text(path, "\n".join(lines) + "\n")
    return Path(path)


def _record_dict(rec):
    out = {
        "t": rec.t,
        "u_applied": [float(v) for v in rec.u_applied],
        "y_measured": [float(v) for v in rec.y_measured],
        "u_s": [float(v) for v in rec.u_s],
        "y_s": [float(v) for v in rec.y_s],
        "cost_regularized": rec.cost_regularized,
        "cost_unregularized": rec.cost_unregularized,
        "solver_iterations": rec.solver_iterations,
        "status": rec.status,
    }
    if rec.predicted_u is not None:
        out["predicted_u"] = [[float(v) for v in row]
                              for row in rec.predicted_u]
        out["predicted_y"] = [[float(v) for v in row]
                              for row in rec.predicted_y]
    return out


def save_log_jsonl(log, path):
    """One JSON object per line: a header describing the schedule segments,
    then every step record (snapshot steps keep their predicted windows)."""
    header = {
        "kind": "header",
        "aborted_at": log.aborted_at,
        "abort_reason": log.abort_reason,
        "references": [{
            "start": ref.start,
            "end": ref.end,
            "y_target": [float(v) for v in np.ravel(ref.target.y)],
            "u_ref": [float(v) for v in np.ravel(ref.u_ref)],
            "y_ref": [float(v) for v in np.ravel(ref.y_ref)],
        } for ref in log.references],
    }
    lines = [json.dumps(header)]
    for rec in log.records:
        lines.append(json.dumps({"kind": "step", **_record_dict(rec)}))
    _write_text(path, "\n".join(lines) + "\n")
    return Path(path)


class LogBundle:
    """A log as read back from JSON lines: plain dicts, no solver objects."""

    def __init__(self, header, steps):
        self.header = header
        self.steps = steps

    @property
    def references(self):
        return self.header["references"]

    def has_predictions(self):
        return any("predicted_y" in s for s in self.steps)


def load_log_jsonl(path):
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err}") from err
    header = None
    steps = []
    for idx, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataFormatError(
                f"{path}: line {idx}: {err}") from err
        kind = obj.get("kind")
        if kind == "header":
            header = obj
        elif kind == "step":
            steps.append(obj)
        else:
            raise DataFormatError(
                f"{path}: line {idx}: unknown record kind {kind!r}")
    if header is None:
        raise DataFormatError(f"{path}: line 1: missing header record")
    return LogBundle(header, steps)


def _finite_or_none(value):
    value = float(value)
    return value if np.isfinite(value) else None


def save_metrics(metrics, path):
    """RunMetrics as a single JSON document."""
    doc = {
        "final_error": _finite_or_none(metrics.final_error),
        "settling_time": metrics.settling_time,
        "max_input_violation": metrics.max_input_violation,
        "max_output_violation": metrics.max_output_violation,
        "decay": {
            "rate": _finite_or_none(metrics.decay.rate),
            "r_squared": _finite_or_none(metrics.decay.r_squared),
            "fit_length": metrics.decay.fit_length,
            "degenerate": metrics.decay.degenerate,
        },
        "per_segment": metrics.per_segment,
        "cost_decrease": [float(v) for v in metrics.cost_decrease],
        "stage_costs": [float(v) for v in metrics.stage_costs],
        "state_error": [float(v) for v in metrics.state_error],
    }
    _write_text(path, json.dumps(doc, indent=2) + "\n")
    return Path(path)


def _series_lines(pairs):
    lines = ["t,value"]
    lines.extend(f"{t},{_fmt(v)}" for t, v in pairs)
    return "\n".join(lines) + "\n"


def emit_plot_series(bundle, out_dir):
    """Write per-channel (t, value) series files for one run.

    Produces the closed-loop outputs, the artificial-equilibrium outputs,
    the active target line, and one series per stored predicted window.

    Args:
        bundle: LogBundle (from ``load_log_jsonl``).
        out_dir: Directory for the series files; created if needed.

    Returns:
        List of written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = bundle.steps
    if not steps:
        raise DataFormatError("log holds no step records")
    p = len(steps[0]["y_measured"])
    written = []

    def emit(name, pairs):
        path = out_dir / name
        _write_text(path, _series_lines(pairs))
        written.append(path)

    for i in range(p):
        emit(f"closed_loop_y{i + 1}.csv",
             [(s["t"], s["y_measured"][i]) for s in steps])
        emit(f"equilibrium_y{i + 1}.csv",
             [(s["t"], s["y_s"][i]) for s in steps])
        target_pairs = []
        for ref in bundle.references:
            for t in range(ref["start"], min(ref["end"], len(steps))):
                target_pairs.append((t, ref["y_target"][i]))
        emit(f"target_y{i + 1}.csv", target_pairs)

    for s in steps:
        if "predicted_y" not in s:
            continue
        t0 = s["t"]
        for i in range(p):
            emit(f"prediction_t{t0}_y{i + 1}.csv",
                 [(t0 + k, row[i]) for k, row in enumerate(s["predicted_y"])])
    return written
