"""Telemetry and metrics serialization.

Telemetry is written either as CSV (header row, fixed column order) or as
JSON lines (one record object per line). Both start with a '#' comment
naming the units convention, and both preserve doubles exactly: floats are
rendered with the shortest representation that parses back to the same
bits. Column names embed their units as suffixes; quaternion components
are unitless and ordered w, x, y, z.
"""

import json

import numpy as np

from . import __version__
from . import simulation as sim

__all__ = [
    "telemetry_columns", "write_telemetry", "read_telemetry",
    "build_metrics_document", "write_metrics_document", "read_metrics_document",
]

UNITS_COMMENT = ("# units embedded in column names (_m, _mps, _radps, _N, _Nm);"
                 " quaternions unitless, ordered w,x,y,z")

_STATE_COLS = ("q_w", "q_x", "q_y", "q_z", "x_m", "y_m", "z_m",
               "vx_mps", "vy_mps", "vz_mps", "p_radps", "q_radps", "r_radps")
_WRENCH_COLS = ("F_hx_N", "F_hy_N", "F_hz_N", "M_hx_Nm", "M_hy_Nm", "M_hz_Nm")
_OBS_COLS = ("obs1_N", "obs2_N", "obs3_N", "obs4_Nm", "obs5_Nm", "obs6_Nm")


def telemetry_columns(estimators):
    """Fixed column order for the given estimator set."""
    cols = ["t_s"]
    cols += _STATE_COLS
    cols += _WRENCH_COLS
    cols += ["meas_" + c for c in _STATE_COLS[0:7]]
    cols += ["meas_p_radps", "meas_q_radps", "meas_r_radps"]
    for name in estimators:
        cols += [name + "_" + c for c in _STATE_COLS]
        cols += [name + "_" + c for c in _OBS_COLS]
        cols += [name + "_" + c for c in _WRENCH_COLS]
        cols.append(name + "_nis")
    cols += ["thrust_N", "Mx_Nm", "My_Nm", "Mz_Nm"]
    cols += ["rotor%d_N" % i for i in range(1, 9)]
    cols.append("saturated")
    return cols


def _estimator_order(names):
    return [n for n in ("qukf", "ekf") if n in names]


def flatten_run(run):
    """(columns, data) for a ScenarioRun; data rows follow telemetry_columns."""
    names = _estimator_order(run.tracks)
    cols = telemetry_columns(names)
    n = run.t.shape[0]
    parts = [run.t[:, None], run.truth, run.wrench_true, run.measurements]
    for name in names:
        tr = run.tracks[name]
        parts += [tr.states, tr.wrench, tr.nis[:, None]]
    parts += [run.controls, run.rotors, run.saturated[:, None].astype(float)]
    data = np.hstack(parts)
    if data.shape[1] != len(cols):
        raise AssertionError("telemetry layout drifted from its column list")
    return cols, data


def _rows_from_records(records):
    """Flatten TelemetryRecord objects into the same layout as flatten_run."""
    names = _estimator_order(records[0].estimates)
    cols = telemetry_columns(names)
    rows = np.empty((len(records), len(cols)))
    for i, rec in enumerate(records):
        vals = [rec.t]
        vals += list(rec.truth.as_vector())
        vals += list(rec.wrench.as_vector())
        vals += list(rec.measurement.q) + list(rec.measurement.r)
        vals += list(rec.measurement.omega)
        for name in names:
            snap = rec.estimates[name]
            vals += list(snap.state.as_vector()[:19])
            vals += list(snap.wrench.as_vector())
            vals.append(snap.nis)
        vals += [rec.control.thrust] + list(rec.control.moments)
        vals += list(rec.rotors)
        vals.append(float(rec.saturated))
        rows[i] = vals
    return cols, rows


def write_telemetry(run, path, format="csv"):
    """Write a ScenarioRun or a list of TelemetryRecord to path.

    format is 'csv' or 'jsonl'. Read-back via read_telemetry reproduces
    every value bit for bit.
    """
    if isinstance(run, sim.ScenarioRun):
        cols, data = flatten_run(run)
    else:
        records = list(run)
        if not records:
            raise ValueError("no telemetry records to write")
        cols, data = _rows_from_records(records)

    if format == "csv":
        lines = [UNITS_COMMENT, ",".join(cols)]
        for row in data:
            lines.append(",".join(repr(float(v)) for v in row))
    elif format == "jsonl":
        lines = [UNITS_COMMENT]
        for row in data:
            lines.append(json.dumps(dict(zip(cols, (float(v) for v in row)))))
    else:
        raise ValueError("format must be 'csv' or 'jsonl', got %r" % (format,))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_telemetry(path):
    """Read a telemetry file back as (columns, data array)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines()
                 if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError("%s: no telemetry content" % (path,))
    if lines[0].lstrip().startswith("{"):
        recs = [json.loads(ln) for ln in lines]
        cols = list(recs[0].keys())
        data = np.array([[r[c] for c in cols] for r in recs])
        return cols, data
    cols = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return cols, data


# ---------------------------------------------------------------------------
# Metrics documents
# ---------------------------------------------------------------------------

def build_metrics_document(report, config_digest, seed=None):
    """Self-describing metrics payload: report plus provenance fields."""
    return {
        "schema": "aerowrench-metrics/1",
        "code_version": __version__,
        "config_digest": config_digest,
        "seed": seed,
        "units": "embedded in channel name suffixes; times in seconds",
        "window_s": report.window_s,
        "duration_s": report.duration_s,
        "rmse": report.rmse,
        "improvement_pct": report.improvement_pct,
        "convergence_time_s": report.convergence_time_s,
        "mean_update_s": report.mean_update_s,
    }


def write_metrics_document(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics_document(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
