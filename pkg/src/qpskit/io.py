"""Versioned file formats for every pipeline stage.

JSON documents are written with sorted keys and two-space indent; floats
use Python's shortest round-trip repr and non-finite values become null.
CSV time series have a fixed column order:

    samples.csv / corrected.csv   epoch, sensor_id, f_par_MHz, f_perp_MHz, present
    fwhm_grid.csv                 ix, iy, iz, x_nm, y_nm, z_nm, fwhm_nm

All writes go to a temporary file in the target folder that is renamed
into place, so a failed run never leaves a half-written output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import NVSensor, SensorFrame
from .errors import QPSError
from .events import Assignment, DefectCluster, DiffEvent
from .qps import LocalizationResult
from .telegraph import ChargeTrace, PointDefect

SCHEMA_VERSION = 1
SAMPLE_COLUMNS = ("epoch", "sensor_id", "f_par_MHz", "f_perp_MHz", "present")
GRID_COLUMNS = ("ix", "iy", "iz", "x_nm", "y_nm", "z_nm", "fwhm_nm")


_UMASK = os.umask(0)
os.umask(_UMASK)


class DataFormatError(QPSError, ValueError):
    """An input data file is missing fields or has the wrong schema."""


# ---------------------------------------------------------------------------
# writing


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


def jsonable(obj):
    """Recursively convert numpy types; NaN and inf become None."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps(obj).encode())


def read_json(path, kind: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DataFormatError(f"{path}: expected a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise DataFormatError(f"{path}: expected kind {kind!r}, got {doc.get('kind')!r}")
    return doc


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _arr(x) -> np.ndarray:
    """Inverse of jsonable for numeric arrays (None -> NaN)."""
    return np.array(x, dtype=float) if x is not None else np.array([], dtype=float)


# ---------------------------------------------------------------------------
# samples


def samples_csv(values, sensor_ids) -> str:
    values = np.asarray(values, dtype=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for t in range(values.shape[0]):
        for i, sid in enumerate(sensor_ids):
            fp, fq = values[t, i]
            present = bool(np.isfinite(fp) and np.isfinite(fq))
            w.writerow((t, sid, _fmt(fp) if present else "", _fmt(fq) if present else "", int(present)))
    return buf.getvalue()


def write_samples(path, values, sensor_ids) -> None:
    atomic_write_bytes(path, samples_csv(values, sensor_ids).encode())


def read_samples(path, sensor_ids=None):
    """Read a samples CSV into ``(values (T, n, 2), sensor_ids)``.

    With ``sensor_ids`` given, columns follow that order and unknown ids are
    rejected. Epochs must run 0..T-1; a sensor absent from an epoch counts
    as missing.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SAMPLE_COLUMNS:
            raise DataFormatError(f"{path}: header must be {','.join(SAMPLE_COLUMNS)}")
        rows = []
        for k, row in enumerate(reader, start=2):
            if len(row) != len(SAMPLE_COLUMNS):
                raise DataFormatError(f"{path}: line {k}: expected {len(SAMPLE_COLUMNS)} fields")
            try:
                t, sid, present = int(row[0]), int(row[1]), int(row[4])
                fp = float(row[2]) if present else np.nan
                fq = float(row[3]) if present else np.nan
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {k}: {exc}") from None
            rows.append((t, sid, fp, fq))
    if sensor_ids is None:
        sensor_ids = sorted({r[1] for r in rows})
    col = {sid: i for i, sid in enumerate(sensor_ids)}
    T = max((r[0] for r in rows), default=-1) + 1
    values = np.full((T, len(sensor_ids), 2), np.nan)
    for t, sid, fp, fq in rows:
        if sid not in col:
            raise DataFormatError(f"{path}: unknown sensor id {sid}")
        if t < 0:
            raise DataFormatError(f"{path}: negative epoch {t}")
        values[t, col[sid]] = fp, fq
    return values, list(sensor_ids)


# ---------------------------------------------------------------------------
# domain objects


def sensor_to_dict(s: NVSensor) -> dict:
    return {
        "id": s.id,
        "position_nm": s.position,
        "frame": {"x_hat": s.frame.x_hat, "y_hat": s.frame.y_hat, "z_hat": s.frame.z_hat},
        "strain_perp_V_per_cm": s.strain_perp,
        "d_par_MHz_per_V_per_cm": s.d_par,
        "d_perp_MHz_per_V_per_cm": s.d_perp,
    }


def sensor_from_dict(d: dict) -> NVSensor:
    f = d["frame"]
    frame = SensorFrame(_arr(f["x_hat"]), _arr(f["y_hat"]), _arr(f["z_hat"]))
    return NVSensor(int(d["id"]), _arr(d["position_nm"]), frame, _arr(d["strain_perp_V_per_cm"]),
                    float(d["d_par_MHz_per_V_per_cm"]), float(d["d_perp_MHz_per_V_per_cm"]))


def defect_to_dict(d: PointDefect) -> dict:
    return {"id": d.id, "position_nm": d.position, "flip_prob": d.flip_prob,
            "charge_e": d.charge_when_occupied, "initial_occupied": d.initial_occupied}


def defect_from_dict(d: dict) -> PointDefect:
    return PointDefect(int(d["id"]), _arr(d["position_nm"]), float(d["flip_prob"]), float(d["charge_e"]),
                       bool(d["initial_occupied"]))


def trace_to_dict(tr: ChargeTrace) -> dict:
    """Run-length form: initial state plus the epochs where the state toggles."""
    occ = tr.occupancy.astype(int)
    toggles = np.flatnonzero(np.diff(occ)) + 1
    return {"id": tr.defect_id, "n_epochs": len(occ), "initial": int(occ[0]) if len(occ) else 0,
            "toggle_epochs": toggles}


def trace_from_dict(d: dict) -> ChargeTrace:
    occ = np.zeros(int(d["n_epochs"]), dtype=np.int8)
    state = int(d["initial"])
    last = 0
    for t in list(d["toggle_epochs"]) + [len(occ)]:
        occ[last:t] = state
        state, last = 1 - state, t
    return ChargeTrace(int(d["id"]), occ)


def event_to_dict(ev: DiffEvent) -> dict:
    return {"epoch": ev.epoch, "vector_MHz": ev.vector, "valid_sensors": ev.valid_mask,
            "folded": ev.folded, "fold_sign": ev.fold_sign, "pivot": ev.pivot}


def event_from_dict(d: dict) -> DiffEvent:
    return DiffEvent(int(d["epoch"]), _arr(d["vector_MHz"]), np.array(d["valid_sensors"], dtype=bool),
                     bool(d["folded"]), int(d["fold_sign"]), None if d["pivot"] is None else int(d["pivot"]))


def cluster_to_dict(c: DefectCluster) -> dict:
    return {"id": c.id, "mean_vector_MHz": c.mean_vector, "vector_std_MHz": c.vector_std,
            "count_plus": c.count_plus, "count_minus": c.count_minus, "n_valid": c.n_valid,
            "pivot": c.pivot, "size": c.size, "members": [event_to_dict(e) for e in c.member_events]}


def cluster_from_dict(d: dict) -> DefectCluster:
    return DefectCluster(int(d["id"]), [event_from_dict(e) for e in d["members"]], _arr(d["mean_vector_MHz"]),
                         _arr(d["vector_std_MHz"]), int(d["count_plus"]), int(d["count_minus"]),
                         _arr(d["n_valid"]), int(d["pivot"]))


def assignment_to_dict(a: Assignment) -> dict:
    return {"epoch": a.epoch, "cluster_id": a.cluster_id, "direction": a.direction, "distance": a.distance,
            "ambiguous": a.ambiguous, "paired": a.paired}


def assignment_from_dict(d: dict) -> Assignment:
    return Assignment(int(d["epoch"]), int(d["cluster_id"]), int(d["direction"]),
                      np.nan if d["distance"] is None else float(d["distance"]),
                      bool(d["ambiguous"]), bool(d["paired"]))


def _float(x) -> float:
    return np.inf if x is None else float(x)


def result_to_dict(r: LocalizationResult) -> dict:
    return {
        "position_nm": r.position,
        "spherical": {"r_nm": r.spherical[0], "theta_rad": r.spherical[1], "phi_rad": r.spherical[2]},
        "objective_min": r.objective_min,
        "dof": r.dof,
        "p_value": r.p_value,
        "covariance_nm2": r.covariance,
        "sigma_principal_nm": r.sigma_principal,
        "principal_axes": r.principal_axes,
        "sigma_3d_bar_nm": r.sigma_3d_bar,
        "fwhm_nm": r.fwhm,
        "fwhm_best_nm": r.fwhm_best,
        "fwhm_r_phi_nm": r.fwhm_r_phi,
        "charge_polarity_e": r.charge_polarity_assumed,
        "event_sign": r.event_sign,
        "n_valid": r.n_valid,
        "flags": list(r.flags),
        "objective_by_charge": {repr(float(k)): v for k, v in sorted(r.alternatives.items())},
    }


def result_from_dict(d: dict) -> LocalizationResult:
    """Inverse of result_to_dict; null (non-finite) entries come back as inf."""
    sph = d["spherical"]
    return LocalizationResult(
        position=_arr(d["position_nm"]),
        objective_min=_float(d["objective_min"]),
        dof=int(d["dof"]),
        p_value=_float(d["p_value"]),
        covariance=np.array([[_float(x) for x in row] for row in d["covariance_nm2"]]),
        sigma_principal=np.array([_float(x) for x in d["sigma_principal_nm"]]),
        principal_axes=np.array([[_float(x) for x in row] for row in d["principal_axes"]]),
        sigma_3d_bar=_float(d["sigma_3d_bar_nm"]),
        fwhm=_float(d["fwhm_nm"]),
        charge_polarity_assumed=float(d["charge_polarity_e"]),
        event_sign=int(d["event_sign"]),
        n_valid=int(d["n_valid"]),
        spherical=np.array([sph["r_nm"], sph["theta_rad"], sph["phi_rad"]], dtype=float),
        fwhm_best=_float(d["fwhm_best_nm"]),
        fwhm_r_phi=_float(d["fwhm_r_phi_nm"]),
        flags=tuple(d["flags"]),
        alternatives={float(k): _float(v) for k, v in d["objective_by_charge"].items()},
    )


# ---------------------------------------------------------------------------
# accuracy grid


def fwhm_grid_csv(amap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    x, y, z = amap.grid.axes()
    vals = amap.fwhm_values
    for i in range(len(x)):
        xs = _fmt(x[i])
        for j in range(len(y)):
            ys = _fmt(y[j])
            for k in range(len(z)):
                w.writerow((i, j, k, xs, ys, _fmt(z[k]), _fmt(vals[i, j, k])))
    return buf.getvalue()
