"""Split spectral diffusion into resolved-defect, sensor-mutual and common-mode parts.

Given the flip assignments from event analysis, each resolved defect gets a
binary occupancy trace. Its cluster mean times the occupancy change is
subtracted from the spectra, and a spatially uniform background field is
then fitted epoch by epoch to what remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DEFAULT_CONSTANTS, NVSensor, PhysicsConstants
from .errors import INCONSISTENT_TRACE, RANK_DEFICIENT
from .events import Assignment, DefectCluster
from .telegraph import ChargeTrace, sensor_mutual_fields, sensor_response


@dataclass
class DecompositionReport:
    defect_traces: list  # ChargeTrace per resolved cluster, in cluster order
    background: np.ndarray  # (T, 3) V/cm, NaN where no estimate
    corrected: np.ndarray  # (T, n, 2) MHz
    residual_std: np.ndarray  # (n, 2) MHz, corrected series
    std_before: np.ndarray  # (n, 2)
    peak_to_peak_before: np.ndarray  # (n, 2)
    peak_to_peak_after: np.ndarray  # (n, 2)
    flags: dict = field(default_factory=dict)  # name -> list of cluster ids or epochs

    @property
    def reduction(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.peak_to_peak_before / self.peak_to_peak_after


def subtract_sensor_mutual_fields(values, sensor_charges, sensors: Sequence[NVSensor], response: str = "exact",
                                  constants: PhysicsConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Remove each sensor's response to the other sensors' charges.

    ``sensor_charges`` is (T, n) in e relative to the sensing charge state.
    """
    values = np.asarray(values, dtype=float)
    if sensor_charges is None:
        return values.copy()
    fields = sensor_mutual_fields(sensors, sensor_charges, constants)
    return values - sensor_response(sensors, fields, response)


def reconstruct_traces(assignments: Sequence[Assignment], n_epochs: int, cluster_ids: Sequence[int]):
    """Integrate signed flips into one binary trace per cluster.

    ``Assignment.epoch`` t is the difference between samples t-1 and t, so a
    flip there changes the occupancy from sample t on. The first flip fixes
    the initial state: a +1 flip means the defect started empty. A flip that
    repeats the current state is flagged and ignored.

    Returns ``(traces, inconsistent_cluster_ids)``.
    """
    by_cluster = {cid: [] for cid in cluster_ids}
    last = -1
    for a in assignments:
        if a.epoch < last:
            raise ValueError("assignments must be time-ordered")
        last = a.epoch
        if a.cluster_id in by_cluster:
            by_cluster[a.cluster_id].append(a)
    traces, bad = [], []
    for cid in cluster_ids:
        flips = by_cluster[cid]
        occ = np.zeros(n_epochs, dtype=np.int8)
        if flips:
            state = 0 if flips[0].direction > 0 else 1
            occ[:] = state
            inconsistent = False
            for a in flips:
                target = 1 if a.direction > 0 else 0
                if target == state:
                    inconsistent = True
                    continue
                state = target
                occ[a.epoch:] = state
            if inconsistent:
                bad.append(cid)
        traces.append(ChargeTrace(cid, occ))
    return traces, bad


def response_matrix(sensors: Sequence[NVSensor]) -> np.ndarray:
    """(2n, 3) linearized map from a uniform field to the stacked observables."""
    rows = []
    for s in sensors:
        rows.append(s.d_par * s.n_par)
        rows.append(s.d_perp * s.n_perp)
    return np.array(rows)


def fit_background(residuals, sensors: Sequence[NVSensor], min_components: int = 4):
    """Per-epoch least-squares uniform field behind (T, n, 2) residual shifts.

    Returns ``(field (T, 3), fit_residuals (T, n, 2), rank_deficient_epochs)``.
    Epochs with fewer than ``min_components`` valid components get NaN.
    Rank-deficient epochs get the minimum-norm solution and are listed.
    """
    R = np.asarray(residuals, dtype=float)
    T, n = R.shape[:2]
    A = response_matrix(sensors)
    Y = R.reshape(T, 2 * n)
    valid = np.isfinite(Y)
    E = np.full((T, 3), np.nan)
    fit_res = np.full_like(Y, np.nan)
    deficient = []
    # epochs sharing a validity pattern share one pseudo-inverse
    patterns, inverse = np.unique(valid, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for k, mask in enumerate(patterns):
        idx = np.flatnonzero(inverse == k)
        if mask.sum() < min_components:
            continue
        Am = A[mask]
        pinv = np.linalg.pinv(Am)
        E[idx] = Y[idx][:, mask] @ pinv.T
        fit_res[np.ix_(idx, np.flatnonzero(mask))] = Y[idx][:, mask] - E[idx] @ Am.T
        if np.linalg.matrix_rank(Am) < 3:
            deficient.extend(int(t) for t in idx)
    return E, fit_res.reshape(T, n, 2), sorted(deficient)


def resolved_shifts(traces: Sequence[ChargeTrace], clusters: Sequence[DefectCluster], n_sensors: int) -> np.ndarray:
    """(T, n, 2) shift of each resolved defect relative to its epoch-0 state."""
    if not traces:
        return np.zeros((0, n_sensors, 2))
    occ = np.stack([t.occupancy for t in traces], axis=1).astype(float)
    M = np.array([np.nan_to_num(c.mean_vector) for c in clusters])
    return ((occ - occ[0]) @ M).reshape(len(occ), n_sensors, 2)


def _stats(x, rows):
    sub = x[rows]
    if len(sub) == 0:
        nan = np.full(x.shape[1:], np.nan)
        return nan, nan
    return sub.std(axis=0), sub.max(axis=0) - sub.min(axis=0)


def corrected_spectra(values, traces: Sequence[ChargeTrace], clusters: Sequence[DefectCluster],
                      sensors: Sequence[NVSensor], fit_common_mode: bool = True):
    """Subtract resolved-defect shifts, then the fitted common-mode field.

    The background is fitted to deviations from each component's mean after
    the resolved shifts are removed, so it carries no static offset.
    Returns ``(corrected, background, rank_deficient_epochs)``.
    """
    values = np.asarray(values, dtype=float)
    T, n = values.shape[:2]
    out = values.copy()
    if traces:
        out -= resolved_shifts(traces, clusters, n)
    background = np.full((T, 3), np.nan)
    deficient = []
    if fit_common_mode and T:
        with np.errstate(invalid="ignore"):
            baseline = np.nanmean(out, axis=0)
        background, _, deficient = fit_background(out - baseline, sensors)
        shift = (np.nan_to_num(background) @ response_matrix(sensors).T).reshape(T, n, 2)
        out -= shift
    return out, background, deficient


def decompose(values, sensors: Sequence[NVSensor], clusters: Sequence[DefectCluster],
              assignments: Sequence[Assignment], sensor_charges=None, response: str = "exact",
              fit_common_mode: bool = True,
              constants: PhysicsConstants = DEFAULT_CONSTANTS) -> DecompositionReport:
    """Full decomposition of a (T, n, 2) spectral array."""
    values = np.asarray(values, dtype=float)
    T, n = values.shape[:2]
    clean = subtract_sensor_mutual_fields(values, sensor_charges, sensors, response, constants)
    traces, bad = reconstruct_traces(assignments, T, [c.id for c in clusters])
    corrected, background, deficient = corrected_spectra(clean, traces, clusters, sensors, fit_common_mode)
    # statistics only over epochs where every sensor reports
    rows = np.all(np.isfinite(values), axis=(1, 2))
    std_before, p2p_before = _stats(values, rows)
    std_after, p2p_after = _stats(corrected, rows)
    flags = {}
    if bad:
        flags[INCONSISTENT_TRACE] = bad
    if deficient:
        flags[RANK_DEFICIENT] = deficient
    return DecompositionReport(traces, background, corrected, std_after, std_before, p2p_before, p2p_after, flags)
