"""Analytic physics layer: pseudo-SOC, rest-segment OCV table, dynamic residual.

Terminal voltage is split as ``V = OCV(soc) + V_dyn``. The OCV part comes
from a 128-point lookup table built from rest-segment endpoints; ``V_dyn``
is what the neural forecaster learns.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import DataError, SampleSeries

GRID_POINTS = 128
REST_CURRENT_A = 0.02
REST_MIN_S = 60.0


def charge_proxy(series: SampleSeries, discharge_positive: bool = True) -> np.ndarray:
    """Cumulative charge in Ah, decreasing while the cell discharges.

    Each sample's current is weighted by the time since the previous
    sample; the first sample contributes nothing.
    """
    sign = -1.0 if discharge_positive else 1.0
    contrib = np.concatenate([[0.0], series.i[1:] * np.diff(series.t)]) / 3600.0
    return sign * np.cumsum(contrib)


def pseudo_soc(series: SampleSeries, discharge_positive: bool = True) -> np.ndarray:
    """Per-file min-max normalized charge proxy in [0, 1]."""
    q = charge_proxy(series, discharge_positive)
    lo, hi = q.min(), q.max()
    if not hi > lo:
        raise DataError(f"{series.file_id or 'series'}: charge proxy is constant, pseudo-SOC undefined")
    return (q - lo) / (hi - lo)


@dataclass(frozen=True)
class RestSegment:
    start_idx: int
    end_idx: int  # inclusive
    duration_s: float
    end_voltage: float
    end_soc: float


def detect_rest_segments(
    series: SampleSeries,
    soc: np.ndarray | None = None,
    current_tol: float = REST_CURRENT_A,
    min_duration_s: float = REST_MIN_S,
) -> list[RestSegment]:
    """Maximal runs with ``|I| <= current_tol`` lasting at least ``min_duration_s``.

    ``end_soc`` uses ``soc`` if given, else the file's pseudo-SOC (NaN when
    the file never draws current).
    """
    if soc is None:
        try:
            soc = pseudo_soc(series)
        except DataError:
            soc = np.full(len(series), np.nan)
    quiet = np.abs(series.i) <= current_tol
    edges = np.diff(np.concatenate([[0], quiet.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    out = []
    for a, b in zip(starts, ends):
        dur = float(series.t[b] - series.t[a])
        if dur >= min_duration_s:
            out.append(RestSegment(int(a), int(b), dur, float(series.v[b]), float(soc[b])))
    return out


@dataclass(frozen=True)
class OcvTable:
    grid: np.ndarray
    ocv_v: np.ndarray
    sample_count: np.ndarray  # 0 marks a nearest-neighbor filled bin

    def __post_init__(self):
        if len(self.grid) != GRID_POINTS or len(self.ocv_v) != GRID_POINTS:
            raise ValueError(f"OCV table needs exactly {GRID_POINTS} points")
        if not np.all(np.diff(self.grid) > 0):
            raise ValueError("OCV grid must be strictly increasing")
        if not np.all(np.isfinite(self.ocv_v)):
            raise ValueError("OCV values must be finite")

    @property
    def filled(self) -> np.ndarray:
        return self.sample_count == 0

    def __call__(self, soc):
        return ocv_eval(self, soc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("soc,ocv_v,sample_count\n")
        for g, v, c in zip(self.grid, self.ocv_v, self.sample_count):
            buf.write(f"{float(g)!r},{float(v)!r},{int(c)}\n")
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "OcvTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2].astype(int))


def table_from_points(soc, volts) -> OcvTable:
    """Bin (soc, voltage) pairs onto the 128-point grid."""
    soc = np.asarray(soc, dtype=float)
    volts = np.asarray(volts, dtype=float)
    if soc.size == 0:
        raise DataError("no rest segments to build an OCV table from")
    # canonical order keeps bin means bit-identical under input permutation
    order = np.lexsort((volts, soc))
    soc, volts = soc[order], volts[order]
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    half = 0.5 / (GRID_POINTS - 1)
    counts = np.zeros(GRID_POINTS, dtype=int)
    values = np.full(GRID_POINTS, np.nan)
    for k, g in enumerate(grid):
        hit = np.abs(soc - g) <= half
        counts[k] = int(hit.sum())
        if counts[k]:
            values[k] = volts[hit].mean()
    full = np.flatnonzero(counts > 0)
    if full.size == 0:
        raise DataError("rest samples fall outside the SOC grid")
    for k in np.flatnonzero(counts == 0):
        # nearest populated bin; ties go to the lower SOC side
        values[k] = values[full[np.argmin(np.abs(full - k))]]
    return OcvTable(grid, values, counts)


def fit_ocv_table(train: Sequence[SampleSeries], discharge_positive: bool = True) -> OcvTable:
    """Pair each rest segment's final voltage with its pseudo-SOC and bin."""
    soc_pts, v_pts = [], []
    for s in train:
        soc = pseudo_soc(s, discharge_positive)
        for seg in detect_rest_segments(s, soc):
            soc_pts.append(seg.end_soc)
            v_pts.append(seg.end_voltage)
    if not soc_pts:
        raise DataError("no rest segments in the training files")
    return table_from_points(soc_pts, v_pts)


def ocv_eval(table: OcvTable, soc) -> np.ndarray:
    """Piecewise-linear lookup; SOC outside [0, 1] is clamped."""
    return np.interp(np.asarray(soc, dtype=float), table.grid, table.ocv_v)


def ocv_trajectory(series: SampleSeries, table: OcvTable, discharge_positive: bool = True) -> np.ndarray:
    return ocv_eval(table, pseudo_soc(series, discharge_positive))


def dynamic_voltage(series: SampleSeries, table: OcvTable, discharge_positive: bool = True) -> np.ndarray:
    """``V_meas - OCV(pseudo_soc)``; adding the OCV back recovers V exactly."""
    return series.v - ocv_trajectory(series, table, discharge_positive)
