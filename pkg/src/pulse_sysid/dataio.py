"""Loading, validation, partitioning and normalization of HPPC series.

Stored files are CSV with header ``time_s,current_a,voltage_v`` plus a
``<name>.meta.json`` sidecar holding ``file_id`` and ``cycle_index``.

Current is stored discharge-positive: a 10 A discharge pulse is +10.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = ("time_s", "current_a", "voltage_v")
V_MIN, V_MAX = 2.0, 4.5


class DataError(ValueError):
    """Raised when a series file or an in-memory series fails validation."""


@dataclass(frozen=True)
class SampleSeries:
    """One HPPC file: time (s from file start), current (A), voltage (V)."""

    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    file_id: str = ""
    cycle_index: int = 0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        i = np.asarray(self.i, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if not (t.ndim == i.ndim == v.ndim == 1):
            raise DataError("t, i, v must be one-dimensional")
        if not (len(t) == len(i) == len(v)):
            raise DataError(f"length mismatch: t={len(t)} i={len(i)} v={len(v)}")
        if len(t) < 2:
            raise DataError("series needs at least 2 samples")
        if self.cycle_index < 0:
            raise DataError("cycle_index must be nonnegative")
        for name, arr in (("time", t), ("current", i), ("voltage", v)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise DataError(f"non-finite {name} at row {bad[0] + 1}")
        dt = np.diff(t)
        bad = np.flatnonzero(dt <= 0)
        if bad.size:
            raise DataError(f"non-monotone time at row {bad[0] + 2}")
        bad = np.flatnonzero((v < V_MIN) | (v > V_MAX))
        if bad.size:
            raise DataError(
                f"voltage {v[bad[0]]:.4f} V outside [{V_MIN}, {V_MAX}] at row {bad[0] + 1}"
            )
        for name, arr in (("t", t), ("i", i), ("v", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    def head(self, n: int) -> "SampleSeries":
        """First ``n`` samples as a new series."""
        return SampleSeries(self.t[:n], self.i[:n], self.v[:n], self.file_id, self.cycle_index)


# -- file IO ---------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def load_series(path) -> SampleSeries:
    """Read and validate one CSV file (plus sidecar metadata if present).

    Row numbers in error messages count data rows from 1, header excluded.
    """
    path = Path(path)
    t, i, v = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != 3:
                raise DataError(f"{path}: malformed row {row_no}: expected 3 fields")
            try:
                tt, ii, vv = (float(x) for x in row)
            except ValueError as exc:
                raise DataError(f"{path}: malformed row {row_no}: {exc}") from None
            t.append(tt)
            i.append(ii)
            v.append(vv)
    if not t:
        raise DataError(f"{path}: no data rows")

    file_id, cycle_index = path.stem, 0
    meta = _meta_path(path)
    if meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        file_id = str(info.get("file_id", file_id))
        cycle_index = int(info.get("cycle_index", 0))

    t = np.array(t)
    try:
        return SampleSeries(t - t[0], np.array(i), np.array(v), file_id, cycle_index)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_series(series: SampleSeries, path) -> Path:
    """Write ``series`` as CSV plus sidecar metadata.

    Floats are written with ``repr`` so that a reload is bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for tt, ii, vv in zip(series.t, series.i, series.v):
            fh.write(f"{float(tt)!r},{float(ii)!r},{float(vv)!r}\n")
    meta = {"file_id": series.file_id, "cycle_index": int(series.cycle_index)}
    _meta_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def load_dir(directory) -> list[SampleSeries]:
    """Load every ``*.csv`` in ``directory`` sorted by (cycle_index, file_id)."""
    out = [load_series(p) for p in sorted(Path(directory).glob("*.csv"))]
    return sorted(out, key=lambda s: (s.cycle_index, s.file_id))


# -- partition ---------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    Used for split selection so that the chosen validation file is the same
    across implementations given the same seed.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Integer in [0, n), by modulo reduction of one 64-bit draw."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n


@dataclass(frozen=True)
class SplitSpec:
    train_files: list
    val_files: list
    test_files: list
    rng_seed: int

    def __post_init__(self):
        groups = [set(self.train_files), set(self.val_files), set(self.test_files)]
        if any(a & b for k, a in enumerate(groups) for b in groups[k + 1:]):
            raise DataError("train/val/test file lists overlap")

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_files": list(self.train_files),
                "val_files": list(self.val_files),
                "test_files": list(self.test_files),
                "rng_seed": self.rng_seed,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(d["train_files"], d["val_files"], d["test_files"], int(d["rng_seed"]))


def partition(files, seed: int, threshold: int = 100) -> SplitSpec:
    """File-level split.

    ``files`` is a sequence of ``(file_id, cycle_index)`` pairs or of
    ``SampleSeries``. Files with ``cycle_index > threshold`` are test files;
    one validation file is drawn from the remaining pool with SplitMix64.
    The pool is sorted by file_id before drawing so input order is irrelevant.
    """
    pairs = []
    for f in files:
        if isinstance(f, SampleSeries):
            pairs.append((f.file_id, f.cycle_index))
        else:
            fid, cyc = f
            pairs.append((str(fid), int(cyc)))
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate file ids")
    pool = sorted(fid for fid, cyc in pairs if cyc <= threshold)
    test = sorted(fid for fid, cyc in pairs if cyc > threshold)
    if not pool:
        raise DataError("empty training pool")
    if len(pool) < 2:
        raise DataError(f"training pool has {len(pool)} file(s); need at least 2")
    k = SplitMix64(seed).below(len(pool))
    val = [pool[k]]
    train = pool[:k] + pool[k + 1:]
    return SplitSpec(train, val, test, seed)


# -- normalization -------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean_vdyn: float
    std_vdyn: float
    mean_i: float
    std_i: float

    def __post_init__(self):
        if not (self.std_vdyn > 0 and self.std_i > 0):
            raise DataError("normalization std must be positive")

    def norm_v(self, x):
        return (np.asarray(x, dtype=float) - self.mean_vdyn) / self.std_vdyn

    def denorm_v(self, x):
        return np.asarray(x, dtype=float) * self.std_vdyn + self.mean_vdyn

    def norm_i(self, x):
        return (np.asarray(x, dtype=float) - self.mean_i) / self.std_i

    def denorm_i(self, x):
        return np.asarray(x, dtype=float) * self.std_i + self.mean_i

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("mean_vdyn", "std_vdyn", "mean_i", "std_i")}


def norm_stats_from_arrays(vdyn_list: Iterable[np.ndarray], i_list: Iterable[np.ndarray]) -> NormStats:
    vd = np.concatenate([np.asarray(x, dtype=float) for x in vdyn_list])
    ii = np.concatenate([np.asarray(x, dtype=float) for x in i_list])
    sv, si = vd.std(), ii.std()
    if not sv > 0:
        raise DataError("zero variance in dynamic voltage across training files")
    if not si > 0:
        raise DataError("zero variance in current across training files")
    return NormStats(float(vd.mean()), float(sv), float(ii.mean()), float(si))


def fit_norm_stats(train: Sequence[SampleSeries], ocv) -> NormStats:
    """Global z-score statistics over all training samples.

    ``ocv`` is a fitted :class:`pulse_sysid.physics.OcvTable`; the dynamic
    voltage of each file is computed with it before pooling.
    """
    from .physics import dynamic_voltage

    if not train:
        raise DataError("empty training list")
    return norm_stats_from_arrays(
        [dynamic_voltage(s, ocv) for s in train], [s.i for s in train]
    )
