"""DMD with control on delay-embedded voltage/current snapshots.

Identification solves ``X' ~ A X + B U`` in the least-squares sense with a
rank-truncated pseudoinverse of the stacked data matrix ``[X; U]``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed import SnapshotTriple, input_windows, snapshots_from_arrays

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class DmdcError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankPolicy:
    """How many singular values of [X; U] to keep.

    kind ``"relative"`` keeps sigma_i >= tol * sigma_1, ``"fixed"`` keeps
    exactly ``rank`` values, ``"energy"`` keeps the smallest r whose
    cumulative sigma**2 fraction reaches ``energy``.
    """

    kind: str = "relative"
    tol: float = 1e-10
    rank: int = 0
    energy: float = 1.0

    def select(self, s: np.ndarray) -> int:
        if s.size == 0 or s[0] <= 0:
            raise DmdcError("stacked data matrix is all zero")
        if self.kind == "relative":
            r = int(np.sum(s >= self.tol * s[0]))
        elif self.kind == "fixed":
            r = int(self.rank)
            if not 1 <= r <= s.size:
                raise DmdcError(f"fixed rank {r} outside [1, {s.size}]")
        elif self.kind == "energy":
            frac = np.cumsum(s**2) / np.sum(s**2)
            r = int(np.searchsorted(frac, self.energy - 1e-15) + 1)
            r = min(r, s.size)
        else:
            raise DmdcError(f"unknown rank policy {self.kind!r}")
        if np.any(s[:r] <= 0):
            raise DmdcError("rank policy retains zero singular values")
        return r

    @classmethod
    def parse(cls, text: str) -> "RankPolicy":
        """``relative:1e-10``, ``fixed:12`` or ``energy:0.9999``."""
        kind, _, val = text.partition(":")
        if kind == "relative":
            return cls("relative", tol=float(val or 1e-10))
        if kind == "fixed":
            return cls("fixed", rank=int(val))
        if kind == "energy":
            return cls("energy", energy=float(val))
        raise ValueError(f"bad rank policy {text!r}")


@dataclass(frozen=True)
class DmdcModel:
    A: np.ndarray
    B: np.ndarray
    singular_values: np.ndarray
    rank_r: int
    fit_residual_rss: float

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u


def fit(snaps: SnapshotTriple, rank_policy: RankPolicy = RankPolicy()) -> DmdcModel:
    X, Xp, U = snaps.X, snaps.Xp, snaps.U
    m, d_u, K = snaps.m, snaps.d_u, snaps.K
    if K < m + d_u:
        log.warning("only %d snapshot columns for %d unknowns per row", K, m + d_u)
    omega = np.vstack([X, U])
    if not np.all(np.isfinite(omega)) or not np.all(np.isfinite(Xp)):
        raise DmdcError("non-finite snapshot data")
    Ur, s, Vh = np.linalg.svd(omega, full_matrices=False)
    r = rank_policy.select(s)
    G = ((Xp @ Vh[:r].T) / s[:r]) @ Ur[:, :r].T
    A, B = G[:, :m], G[:, m:]
    res = Xp - A @ X - B @ U
    return DmdcModel(A, B, s, r, float(np.sum(res**2)))


def fit_series(series, m: int, d_u: int, rank_policy: RankPolicy = RankPolicy(), n_train=None) -> DmdcModel:
    """Fit on the first ``n_train`` samples of ``series`` (all if None)."""
    n = len(series) if n_train is None else int(n_train)
    return fit(snapshots_from_arrays(series.v[:n], series.i[:n], m, d_u), rank_policy)


def rollout(model: DmdcModel, x0, inputs, steps: int) -> np.ndarray:
    """Free-running prediction; returns the newest coordinate of each new state."""
    x = np.asarray(x0, dtype=float).reshape(model.m)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.d_u)
    if steps > len(inputs):
        raise DmdcError(f"{steps} steps requested but only {len(inputs)} inputs")
    A, B = model.A, model.B
    Bu = inputs[:steps] @ B.T
    out = np.empty(steps)
    for k in range(steps):
        x = A @ x + Bu[k]
        out[k] = x[-1]
    return out


def predict_from(model: DmdcModel, v, i, start: int = 0) -> np.ndarray:
    """Seed with measured ``v[start:start+m]``; predict ``v[start+m:]``."""
    m = model.m
    steps = len(v) - start - m
    if steps < 1:
        raise DmdcError("series too short for rollout")
    u = input_windows(i, m, model.d_u, start, steps)
    return rollout(model, np.asarray(v[start:start + m], dtype=float), u, steps)


def one_step_residuals(model: DmdcModel, v, i) -> np.ndarray:
    """Residual of the newest predicted coordinate, one step ahead, per column."""
    sn = snapshots_from_arrays(v, i, model.m, model.d_u)
    return sn.Xp[-1] - (model.A[-1] @ sn.X + model.B[-1] @ sn.U)


# -- spectrum -----------------------------------------------------------------


@dataclass(frozen=True)
class ModeSpectrum:
    eigenvalues: np.ndarray
    modal_magnitudes: np.ndarray  # descending

    def dominant_subunit(self, unit_tol: float = 1e-3) -> float:
        """Largest |lambda| strictly below ``1 - unit_tol``.

        Modes within ``unit_tol`` of the unit circle correspond to the
        charge-integration (SOC) direction and are excluded.
        """
        below = self.modal_magnitudes[self.modal_magnitudes < 1.0 - unit_tol]
        if below.size == 0:
            raise DmdcError("no sub-unit modes")
        return float(below[0])


def modes(model_or_A) -> ModeSpectrum:
    A = model_or_A.A if isinstance(model_or_A, DmdcModel) else np.asarray(model_or_A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DmdcError("A must be square")
    try:
        lam = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise DmdcError(f"eigenvalue solver failed: {exc}") from exc
    order = np.argsort(-np.abs(lam), kind="stable")
    lam = lam[order]
    return ModeSpectrum(lam, np.abs(lam))


# -- sweeps ------------------------------------------------------------------


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("PULSE_SYSID_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SweepResult:
    param: str
    rows: list  # (value, rss, rmse)
    region: str
    horizon: str

    @property
    def best(self) -> int:
        return select_best(self.rows)

    def best_within(self, rtol: float) -> int:
        return select_best(self.rows, TIE_TOL, rtol)

    def rss(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self) -> str:
        lines = [f"{self.param},rss,rmse"]
        lines += [f"{p},{float(rss)!r},{float(rmse)!r}" for p, rss, rmse in self.rows]
        return "\n".join(lines) + "\n"


def select_best(rows, tol: float = TIE_TOL, rtol: float = 0.0):
    """Argmin over rss; ties go to the smallest parameter.

    Two scores tie when they differ by at most ``tol + rtol * min_rss``.
    A small ``rtol`` makes the first value on a numerically flat plateau win.
    """
    finite = [r for r in rows if np.isfinite(r[1])]
    if not finite:
        raise DmdcError("no finite sweep results")
    lo = min(r[1] for r in finite)
    return min(r[0] for r in finite if r[1] <= lo + tol + rtol * lo)


def evaluate_fit(
    series,
    m: int,
    d_u: int,
    train_fraction: float = 0.6,
    horizon: str = "rollout",
    region: str = "holdout",
    rank_policy: RankPolicy = RankPolicy(),
) -> tuple:
    """Fit on the training fraction and score; returns (rss, rmse).

    ``horizon`` is ``"rollout"`` (free-running) or ``"one_step"``.
    ``region`` is ``"holdout"`` (samples from the training boundary on) or
    ``"full"`` (every sample after the first m).
    """
    v, i = np.asarray(series.v), np.asarray(series.i)
    n_train = int(round(train_fraction * len(v)))
    model = fit_series(series, m, d_u, rank_policy, n_train)
    if region == "holdout":
        start = max(n_train - m, 0)
    elif region == "full":
        start = 0
    else:
        raise ValueError(f"unknown region {region!r}")
    if horizon == "rollout":
        err = v[start + m:] - predict_from(model, v, i, start)
    elif horizon == "one_step":
        err = one_step_residuals(model, v[start:], i[start:])
    else:
        raise ValueError(f"unknown horizon {horizon!r}")
    rss = float(np.sum(err**2))
    return rss, float(np.sqrt(rss / len(err)))


def _sweep(param, values, call, region, horizon) -> SweepResult:
    values = list(values)
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        scores = list(pool.map(call, values))
    return SweepResult(param, [(v, *sc) for v, sc in zip(values, scores)], region, horizon)


def sweep_output_embedding(
    series, m_range: Iterable[int], d_u: int = 1, horizon: str = "rollout", region: str = "holdout",
    train_fraction: float = 0.6, rank_policy: RankPolicy = RankPolicy(),
) -> SweepResult:
    """RSS per output embedding dimension m (d_u is capped at m)."""
    call = lambda m: evaluate_fit(series, m, min(d_u, m), train_fraction, horizon, region, rank_policy)  # noqa: E731
    return _sweep("m", m_range, call, region, horizon)


def sweep_input_delay(
    series, m: int, d_u_range: Iterable[int] = range(1, 13), horizon: str = "rollout",
    region: str = "holdout", train_fraction: float = 0.6, rank_policy: RankPolicy = RankPolicy(),
) -> SweepResult:
    """RSS per input delay count d_u at fixed m."""
    call = lambda d: evaluate_fit(series, m, d, train_fraction, horizon, region, rank_policy)  # noqa: E731
    return _sweep("d_u", d_u_range, call, region, horizon)


# -- checkpoint ----------------------------------------------------------


def save_model(model: DmdcModel, path) -> Path:
    from .checkpoint import save_arrays

    header = {"kind": "dmdc", "m": model.m, "d_u": model.d_u, "rank_r": model.rank_r,
              "fit_residual_rss": model.fit_residual_rss}
    return save_arrays(path, header, {"A": model.A, "B": model.B, "singular_values": model.singular_values})


def load_model(path) -> DmdcModel:
    from .checkpoint import load_arrays

    header, arrays = load_arrays(path)
    if header.get("kind") != "dmdc":
        raise DmdcError(f"{path} is not a DMDc checkpoint")
    return DmdcModel(arrays["A"], arrays["B"], arrays["singular_values"], int(header["rank_r"]),
                     float(header["fit_residual_rss"]))
