"""Chunked autoregressive inference, voltage reconstruction and RSS/RMSE scoring."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import NormStats, SampleSeries
from .dmdc import DmdcModel, predict_from
from .physics import OcvTable, ocv_eval, pseudo_soc

log = logging.getLogger(__name__)

CONTEXT_FRACTION = 0.15

# (vdyn_history[L], current_history[L], future_current[l]) -> vdyn_prediction[l], volts
Forecaster = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class RolloutResult:
    file_id: str
    cycle_index: int
    time_s: np.ndarray
    measured_v: np.ndarray
    reconstructed_v: np.ndarray
    eval_start_idx: int
    model_tag: str
    chunk_lengths: tuple = ()
    v_ocv: np.ndarray | None = None
    v_dyn_pred: np.ndarray | None = None

    @property
    def per_chunk_count(self) -> int:
        return len(self.chunk_lengths)

    def to_csv(self) -> str:
        n = len(self.time_s)
        ocv = self.v_ocv if self.v_ocv is not None else np.full(n, np.nan)
        dyn = self.v_dyn_pred if self.v_dyn_pred is not None else np.full(n, np.nan)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "v_measured", "v_reconstructed", "v_ocv", "v_dyn_pred"])
        for row in zip(self.time_s, self.measured_v, self.reconstructed_v, ocv, dyn):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, model_tag: str, eval_start_idx: int, file_id: str = "", cycle_index: int = 0):
        d = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(file_id, cycle_index, d[:, 0], d[:, 1], d[:, 2], eval_start_idx, model_tag,
                   (), d[:, 3], d[:, 4])


def eval_start(T: int, context_len: int, fraction: float = CONTEXT_FRACTION) -> int:
    """Number of leading observed samples: ``ceil(fraction * T)``, at least ``context_len``."""
    s = math.ceil(fraction * T)
    if s < context_len:
        log.warning("evaluation start %d raised to the context length %d", s, context_len)
        s = context_len
    return s


def chunk_lengths(T: int, s: int, horizon: int) -> list:
    """Lengths ``min(H, T - t)`` of the chunks that tile samples ``s .. T-1``."""
    out, t = [], s
    while t < T:
        step = min(horizon, T - t)
        out.append(step)
        t += step
    return out


def chunked_rollout(series: SampleSeries, ocv: OcvTable, forecaster: Forecaster, context_len: int,
                    horizon: int, fraction: float = CONTEXT_FRACTION, model_tag: str = "tst",
                    start: int | None = None) -> RolloutResult:
    """Predict the dynamic residual chunk by chunk, feeding predictions back as context.

    The first ``s`` samples are observed; from ``s`` on, context windows
    read the residual buffer, which holds model outputs once written.
    """
    T = len(series)
    if T <= context_len + horizon:
        raise ForecastError(f"series of length {T} too short for L+H={context_len + horizon}")
    s = eval_start(T, context_len, fraction) if start is None else int(start)
    if s < context_len or s >= T:
        raise ForecastError(f"evaluation start {s} outside [{context_len}, {T})")
    v_ocv = ocv_eval(ocv, pseudo_soc(series))
    buf = series.v - v_ocv
    v_hat = series.v.copy()
    lengths = chunk_lengths(T, s, horizon)
    t = s
    for step in lengths:
        pred = np.asarray(forecaster(buf[t - context_len:t].copy(), series.i[t - context_len:t].copy(),
                                     series.i[t:t + step].copy()), dtype=float)
        if pred.shape != (step,):
            raise ForecastError(f"forecaster returned shape {pred.shape}, expected ({step},)")
        buf[t:t + step] = pred
        v_hat[t:t + step] = v_ocv[t:t + step] + pred
        t += step
    dyn = np.full(T, np.nan)
    dyn[s:] = buf[s:]
    return RolloutResult(series.file_id, series.cycle_index, series.t, series.v, v_hat, s, model_tag,
                         tuple(lengths), v_ocv, dyn)


class TstForecaster:
    """Adapter from a trained transformer to the :data:`Forecaster` signature.

    A final chunk shorter than H is padded by holding the last known
    current; only the first ``l`` outputs are returned.
    """

    def __init__(self, model, stats: NormStats):
        self.model = model
        self.stats = stats

    def __call__(self, vdyn_hist, i_hist, i_fut):
        from .tst.model import forward

        H = self.model.cfg.horizon
        n = len(i_fut)
        if n < 1 or n > H:
            raise ForecastError(f"future current length {n} outside [1, {H}]")
        fut = np.concatenate([i_fut, np.full(H - n, i_fut[-1])]) if n < H else np.asarray(i_fut)
        ctx = np.stack([self.stats.norm_v(vdyn_hist), self.stats.norm_i(i_hist)], axis=-1)[None]
        out = forward(self.model, ctx, self.stats.norm_i(fut)[None], training=False)[0]
        return self.stats.denorm_v(out[:n])


def tst_rollout(series, ocv, model, stats: NormStats, fraction: float = CONTEXT_FRACTION):
    cfg = model.cfg
    return chunked_rollout(series, ocv, TstForecaster(model, stats), cfg.context_len, cfg.horizon,
                           fraction, "tst")


def oracle_forecaster(true_vdyn, start: int) -> Forecaster:
    """Replays ``true_vdyn`` from ``start`` on, one chunk per call."""
    true_vdyn = np.asarray(true_vdyn, dtype=float)
    pos = [int(start)]

    def f(vdyn_hist, i_hist, i_fut):
        t = pos[0]
        pos[0] += len(i_fut)
        return true_vdyn[t:t + len(i_fut)].copy()

    return f


def zero_forecaster(vdyn_hist, i_hist, i_fut):
    return np.zeros(len(i_fut))


def dmdc_rollout_eval(series: SampleSeries, model: DmdcModel, start: int = 0) -> RolloutResult:
    """Seed with the measured ``v[start:start+m]`` and run free to the end of the file."""
    m = model.m
    if len(series) <= start + m:
        raise ForecastError(f"series of length {len(series)} too short for m={m}")
    v_hat = series.v.copy()
    v_hat[start + m:] = predict_from(model, series.v, series.i, start)
    return RolloutResult(series.file_id, series.cycle_index, series.t, series.v, v_hat, start + m,
                         "dmdc", (len(series) - start - m,))


# -- metrics -------------------------------------------------------------------


def rss_rmse(y, y_hat) -> tuple:
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ForecastError(f"length mismatch {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ForecastError("empty evaluation region")
    rss = float(np.sum((y - y_hat) ** 2))
    return rss, math.sqrt(rss / y.size)


@dataclass(frozen=True)
class FileScore:
    file_id: str
    cycle_index: int
    rss: float
    rmse: float
    n_eval: int


@dataclass(frozen=True)
class EvalReport:
    model_tag: str
    per_file: list
    aggregate: tuple  # (rss, rmse, n_eval)
    region: str = "native"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "region", "file_id", "cycle_index", "rss", "rmse", "n_eval"])
        for r in self.per_file:
            w.writerow([self.model_tag, self.region, r.file_id, r.cycle_index, repr(r.rss), repr(r.rmse), r.n_eval])
        rss, rmse, n = self.aggregate
        w.writerow([self.model_tag, self.region, "ALL", "", repr(rss), repr(rmse), n])
        return buf.getvalue()


def evaluate(results: Sequence[RolloutResult], series_list: Sequence[SampleSeries] | None = None,
             start_override: int | dict | None = None, region: str = "native") -> EvalReport:
    """Per-file and concatenated RSS/RMSE over each result's evaluation region.

    ``start_override`` (an int, or a dict keyed by file_id) moves the start
    of the scored region, e.g. to a common region shared by two models.
    """
    if not results:
        raise ForecastError("no rollout results")
    tags = {r.model_tag for r in results}
    if len(tags) != 1:
        raise ForecastError(f"mixed model tags {sorted(tags)}")
    if series_list is not None:
        if len(series_list) != len(results):
            raise ForecastError("results and series lists differ in length")
        for r, s in zip(results, series_list):
            if len(s) != len(r.reconstructed_v) or not np.array_equal(s.v, r.measured_v):
                raise ForecastError(f"{r.file_id}: rollout does not align with its series")
    rows, ys, yh = [], [], []
    for r in sorted(results, key=lambda r: r.file_id):
        s = r.eval_start_idx
        if isinstance(start_override, dict):
            s = start_override.get(r.file_id, s)
        elif start_override is not None:
            s = int(start_override)
        y, y_hat = r.measured_v[s:], r.reconstructed_v[s:]
        rss, rmse = rss_rmse(y, y_hat)
        rows.append(FileScore(r.file_id, r.cycle_index, rss, rmse, len(y)))
        ys.append(y)
        yh.append(y_hat)
    rss, rmse = rss_rmse(np.concatenate(ys), np.concatenate(yh))
    return EvalReport(tags.pop(), rows, (rss, rmse, int(sum(len(y) for y in ys))), region)


def common_region_reports(a: Sequence[RolloutResult], b: Sequence[RolloutResult]) -> tuple:
    """Score two models' rollouts from the later of their two start indices, per file."""
    sa = {r.file_id: r.eval_start_idx for r in a}
    sb = {r.file_id: r.eval_start_idx for r in b}
    if set(sa) != set(sb):
        raise ForecastError("rollout sets cover different files")
    start = {k: max(sa[k], sb[k]) for k in sa}
    return (evaluate(a, start_override=start, region="common-region"),
            evaluate(b, start_override=start, region="common-region"))


def format_table(reports: Sequence[EvalReport]) -> str:
    """Text table with one row per (cycle, model) and RSS/RMSE columns."""
    rows = []
    for rep in reports:
        for r in rep.per_file:
            rows.append((r.cycle_index, rep.model_tag, rep.region, r.rss, r.rmse))
    rows.sort(key=lambda x: (x[0], x[1], x[2]))
    lines = [f"{'cycle':>6}  {'model':<6}  {'region':<13}  {'RSS':>12}  {'RMSE':>10}"]
    lines.append("-" * len(lines[0]))
    for c, tag, reg, rss, rmse in rows:
        lines.append(f"{c:>6}  {tag:<6}  {reg:<13}  {rss:>12.6g}  {rmse:>10.6g}")
    return "\n".join(lines) + "\n"
