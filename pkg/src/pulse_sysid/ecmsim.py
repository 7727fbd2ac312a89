"""Second-order Thevenin cell model used to synthesize HPPC files.

The RC branches use the exact zero-order-hold update, so within a segment
of constant current the discrete dynamics are linear time-invariant:

    v_j[k+1] = v_j[k] * a_j + r_j * (1 - a_j) * I[k],   a_j = exp(-dt / (r_j c_j))
    soc[k+1] = soc[k] - I[k] * dt / (3600 * capacity_ah)
    y[k]     = OCV(soc[k]) - I[k] * r0 - v_1[k] - v_2[k]

``I[k]`` is held over ``[t_k, t_k+1)`` and is discharge-positive; ``y[k]``
is the terminal voltage while it flows.

Logging convention: row k holds the current commanded for the coming
interval and the voltage measured over the interval just finished, i.e.
``V[k] = y[k-1]`` with ``V[0] = OCV(1)`` (cell relaxed at start). A current
step at row k therefore shows up as an ohmic jump of exactly ``dI * r0``
between rows k and k+1, and each voltage row depends only on currents
logged in earlier rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import SampleSeries

SOC_TOL = 1e-9


class SimulationError(RuntimeError):
    pass


def _default_ocv_coeffs() -> tuple:
    # linear trunk with an exponential knee at low SOC, anchored to 3.0 V and 4.2 V
    amp, scale = 0.2, 0.03
    c0 = 3.0 + amp
    c1 = 4.2 - c0 + amp * math.exp(-1.0 / scale)
    return (c0, c1, amp, scale)


@dataclass(frozen=True)
class EcmParams:
    """2RC cell parameters (ohms, farads, ampere-hours).

    ``ocv_coeffs`` is ``(c0, c1, ..., cn, amp, scale)`` for
    ``OCV(s) = sum_j c_j s**j - amp * exp(-s / scale)``.
    """

    r0: float = 2.0e-3
    r1: float = 1.0e-3
    c1: float = 10.0e3
    r2: float = 0.7e-3
    c2: float = 80.0e3
    capacity_ah: float = 30.0
    ocv_coeffs: tuple = field(default_factory=_default_ocv_coeffs)

    def __post_init__(self):
        for name in ("r0", "r1", "c1", "r2", "c2", "capacity_ah"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        coeffs = tuple(float(c) for c in self.ocv_coeffs)
        if len(coeffs) < 3 or coeffs[-1] <= 0 or coeffs[-2] < 0:
            raise ValueError("ocv_coeffs must be (c0, ..., cn, amp >= 0, scale > 0)")
        object.__setattr__(self, "ocv_coeffs", coeffs)
        grid = np.linspace(0.0, 1.0, 1001)
        if not np.all(np.diff(_ocv(coeffs, grid)) > 0):
            raise ValueError("OCV curve is not strictly increasing on [0, 1]")

    @property
    def time_constants(self) -> tuple:
        return (self.r1 * self.c1, self.r2 * self.c2)

    def poles(self, dt: float) -> tuple:
        """Discrete-time poles exp(-dt / tau) of the two RC branches."""
        return tuple(math.exp(-dt / tau) for tau in self.time_constants)


def _ocv(coeffs, soc):
    *poly, amp, scale = coeffs
    soc = np.asarray(soc, dtype=float)
    return np.polynomial.polynomial.polyval(soc, poly) - amp * np.exp(-soc / scale)


def ocv_true(params: EcmParams, soc):
    """Analytic OCV in volts; raises ``ValueError`` outside [0, 1]."""
    s = np.asarray(soc, dtype=float)
    if np.any(s < -SOC_TOL) or np.any(s > 1 + SOC_TOL) or not np.all(np.isfinite(s)):
        raise ValueError("soc outside [0, 1]")
    out = _ocv(params.ocv_coeffs, np.clip(s, 0.0, 1.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ProtocolSpec:
    """One repeat is: discharge pulse, rest, charge pulse, rest, deep discharge, long rest.

    Currents are magnitudes in amperes; durations in seconds. The deep
    discharge stops early once terminal voltage would fall to ``cutoff_v``.
    """

    pulse_discharge_a: float = 10.0
    pulse_discharge_s: float = 10.0
    rest1_s: float = 180.0
    pulse_charge_a: float = 5.0
    pulse_charge_s: float = 20.0
    rest2_s: float = 120.0
    deep_discharge_a: float = 10.0
    deep_discharge_s: float = 840.0
    long_rest_s: float = 3600.0
    repeats: int = 10
    dt_s: float = 5.0
    noise_std_v: float = 0.5e-3
    cutoff_v: float = 3.0

    def __post_init__(self):
        for k, val in asdict(self).items():
            if val < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.dt_s > 0:
            raise ValueError("dt_s must be positive")

    def segments(self) -> list:
        """``(kind, current_a, n_samples)`` for one repeat, discharge-positive."""
        n = lambda sec: int(round(sec / self.dt_s))  # noqa: E731
        segs = [
            ("pulse_discharge", self.pulse_discharge_a, n(self.pulse_discharge_s)),
            ("rest1", 0.0, n(self.rest1_s)),
            ("pulse_charge", -self.pulse_charge_a, n(self.pulse_charge_s)),
            ("rest2", 0.0, n(self.rest2_s)),
            ("deep_discharge", self.deep_discharge_a, n(self.deep_discharge_s)),
            ("long_rest", 0.0, n(self.long_rest_s)),
        ]
        return [s for s in segs if s[2] > 0]


@dataclass(frozen=True)
class DegradationSchedule:
    """Per-cycle fractional changes.

    ``c_fade_per_cycle`` shrinks both RC capacitances; with it larger than
    the resistance growth, the RC time constants shorten with cycling.
    """

    r_growth_per_cycle: float = 0.001
    capacity_fade_per_cycle: float = 0.0005
    c_fade_per_cycle: float = 0.0

    def __post_init__(self):
        for k, val in asdict(self).items():
            if not 0.0 <= val <= 0.01:
                raise ValueError(f"{k} must lie in [0, 0.01]")


# time-constant-shortening schedule used for the aging studies
AGING_SCHEDULE = DegradationSchedule(0.001, 0.0005, 0.002)


def degrade(params: EcmParams, schedule: DegradationSchedule, cycles: int) -> EcmParams:
    if cycles < 0:
        raise ValueError("cycles must be >= 0")
    if cycles == 0:
        return params
    rg = (1.0 + schedule.r_growth_per_cycle) ** cycles
    cf = (1.0 - schedule.c_fade_per_cycle) ** cycles
    return replace(
        params,
        r0=params.r0 * rg,
        r1=params.r1 * rg,
        r2=params.r2 * rg,
        c1=params.c1 * cf,
        c2=params.c2 * cf,
        capacity_ah=params.capacity_ah * (1.0 - schedule.capacity_fade_per_cycle) ** cycles,
    )


@dataclass(frozen=True)
class SimTrace:
    """Noise-free internal states alongside the emitted series.

    ``soc``, ``v1``, ``v2`` are states at t_k before ``I[k]`` is applied;
    ``soc_after`` is the SOC once it has been.
    """

    series: SampleSeries
    soc: np.ndarray
    soc_after: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v_clean: np.ndarray
    segments: list  # (kind, start_idx, n_samples)


def simulate_trace(
    params: EcmParams,
    protocol: ProtocolSpec,
    seed: int = 0,
    file_id: str = "sim",
    cycle_index: int = 0,
    current=None,
) -> SimTrace:
    """Run the model. ``current`` (per-row amperes) overrides the protocol."""
    dt = protocol.dt_s
    a1, a2 = params.poles(dt)
    g1, g2 = params.r1 * (1.0 - a1), params.r2 * (1.0 - a2)
    dsoc = dt / (3600.0 * params.capacity_ah)
    coeffs = params.ocv_coeffs

    if current is not None:
        plan = [("custom", float(c), 1) for c in np.asarray(current, dtype=float)]
    else:
        plan = protocol.segments() * protocol.repeats

    soc, x1, x2 = 1.0, 0.0, 0.0
    I, Y, S, X1, X2, segs = [], [], [], [], [], []

    def ocv_at(s):
        if s < -SOC_TOL or s > 1 + SOC_TOL:
            raise SimulationError(f"SOC {s:.6g} left [0, 1] at sample {len(I)}")
        return float(_ocv(coeffs, min(max(s, 0.0), 1.0)))

    for kind, amps, n in plan:
        start = len(I)
        for _ in range(n):
            y = ocv_at(soc) - amps * params.r0 - x1 - x2
            if kind == "deep_discharge" and y <= protocol.cutoff_v:
                break
            I.append(amps)
            Y.append(y)
            S.append(soc)
            X1.append(x1)
            X2.append(x2)
            x1 = x1 * a1 + g1 * amps
            x2 = x2 * a2 + g2 * amps
            soc -= amps * dsoc
        if len(I) > start:
            if segs and segs[-1][0] == kind:
                segs[-1] = (kind, segs[-1][1], segs[-1][2] + len(I) - start)
            else:
                segs.append((kind, start, len(I) - start))
    ocv_at(soc)  # final state must also be in range

    I = np.array(I)
    v_clean = np.concatenate([[float(_ocv(coeffs, 1.0))], Y[:-1]])
    noise = protocol.noise_std_v
    rng = np.random.default_rng(seed)
    v_meas = v_clean + rng.normal(0.0, noise, len(I)) if noise > 0 else v_clean.copy()
    t = np.arange(len(I)) * dt
    S = np.array(S)
    series = SampleSeries(t, I, v_meas, file_id, cycle_index)
    return SimTrace(series, S, S - I * dsoc, np.array(X1), np.array(X2), v_clean, segs)


def simulate_hppc(params: EcmParams, protocol: ProtocolSpec, seed: int = 0, **kw) -> SampleSeries:
    """Synthetic HPPC file starting fully charged and relaxed (SOC 1)."""
    return simulate_trace(params, protocol, seed, **kw).series


def make_cycles(
    cycles: Sequence[int],
    params: EcmParams | None = None,
    schedule: DegradationSchedule = AGING_SCHEDULE,
    protocol: ProtocolSpec | None = None,
    seed: int = 0,
) -> list:
    """One file per cycle index, ``file_id = cycle_XXX``; seed offset by cycle."""
    params = params or EcmParams()
    protocol = protocol or ProtocolSpec()
    return [
        simulate_hppc(
            degrade(params, schedule, c), protocol, seed + c, file_id=f"cycle_{c:03d}", cycle_index=c
        )
        for c in cycles
    ]


# -- JSON config -------------------------------------------------------------


def config_to_json(params: EcmParams, protocol: ProtocolSpec, schedule: DegradationSchedule) -> str:
    return json.dumps(
        {"params": asdict(params), "protocol": asdict(protocol), "degradation": asdict(schedule)},
        indent=2,
    )


def config_from_dict(d: dict) -> tuple:
    p = dict(d.get("params", {}))
    if "ocv_coeffs" in p:
        p["ocv_coeffs"] = tuple(p["ocv_coeffs"])
    return (
        EcmParams(**p),
        ProtocolSpec(**d.get("protocol", {})),
        DegradationSchedule(**d.get("degradation", asdict(AGING_SCHEDULE))),
    )
