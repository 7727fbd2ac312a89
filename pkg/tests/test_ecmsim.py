import math

import numpy as np
import pytest

from pulse_sysid import ecmsim
from pulse_sysid.ecmsim import DegradationSchedule, EcmParams, ProtocolSpec, SimulationError


def test_rest_only_is_constant(quiet_protocol):
    p = EcmParams()
    s = ecmsim.simulate_hppc(p, quiet_protocol, current=np.zeros(50))
    assert np.all(s.v == ecmsim.ocv_true(p, 1.0))


def test_ohmic_step_is_exactly_r0(quiet_protocol):
    p = EcmParams()
    cur = np.r_[np.zeros(5), 10.0, np.zeros(5)]
    tr = ecmsim.simulate_trace(p, quiet_protocol, current=cur)
    # the step logged at row 5 appears between rows 5 and 6
    assert tr.v_clean[5] == tr.v_clean[4]
    assert tr.v_clean[5] - tr.v_clean[6] == pytest.approx(10 * p.r0, abs=1e-15)


def test_default_protocol_layout(default_trace, quiet_protocol):
    segs = default_trace.segments
    kinds = [k for k, _, _ in segs]
    assert kinds == [k for k, _, _ in quiet_protocol.segments()] * quiet_protocol.repeats
    want = {k: n for k, _, n in quiet_protocol.segments()}
    for kind, start, n in segs:
        assert n == want[kind]
        i = default_trace.series.i[start:start + n]
        assert np.all(i == i[0])
    assert want == {"pulse_discharge": 2, "rest1": 36, "pulse_charge": 4, "rest2": 24,
                    "deep_discharge": 168, "long_rest": 720}
    assert len(default_trace.series) == 10 * sum(want.values())


def test_charge_conservation(default_trace):
    p = EcmParams()
    s = default_trace.series
    expected = 1 - np.sum(s.i * 5.0) / (3600 * p.capacity_ah)
    assert default_trace.soc_after[-1] == pytest.approx(expected, rel=1e-9)


def test_rc_states_relax_after_seven_time_constants(quiet_protocol):
    p = EcmParams()
    tau2 = max(p.time_constants)
    n_rest = int(math.ceil(7 * tau2 / quiet_protocol.dt_s)) + 1
    cur = np.r_[np.full(100, 10.0), np.zeros(n_rest)]
    tr = ecmsim.simulate_trace(p, quiet_protocol, current=cur)
    for v in (tr.v1, tr.v2):
        assert abs(v[-1]) < 1e-3 * np.max(np.abs(v))


def test_rc_update_matches_closed_form(quiet_protocol):
    p = EcmParams()
    tr = ecmsim.simulate_trace(p, quiet_protocol, current=np.full(40, 10.0))
    k = np.arange(40)
    for (r, c), v in (((p.r1, p.c1), tr.v1), ((p.r2, p.c2), tr.v2)):
        np.testing.assert_allclose(v, r * 10.0 * (1 - np.exp(-k * 5.0 / (r * c))), rtol=1e-12, atol=1e-15)


def test_noise_free_files_equal_across_seeds(quiet_protocol):
    a = ecmsim.simulate_hppc(EcmParams(), quiet_protocol, seed=1)
    b = ecmsim.simulate_hppc(EcmParams(), quiet_protocol, seed=2)
    np.testing.assert_array_equal(a.v, b.v)


def test_noise_statistics(default_trace):
    noisy = ecmsim.simulate_trace(EcmParams(), ProtocolSpec(), seed=0)
    resid = noisy.series.v - default_trace.v_clean
    assert resid.std() == pytest.approx(0.5e-3, rel=0.05)


def test_cutoff_truncates_deep_discharge():
    proto = ProtocolSpec(noise_std_v=0.0, cutoff_v=3.95)
    tr = ecmsim.simulate_trace(EcmParams(), proto)
    deep = [(s, n) for k, s, n in tr.segments if k == "deep_discharge"]
    assert sum(n for _, n in deep) < 10 * 168
    for s, n in deep:
        # voltage under load while discharging (logged one row later) stays above cutoff
        assert np.all(tr.v_clean[s + 1:s + n + 1] > 3.95)


def test_soc_out_of_range_raises(quiet_protocol):
    with pytest.raises(SimulationError):
        ecmsim.simulate_hppc(EcmParams(capacity_ah=0.01), quiet_protocol, current=np.full(10, 10.0))


def test_degrade():
    p = EcmParams()
    assert ecmsim.degrade(p, DegradationSchedule(), 0) == p
    d = ecmsim.degrade(p, DegradationSchedule(0.001, 0.0005), 100)
    assert d.r0 / p.r0 == pytest.approx(1.001**100, rel=1e-14)
    assert 1.001**100 == pytest.approx(1.1051, abs=1e-4)
    d = ecmsim.degrade(p, DegradationSchedule(0.001, 0.0005), 160)
    assert d.capacity_ah / p.capacity_ah == pytest.approx(0.9995**160, rel=1e-14)
    assert d.ocv_coeffs == p.ocv_coeffs
    with pytest.raises(ValueError):
        DegradationSchedule(0.02, 0.0)


def test_poles_shift_monotonically_with_aging():
    p = EcmParams()
    poles = [ecmsim.degrade(p, ecmsim.AGING_SCHEDULE, c).poles(5.0) for c in range(0, 201, 20)]
    for j in range(2):
        seq = [pp[j] for pp in poles]
        assert all(b < a for a, b in zip(seq, seq[1:]))


def test_ocv_anchors_and_monotonicity():
    p = EcmParams()
    assert ecmsim.ocv_true(p, 0.0) == pytest.approx(3.0, abs=1e-12)
    assert ecmsim.ocv_true(p, 1.0) == pytest.approx(4.2, abs=1e-12)
    grid = np.linspace(0, 1, 1000)
    assert np.all(np.diff(ecmsim.ocv_true(p, grid)) > 0)
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(ValueError):
            ecmsim.ocv_true(p, bad)


def test_param_validation():
    with pytest.raises(ValueError):
        EcmParams(r0=0.0)
    with pytest.raises(ValueError):
        EcmParams(ocv_coeffs=(4.0, -1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        ProtocolSpec(repeats=0)
    with pytest.raises(ValueError):
        ProtocolSpec(dt_s=0.0)


def test_make_cycles_and_config_round_trip():
    files = ecmsim.make_cycles([0, 120], protocol=ProtocolSpec(repeats=1))
    assert [f.file_id for f in files] == ["cycle_000", "cycle_120"]
    assert [f.cycle_index for f in files] == [0, 120]
    import json

    text = ecmsim.config_to_json(EcmParams(), ProtocolSpec(), ecmsim.AGING_SCHEDULE)
    assert ecmsim.config_from_dict(json.loads(text)) == (EcmParams(), ProtocolSpec(), ecmsim.AGING_SCHEDULE)
