import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pulse_sysid import ecmsim

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# linear OCV (3.0 V .. 4.2 V, no knee): the ECM is exactly LTI within a segment
LINEAR_OCV = (3.0, 1.2, 0.0, 1.0)


@pytest.fixture(scope="session")
def quiet_protocol():
    return ecmsim.ProtocolSpec(noise_std_v=0.0)


@pytest.fixture(scope="session")
def linear_params():
    return ecmsim.EcmParams(ocv_coeffs=LINEAR_OCV)


@pytest.fixture(scope="session")
def default_trace(quiet_protocol):
    return ecmsim.simulate_trace(ecmsim.EcmParams(), quiet_protocol, seed=0, file_id="cycle_000")


@pytest.fixture(scope="session")
def noisy_series():
    return ecmsim.simulate_hppc(ecmsim.EcmParams(), ecmsim.ProtocolSpec(), seed=7, file_id="noisy")


def simulate_lti(A, B, n, seed=0):
    """State and input sequences of x_{k+1} = A x_k + B u_k from x_0 = 0."""
    rng = np.random.default_rng(seed)
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    u = rng.normal(size=(B.shape[1], n))
    x = np.zeros((A.shape[0], n + 1))
    for k in range(n):
        x[:, k + 1] = A @ x[:, k] + B @ u[:, k]
    return x, u
