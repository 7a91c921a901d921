import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_model():
    from voltvar import FeederModel

    return FeederModel(R=[[0.3]], X=[[0.5]], v0=1.0, qhat=[1.0])


@pytest.fixture
def scalar_rule():
    """vref=1, delta=0, alpha=1, qbar=1 (sigma=1 keeps alpha=qbar/(sigma-delta)=1)."""
    from voltvar import RuleParams

    return RuleParams(vref=[1.0], delta=[0.0], sigma=[1.0], qbar=[1.0], qhat=[1.0])
