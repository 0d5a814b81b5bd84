import datetime as dt
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from relaygeom import harness, synthetic
from relaygeom.population import WindowFrame
from relaygeom.schema import FeatureSchema

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def schema():
    return FeatureSchema.default()


@pytest.fixture(scope="session")
def small_frames():
    """Twelve stable daily frames of 600 relays."""
    return synthetic.generate_population(synthetic.SyntheticConfig(n_relays=600, n_windows=12, seed=0))


@pytest.fixture(scope="session")
def small_models(small_frames):
    return harness.train_models(small_frames[:6], harness.TrainingConfig().with_seed(0))


@pytest.fixture(scope="session")
def small_baselines(small_frames, small_models):
    return harness.fit_baselines(small_frames[:10], small_models)


def make_frame(features, weights=None, role_probs=None, date=dt.date(2026, 1, 1), ids=None):
    features = np.asarray(features, dtype=float)
    n = len(features)
    return WindowFrame(
        date=date,
        ids=ids if ids is not None else [f"r{i}" for i in range(n)],
        features=features,
        consensus_weight=np.ones(n) if weights is None else weights,
        role_probs=np.tile([0.0, 1.0, 0.0], (n, 1)) if role_probs is None else role_probs,
    )
