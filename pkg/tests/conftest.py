import pytest

from shardsafe.embedding_store import SyntheticSpec, generate_synthetic
from shardsafe.inca_adapter import TrainConfig


@pytest.fixture
def small_data():
    return generate_synthetic(SyntheticSpec(6, 8, token_count=3, dim=8, seed=11))


@pytest.fixture
def fast_config():
    return TrainConfig(epochs=3, batch_size=8, seed=5)
