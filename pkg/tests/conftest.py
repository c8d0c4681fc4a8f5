import pytest

from dualgcn.config import resolve_config
from dualgcn.experiments import prepare

TINY = dict(n_train=48, n_val=8, n_test=8, M=2, epochs=2.0, shard_epochs=2.0, batch_size=8, d_model=16, d_g=8,
            d_embed=16, feature_dim=16, max_len=8, n_groups=12, seeds=[0, 1], K=3)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("DGCN_SEED", raising=False)


@pytest.fixture
def tiny_cfg(tmp_path):
    return resolve_config("toy", overrides=dict(TINY, out_dir=str(tmp_path / "run")))


@pytest.fixture(scope="session")
def tiny_ws():
    return prepare(resolve_config("toy", overrides=TINY))
