import numpy as np
import pytest

from sopelab import data, envlab
from sopelab.errors import DependencyError


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = data.BootstrapConfig(env="chain", steps=400, warmup=100, hidden=(8,), batch_size=16, anchor_episodes=100)
    anchors = data.bootstrap(cfg, root)
    return root, anchors


def test_bootstrap_writes_checkpoints_and_anchors(tiny_root):
    root, anchors = tiny_root
    env = root / "tabular-chain"
    for tier in envlab.TIERS:
        assert (env / f"policy_{tier}.ckpt").exists()
    assert data.anchors_for("chain", root) == anchors
    assert anchors.random_return == pytest.approx(envlab.chain_expected_return(0.5, 30), abs=0.15)


def test_chain_sources_train_without_soft_bonus(tiny_root):
    root, _ = tiny_root
    assert not data.load_policy("chain", "expert", root).config.entropy_in_target


def test_generate_all_writes_tier_files(tiny_root):
    root, _ = tiny_root
    paths = data.generate_all("chain", 250, seed=1, root=root)
    for tier, path in paths.items():
        ds = envlab.load_dataset(path)
        assert (ds.tier, len(ds), ds.env) == (tier, 250, "tabular-chain")
    again = data.tier_dataset("chain", "expert", 250, seed=1, root=root)
    assert np.array_equal(again.action, envlab.load_dataset(paths["expert"]).action)


def test_missing_checkpoint_names_the_fix(tmp_path):
    with pytest.raises(DependencyError, match="sopelab bootstrap"):
        data.load_policy("pendulum", "expert", tmp_path)


def test_data_root_follows_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("SOPE_DATA_DIR", str(tmp_path))
    assert data.env_dir("reacher") == tmp_path / "point-reacher"
    monkeypatch.delenv("SOPE_DATA_DIR")
    assert str(data.data_root()) == "data"
