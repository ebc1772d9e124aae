import pytest

from mmfields.data import SyntheticSceneSpec, generate_synthetic_scene
from mmfields.pipeline import train_run
from mmfields.trainer import TrainSchedule


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A small desk scene shared by CLI/service tests."""
    out = tmp_path_factory.mktemp("scene") / "desk"
    spec = SyntheticSceneSpec.desk(
        n_views=6, test_every=3, width=24, height=24, supersample=2, embed_dim=8
    )
    generate_synthetic_scene(spec, out_path=out, seed=11)
    return out


@pytest.fixture(scope="session")
def tiny_run(tiny_scene, tmp_path_factory):
    """A quick (non-converged) training run over the tiny scene."""
    out = tmp_path_factory.mktemp("run") / "r0"
    schedule = TrainSchedule(
        phase1_iters=40, phase2_iters=15, phase3_iters=15,
        rays_per_batch=96, patches_per_batch=3, n_samples=16,
    )
    train_run(tiny_scene, out, resolution=(12, 12, 8), schedule=schedule, seed=5)
    return out
