import numpy as np
import pytest

from transferbench import nnet
from transferbench.config import load_config
from transferbench.data import SyntheticSpec, gen_synthetic
from transferbench.harness import build_context

DESK_CONFIG = "configs/desk.yaml"


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_synthetic(
        SyntheticSpec(num_classes=3, dim=36, per_class=80, cluster_std=0.12), seed=7
    )


@pytest.fixture(scope="session")
def tiny_arch(tiny_dataset):
    return nnet.ArchSpec(
        input_shape=tiny_dataset.shape,
        layers=(nnet.flatten(), nnet.dense(36, 16), nnet.relu(), nnet.dense(16, 3)),
        num_classes=3,
    )


@pytest.fixture(scope="session")
def tiny_net(tiny_dataset, tiny_arch):
    return nnet.train_model(
        tiny_dataset, tiny_arch, nnet.TrainSettings(epochs=40, learning_rate=0.1), seed=11
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_cfg(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    return load_config(DESK_CONFIG, overrides=[f"out_dir={out}"])


@pytest.fixture(scope="session")
def desk_ctx(desk_cfg):
    # trains the full zoo once per session; the acceptance protocols reuse it
    return build_context(desk_cfg)
