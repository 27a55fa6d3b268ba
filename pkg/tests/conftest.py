import pytest

import paramskills as ps
from paramskills import synthdemo, trajstore
from paramskills.skillnet import ModelConfig, build_bundle

N_TASKS = 6
DEMOS_PER_TASK = 3
DATA_SEED = 3


@pytest.fixture(scope="session")
def suite():
    return ps.make_suite(N_TASKS, seed=7)


@pytest.fixture(scope="session")
def dataset(suite):
    return ps.generate_dataset(suite, DEMOS_PER_TASK, noise_scale=0.01, seed=DATA_SEED)


@pytest.fixture(scope="session")
def manifest(suite, dataset):
    return synthdemo.build_manifest(suite, dataset, DATA_SEED)


@pytest.fixture(scope="session")
def model_config(manifest):
    return ModelConfig.from_manifest(manifest)


@pytest.fixture()
def bundle(model_config):
    return build_bundle(model_config, seed=0)


@pytest.fixture()
def batch(dataset, manifest):
    return trajstore.make_batch(dataset[:3], manifest.n_tasks)
