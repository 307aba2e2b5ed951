"""
Shared fixtures: miniature models, datasets and run configs so the suite
stays fast on one CPU core
"""

import numpy as np
import pytest

from core.dataset import SyntheticDatasetSpec, generate_synthetic_dataset, make_task_stream
from core.distillation import DistillConfig
from core.harness import RunConfig
from core.prompt_pool import PoolConfig
from core.rng import SeededRng
from core.vit import BackboneWeights, ViTConfig

TINY_STUDENT = ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=8, heads=2, blocks=2, mlp_ratio=2, num_classes=4)
TINY_TEACHER = ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=12, heads=2, blocks=3, mlp_ratio=2, num_classes=4)
TINY_DATA = SyntheticDatasetSpec(num_classes=4, pretrain_classes=2, image_size=8, train_per_class=6,
                                 test_per_class=3, coarse=4, seed=0)
TINY_POOLS = {
    "l2p": PoolConfig(method="l2p", size=4, top_k=2, prompt_length=2, layers=(0,)),
    "dualprompt": PoolConfig(method="dualprompt", prompt_length=2, layers=(1,), g_layers=(0,)),
    "coda": PoolConfig(method="coda", prompt_length=2, layers=(0, 1), components_per_task=2),
}

# JSON document equivalent of the tiny setup, for CLI and config tests
TINY_CONFIG_DOC = {
    "seeds": [0],
    "pools": ["coda"],
    "distills": ["none", "kdp"],
    "tasks": 2,
    "epochs": 1,
    "batch_size": 4,
    "learning_rate": 0.01,
    "pretrain_epochs": 1,
    "distill": {"kd_prompt_length": 2},
    "student": TINY_STUDENT.to_dict(),
    "teacher": TINY_TEACHER.to_dict(),
    "pool": {"prompt_length": 2, "layers": [0, 1], "components_per_task": 2},
    "dataset": TINY_DATA.to_dict(),
}


collect_ignore = ["examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs on the desk benchmark")
    # slow runs only when asked for with -m
    if not config.option.markexpr:
        config.option.markexpr = "not slow"


def tiny_run_config(method="none", pool="coda", seed=0, tasks=2, epochs=1, learning_rate=0.01,
                    unfreeze_last_block=False, **distill_overrides):
    distill_overrides.setdefault("kd_prompt_length", 2)
    return RunConfig(
        seed=seed,
        tasks=tasks,
        epochs=epochs,
        batch_size=4,
        learning_rate=learning_rate,
        pretrain_epochs=0,
        unfreeze_last_block=unfreeze_last_block,
        pool=TINY_POOLS[pool],
        distill=DistillConfig(method=method, **distill_overrides),
        student=TINY_STUDENT,
        teacher=TINY_TEACHER,
    ).validate()


@pytest.fixture
def rng():
    return SeededRng(1234, "tests")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic_dataset(TINY_DATA)


@pytest.fixture(scope="session")
def tiny_stream(tiny_dataset):
    return make_task_stream(tiny_dataset, 2, seed=0)


@pytest.fixture(scope="session")
def tiny_backbones():
    """(student, teacher) frozen, randomly initialized backbones"""
    student = BackboneWeights.initialize(TINY_STUDENT, SeededRng(0, "tiny/student")).freeze()
    teacher = BackboneWeights.initialize(TINY_TEACHER, SeededRng(0, "tiny/teacher")).freeze()
    return student, teacher


@pytest.fixture
def random_images():
    def make(count, config=TINY_STUDENT, seed=0):
        shape = (count, config.channels, config.image_size, config.image_size)
        return SeededRng(seed, "tests/images").uniform(shape)
    return make


def lower_triangular(rng, tasks):
    return [[float(v) for v in rng.uniform((i + 1,), 0.0, 100.0)] for i in range(tasks)]


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)
