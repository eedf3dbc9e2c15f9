import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sceneprior.data import DatasetSpec, generate_dataset, load_dataset
from sceneprior.generator import GeneratorConfig
from sceneprior.model import ModelConfig

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_GEN = GeneratorConfig(d_model=16, heads=4, ff_widths=(32, 16), n_max=4)
TINY_MODEL = ModelConfig(generator=TINY_GEN, n_anchors=16, template_level=1, trunk=(32, 16),
                         shape_hidden=(16,), seed=0)
TINY_SPEC = DatasetSpec(n_scenes=2, min_objects=1, max_objects=3, n_views=4, image_size=(32, 32), seed=5)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(TINY_SPEC, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
