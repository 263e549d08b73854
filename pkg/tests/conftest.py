import json
import os

import numpy as np
import pytest

from modules.data import GenSpec, generate
from modules.detector import AblationFlags
from modules.metric import MetricConfig
from modules.training import (
    DetectorConfig,
    EncoderConfig,
    FusionConfig,
    RunConfig,
    SweepConfig,
    AblationSuiteConfig,
    TrainingConfig,
)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), 'golden')


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="Rewrite golden files from the current outputs")
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="Run the long acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="slow acceptance test, use --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


DATASET_FIXTURE = os.path.join(GOLDEN_DIR, 'dataset_fixture.jsonl')


def ramp(shape, phase: float, scale: float = 1.0) -> np.ndarray:
    """Deterministic fill scale * 0.5 sin(0.37 (j + 1) + phase) over the row-major index j."""
    size = int(np.prod(shape))
    return (scale * 0.5 * np.sin(0.37 * np.arange(1, size + 1) + phase)).reshape(shape)


TINY_GENERATOR = GenSpec(n_samples=40, d_raw=4, k_img=2, k_txt=2, n_topics=3, noise_sigma=0.2, seed=3)


def tiny_config(**sections) -> RunConfig:
    """Small dimensions so a full epoch runs in milliseconds."""
    base = dict(
        encoders=EncoderConfig(d_raw=4, d_hidden=6, d_emb=4, k_img=2, k_txt=2),
        fusion=FusionConfig(d_c=4, heads=2, dropout=0.1),
        detector=DetectorConfig(hidden=4),
        metric=MetricConfig(epochs_per_modality=1),
        training=TrainingConfig(batch_size=8, epochs=2, seed=7),
        generator=TINY_GENERATOR,
        sweep=SweepConfig(alphas=(4.0, 8.0), deltas=(0.1, 0.2), epochs=1),
        ablation_suite=AblationSuiteConfig(seeds=1, epochs=1),
        ablate=AblationFlags(),
    )
    base.update(sections)
    return RunConfig(**base)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(TINY_GENERATOR)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def golden(request):
    """golden(name, {key: array}) compares against tests/golden/<name>.json to 1e-10."""
    update = request.config.getoption("--update-golden")

    def check(name, values):
        path = os.path.join(GOLDEN_DIR, f"{name}.json")
        payload = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in values.items()}
        if update:
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            with open(path, 'w') as f:
                json.dump(payload, f, indent=1, sort_keys=True)
            return
        if not os.path.exists(path):
            pytest.skip(f"golden file {name}.json missing; create it with pytest --update-golden")
        with open(path) as f:
            expected = json.load(f)
        assert sorted(expected) == sorted(payload)
        for key in payload:
            np.testing.assert_allclose(payload[key], expected[key], rtol=0, atol=1e-10, err_msg=key)

    return check


@pytest.fixture
def golden_checksum(request):
    """golden_checksum(name, sha) compares against the entry in tests/golden/checksums.json."""
    update = request.config.getoption("--update-golden")
    path = os.path.join(GOLDEN_DIR, 'checksums.json')

    def check(name, sha):
        known = {}
        if os.path.exists(path):
            with open(path) as f:
                known = json.load(f)
        if update:
            known[name] = sha
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            with open(path, 'w') as f:
                json.dump(known, f, indent=1, sort_keys=True)
            return
        if name not in known:
            pytest.skip(f"checksum {name} missing; record it with pytest --update-golden")
        assert sha == known[name], name

    return check
