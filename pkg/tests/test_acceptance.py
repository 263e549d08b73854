"""Desk-scale end-to-end checks. The slow ones need --run-slow."""

import numpy as np
import pytest

from conftest import tiny_config
from modules.cli import ablate_suite
from modules.data import GenSpec, generate, split
from modules.encoders import MODALITIES, Z_I1
from modules.metric import MetricConfig
from modules.model import FUSION_GROUP
from modules.training import (
    AblationSuiteConfig,
    RunConfig,
    SweepConfig,
    Trainer,
    TrainingConfig,
    batch_indices,
    sweep,
)

DESK_SCALE = GenSpec(n_samples=2000, fake_fraction=0.5, archetype_mix=(0.25, 0.25, 0.25, 0.25), noise_sigma=0.3)


def test_schedule_windows_over_fifty_epochs(tiny_dataset):
    config = tiny_config(metric=MetricConfig(epochs_per_modality=5),
                         training=TrainingConfig(batch_size=8, epochs=50, seed=7))
    trainer = Trainer(config)
    result = trainer.fit(tiny_dataset)
    batches = len(batch_indices(len(tiny_dataset), 8, None))
    for modality in MODALITIES:
        assert trainer.optimizers[modality].step == 10 * batches
    assert trainer.optimizers[FUSION_GROUP].step == 50 * batches
    active = [r['active_modality'] for r in result.history]
    windows = [active[i:i + 5] for i in range(0, 50, 5)]
    assert all(len(set(w)) == 1 for w in windows)
    assert [w[0] for w in windows] == list(MODALITIES) * 2


def test_sweep_grid_is_complete_and_deterministic(tiny_dataset):
    config = tiny_config(sweep=SweepConfig(epochs=1))
    train, test = split(tiny_dataset, 0.8, 0)
    first = sweep(config, train, test)
    second = sweep(config, train, test)
    assert first.accuracy.shape == (4, 4)
    assert first.complete
    assert np.array_equal(first.accuracy, second.accuracy)


@pytest.mark.slow
def test_metric_only_training_separates_classes():
    spec = GenSpec(n_samples=200, noise_sigma=0.1, archetype_mix=(0.5, 0.5, 0.0, 0.0), seed=1)
    config = RunConfig(generator=spec)
    result = Trainer(config).fit_metric_only(generate(spec), Z_I1, steps=200, lr=0.01)
    assert result.separation_after >= 0.3
    assert result.separation_after > result.separation_before


@pytest.mark.slow
def test_full_model_learns_the_desk_scale_set():
    config = RunConfig(generator=DESK_SCALE)
    train, test = split(generate(DESK_SCALE), 0.8, config.training.seed)
    result = Trainer(config).fit(train, test)
    assert result.report.accuracy >= 0.90


@pytest.mark.slow
def test_cross_modal_fusion_and_metric_learning_help():
    config = RunConfig(generator=DESK_SCALE, ablation_suite=AblationSuiteConfig(seeds=5))
    train, test = split(generate(DESK_SCALE), 0.8, config.training.seed)
    report = ablate_suite(config, train, test, variants=['full', 'no_cm', 'no_mt'])
    results = {v.name: v for v in report.variants}
    full = results['full'].reports

    def wins(other, key=lambda r: r.accuracy, margin=0.0):
        return sum(key(a) > key(b) + margin for a, b in zip(full, results[other].reports))

    assert wins('no_cm') >= 4
    assert wins('no_mt') >= 4
    assert wins('no_cm', key=lambda r: r.per_kind['c'], margin=0.02) >= 4
