import pytest
import yaml

from modules.config_loader import DEFAULT_CONFIG_FILE, ConfigLoader
from modules.errors import ConfigError
from modules.training import RunConfig


def _write(tmp_path, document):
    path = tmp_path / "cromekit.yaml"
    path.write_text(document)
    return str(path)


def test_defaults_mirror_run_config():
    assert ConfigLoader.DEFAULTS == RunConfig().to_dict()


def test_bundled_config_is_the_default_run():
    assert ConfigLoader(DEFAULT_CONFIG_FILE).to_run_config() == RunConfig()


def test_missing_default_file_falls_back(tmp_path, monkeypatch):
    monkeypatch.setattr('modules.config_loader.DEFAULT_CONFIG_FILE', str(tmp_path / "absent.yaml"))
    loader = ConfigLoader()
    assert loader.config == ConfigLoader.DEFAULTS
    assert loader.config is not ConfigLoader.DEFAULTS


def test_explicit_missing_file_is_an_error(tmp_path):
    with pytest.raises(ConfigError):
        ConfigLoader(str(tmp_path / "absent.yaml"))


def test_file_values_merge_over_defaults(tmp_path):
    loader = ConfigLoader(_write(tmp_path, "metric:\n  alpha: 32\n  beta: 0.5\ntraining:\n  epochs: 3\n"))
    config = loader.to_run_config()
    assert config.metric.alpha == 32 and config.metric.beta_weight == 0.5
    assert config.metric.delta == 0.1
    assert config.training.epochs == 3 and config.training.batch_size == 64
    assert loader.get('metric', 'alpha') == 32
    assert loader.get('metric', 'gamma', default='x') == 'x'


def test_empty_file_means_defaults(tmp_path):
    assert ConfigLoader(_write(tmp_path, "")).to_run_config() == RunConfig()


@pytest.mark.parametrize("document", [
    "optimizer:\n  lr: 0.1\n",
    "metric:\n  gamma: 1\n",
    "metric: 5\n",
    "- a\n- b\n",
    "metric: [\n",
])
def test_bad_files(tmp_path, document):
    with pytest.raises(ConfigError):
        ConfigLoader(_write(tmp_path, document))


def test_invalid_values_fail_on_validation(tmp_path):
    loader = ConfigLoader(_write(tmp_path, "fusion:\n  d_c: 6\n  heads: 4\n"))
    with pytest.raises(ConfigError):
        loader.to_run_config()


def test_overrides_beat_the_file(tmp_path):
    path = _write(tmp_path, "metric:\n  alpha: 32\n")
    loader = ConfigLoader(path, {'metric.alpha': 4, 'ablate.no_tt': True})
    config = loader.to_run_config()
    assert config.metric.alpha == 4
    assert config.ablate.no_tt
    with pytest.raises(ConfigError):
        ConfigLoader(path, {'metric.gamma': 1})
    with pytest.raises(ConfigError):
        ConfigLoader(path, {'alpha': 1})


def test_parse_assignments():
    parsed = ConfigLoader.parse_assignments(['metric.alpha=8', 'ablate.no_cm=true', 'data.dataset=',
                                             'sweep.alphas=[4, 8]', 'logging.level=DEBUG'])
    assert parsed == {'metric.alpha': 8, 'ablate.no_cm': True, 'data.dataset': None,
                      'sweep.alphas': [4, 8], 'logging.level': 'DEBUG'}
    for bad in ('metric.alpha', '=3', 'sweep.alphas=[1, 2'):
        with pytest.raises(ConfigError):
            ConfigLoader.parse_assignments([bad])


def test_round_trip_through_yaml(tmp_path):
    document = yaml.safe_dump(RunConfig().for_variant('no_blip').to_dict())
    assert ConfigLoader(_write(tmp_path, document)).to_run_config() == RunConfig().for_variant('no_blip')
