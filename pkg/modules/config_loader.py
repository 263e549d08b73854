import copy
import logging
import os
from typing import Any, Dict, Iterable, Optional

import yaml

from modules.errors import ConfigError
from modules.training import RunConfig

logger = logging.getLogger('cromekit')

DEFAULT_CONFIG_FILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                   'config', 'cromekit_config.yaml')


class ConfigLoader:
    """
    Loads cromekit configuration from a YAML file.
    Precedence: DEFAULTS < YAML file < command-line overrides.
    """

    # Default configuration values (immutable reference)
    DEFAULTS: Dict[str, Dict[str, Any]] = {
        'encoders': {
            'd_raw': 16,
            'd_hidden': 32,
            'd_emb': 32,
            'k_img': 4,
            'k_txt': 4,
            'init': 'xavier'
        },
        'fusion': {
            'd_c': 64,
            'heads': 4,
            'dropout': 0.1
        },
        'detector': {
            'hidden': 64
        },
        'metric': {
            'alpha': 16.0,
            'delta': 0.1,
            'beta': 0.1,
            'epochs_per_modality': 5,
            'similarity': 'cosine',
            'all_modalities': False
        },
        'training': {
            'lr': 1e-3,
            'beta1': 0.9,
            'beta2': 0.999,
            'epsilon': 1e-8,
            'batch_size': 64,
            'epochs': 50,
            'seed': 0,
            'ce_all_encoders': False,
            'checkpoint_every': 1
        },
        'ablate': {
            'no_image': False,
            'no_text': False,
            'no_blip': False,
            'no_blip_joint': False,
            'no_cm': False,
            'no_mt': False,
            'no_tt': False
        },
        'generator': {
            'n_samples': 2000,
            'fake_fraction': 0.5,
            'archetype_mix': [0.25, 0.25, 0.25, 0.25],
            'n_topics': 8,
            'noise_sigma': 0.3,
            'd_raw': 16,
            'k_img': 4,
            'k_txt': 4,
            'seed': 0,
            'offset_scale': 0.5,
            'corruption_scale': 1.0
        },
        'data': {
            'dataset': None,
            'test_dataset': None,
            'train_fraction': 0.8
        },
        'sweep': {
            'alphas': [4.0, 8.0, 16.0, 32.0],
            'deltas': [0.1, 0.2, 0.3, 0.4],
            'epochs': 10,
            'workers': 1
        },
        'ablation_suite': {
            'seeds': 5,
            'include_extended': False,
            'epochs': None,
            'workers': 1
        },
        'logging': {
            'level': 'INFO',
            'file': ''
        }
    }

    __slots__ = ('config_file', 'config')

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Load configuration and apply overrides.

        Args:
            config_file: Path to a YAML config file. When given explicitly it must exist;
                when omitted the bundled default file is used if present.
            overrides: Dotted keys ('metric.alpha') mapped to values, applied last.
        """
        self.config_file = config_file or DEFAULT_CONFIG_FILE
        self.config = self._load_config(required=config_file is not None)
        if overrides:
            self.apply_overrides(overrides)

    def _load_config(self, required: bool):
        """
        Load configuration from YAML file or return defaults if the default file doesn't exist.
        """
        if not os.path.exists(self.config_file):
            if required:
                raise ConfigError(f"config file not found: '{self.config_file}'")
            logger.warning(f"[ConfigLoader] Config file not found at '{self.config_file}'. Using default values.")
            return copy.deepcopy(self.DEFAULTS)

        try:
            with open(self.config_file, 'r') as f:
                file_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"error parsing YAML config file '{self.config_file}': {e}") from None
        if not isinstance(file_config, dict):
            raise ConfigError(f"config file '{self.config_file}' must hold a mapping of sections")

        self._check_keys(file_config, source=self.config_file)
        merged_config = self._deep_merge(copy.deepcopy(self.DEFAULTS), file_config)
        logger.info(f"[ConfigLoader] Configuration loaded from '{self.config_file}'.")
        return merged_config

    @classmethod
    def _check_keys(cls, values: Dict[str, Any], source: str) -> None:
        for section, body in values.items():
            if section not in cls.DEFAULTS:
                raise ConfigError(f"{source}: unknown section '{section}'")
            if body is None:
                continue
            if not isinstance(body, dict):
                raise ConfigError(f"{source}: section '{section}' must be a mapping")
            unknown = sorted(set(body) - set(cls.DEFAULTS[section]))
            if unknown:
                raise ConfigError(f"{source}: unknown key(s) {[f'{section}.{k}' for k in unknown]}")

    @staticmethod
    def _deep_merge(defaults, overrides):
        """
        Deep merge overrides into defaults (overrides take precedence).
        """
        result = defaults.copy()

        for key, value in overrides.items():
            if isinstance(value, dict) and key in result and isinstance(result[key], dict):
                result[key] = ConfigLoader._deep_merge(result[key], value)
            elif value is not None or not isinstance(result.get(key), dict):
                result[key] = value

        return result

    @staticmethod
    def parse_assignments(assignments: Iterable[str]) -> Dict[str, Any]:
        """
        Turn 'section.key=value' strings into an override mapping.
        Values are parsed as YAML scalars, so '8' is an int and 'true' a bool.
        """
        overrides = {}
        for item in assignments:
            key, sep, raw = item.partition('=')
            if not sep or not key.strip():
                raise ConfigError(f"--set expects section.key=value, got '{item}'")
            try:
                overrides[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
            except yaml.YAMLError:
                raise ConfigError(f"--set value for '{key}' is not a valid scalar: '{raw}'") from None
        return overrides

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        for key, value in overrides.items():
            parts = key.split('.')
            if len(parts) != 2:
                raise ConfigError(f"override key '{key}' must look like section.key")
            self._check_keys({parts[0]: {parts[1]: value}}, source='override')
            self.config[parts[0]][parts[1]] = value
            logger.debug(f"[ConfigLoader] override {key} = {value!r}")

    def get(self, *keys, default=None):
        """
        Get a config value using nested keys.
        Example: config.get('metric', 'alpha')
        """
        value = self.config

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                logger.warning(f"[ConfigLoader] Config key not found: {'.'.join(keys)}. Using default: {default}")
                return default

        return value

    def to_run_config(self) -> RunConfig:
        """Validate the merged configuration into a RunConfig."""
        return RunConfig.from_dict(self.config)

    def log_config(self):
        """Log loaded configuration for debugging."""
        logger.info("[ConfigLoader] Current Configuration:")
        logger.info(f"  Encoders: d_raw={self.get('encoders', 'd_raw')}, d_hidden={self.get('encoders', 'd_hidden')}, "
                    f"d_emb={self.get('encoders', 'd_emb')}, tokens={self.get('encoders', 'k_img')}")
        logger.info(f"  Fusion: d_c={self.get('fusion', 'd_c')}, heads={self.get('fusion', 'heads')}, "
                    f"dropout={self.get('fusion', 'dropout')}")
        logger.info(f"  Metric: alpha={self.get('metric', 'alpha')}, delta={self.get('metric', 'delta')}, "
                    f"beta={self.get('metric', 'beta')}, epochs/modality={self.get('metric', 'epochs_per_modality')}")
        logger.info(f"  Training: lr={self.get('training', 'lr')}, batch={self.get('training', 'batch_size')}, "
                    f"epochs={self.get('training', 'epochs')}, seed={self.get('training', 'seed')}")
        active = [flag for flag, on in self.get('ablate', default={}).items() if on]
        logger.info(f"  Ablation: {', '.join(active) if active else 'none (full model)'}")
