"""Classifier head, the two losses, and the ablation variants.

Head: FC -> BN -> ReLU -> FC -> BN -> ReLU -> FC(2) -> softmax.

Each ablation keeps every downstream shape fixed: removed encoders become zero
blocks, a removed branch becomes a learned constant token, so all variants
share one classifier architecture.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from modules.encoders import MODALITIES, Z_B, Z_I1, Z_I2, Z_T1, Z_T2
from modules.errors import ConfigError, ShapeError
from modules.layers import BatchNorm, Linear
from modules.numerics import (
    PROB_FLOOR,
    Node,
    Parameter,
    add,
    log_clamped,
    mean_axis,
    mul,
    relu,
    scale,
    softmax_rows,
    sum_axis,
)

logger = logging.getLogger('cromekit')

N_CLASSES = 2

# Pairwise similarity terms of the C2 branch and the modalities each one needs.
SIMILARITY_TERMS = ('ti', 'tb', 'ib')
TERM_MODALITIES = {
    'ti': (Z_T2, Z_I2),
    'tb': (Z_T2, Z_B),
    'ib': (Z_I2, Z_B),
}

FLAG_NAMES = ('no_image', 'no_text', 'no_blip', 'no_blip_joint', 'no_cm', 'no_mt', 'no_tt')

# variant name -> flags switched on
VARIANTS: Dict[str, Tuple[str, ...]] = {
    'full': (),
    'no_image': ('no_image',),
    'no_text': ('no_text',),
    'no_blip': ('no_blip',),
    'no_blip_joint': ('no_blip_joint',),
    'no_cm': ('no_cm',),
    'no_mt': ('no_mt',),
    'no_tt': ('no_tt',),
}
EXTENDED_VARIANTS: Dict[str, Tuple[str, ...]] = {
    'no_cm_tt': ('no_cm', 'no_tt'),
}

DEFAULT_MANIFEST = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                'config', 'ablation_manifest.yaml')


@dataclass(frozen=True)
class AblationFlags:
    no_image: bool = False
    no_text: bool = False
    no_blip: bool = False
    no_blip_joint: bool = False
    no_cm: bool = False
    no_mt: bool = False
    no_tt: bool = False

    @classmethod
    def from_mapping(cls, values: Optional[Mapping[str, bool]]) -> 'AblationFlags':
        values = dict(values or {})
        unknown = sorted(set(values) - set(FLAG_NAMES))
        if unknown:
            raise ConfigError(f"unknown ablation flag(s) {unknown}, expected a subset of {FLAG_NAMES}")
        return cls(**{k: bool(v) for k, v in values.items()})

    @classmethod
    def for_variant(cls, name: str) -> 'AblationFlags':
        table = {**VARIANTS, **EXTENDED_VARIANTS}
        if name not in table:
            raise ConfigError(f"unknown ablation variant '{name}', expected one of {sorted(table)}")
        return cls(**{flag: True for flag in table[name]})

    @property
    def active(self) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(self) if getattr(self, f.name))

    @property
    def variant_name(self) -> str:
        """Name of the variant this flag set realizes; raises ConfigError if none."""
        if self.no_image and self.no_text:
            raise ConfigError("contradictory ablation flags: no_image and no_text together remove every modality")
        active = set(self.active)
        for name, flags in {**VARIANTS, **EXTENDED_VARIANTS}.items():
            if set(flags) == active:
                return name
        raise ConfigError(f"ablation flags {sorted(active)} do not match any known variant")

    def as_dict(self) -> Dict[str, bool]:
        return asdict(self)


@dataclass(frozen=True)
class PipelineVariant:
    """What the forward pass and the trainer do under one flag set."""

    name: str
    available: Tuple[str, ...]
    sim_terms: Tuple[str, ...]
    use_cm: bool
    use_tt: bool
    use_metric: bool
    beta: float

    @property
    def removed(self) -> Tuple[str, ...]:
        return tuple(m for m in MODALITIES if m not in self.available)


def apply_ablation(flags: AblationFlags, beta: float = 0.1) -> PipelineVariant:
    """Turn a validated flag set into the concrete pipeline variant."""
    name = flags.variant_name
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    removed = set()
    if flags.no_image:
        removed |= {Z_I1, Z_I2}
    if flags.no_text:
        removed |= {Z_T1, Z_T2}
    if flags.no_blip:
        removed |= {Z_I2, Z_T2, Z_B}
    if flags.no_blip_joint:
        removed.add(Z_B)
    available = tuple(m for m in MODALITIES if m not in removed)
    sim_terms = tuple(t for t in SIMILARITY_TERMS if all(m in available for m in TERM_MODALITIES[t]))
    variant = PipelineVariant(
        name=name,
        available=available,
        sim_terms=sim_terms,
        use_cm=not flags.no_cm,
        use_tt=not flags.no_tt,
        use_metric=not flags.no_mt,
        beta=0.0 if flags.no_mt else float(beta),
    )
    logger.debug(f"[Ablation] variant '{name}': modalities={available}, similarity terms={sim_terms}")
    return variant


@dataclass(frozen=True)
class ManifestRow:
    name: str
    label: str
    flags: AblationFlags
    baseline: bool = False
    extended: bool = False


def load_ablation_manifest(path: str = DEFAULT_MANIFEST, include_extended: bool = False) -> List[ManifestRow]:
    """Read the ablation table; every row must name exactly one known variant."""
    try:
        with open(path, 'r') as f:
            document = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"ablation manifest not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"ablation manifest {path} is not valid YAML: {e}") from None

    rows = []
    for entry in document.get('variants', []):
        flags = AblationFlags.from_mapping(entry.get('flags'))
        name = entry.get('name')
        if flags.variant_name != name:
            raise ConfigError(f"manifest row '{name}' has flags of variant '{flags.variant_name}'")
        rows.append(ManifestRow(name, entry.get('label', name), flags,
                                bool(entry.get('baseline', False)), bool(entry.get('extended', False))))

    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError(f"ablation manifest {path} repeats a variant: {names}")
    if sum(r.baseline for r in rows) != 1:
        raise ConfigError(f"ablation manifest {path} must flag exactly one baseline row")
    if include_extended:
        return rows
    return [r for r in rows if not r.extended]


class DetectorParams:
    """Three fully connected layers, batch norm and ReLU between, two outputs."""

    def __init__(self, in_width: int, hidden: int, rng: Optional[np.random.Generator] = None):
        self.fc1 = Linear('detector.fc1', in_width, hidden, rng, bias=False)
        self.bn1 = BatchNorm('detector.bn1', hidden)
        self.fc2 = Linear('detector.fc2', hidden, hidden, rng, bias=False)
        self.bn2 = BatchNorm('detector.bn2', hidden)
        self.fc3 = Linear('detector.fc3', hidden, N_CLASSES, rng)

    @property
    def in_width(self) -> int:
        return self.fc1.in_width

    def parameters(self) -> List[Parameter]:
        return [p for layer in (self.fc1, self.bn1, self.fc2, self.bn2, self.fc3) for p in layer.parameters()]

    def batch_norms(self) -> List[BatchNorm]:
        return [self.bn1, self.bn2]


@dataclass
class Prediction:
    y_hat: Node
    logits: Node

    @property
    def probabilities(self) -> np.ndarray:
        return self.y_hat.value

    @property
    def labels(self) -> np.ndarray:
        return self.y_hat.value.argmax(axis=-1)


def classify(unified: Node, params: DetectorParams, mode: str) -> Prediction:
    if unified.ndim != 2 or unified.shape[-1] != params.in_width:
        raise ShapeError(f"detector expects (batch, {params.in_width}) features, got {unified.shape}")
    tape = unified.tape
    hidden = relu(params.bn1(tape, params.fc1(tape, unified), mode))
    hidden = relu(params.bn2(tape, params.fc2(tape, hidden), mode))
    logits = params.fc3(tape, hidden)
    return Prediction(softmax_rows(logits), logits)


def cross_entropy(pred: Prediction, y: Union[int, Sequence[int], np.ndarray]) -> Node:
    """Batch mean of -y log p1 - (1 - y) log p0, probabilities floored at 1e-12."""
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape[0] != pred.y_hat.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {pred.y_hat.shape[0]} predictions")
    one_hot = np.eye(N_CLASSES)[labels]
    picked = sum_axis(mul(log_clamped(pred.y_hat, PROB_FLOOR), one_hot), axis=-1)
    return scale(mean_axis(picked), -1.0)


def total_loss(ce, metric, beta: float):
    """L_total = ce + beta * metric; a missing metric term or beta=0 leaves ce untouched."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if metric is None or beta == 0.0:
        return ce
    if isinstance(metric, Node):
        return add(ce, scale(metric, beta))
    if isinstance(ce, Node):
        return add(ce, float(metric) * beta)
    return float(ce) + beta * float(metric)
