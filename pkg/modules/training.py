"""Run configuration, the six-optimizer training loop, evaluation, sweeps and exports.

Each batch steps the fusion+detector optimizer and the optimizer of the
modality whose metric-learning window is active; the other four encoder
groups keep their parameters for the whole epoch.
"""

import csv
import json
import logging
import math
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import checkpoint as ckpt
from modules.data import Dataset, GenSpec
from modules.detector import EXTENDED_VARIANTS, VARIANTS, AblationFlags, PipelineVariant, cross_entropy, total_loss
from modules.encoders import MODALITIES, Sample, TokenBatch
from modules.errors import ConfigError, DatasetError, NonFiniteLossError
from modules.layers import INITS
from modules.metric import (
    MetricConfig,
    ProxyAssignment,
    assign_proxies,
    class_separation,
    metric_loss_for_epoch,
    modality_schedule,
    pool_tokens,
)
from modules.model import FUSION_GROUP, GROUP_NAMES, CromeModel
from modules.numerics import (
    EVAL,
    TRAIN,
    AdamState,
    GradCheckReport,
    Node,
    RngStreams,
    Tape,
    adam_step,
    grad_check,
    validate_dropout_rate,
)

logger = logging.getLogger('cromekit')


# ---------------------------------------------------------------------------
# Configuration sections
# ---------------------------------------------------------------------------

def _require(problems: List[str], ok: bool, message: str) -> None:
    if not ok:
        problems.append(message)


def _raise_if(problems: List[str]) -> None:
    if problems:
        raise ConfigError('; '.join(problems))


@dataclass(frozen=True)
class EncoderConfig:
    d_raw: int = 16
    d_hidden: int = 32
    d_emb: int = 32
    k_img: int = 4
    k_txt: int = 4
    init: str = 'xavier'

    def __post_init__(self):
        problems = []
        for name in ('d_raw', 'd_hidden', 'd_emb', 'k_img', 'k_txt'):
            _require(problems, int(getattr(self, name)) >= 1, f"encoders.{name} must be >= 1, got {getattr(self, name)}")
        _require(problems, self.k_img == self.k_txt,
                 f"encoders.k_img ({self.k_img}) must equal encoders.k_txt ({self.k_txt}): "
                 f"the joint encoder pairs image and text tokens")
        _require(problems, self.init in INITS, f"encoders.init must be one of {INITS}, got '{self.init}'")
        _raise_if(problems)


@dataclass(frozen=True)
class FusionConfig:
    d_c: int = 64
    heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        problems = []
        _require(problems, int(self.d_c) >= 1, f"fusion.d_c must be >= 1, got {self.d_c}")
        _require(problems, int(self.heads) >= 1 and int(self.d_c) % max(int(self.heads), 1) == 0,
                 f"fusion.d_c ({self.d_c}) must be divisible by fusion.heads ({self.heads})")
        _raise_if(problems)
        validate_dropout_rate(self.dropout)


@dataclass(frozen=True)
class DetectorConfig:
    hidden: int = 64

    def __post_init__(self):
        _raise_if([] if int(self.hidden) >= 1 else [f"detector.hidden must be >= 1, got {self.hidden}"])


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    ce_all_encoders: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        problems = []
        _require(problems, self.lr > 0, f"training.lr must be > 0, got {self.lr}")
        _require(problems, 0 <= self.beta1 < 1, f"training.beta1 must lie in [0, 1), got {self.beta1}")
        _require(problems, 0 <= self.beta2 < 1, f"training.beta2 must lie in [0, 1), got {self.beta2}")
        _require(problems, self.epsilon > 0, f"training.epsilon must be > 0, got {self.epsilon}")
        _require(problems, int(self.batch_size) >= 2, f"training.batch_size must be >= 2, got {self.batch_size}")
        _require(problems, int(self.epochs) >= 1, f"training.epochs must be >= 1, got {self.epochs}")
        _require(problems, int(self.seed) >= 0, f"training.seed must be >= 0, got {self.seed}")
        _require(problems, int(self.checkpoint_every) >= 1,
                 f"training.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        _raise_if(problems)


@dataclass(frozen=True)
class DataConfig:
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"data.train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class SweepConfig:
    alphas: Tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    deltas: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    epochs: int = 10
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'alphas', tuple(float(a) for a in self.alphas))
        object.__setattr__(self, 'deltas', tuple(float(d) for d in self.deltas))
        problems = []
        _require(problems, len(self.alphas) > 0, "sweep.alphas must not be empty")
        _require(problems, len(self.deltas) > 0, "sweep.deltas must not be empty")
        _require(problems, all(a > 0 for a in self.alphas), f"sweep.alphas must be > 0, got {self.alphas}")
        _require(problems, all(d > 0 for d in self.deltas), f"sweep.deltas must be > 0, got {self.deltas}")
        _require(problems, int(self.epochs) >= 1, f"sweep.epochs must be >= 1, got {self.epochs}")
        _require(problems, int(self.workers) >= 1, f"sweep.workers must be >= 1, got {self.workers}")
        _raise_if(problems)


@dataclass(frozen=True)
class AblationSuiteConfig:
    seeds: int = 5
    include_extended: bool = False
    epochs: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        problems = []
        _require(problems, int(self.seeds) >= 1, f"ablation_suite.seeds must be >= 1, got {self.seeds}")
        _require(problems, self.epochs is None or int(self.epochs) >= 1,
                 f"ablation_suite.epochs must be >= 1, got {self.epochs}")
        _require(problems, int(self.workers) >= 1, f"ablation_suite.workers must be >= 1, got {self.workers}")
        _raise_if(problems)


@dataclass(frozen=True)
class LoggingConfig:
    level: str = 'INFO'
    file: str = ''

    def __post_init__(self):
        if self.level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"logging.level must be a standard level name, got '{self.level}'")


SECTIONS = {
    'encoders': EncoderConfig,
    'fusion': FusionConfig,
    'detector': DetectorConfig,
    'metric': MetricConfig,
    'training': TrainingConfig,
    'ablate': AblationFlags,
    'generator': GenSpec,
    'data': DataConfig,
    'sweep': SweepConfig,
    'ablation_suite': AblationSuiteConfig,
    'logging': LoggingConfig,
}

# file key -> dataclass field
KEY_ALIASES = {('metric', 'beta'): 'beta_weight'}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter, toggle and seed of a run; validated on construction."""

    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ablate: AblationFlags = field(default_factory=AblationFlags)
    generator: GenSpec = field(default_factory=GenSpec)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation_suite: AblationSuiteConfig = field(default_factory=AblationSuiteConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def __post_init__(self):
        # raises on an unknown flag combination
        _ = self.ablate.variant_name

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]]) -> 'RunConfig':
        values = dict(values or {})
        unknown = sorted(set(values) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown configuration section(s) {unknown}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = values.get(name) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"configuration section '{name}' must be a mapping, got {type(raw).__name__}")
            raw = {KEY_ALIASES.get((name, k), k): v for k, v in raw.items()}
            known = {f.name for f in fields(section_cls)}
            bad = sorted(set(raw) - known)
            if bad:
                raise ConfigError(f"unknown key(s) {[f'{name}.{k}' for k in bad]}")
            try:
                sections[name] = section_cls(**raw)
            except TypeError as e:
                raise ConfigError(f"section '{name}': {e}") from None
        return cls(**sections)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for name in SECTIONS:
            values = asdict(getattr(self, name))
            for (section, alias), target in KEY_ALIASES.items():
                if section == name:
                    values[alias] = values.pop(target)
            out[name] = _plain(values)
        return out

    def with_overrides(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Apply dotted overrides such as {'metric.alpha': 8}."""
        values = self.to_dict()
        for key, value in overrides.items():
            parts = key.split('.')
            if len(parts) != 2 or parts[0] not in values:
                raise ConfigError(f"override key '{key}' must look like section.key")
            values[parts[0]][parts[1]] = value
        return RunConfig.from_dict(values)

    def for_variant(self, name: str) -> 'RunConfig':
        return replace(self, ablate=AblationFlags.for_variant(name))

    def check_dataset(self, dataset: Dataset) -> None:
        enc = self.encoders
        if (dataset.d_raw, dataset.k_img, dataset.k_txt) != (enc.d_raw, enc.k_img, enc.k_txt):
            raise ConfigError(f"dataset dims (d_raw={dataset.d_raw}, k_img={dataset.k_img}, k_txt={dataset.k_txt}) "
                              f"do not match encoders config (d_raw={enc.d_raw}, k_img={enc.k_img}, k_txt={enc.k_txt})")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


def _ratio(numerator: int, denominator: int, what: str, flags: List[str]) -> float:
    if denominator == 0:
        flags.append(what)
        return 0.0
    return numerator / denominator


def _f1(precision: float, recall: float, what: str, flags: List[str]) -> float:
    if precision + recall == 0.0:
        flags.append(what)
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    """Accuracy and per-class precision/recall/F1; fake (label 1) is the positive class."""

    n: int
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    fake: ClassMetrics
    real: ClassMetrics
    zero_division: Tuple[str, ...] = ()
    per_kind: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, labels: Sequence[int], predicted: Sequence[int],
                         kinds: Optional[Sequence[Optional[str]]] = None) -> 'MetricsReport':
        labels = np.asarray(labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if labels.size == 0:
            raise DatasetError("cannot score an empty prediction set")
        if labels.shape != predicted.shape:
            raise DatasetError(f"{labels.size} labels but {predicted.size} predictions")
        tp = int(((predicted == 1) & (labels == 1)).sum())
        tn = int(((predicted == 0) & (labels == 0)).sum())
        fp = int(((predicted == 1) & (labels == 0)).sum())
        fn = int(((predicted == 0) & (labels == 1)).sum())
        flags: List[str] = []
        fake_p = _ratio(tp, tp + fp, 'fake.precision', flags)
        fake_r = _ratio(tp, tp + fn, 'fake.recall', flags)
        real_p = _ratio(tn, tn + fn, 'real.precision', flags)
        real_r = _ratio(tn, tn + fp, 'real.recall', flags)
        fake = ClassMetrics(fake_p, fake_r, _f1(fake_p, fake_r, 'fake.f1', flags))
        real = ClassMetrics(real_p, real_r, _f1(real_p, real_r, 'real.f1', flags))
        if flags:
            logger.warning(f"[Metrics] zero division in {flags}; reported as 0")

        per_kind = {}
        if kinds is not None and any(k is not None for k in kinds):
            kinds_arr = np.array(['' if k is None else k for k in kinds])
            for kind in sorted(set(kinds_arr.tolist()) - {''}):
                mask = kinds_arr == kind
                per_kind[kind] = float((labels[mask] == predicted[mask]).mean())
        return cls(int(labels.size), tp, tn, fp, fn, (tp + tn) / labels.size, fake, real, tuple(flags), per_kind)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['zero_division'] = list(self.zero_division)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'MetricsReport':
        values = dict(values)
        values['fake'] = ClassMetrics(**values['fake'])
        values['real'] = ClassMetrics(**values['real'])
        values['zero_division'] = tuple(values.get('zero_division', ()))
        return cls(**values)


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    ce: Node
    metric: Optional[Node]
    total: Node
    forward: Any

    def values(self) -> Dict[str, Optional[float]]:
        return {'ce': self.ce.item(), 'metric': None if self.metric is None else self.metric.item(),
                'total': self.total.item()}


def compute_loss(model: CromeModel, tape: Tape, batch: TokenBatch, mode: str,
                 rng: Optional[np.random.Generator], active: Optional[str],
                 proxy_batch: Optional[TokenBatch], assignment: Optional[ProxyAssignment]) -> LossParts:
    """L_total = cross-entropy + beta * proxy-anchor loss of the active modality."""
    result = model.forward(tape, batch, mode, rng)
    ce = cross_entropy(result.prediction, batch.labels)
    metric = None
    variant = model.variant
    if variant.use_metric and variant.beta > 0 and active is not None:
        proxies = model.encode(tape, proxy_batch)
        metric = metric_loss_for_epoch(result.bundle, batch.labels, proxies, assignment,
                                       model.config.metric, active, variant.available)
    return LossParts(ce, metric, total_loss(ce, metric, variant.beta), result)


def batch_indices(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """Shuffled index chunks; a trailing chunk of one joins the previous chunk."""
    if n < 2:
        raise DatasetError(f"training needs at least 2 samples, got {n}")
    order = np.arange(n) if rng is None else rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: List[Dict[str, Any]]
    report: Optional[MetricsReport]
    checkpoint_path: Optional[str] = None
    checkpoint_sha256: Optional[str] = None


@dataclass
class MetricOnlyResult:
    modality: str
    separation_before: float
    separation_after: float
    losses: List[float]


class Trainer:
    """Owns the model, the six optimizer groups and the random streams of one run."""

    def __init__(self, config: RunConfig, out_dir: Optional[str] = None,
                 variant: Optional[PipelineVariant] = None):
        self.config = config
        self.out_dir = out_dir
        self.streams = RngStreams(config.training.seed)
        self.model = CromeModel(config, variant, self.streams)
        self.variant = self.model.variant
        t = config.training
        self.optimizers: Dict[str, AdamState] = {
            group: AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon) for group in GROUP_NAMES
        }
        self.epoch = 0
        self.history: List[Dict[str, Any]] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- schedule -----------------------------------------------------------

    def active_modality(self, epoch: int) -> Optional[str]:
        if not self.variant.use_metric:
            return None
        return modality_schedule(epoch, self.config.metric, self.variant.available)

    def stepped_groups(self, active: Optional[str]) -> List[str]:
        if self.config.training.ce_all_encoders:
            encoders = list(self.variant.available)
        else:
            encoders = [active] if active is not None else []
        return encoders + [FUSION_GROUP]

    # -- training -----------------------------------------------------------

    def _dump_diagnostics(self, record: Dict[str, Any]) -> None:
        if not self.out_dir:
            return
        path = os.path.join(self.out_dir, 'diagnostics.json')
        with open(path, 'w') as f:
            json.dump(record, f, indent=2, sort_keys=True, default=str)
        logger.error(f"[Trainer] diagnostics written to {path}")

    def train_epoch(self, train: Dataset, assignment: ProxyAssignment) -> Dict[str, Any]:
        epoch = self.epoch
        active = self.active_modality(epoch)
        groups = self.model.parameter_groups()
        stepped = self.stepped_groups(active)
        proxy_batch = TokenBatch.from_samples([train[i] for i in assignment.indices])
        dropout_rng = self.streams.stream('dropout')
        sums = {'ce': 0.0, 'metric': 0.0, 'total': 0.0}
        correct = 0
        chunks = batch_indices(len(train), self.config.training.batch_size, self.streams.stream('data'))
        for batch_index, chunk in enumerate(chunks):
            batch = TokenBatch.from_samples([train[int(i)] for i in chunk])
            self.model.zero_grad()
            tape = Tape()
            parts = compute_loss(self.model, tape, batch, TRAIN, dropout_rng, active, proxy_batch, assignment)
            values = parts.values()
            if not all(math.isfinite(v) for v in values.values() if v is not None):
                self._dump_diagnostics({'epoch': epoch, 'batch': batch_index, 'active_modality': active,
                                        'variant': self.variant.name, **values})
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {batch_index}: {values}")
            tape.backward(parts.total)
            for group in stepped:
                adam_step(self.optimizers[group], groups[group])
            weight = len(batch) / len(train)
            for key, value in values.items():
                sums[key] += weight * (value or 0.0)
            correct += int((parts.forward.prediction.labels == batch.labels).sum())

        record = {
            'epoch': epoch,
            'variant': self.variant.name,
            'active_modality': active,
            'stepped_groups': stepped,
            'batches': len(chunks),
            'train_accuracy': correct / len(train),
            **{f"loss_{k}": v for k, v in sums.items()},
        }
        self.epoch += 1
        return record

    def fit(self, train: Dataset, test: Optional[Dataset] = None) -> TrainResult:
        self.config.check_dataset(train)
        assignment = assign_proxies(train)
        epochs = self.config.training.epochs
        logger.info(f"[Trainer] variant '{self.variant.name}': {len(train)} train samples, {epochs} epochs, "
                    f"batch {self.config.training.batch_size}, {self.model.parameter_count()} parameters")
        report = None
        sha = path = None
        metrics_path = os.path.join(self.out_dir, 'metrics.jsonl') if self.out_dir else None
        if metrics_path:
            open(metrics_path, 'w').close()

        while self.epoch < epochs:
            record = self.train_epoch(train, assignment)
            if test is not None:
                report = self.evaluate(test)
                record['test'] = report.to_dict()
            self.history.append(record)
            acc = f", test acc {report.accuracy:.4f}" if test is not None else ''
            logger.info(f"[Trainer] epoch {self.epoch}/{epochs} active={record['active_modality']} "
                        f"ce={record['loss_ce']:.4f} metric={record['loss_metric']:.4f}{acc}")
            if metrics_path:
                with open(metrics_path, 'a') as f:
                    f.write(json.dumps(record, sort_keys=True) + '\n')
            if self.out_dir and (self.epoch % self.config.training.checkpoint_every == 0 or self.epoch == epochs):
                path = os.path.join(self.out_dir, 'checkpoint.ckpt')
                sha = self.save_checkpoint(path)

        if self.out_dir:
            summary = {'variant': self.variant.name, 'epochs': self.epoch,
                       'final': None if report is None else report.to_dict(),
                       'checkpoint_sha256': sha,
                       'optimizer_steps': {g: s.step for g, s in sorted(self.optimizers.items())}}
            with open(os.path.join(self.out_dir, 'summary.json'), 'w') as f:
                json.dump(summary, f, indent=2, sort_keys=True)
        return TrainResult(self.history, report, path, sha)

    def fit_metric_only(self, train: Dataset, modality: str, steps: int,
                        lr: Optional[float] = None) -> MetricOnlyResult:
        """Train one encoder on the proxy-anchor loss alone and report class separation."""
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality '{modality}', expected one of {MODALITIES}")
        self.config.check_dataset(train)
        assignment = assign_proxies(train)
        proxy_batch = TokenBatch.from_samples([train[i] for i in assignment.indices])
        params = self.model.encoders.parameters(modality)
        state = AdamState(lr=lr or self.config.training.lr, beta1=self.config.training.beta1,
                          beta2=self.config.training.beta2, epsilon=self.config.training.epsilon)
        cfg = replace(self.config.metric, all_modalities=False)
        before = self.separation(train, modality)
        losses = []
        data_rng = self.streams.stream('data')
        chunks: List[np.ndarray] = []
        for _ in range(steps):
            if not chunks:
                chunks = batch_indices(len(train), self.config.training.batch_size, data_rng)
            batch = TokenBatch.from_samples([train[int(i)] for i in chunks.pop(0)])
            for p in params:
                p.zero_grad()
            tape = Tape()
            bundle = self.model.encode(tape, batch)
            proxies = self.model.encode(tape, proxy_batch)
            loss = metric_loss_for_epoch(bundle, batch.labels, proxies, assignment, cfg, modality)
            tape.backward(loss)
            adam_step(state, params)
            losses.append(loss.item())
        after = self.separation(train, modality)
        logger.info(f"[Trainer] metric-only {modality}: separation {before:.4f} -> {after:.4f} over {steps} steps")
        return MetricOnlyResult(modality, before, after, losses)

    # -- evaluation ---------------------------------------------------------

    def predict(self, dataset: Dataset, batch_size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode probabilities and predicted labels, in dataset order."""
        size = batch_size or self.config.training.batch_size
        probs = []
        for start in range(0, len(dataset), size):
            batch = TokenBatch.from_samples(dataset.samples[start:start + size])
            result = self.model.forward(Tape(), batch, EVAL)
            probs.append(result.prediction.probabilities)
        probs = np.concatenate(probs, axis=0)
        return probs, probs.argmax(axis=1)

    def evaluate(self, dataset: Dataset) -> MetricsReport:
        self.config.check_dataset(dataset)
        _, predicted = self.predict(dataset)
        return MetricsReport.from_predictions(dataset.labels, predicted, dataset.kinds)

    def embeddings(self, dataset: Dataset, stage: str) -> np.ndarray:
        """Eval-mode features per sample at ``stage``."""
        if stage not in EXPORT_STAGES:
            raise ConfigError(f"unknown export stage '{stage}', expected one of {EXPORT_STAGES}")
        rows = []
        size = self.config.training.batch_size
        for start in range(0, len(dataset), size):
            batch = TokenBatch.from_samples(dataset.samples[start:start + size])
            tape = Tape()
            if stage == 'pre-classifier':
                rows.append(self.model.forward(tape, batch, EVAL).fusion.unified.value)
            else:
                bundle = self.model.encode(tape, batch)
                rows.append(np.concatenate([pool_tokens(bundle.get(m)).value for m in MODALITIES], axis=-1))
        return np.concatenate(rows, axis=0)

    def separation(self, dataset: Dataset, modality: str) -> float:
        batch = TokenBatch.from_samples(dataset.samples)
        pooled = pool_tokens(self.model.encoders.encode(Tape(), batch, modality)).value
        return class_separation(pooled, dataset.labels)

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self, path: str) -> str:
        return ckpt.save(path, self.model.state_dict(), self.optimizers, self.config.to_dict(), self.epoch,
                         self.variant.name, self.streams.state())

    @classmethod
    def from_checkpoint(cls, checkpoint: 'ckpt.Checkpoint', out_dir: Optional[str] = None) -> 'Trainer':
        trainer = cls(RunConfig.from_dict(checkpoint.config), out_dir)
        trainer.model.load_state_dict(checkpoint.model_state())
        trainer.optimizers.update(checkpoint.optimizers())
        checkpoint.restore_rng(trainer.streams)
        trainer.epoch = checkpoint.epoch
        return trainer


def evaluate(checkpoint, dataset: Dataset) -> MetricsReport:
    """Score a checkpoint (path or loaded object) on a dataset in eval mode."""
    if isinstance(checkpoint, str):
        checkpoint = ckpt.load(checkpoint)
    return Trainer.from_checkpoint(checkpoint).evaluate(dataset)


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------

EXPORT_STAGES = ('pre-classifier', 'per-modality')


def export_embeddings(checkpoint, dataset: Dataset, stage: str, path: str) -> int:
    """Write id, label and the stage's feature vector per sample as CSV; returns the row count."""
    if isinstance(checkpoint, str):
        checkpoint = ckpt.load(checkpoint)
    trainer = Trainer.from_checkpoint(checkpoint)
    trainer.config.check_dataset(dataset)
    features = trainer.embeddings(dataset, stage)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['id', 'label'] + [f"f{j}" for j in range(features.shape[1])])
        for sample, row in zip(dataset, features):
            writer.writerow([sample.id, sample.label] + [repr(float(v)) for v in row])
    logger.info(f"[Export] {len(dataset)} rows of {features.shape[1]} '{stage}' features written to {path}")
    return len(dataset)


# ---------------------------------------------------------------------------
# Alpha/delta sweep
# ---------------------------------------------------------------------------

MISSING = 'NA'


@dataclass
class SweepGrid:
    alphas: Tuple[float, ...]
    deltas: Tuple[float, ...]
    accuracy: np.ndarray
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return bool(np.isfinite(self.accuracy).all())


def _sweep_cell(job: Tuple[RunConfig, Dataset, Optional[Dataset], Optional[str]]) -> Tuple[float, Optional[str]]:
    config, train, test, out_dir = job
    try:
        trainer = Trainer(config, out_dir)
        report = trainer.fit(train, test).report or trainer.evaluate(train)
        return report.accuracy, None
    except Exception as e:
        return float('nan'), f"{type(e).__name__}: {e}"


def sweep(config: RunConfig, train: Dataset, test: Optional[Dataset],
          alphas: Optional[Sequence[float]] = None, deltas: Optional[Sequence[float]] = None,
          out_dir: Optional[str] = None, workers: Optional[int] = None) -> SweepGrid:
    """Full-factorial alpha x delta grid of test accuracy; failed cells stay NaN."""
    alphas = tuple(float(a) for a in (alphas if alphas is not None else config.sweep.alphas))
    deltas = tuple(float(d) for d in (deltas if deltas is not None else config.sweep.deltas))
    if not alphas or not deltas:
        raise ConfigError("sweep needs at least one alpha and one delta")
    workers = workers or config.sweep.workers
    cells, jobs = [], []
    for a in alphas:
        for d in deltas:
            cell_config = config.with_overrides({'metric.alpha': a, 'metric.delta': d,
                                                 'training.epochs': config.sweep.epochs})
            cell_dir = os.path.join(out_dir, f"alpha_{a:g}_delta_{d:g}") if out_dir else None
            cells.append((a, d))
            jobs.append((cell_config, train, test, cell_dir))

    logger.info(f"[Sweep] {len(jobs)} cells ({len(alphas)} alphas x {len(deltas)} deltas), {workers} worker(s)")
    if workers > 1:
        with mp.Pool(workers) as pool:
            outcomes = pool.map(_sweep_cell, jobs)
    else:
        outcomes = [_sweep_cell(job) for job in jobs]

    grid = SweepGrid(alphas, deltas, np.full((len(alphas), len(deltas)), np.nan))
    for (a, d), (accuracy, error) in zip(cells, outcomes):
        i, j = alphas.index(a), deltas.index(d)
        grid.accuracy[i, j] = accuracy
        if error is not None:
            grid.errors[f"{a:g},{d:g}"] = error
            logger.error(f"[Sweep] cell alpha={a:g} delta={d:g} failed: {error}")
        else:
            logger.info(f"[Sweep] alpha={a:g} delta={d:g} accuracy={accuracy:.4f}")
    return grid


def write_grid(grid: SweepGrid, path: str) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['alpha\\delta'] + [repr(d) for d in grid.deltas])
        for a, row in zip(grid.alphas, grid.accuracy):
            writer.writerow([repr(a)] + [repr(float(v)) if np.isfinite(v) else MISSING for v in row])


def read_grid(path: str) -> SweepGrid:
    with open(path, 'r', newline='') as f:
        rows = list(csv.reader(f))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DatasetError(f"{path}: a sweep grid needs a header row and at least one data row")
    try:
        deltas = tuple(float(d) for d in rows[0][1:])
        alphas = tuple(float(r[0]) for r in rows[1:])
        values = np.array([[np.nan if v == MISSING else float(v) for v in r[1:]] for r in rows[1:]])
    except (ValueError, IndexError):
        raise DatasetError(f"{path}: malformed sweep grid") from None
    if values.shape != (len(alphas), len(deltas)):
        raise DatasetError(f"{path}: ragged sweep grid")
    return SweepGrid(alphas, deltas, values)


# ---------------------------------------------------------------------------
# Gradient-check suite
# ---------------------------------------------------------------------------

@dataclass
class GradCheckCase:
    index: int
    variant: str
    dims: Dict[str, int]
    report: GradCheckReport
    atol: float = 0.0

    @property
    def max_error(self) -> float:
        return self.report.max_error(self.atol)

    def summary(self) -> Dict[str, Any]:
        worst = self.report.worst
        return {'index': self.index, 'variant': self.variant, 'dims': self.dims,
                'max_relative_error': self.report.max_relative_error, 'atol': self.atol,
                'max_error_above_atol': self.max_error, 'checked': self.report.checked,
                'worst_parameter': None if worst is None else worst.parameter}


def random_tiny_config(rng: np.random.Generator, variant: str, seed: int) -> RunConfig:
    d_raw = int(rng.integers(2, 5))
    tokens = int(rng.integers(2, 4))
    heads = int(rng.choice([1, 2]))
    return RunConfig(
        encoders=EncoderConfig(d_raw=d_raw, d_hidden=int(rng.integers(2, 5)), d_emb=int(rng.integers(2, 5)),
                               k_img=tokens, k_txt=tokens),
        fusion=FusionConfig(d_c=2 * heads * int(rng.integers(1, 3)), heads=heads, dropout=0.1),
        detector=DetectorConfig(hidden=int(rng.integers(2, 5))),
        metric=MetricConfig(alpha=float(rng.choice([4.0, 16.0])), delta=float(rng.choice([0.1, 0.4]))),
        training=TrainingConfig(seed=seed),
        ablate=AblationFlags.for_variant(variant),
    )


def random_token_batch(rng: np.random.Generator, config: RunConfig, size: int = 4) -> TokenBatch:
    """A batch with both labels present, drawn from a standard normal."""
    enc = config.encoders
    samples = [Sample(f"g{i}", i % 2, rng.normal(size=(enc.k_img, enc.d_raw)), rng.normal(size=(enc.k_txt, enc.d_raw)))
               for i in range(size)]
    return TokenBatch.from_samples(samples)


def gradcheck_suite(configs: int = 20, samples: int = 20, step: float = 1e-6, seed: int = 0,
                    variants: Optional[Sequence[str]] = None, atol: float = 0.0) -> List[GradCheckCase]:
    """Finite-difference check of the full training loss over random tiny configurations.

    ``atol`` is recorded on each case as its round-off floor; the reported
    relative errors are never floored.

    Configurations cycle through every ablation variant; the active modality
    cycles through the schedule so each encoder sees the metric term.
    """
    variants = list(variants or list(VARIANTS) + list(EXTENDED_VARIANTS))
    streams = RngStreams(seed)
    cases = []
    for index in range(configs):
        rng = streams.stream(f"gradcheck.{index}")
        variant = variants[index % len(variants)]
        config = random_tiny_config(rng, variant, seed + index)
        model = CromeModel(config)
        batch = random_token_batch(rng, config)
        assignment = ProxyAssignment({0: 0, 1: 1})
        proxy_batch = TokenBatch(batch.image[:2], batch.text[:2], batch.labels[:2], batch.ids[:2], batch.kinds[:2])
        active = modality_schedule(index, replace(config.metric, epochs_per_modality=1), model.variant.available) \
            if model.variant.use_metric else None
        dropout_seed = int(rng.integers(2 ** 31))

        def loss_fn(tape: Tape) -> Node:
            dropout_rng = np.random.Generator(np.random.Philox(dropout_seed))
            return compute_loss(model, tape, batch, TRAIN, dropout_rng, active, proxy_batch, assignment).total

        report = grad_check(loss_fn, model.parameters(), samples=samples, step=step, seed=seed + index)
        dims = {'d_raw': config.encoders.d_raw, 'd_emb': config.encoders.d_emb, 'tokens': config.encoders.k_img,
                'd_c': config.fusion.d_c, 'heads': config.fusion.heads, 'hidden': config.detector.hidden}
        cases.append(GradCheckCase(index, variant, dims, report, atol))
        logger.info(f"[GradCheck] case {index} variant={variant} max relative error "
                    f"{report.max_relative_error:.3e} over {report.checked} entries")
    return cases
