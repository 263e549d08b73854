"""Synthetic multimodal news data and the line-oriented dataset file.

Generated items live directly in token-feature space. Every topic is a unit
vector; an item's image and text blocks are the topic vector plus fixed
zero-mean per-token offsets plus Gaussian noise, so the pooled prototype of
either modality is the topic vector itself.

Fake archetypes:
    a  image tampered        image tokens shifted along a fixed corruption direction
    b  both tampered         image and text shifted along their corruption directions
    c  unrelated             image drawn from a different topic than the text
    d  partial mismatch      half of the image tokens come from a different topic

File format ("cromekit-ds-1"): UTF-8, first line a JSON header, then one JSON
record per line with fields id, label, img, txt and optional kind.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from modules.encoders import FAKE, REAL, Sample
from modules.errors import ConfigError, DatasetError, ParseError, SchemaError
from modules.numerics import RngStreams

logger = logging.getLogger('cromekit')

FORMAT_VERSION = 'cromekit-ds-1'
ARCHETYPES = ('a', 'b', 'c', 'd')
REAL_KIND = 'real'
KINDS = (REAL_KIND,) + ARCHETYPES

# (articles, fake articles) of the three public corpora
PRESETS: Dict[str, Tuple[int, int]] = {
    'weibo': (7822, 3635),
    'weibo21': (9127, 4487),
    'politifact': (485, 320),
}


@dataclass(frozen=True)
class GenSpec:
    n_samples: int = 2000
    fake_fraction: float = 0.5
    archetype_mix: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    n_topics: int = 8
    noise_sigma: float = 0.3
    d_raw: int = 16
    k_img: int = 4
    k_txt: int = 4
    seed: int = 0
    offset_scale: float = 0.5
    corruption_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'archetype_mix', tuple(float(x) for x in self.archetype_mix))
        problems = []
        if int(self.n_samples) < 2:
            problems.append(f"n_samples must be >= 2, got {self.n_samples}")
        if not 0.0 < self.fake_fraction < 1.0:
            problems.append(f"fake_fraction must lie in (0, 1), got {self.fake_fraction}")
        if len(self.archetype_mix) != len(ARCHETYPES):
            problems.append(f"archetype_mix needs {len(ARCHETYPES)} fractions, got {len(self.archetype_mix)}")
        elif min(self.archetype_mix) < 0 or abs(sum(self.archetype_mix) - 1.0) > 1e-9:
            problems.append(f"archetype_mix must be non-negative and sum to 1, got {self.archetype_mix}")
        if not 2 <= int(self.n_topics) <= int(self.d_raw):
            problems.append(f"n_topics must lie in [2, d_raw={self.d_raw}], got {self.n_topics}")
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if min(int(self.d_raw), int(self.k_img), int(self.k_txt)) < 1:
            problems.append(f"d_raw, k_img and k_txt must be >= 1, got {self.d_raw}, {self.k_img}, {self.k_txt}")
        if int(self.seed) < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        if problems:
            raise ConfigError('; '.join(problems))

    def to_dict(self) -> dict:
        values = asdict(self)
        values['archetype_mix'] = list(self.archetype_mix)
        return values


def preset_spec(name: str, scale: float = 1.0, **overrides) -> GenSpec:
    """GenSpec with a public corpus' size and class balance, scaled by ``scale``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown dataset preset '{name}', expected one of {sorted(PRESETS)}")
    if not scale > 0:
        raise ConfigError(f"preset scale must be > 0, got {scale}")
    articles, fake = PRESETS[name]
    overrides.setdefault('n_samples', max(4, int(round(articles * scale))))
    overrides.setdefault('fake_fraction', fake / articles)
    return GenSpec(**overrides)


class Dataset:
    """An immutable, ordered collection of samples with shared token dimensions."""

    __slots__ = ('_samples', 'd_raw', 'k_img', 'k_txt', 'generator')

    def __init__(self, samples: Sequence[Sample], d_raw: int, k_img: int, k_txt: int,
                 generator: Optional[dict] = None):
        self._samples = tuple(samples)
        self.d_raw, self.k_img, self.k_txt = int(d_raw), int(k_img), int(k_txt)
        self.generator = generator
        for s in self._samples:
            if s.image_tokens.shape != (self.k_img, self.d_raw) or s.text_tokens.shape != (self.k_txt, self.d_raw):
                raise SchemaError(f"sample '{s.id}' has token shapes {s.image_tokens.shape}/{s.text_tokens.shape}, "
                                  f"dataset declares ({self.k_img}, {self.d_raw})/({self.k_txt}, {self.d_raw})")

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index: int) -> Sample:
        return self._samples[index]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    @property
    def samples(self) -> Tuple[Sample, ...]:
        return self._samples

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self._samples], dtype=np.int64)

    @property
    def kinds(self) -> Tuple[Optional[str], ...]:
        return tuple(s.kind for s in self._samples)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        return Dataset([self._samples[i] for i in indices], self.d_raw, self.k_img, self.k_txt, self.generator)

    def class_counts(self) -> Dict[int, int]:
        labels = self.labels
        return {REAL: int((labels == REAL).sum()), FAKE: int((labels == FAKE).sum())}

    def header(self) -> dict:
        return {
            'format': FORMAT_VERSION,
            'd_raw': self.d_raw,
            'k_img': self.k_img,
            'k_txt': self.k_txt,
            'n_samples': len(self),
            'n_fake': self.class_counts()[FAKE],
            'generator': self.generator,
        }

    def to_lines(self) -> List[str]:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for s in self._samples:
            record = {'id': s.id, 'label': s.label, 'img': s.image_tokens.tolist(), 'txt': s.text_tokens.tolist()}
            if s.kind is not None:
                record['kind'] = s.kind
            lines.append(json.dumps(record, sort_keys=True))
        return lines

    def checksum(self) -> str:
        return hashlib.sha256('\n'.join(self.to_lines()).encode('utf-8')).hexdigest()


def _stratified_counts(total: int, fractions: Sequence[float]) -> List[int]:
    """Split ``total`` by ``fractions`` exactly (largest remainder, ties to the lower index)."""
    raw = [total * f for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def _other_topic(rng: np.random.Generator, topic: int, n_topics: int) -> int:
    return (topic + 1 + int(rng.integers(n_topics - 1))) % n_topics


def generate(spec: GenSpec) -> Dataset:
    """Draw a labelled dataset; the same spec always yields the same samples."""
    rng = RngStreams(spec.seed).stream('generator')
    q, _ = np.linalg.qr(rng.normal(size=(spec.d_raw, spec.n_topics)))
    topics = q.T
    img_offsets = rng.normal(0.0, spec.offset_scale, size=(spec.n_topics, spec.k_img, spec.d_raw))
    txt_offsets = rng.normal(0.0, spec.offset_scale, size=(spec.n_topics, spec.k_txt, spec.d_raw))
    img_offsets -= img_offsets.mean(axis=1, keepdims=True)
    txt_offsets -= txt_offsets.mean(axis=1, keepdims=True)
    img_tamper = rng.normal(size=spec.d_raw)
    txt_tamper = rng.normal(size=spec.d_raw)
    img_tamper *= spec.corruption_scale / np.linalg.norm(img_tamper)
    txt_tamper *= spec.corruption_scale / np.linalg.norm(txt_tamper)

    def image_block(t: int) -> np.ndarray:
        return topics[t] + img_offsets[t]

    def text_block(t: int) -> np.ndarray:
        return topics[t] + txt_offsets[t]

    n_fake = _stratified_counts(spec.n_samples, (1.0 - spec.fake_fraction, spec.fake_fraction))[1]
    per_kind = _stratified_counts(n_fake, spec.archetype_mix)
    kinds = [REAL_KIND] * (spec.n_samples - n_fake)
    for kind, count in zip(ARCHETYPES, per_kind):
        kinds.extend([kind] * count)
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]

    half = max(1, spec.k_img // 2)
    samples = []
    for index, kind in enumerate(kinds):
        topic = int(rng.integers(spec.n_topics))
        image, text = image_block(topic), text_block(topic)
        if kind == 'a':
            image = image + img_tamper
        elif kind == 'b':
            image = image + img_tamper
            text = text + txt_tamper
        elif kind == 'c':
            image = image_block(_other_topic(rng, topic, spec.n_topics))
        elif kind == 'd':
            image = image.copy()
            image[:half] = image_block(_other_topic(rng, topic, spec.n_topics))[:half]
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        text = text + rng.normal(0.0, spec.noise_sigma, size=text.shape)
        label = REAL if kind == REAL_KIND else FAKE
        samples.append(Sample(f"s{index:06d}", label, image, text, kind))

    logger.info(f"[DatasetGenerator] {spec.n_samples} samples, {n_fake} fake "
                f"({dict(zip(ARCHETYPES, per_kind))}), sigma={spec.noise_sigma}")
    return Dataset(samples, spec.d_raw, spec.k_img, spec.k_txt, spec.to_dict())


def save(dataset: Dataset, path: str) -> str:
    """Write the dataset file and return its sha256."""
    text = '\n'.join(dataset.to_lines()) + '\n'
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    logger.info(f"[DatasetLoader] wrote {len(dataset)} samples to {path}")
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _parse_json(line: str, line_number: int) -> dict:
    try:
        value = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", line_number) from None
    if not isinstance(value, dict):
        raise ParseError("expected a JSON object", line_number)
    return value


def _token_block(record: dict, key: str, rows: int, cols: int, line_number: int) -> np.ndarray:
    try:
        block = np.array(record[key], dtype=np.float64)
    except KeyError:
        raise ParseError(f"record is missing field '{key}'", line_number) from None
    except (TypeError, ValueError):
        raise ParseError(f"field '{key}' is not a numeric matrix", line_number) from None
    if block.shape != (rows, cols):
        raise SchemaError(f"line {line_number}: field '{key}' has shape {block.shape}, header declares ({rows}, {cols})")
    if not np.isfinite(block).all():
        raise SchemaError(f"line {line_number}: field '{key}' contains non-finite values")
    return block


def load(path: str) -> Dataset:
    """Read a dataset file, checking every record against the header."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None

    if not lines or not lines[0].strip():
        raise ParseError("empty file, expected a header", 1)
    header = _parse_json(lines[0], 1)
    if header.get('format') != FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset format {header.get('format')!r}, expected '{FORMAT_VERSION}'")
    try:
        d_raw, k_img, k_txt = int(header['d_raw']), int(header['k_img']), int(header['k_txt'])
        declared = int(header['n_samples'])
    except (KeyError, TypeError, ValueError):
        raise ParseError("header needs integer fields d_raw, k_img, k_txt and n_samples", 1) from None

    samples = []
    seen = set()
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _parse_json(line, line_number)
        if 'id' not in record or 'label' not in record:
            raise ParseError("record needs 'id' and 'label'", line_number)
        if record['label'] not in (REAL, FAKE):
            raise SchemaError(f"line {line_number}: label must be 0 or 1, got {record['label']!r}")
        kind = record.get('kind')
        if kind is not None and kind not in KINDS:
            raise SchemaError(f"line {line_number}: unknown kind {kind!r}, expected one of {KINDS}")
        sample_id = str(record['id'])
        if sample_id in seen:
            raise SchemaError(f"line {line_number}: duplicate id '{sample_id}'")
        seen.add(sample_id)
        samples.append(Sample(sample_id, int(record['label']),
                              _token_block(record, 'img', k_img, d_raw, line_number),
                              _token_block(record, 'txt', k_txt, d_raw, line_number), kind))

    if len(samples) != declared:
        raise ParseError(f"header declares {declared} records, found {len(samples)} (truncated file?)",
                         len(lines) + 1)
    logger.info(f"[DatasetLoader] loaded {len(samples)} samples from {path}")
    return Dataset(samples, d_raw, k_img, k_txt, header.get('generator'))


def split_indices(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified by label; both index arrays are sorted."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = RngStreams(seed).stream('split')
    labels = dataset.labels
    train, test = [], []
    for label in (REAL, FAKE):
        members = np.flatnonzero(labels == label)
        members = members[rng.permutation(members.size)]
        cut = int(math.floor(members.size * train_fraction + 0.5))
        train.extend(members[:cut].tolist())
        test.extend(members[cut:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    train, test = split_indices(dataset, train_fraction, seed)
    logger.debug(f"[DatasetLoader] split {len(dataset)} samples into {train.size} train / {test.size} test")
    return dataset.subset(train), dataset.subset(test)
