"""Proxy anchor metric learning over one modality at a time.

Proxies are static: the lowest-index sample of each class in the training set.
They are re-embedded under the current encoder parameters on every loss
evaluation, and gradients flow through proxies and anchors alike.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from modules.encoders import MODALITIES, EmbeddingBundle
from modules.errors import ConfigError, DatasetError, DegenerateVectorError, ShapeError
from modules.numerics import (
    EXP_CLAMP,
    Node,
    clip,
    exp,
    log1p,
    matmul,
    mean_axis,
    mul,
    normalize_rows,
    scale,
    sub,
    add,
    sum_axis,
    transpose,
)

logger = logging.getLogger('cromekit')

SIMILARITIES = ('cosine', 'dot')
CLASSES = (0, 1)


@dataclass(frozen=True)
class MetricConfig:
    alpha: float = 16.0
    delta: float = 0.1
    beta_weight: float = 0.1
    epochs_per_modality: int = 5
    similarity: str = 'cosine'
    all_modalities: bool = False

    def __post_init__(self):
        problems = []
        if not self.alpha > 0:
            problems.append(f"metric.alpha must be > 0, got {self.alpha}")
        if not self.delta > 0:
            problems.append(f"metric.delta must be > 0, got {self.delta}")
        if not self.beta_weight >= 0:
            problems.append(f"metric.beta must be >= 0, got {self.beta_weight}")
        if int(self.epochs_per_modality) < 1:
            problems.append(f"metric.epochs_per_modality must be >= 1, got {self.epochs_per_modality}")
        if self.similarity not in SIMILARITIES:
            problems.append(f"metric.similarity must be one of {SIMILARITIES}, got '{self.similarity}'")
        if problems:
            raise ConfigError('; '.join(problems))


@dataclass(frozen=True)
class ProxyAssignment:
    proxy_index_per_class: Dict[int, int]

    @property
    def classes(self) -> np.ndarray:
        return np.array(sorted(self.proxy_index_per_class), dtype=np.int64)

    @property
    def indices(self) -> list:
        return [self.proxy_index_per_class[c] for c in sorted(self.proxy_index_per_class)]


@dataclass
class MetricBatch:
    embeddings: Node
    labels: np.ndarray
    proxies: Node
    proxy_classes: np.ndarray


def pool_tokens(z: Node) -> Node:
    """Mean over the token axis: (..., k, d) -> (..., d)."""
    if z.ndim < 2 or z.shape[-2] < 1:
        raise ShapeError(f"pool_tokens needs at least one token, got shape {z.shape}")
    return mean_axis(z, axis=-2)


def assign_proxies(dataset: Sequence) -> ProxyAssignment:
    """Pick the lowest-index sample of each class; depends on dataset order."""
    first: Dict[int, int] = {}
    for index, sample in enumerate(dataset):
        first.setdefault(int(sample.label), index)
    missing = [c for c in CLASSES if c not in first]
    if missing:
        raise DatasetError(f"cannot assign proxies: no samples for class(es) {missing}")
    logger.debug(f"[ProxyAssignment] proxies per class: {first}")
    return ProxyAssignment(dict(sorted(first.items())))


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairwise_similarity(x: Node, p: Node, kind: str = 'cosine') -> Node:
    """(n, d) x (m, d) -> (n, m) similarity matrix."""
    if x.ndim != 2 or p.ndim != 2 or x.shape[1] != p.shape[1]:
        raise ShapeError(f"similarity needs (n, d) and (m, d) inputs, got {x.shape} and {p.shape}")
    if kind == 'cosine':
        x, p = normalize_rows(x), normalize_rows(p)
    elif kind != 'dot':
        raise ConfigError(f"unknown similarity '{kind}'")
    return matmul(x, transpose(p))


def proxy_anchor_loss(batch: MetricBatch, cfg: MetricConfig) -> Node:
    """Soft pull of positives toward their proxy and push of negatives away.

    L = 1/|P+| sum_{p in P+} log(1 + sum_{x in X+_p} exp(-alpha (s(x,p) - delta)))
      + 1/|P|  sum_{p in P}  log(1 + sum_{x in X-_p} exp( alpha (s(x,p) + delta)))
    """
    proxy_classes = np.asarray(batch.proxy_classes, dtype=np.int64)
    labels = np.asarray(batch.labels, dtype=np.int64)
    if proxy_classes.size == 0:
        raise ConfigError("proxy anchor loss needs at least one proxy")
    if batch.proxies.shape[0] != proxy_classes.size:
        raise ShapeError(f"{batch.proxies.shape[0]} proxy rows but {proxy_classes.size} proxy classes")
    if batch.embeddings.shape[0] != labels.size:
        raise ShapeError(f"{batch.embeddings.shape[0]} embedding rows but {labels.size} labels")
    orphan = set(labels.tolist()) - set(proxy_classes.tolist())
    if orphan:
        raise DatasetError(f"labels {sorted(orphan)} have no proxy")

    sim = pairwise_similarity(batch.embeddings, batch.proxies, cfg.similarity)
    positive = (labels[:, None] == proxy_classes[None, :]).astype(np.float64)
    negative = 1.0 - positive
    has_positive = positive.any(axis=0).astype(np.float64)

    pos_logits = clip(scale(sub(sim, cfg.delta), -cfg.alpha), -EXP_CLAMP, EXP_CLAMP)
    neg_logits = clip(scale(add(sim, cfg.delta), cfg.alpha), -EXP_CLAMP, EXP_CLAMP)
    pos_sums = sum_axis(mul(exp(pos_logits), positive), axis=0)
    neg_sums = sum_axis(mul(exp(neg_logits), negative), axis=0)

    pos_term = scale(sum_axis(mul(log1p(pos_sums), has_positive)), 1.0 / max(has_positive.sum(), 1.0))
    neg_term = scale(sum_axis(log1p(neg_sums)), 1.0 / proxy_classes.size)
    return add(pos_term, neg_term)


def modality_schedule(epoch: int, cfg: MetricConfig, available: Optional[Sequence[str]] = None) -> str:
    """Round-robin over the modalities, switching every ``epochs_per_modality`` epochs.

    index = (epoch div epochs_per_modality) mod len(available)
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    order = [m for m in MODALITIES if available is None or m in available]
    if not order:
        raise ConfigError("no modality is available for metric learning")
    return order[(epoch // int(cfg.epochs_per_modality)) % len(order)]


def metric_loss_for_epoch(bundle: EmbeddingBundle, labels: np.ndarray, proxy_bundle: EmbeddingBundle,
                          assignment: ProxyAssignment, cfg: MetricConfig, active_modality: str,
                          available: Optional[Iterable[str]] = None) -> Node:
    """Proxy anchor loss on the active modality's pooled embeddings.

    Only the active modality enters the graph, so no other encoder receives a
    gradient from this term. With ``cfg.all_modalities`` the losses of every
    available modality are summed instead.
    """
    if active_modality not in MODALITIES:
        raise ConfigError(f"unknown modality '{active_modality}', expected one of {MODALITIES}")
    if cfg.all_modalities:
        modalities = [m for m in MODALITIES if available is None or m in available]
    else:
        modalities = [active_modality]
    total = None
    for modality in modalities:
        batch = MetricBatch(pool_tokens(bundle.get(modality)), labels,
                            pool_tokens(proxy_bundle.get(modality)), assignment.classes)
        loss = proxy_anchor_loss(batch, cfg)
        total = loss if total is None else add(total, loss)
    return total


def class_separation(embeddings: np.ndarray, labels: Sequence[int]) -> float:
    """Mean intra-class cosine minus mean inter-class cosine over distinct pairs."""
    x = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("class separation over a zero-norm embedding")
    x = x / norms
    cos = x @ x.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    intra = cos[same & off_diagonal]
    inter = cos[~same]
    if intra.size == 0 or inter.size == 0:
        raise DatasetError("class separation needs two classes with at least two samples in one of them")
    return float(intra.mean() - inter.mean())
