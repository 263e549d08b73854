"""Toy token encoders standing in for the pretrained image, text and joint models.

Five roles produce the modality embeddings:

    Z_i1  primary image encoder        image tokens only
    Z_i2  joint encoder, image role    image tokens + all-zero "dummy text"
    Z_t1  primary text encoder         text tokens only
    Z_t2  joint encoder, text role     all-zero image block + text tokens
    Z_b   joint encoder, both          image tokens + text tokens

Z_i = [Z_i1 | Z_i2] and Z_t = [Z_t1 | Z_t2] along features: columns
[0, d_emb) come from the primary encoder, [d_emb, 2 d_emb) from the joint role.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from modules.errors import ConfigError, DatasetError, ShapeError
from modules.layers import Linear
from modules.numerics import Node, Parameter, Tape, concat, relu

Z_I1, Z_I2, Z_T1, Z_T2, Z_B = 'Z_i1', 'Z_i2', 'Z_t1', 'Z_t2', 'Z_b'
MODALITIES = (Z_I1, Z_I2, Z_T1, Z_T2, Z_B)
JOINT_ROLES = (Z_I2, Z_T2, Z_B)
REAL, FAKE = 0, 1


@dataclass(frozen=True, eq=False)
class Sample:
    """One news item as raw feature tokens."""

    id: str
    label: int
    image_tokens: np.ndarray
    text_tokens: np.ndarray
    kind: Optional[str] = None

    def __post_init__(self):
        if self.label not in (REAL, FAKE):
            raise DatasetError(f"sample '{self.id}': label must be 0 or 1, got {self.label}")
        for tokens in (self.image_tokens, self.text_tokens):
            if np.ndim(tokens) != 2:
                raise ShapeError(f"sample '{self.id}': token blocks must be 2-D, got {np.shape(tokens)}")


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """Samples stacked along a leading batch axis."""

    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    ids: tuple
    kinds: tuple

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> 'TokenBatch':
        samples = list(samples)
        if not samples:
            raise ShapeError("cannot build a batch from zero samples")
        try:
            image = np.stack([s.image_tokens for s in samples]).astype(np.float64)
            text = np.stack([s.text_tokens for s in samples]).astype(np.float64)
        except ValueError:
            raise ShapeError("samples in one batch must share token shapes") from None
        return cls(image, text, np.array([s.label for s in samples], dtype=np.int64),
                   tuple(s.id for s in samples), tuple(s.kind for s in samples))

    def __len__(self) -> int:
        return self.image.shape[0]


class ToyEncoder:
    """Per-token two-layer MLP: d_in -> d_hidden -> ReLU -> d_emb.

    Biases start uniform in +-1/sqrt(fan_in) unless ``init`` is 'zeros'.

    A joint encoder reads image token j and text token j side by side, so its
    input width is twice the raw width.
    """

    __slots__ = ('name', 'joint', 'first', 'second')

    def __init__(self, name: str, d_raw: int, d_hidden: int, d_emb: int, rng: Optional[np.random.Generator] = None,
                 joint: bool = False, init: str = 'xavier'):
        self.name = name
        self.joint = joint
        in_width = 2 * d_raw if joint else d_raw
        # Nonzero output bias: a fully dead hidden layer still yields a nonzero embedding.
        bias_init = 'zeros' if init == 'zeros' else 'uniform'
        self.first = Linear(f"{name}.fc1", in_width, d_hidden, rng, init=init, bias_init=bias_init)
        self.second = Linear(f"{name}.fc2", d_hidden, d_emb, rng, init=init, bias_init=bias_init)

    @property
    def in_width(self) -> int:
        return self.first.in_width

    @property
    def out_width(self) -> int:
        return self.second.out_width

    def parameters(self) -> List[Parameter]:
        return self.first.parameters() + self.second.parameters()

    def __call__(self, tape: Tape, tokens: np.ndarray) -> Node:
        if tokens.shape[-1] != self.in_width:
            raise ShapeError(f"encoder '{self.name}' expects width {self.in_width}, got tokens {tokens.shape}")
        return self.second(tape, relu(self.first(tape, tape.constant(tokens))))


def _joint_input(image: np.ndarray, text: np.ndarray) -> np.ndarray:
    if image.shape[:-1] != text.shape[:-1]:
        raise ShapeError(f"joint encoder needs matching token counts, got image {image.shape} and text {text.shape}")
    return np.concatenate([image, text], axis=-1)


def _as_batch(batch) -> TokenBatch:
    return TokenBatch.from_samples([batch]) if isinstance(batch, Sample) else batch


def encode_image_mae(tape: Tape, batch, enc: ToyEncoder) -> Node:
    """Z_i1: depends on image tokens only."""
    return enc(tape, _as_batch(batch).image)


def encode_image_blip(tape: Tape, batch, enc: ToyEncoder) -> Node:
    """Z_i2: joint encoder on (image, dummy all-zero text)."""
    batch = _as_batch(batch)
    return enc(tape, _joint_input(batch.image, np.zeros_like(batch.text)))


def encode_text_bert(tape: Tape, batch, enc: ToyEncoder) -> Node:
    """Z_t1: depends on text tokens only."""
    return enc(tape, _as_batch(batch).text)


def encode_text_blip(tape: Tape, batch, enc: ToyEncoder) -> Node:
    """Z_t2: joint encoder on (zero-filled image, text)."""
    batch = _as_batch(batch)
    return enc(tape, _joint_input(np.zeros_like(batch.image), batch.text))


def encode_joint(tape: Tape, batch, enc: ToyEncoder) -> Node:
    """Z_b: joint encoder on both real modalities."""
    batch = _as_batch(batch)
    return enc(tape, _joint_input(batch.image, batch.text))


ENCODE_FNS = {
    Z_I1: encode_image_mae,
    Z_I2: encode_image_blip,
    Z_T1: encode_text_bert,
    Z_T2: encode_text_blip,
    Z_B: encode_joint,
}


class EncoderSet:
    """The five role encoders, one optimizer group each."""

    __slots__ = ('encoders', 'd_emb')

    def __init__(self, d_raw: int, d_hidden: int, d_emb: int, rng: Optional[np.random.Generator] = None,
                 init: str = 'xavier'):
        self.d_emb = d_emb
        self.encoders: Dict[str, ToyEncoder] = {
            m: ToyEncoder(f"encoder.{m}", d_raw, d_hidden, d_emb, rng, joint=m in JOINT_ROLES, init=init)
            for m in MODALITIES
        }

    def __getitem__(self, modality: str) -> ToyEncoder:
        if modality not in self.encoders:
            raise ConfigError(f"unknown modality '{modality}', expected one of {MODALITIES}")
        return self.encoders[modality]

    def parameters(self, modality: Optional[str] = None) -> List[Parameter]:
        if modality is not None:
            return self[modality].parameters()
        return [p for m in MODALITIES for p in self.encoders[m].parameters()]

    def encode(self, tape: Tape, batch, modality: str) -> Node:
        return ENCODE_FNS[modality](tape, batch, self[modality])


@dataclass
class EmbeddingBundle:
    z_i1: Node
    z_i2: Node
    z_t1: Node
    z_t2: Node
    z_b: Node
    z_i: Node
    z_t: Node

    def get(self, modality: str) -> Node:
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality '{modality}', expected one of {MODALITIES}")
        return getattr(self, modality.lower())


def encode_bundle(tape: Tape, batch, encoders: EncoderSet,
                  available: Optional[Iterable[str]] = None) -> EmbeddingBundle:
    """Encode every modality; modalities outside ``available`` become zero blocks."""
    batch = _as_batch(batch)
    available = set(MODALITIES if available is None else available)
    unknown = available - set(MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    token_count = batch.image.shape[1]
    zeros = tape.constant(np.zeros((len(batch), token_count, encoders.d_emb)))
    z = {m: encoders.encode(tape, batch, m) if m in available else zeros for m in MODALITIES}
    return EmbeddingBundle(
        z_i1=z[Z_I1], z_i2=z[Z_I2], z_t1=z[Z_T1], z_t2=z[Z_T2], z_b=z[Z_B],
        z_i=concat([z[Z_I1], z[Z_I2]], axis=-1),
        z_t=concat([z[Z_T1], z[Z_T2]], axis=-1),
    )
