"""The assembled detector: five encoders, fusion stage and classifier head."""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional

import numpy as np

from modules.detector import DetectorParams, PipelineVariant, Prediction, apply_ablation, classify
from modules.encoders import MODALITIES, EmbeddingBundle, EncoderSet, TokenBatch, encode_bundle
from modules.errors import CheckpointError
from modules.fusion import FusionParams, FusionState, cmttf
from modules.layers import BatchNorm
from modules.numerics import Parameter, RngStreams, Tape

if TYPE_CHECKING:
    from modules.training import RunConfig

logger = logging.getLogger('cromekit')

FUSION_GROUP = 'fusion'
GROUP_NAMES = MODALITIES + (FUSION_GROUP,)


@dataclass
class ForwardResult:
    bundle: EmbeddingBundle
    fusion: FusionState
    prediction: Prediction


class CromeModel:
    """Every variant allocates the same parameters; ablations only change the graph."""

    def __init__(self, config: 'RunConfig', variant: Optional[PipelineVariant] = None,
                 streams: Optional[RngStreams] = None):
        self.config = config
        self.variant = variant or apply_ablation(config.ablate, config.metric.beta_weight)
        streams = streams or RngStreams(config.training.seed)
        init_rng = streams.stream('init')
        enc, fus = config.encoders, config.fusion
        self.encoders = EncoderSet(enc.d_raw, enc.d_hidden, enc.d_emb, init_rng, init=enc.init)
        self.fusion = FusionParams(enc.d_emb, enc.k_img, fus.d_c, fus.heads, fus.dropout, init_rng)
        self.detector = DetectorParams(self.fusion.unified_width, config.detector.hidden, init_rng)
        logger.debug(f"[Model] built variant '{self.variant.name}' with {self.parameter_count()} parameters")

    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        """One group per encoder role plus one for fusion and detector together."""
        groups = {m: self.encoders.parameters(m) for m in MODALITIES}
        groups[FUSION_GROUP] = self.fusion.parameters() + self.detector.parameters()
        return groups

    def parameters(self) -> List[Parameter]:
        return [p for group in self.parameter_groups().values() for p in group]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def batch_norms(self) -> List[BatchNorm]:
        return self.fusion.batch_norms() + self.detector.batch_norms()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode(self, tape: Tape, batch: TokenBatch) -> EmbeddingBundle:
        return encode_bundle(tape, batch, self.encoders, self.variant.available)

    def forward(self, tape: Tape, batch: TokenBatch, mode: str,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        bundle = self.encode(tape, batch)
        state = cmttf(bundle, self.fusion, mode, self.variant, rng)
        return ForwardResult(bundle, state, classify(state.unified, self.detector, mode))

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        state = OrderedDict((p.name, p.value) for p in self.parameters())
        for bn in self.batch_norms():
            state.update(bn.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = [name for name in expected if name not in state]
        unexpected = [name for name in state if name not in expected]
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, current in expected.items():
            if np.shape(state[name]) != current.shape:
                raise CheckpointError(f"'{name}' has shape {np.shape(state[name])}, model expects {current.shape}")
        for p in self.parameters():
            p.value[...] = state[p.name]
        for bn in self.batch_norms():
            bn.load_buffers(state)
