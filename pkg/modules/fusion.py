"""Cross-modal tri-transformer fusion.

Pipeline (full model):

    C1  = proj( flatten(softmax(T I^T / sqrt d)) ++ flatten(softmax(I T^T / sqrt d)) )   from (Z_t1, Z_i1)
    sim = w1 cos(t2, i2) + w2 cos(t2, b) + w3 cos(i2, b) + b_sim                      from pooled (Z_t2, Z_i2, Z_b)
    C2  = linear(d_c -> d_c)(batch_norm(relu(linear(1 -> d_c)(sim))))
    Z_c = fc(dropout(relu(batch_norm(fc([C1 | C2])))))
    unified = [head_t(pool(att_t(Z_t))) | head_i(pool(att_i(Z_i))) | head_c(pool(att_c(Z_c)))]

The three attention streams never see each other; cross-modal information
reaches the classifier only through Z_c.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.detector import SIMILARITY_TERMS, PipelineVariant
from modules.encoders import EmbeddingBundle
from modules.errors import ShapeError
from modules.layers import Attention, BatchNorm, ConstantToken, Linear
from modules.metric import pool_tokens
from modules.numerics import (
    Node,
    Parameter,
    Tape,
    add,
    concat,
    dropout,
    matmul,
    mean_axis,
    mul,
    normalize_rows,
    relu,
    reshape,
    scale,
    softmax_rows,
    sum_axis,
    take,
    transpose,
)

TERM_INDEX = {term: i for i, term in enumerate(SIMILARITY_TERMS)}


class FusionParams:
    """Every learnable piece of the fusion stage (one optimizer group with the detector)."""

    def __init__(self, d_emb: int, tokens: int, d_c: int, heads: int, dropout_rate: float = 0.1,
                 rng: Optional[np.random.Generator] = None):
        self.d_emb = d_emb
        self.tokens = tokens
        self.d_c = d_c
        self.heads = heads
        self.dropout_rate = dropout_rate
        self.c1_proj = Linear('fusion.c1_proj', 2 * tokens * tokens, d_c, rng)
        self.sim_weights = Parameter('fusion.sim_weights', np.ones((len(SIMILARITY_TERMS), 1)))
        self.sim_bias = Parameter('fusion.sim_bias', np.zeros((1, 1)))
        self.c2_in = Linear('fusion.c2_in', 1, d_c, rng)
        self.c2_bn = BatchNorm('fusion.c2_bn', d_c)
        self.c2_out = Linear('fusion.c2_out', d_c, d_c, rng)
        self.zc_fc1 = Linear('fusion.zc_fc1', 2 * d_c, d_c, rng, bias=False)
        self.zc_bn = BatchNorm('fusion.zc_bn', d_c)
        self.zc_fc2 = Linear('fusion.zc_fc2', d_c, d_c, rng)
        self.proj_t = Linear('fusion.proj_t', 2 * d_emb, d_c, rng)
        self.proj_i = Linear('fusion.proj_i', 2 * d_emb, d_c, rng)
        self.att_t = Attention('fusion.att_t', d_c, heads, rng)
        self.att_i = Attention('fusion.att_i', d_c, heads, rng)
        self.att_c = Attention('fusion.att_c', d_c, heads, rng)
        self.head_t = Linear('fusion.head_t', d_c, d_c, rng)
        self.head_i = Linear('fusion.head_i', d_c, d_c, rng)
        self.head_c = Linear('fusion.head_c', d_c, d_c, rng)
        self.c2_constant = ConstantToken('fusion.c2_constant', d_c, rng)
        self.zc_constant = ConstantToken('fusion.zc_constant', d_c, rng)
        self.flat_head = Linear('fusion.flat_head', 4 * d_emb + d_c, 3 * d_c, rng)

    @property
    def unified_width(self) -> int:
        return 3 * self.d_c

    def layers(self) -> list:
        return [self.c1_proj, self.c2_in, self.c2_bn, self.c2_out, self.zc_fc1, self.zc_bn, self.zc_fc2,
                self.proj_t, self.proj_i, self.att_t, self.att_i, self.att_c, self.head_t, self.head_i,
                self.head_c, self.c2_constant, self.zc_constant, self.flat_head]

    def parameters(self) -> List[Parameter]:
        params = [self.sim_weights, self.sim_bias]
        for layer in self.layers():
            params.extend(layer.parameters())
        return params

    def batch_norms(self) -> List[BatchNorm]:
        return [self.c2_bn, self.zc_bn]


@dataclass
class FusionState:
    f_t_to_i: Optional[Node] = None
    f_i_to_t: Optional[Node] = None
    c1: Optional[Node] = None
    similarity: Optional[Node] = None
    c2: Optional[Node] = None
    z_c: Optional[Node] = None
    f_t: Optional[Node] = None
    f_i: Optional[Node] = None
    f_c: Optional[Node] = None
    unified: Optional[Node] = None


def inter_modal_fusion(z_t1: Node, z_i1: Node, params: FusionParams) -> Tuple[Node, Node, Node]:
    """Correlation maps in both directions and their projection C1."""
    if z_t1.shape != z_i1.shape:
        raise ShapeError(f"inter-modal fusion needs matching text/image shapes, got {z_t1.shape} and {z_i1.shape}")
    tokens, width = z_t1.shape[-2], z_t1.shape[-1]
    if 2 * tokens * tokens != params.c1_proj.in_width:
        raise ShapeError(f"C1 projection expects {params.c1_proj.in_width} inputs, maps give {2 * tokens * tokens}")
    root = 1.0 / np.sqrt(width)
    f_t_to_i = softmax_rows(scale(matmul(z_t1, transpose(z_i1)), root))
    f_i_to_t = softmax_rows(scale(matmul(z_i1, transpose(z_t1)), root))
    lead = z_t1.shape[:-2]
    flat = concat([reshape(f_t_to_i, lead + (tokens * tokens,)),
                   reshape(f_i_to_t, lead + (tokens * tokens,))], axis=-1)
    return f_t_to_i, f_i_to_t, params.c1_proj(z_t1.tape, flat)


def _row_cosine(a: Node, b: Node) -> Node:
    return sum_axis(mul(normalize_rows(a), normalize_rows(b)), axis=-1, keepdims=True)


def combined_similarity(z_t2: Node, z_i2: Node, z_b: Node, params: FusionParams,
                        terms: Sequence[str] = SIMILARITY_TERMS) -> Node:
    """Weighted sum of pairwise cosines plus bias, one value per row: (B, d) -> (B, 1).

    Weight binding: w1 -> S_ti = cos(t2, i2), w2 -> S_tb = cos(t2, b),
    w3 -> S_ib = cos(i2, b). Terms not listed in ``terms`` are dropped.
    """
    tape = z_t2.tape
    pairs = {'ti': (z_t2, z_i2), 'tb': (z_t2, z_b), 'ib': (z_i2, z_b)}
    terms = [t for t in SIMILARITY_TERMS if t in terms]
    if not terms:
        raise ShapeError("combined similarity needs at least one term")
    scores = concat([_row_cosine(*pairs[t]) for t in terms], axis=-1)
    weights = take(tape.param(params.sim_weights), [TERM_INDEX[t] for t in terms])
    return add(matmul(scores, weights), tape.param(params.sim_bias))


def c2_branch(similarity: Node, params: FusionParams, mode: str) -> Node:
    """Lift the per-sample similarity to d_c: linear -> ReLU -> batch norm -> linear."""
    if similarity.ndim != 2 or similarity.shape[1] != 1:
        raise ShapeError(f"C2 branch expects a (batch, 1) similarity column, got {similarity.shape}")
    tape = similarity.tape
    hidden = relu(params.c2_in(tape, similarity))
    return params.c2_out(tape, params.c2_bn(tape, hidden, mode))


def combine_zc(c1: Node, c2: Node, params: FusionParams, mode: str,
               rng: Optional[np.random.Generator] = None) -> Node:
    """[C1 | C2] -> fc -> batch norm -> ReLU -> dropout -> fc."""
    if c1.shape != c2.shape or c1.shape[-1] != params.d_c:
        raise ShapeError(f"Z_c needs two (batch, {params.d_c}) inputs, got {c1.shape} and {c2.shape}")
    tape = c1.tape
    hidden = params.zc_fc1(tape, concat([c1, c2], axis=-1))
    hidden = relu(params.zc_bn(tape, hidden, mode))
    hidden = dropout(hidden, params.dropout_rate, mode, rng)
    return params.zc_fc2(tape, hidden)


def _attend_stream(x: Node, attention: Attention, head: Linear) -> Tuple[Node, Node]:
    attended = attention(x.tape, x)
    return attended, relu(head(x.tape, mean_axis(attended, axis=-2)))


def tri_transformer(z_t: Node, z_i: Node, z_c: Node, params: FusionParams) -> Tuple[Node, Node, Node, Node]:
    """Independent self-attention over the text, image and correlation streams.

    ``z_t`` and ``z_i`` are (B, k, d_c) token sequences; ``z_c`` is (B, d_c)
    and enters as a one-token sequence. Returns (unified, f_t, f_i, f_c).
    """
    for name, stream in (('text', z_t), ('image', z_i), ('correlation', z_c)):
        if stream.shape[-1] != params.d_c:
            raise ShapeError(f"{name} stream width {stream.shape[-1]} does not match d_c={params.d_c}")
    if z_c.ndim == 2:
        z_c = reshape(z_c, (z_c.shape[0], 1, z_c.shape[1]))
    f_t, out_t = _attend_stream(z_t, params.att_t, params.head_t)
    f_i, out_i = _attend_stream(z_i, params.att_i, params.head_i)
    f_c, out_c = _attend_stream(z_c, params.att_c, params.head_c)
    return concat([out_t, out_i, out_c], axis=-1), f_t, f_i, f_c


def cmttf(bundle: EmbeddingBundle, params: FusionParams, mode: str, variant: PipelineVariant,
          rng: Optional[np.random.Generator] = None) -> FusionState:
    """Run the fusion stage for one batch under the given pipeline variant."""
    tape = bundle.z_t.tape
    batch = bundle.z_t.shape[0]
    state = FusionState()

    if variant.use_cm:
        state.f_t_to_i, state.f_i_to_t, state.c1 = inter_modal_fusion(bundle.z_t1, bundle.z_i1, params)
        if variant.sim_terms:
            state.similarity = combined_similarity(pool_tokens(bundle.z_t2), pool_tokens(bundle.z_i2),
                                                   pool_tokens(bundle.z_b), params, variant.sim_terms)
            state.c2 = c2_branch(state.similarity, params, mode)
        else:
            state.c2 = params.c2_constant(tape, batch)
        state.z_c = combine_zc(state.c1, state.c2, params, mode, rng)
    else:
        state.z_c = params.zc_constant(tape, batch)

    if variant.use_tt:
        state.unified, state.f_t, state.f_i, state.f_c = tri_transformer(
            params.proj_t(tape, bundle.z_t), params.proj_i(tape, bundle.z_i), state.z_c, params)
    else:
        pooled = concat([pool_tokens(bundle.z_t), pool_tokens(bundle.z_i), state.z_c], axis=-1)
        state.unified = params.flat_head(tape, pooled)
    return state
