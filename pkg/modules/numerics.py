"""Dense float64 kernels on a reverse-mode tape, plus Adam and a gradient checker.

Every array is a numpy float64 ndarray. Primitives act on the trailing axes and
broadcast over any leading batch axes, so a batch of k x d token matrices is a
(B, k, d) array and a plain 2-D array is a single matrix.

Usage:
    tape = Tape()
    w = tape.param(weight)
    loss = sum_axis(relu(matmul(tape.constant(x), w)))
    tape.backward(loss)          # weight.grad now holds d loss / d weight
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.errors import (
    ConfigError,
    DegenerateBatchError,
    DegenerateVectorError,
    GradientCheckError,
    OptimizerStateError,
    ShapeError,
)

logger = logging.getLogger('cromekit')

TRAIN = 'train'
EVAL = 'eval'
MODES = (TRAIN, EVAL)

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
EXP_CLAMP = 500.0
PROB_FLOOR = 1e-12


class Parameter:
    """A trainable array with its accumulated gradient."""

    __slots__ = ('name', 'value', 'grad')

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """One value on a tape; ``grad`` is filled in by ``Tape.backward``."""

    __slots__ = ('tape', 'value', 'grad', 'inputs', 'backward_fn', 'op')

    def __init__(self, tape: 'Tape', value: np.ndarray, inputs: Sequence['Node'] = (),
                 backward_fn: Optional[Callable] = None, op: str = 'leaf'):
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.value.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Node division is only defined for scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"


class Tape:
    """Records operations in execution order so backward can replay them in reverse."""

    __slots__ = ('nodes', 'parameters', '_param_nodes')

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, Parameter] = {}
        self._param_nodes: Dict[int, Tuple[Parameter, Node]] = {}

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), op='constant')

    def param(self, parameter: Parameter) -> Node:
        """Leaf node bound to ``parameter``; one node per parameter per tape."""
        key = id(parameter)
        if key in self._param_nodes:
            return self._param_nodes[key][1]
        known = self.parameters.get(parameter.name)
        if known is not None and known is not parameter:
            raise ConfigError(f"two different parameters share the name '{parameter.name}'")
        node = Node(self, parameter.value, op='param')
        self.parameters[parameter.name] = parameter
        self._param_nodes[key] = (parameter, node)
        return node

    def record(self, value: np.ndarray, inputs: Sequence[Node], backward_fn: Callable, op: str) -> Node:
        node = Node(self, value, inputs, backward_fn, op)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Accumulate d loss / d parameter into every registered ``Parameter.grad``."""
        if loss.tape is not self:
            raise ShapeError("backward: loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for inp, grad in zip(node.inputs, node.backward_fn(node.grad)):
                if grad is not None:
                    inp._accumulate(grad)
        for parameter, node in self._param_nodes.values():
            if node.grad is not None:
                parameter.grad += node.grad


ArrayLike = Union[Node, np.ndarray, float, int]


def _tape_of(*items) -> Tape:
    for item in items:
        if isinstance(item, Node):
            return item.tape
    raise TypeError("at least one operand must be a tape Node")


def _lift(tape: Tape, item: ArrayLike) -> Node:
    if isinstance(item, Node):
        if item.tape is not tape:
            raise ShapeError("operands belong to different tapes")
        return item
    return tape.constant(item)


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape('add', a, b)
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g), 'add')


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape('sub', a, b)
    return tape.record(a.value - b.value, (a, b), lambda g: (g, -g), 'sub')


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape('mul', a, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av), 'mul')


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    return a.tape.record(a.value * factor, (a,), lambda g: (g * factor,), 'scale')


def matmul(a: ArrayLike, b: ArrayLike) -> Node:
    """Matrix product over the last two axes, broadcasting leading axes."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (np.matmul(g, np.swapaxes(bv, -1, -2)),
                np.matmul(np.swapaxes(av, -1, -2), g))

    return tape.record(np.matmul(av, bv), (a, b), backward, 'matmul')


def relu(a: Node) -> Node:
    """max(0, x); the subgradient at 0 is 0."""
    mask = a.value > 0.0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), 'relu')


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,), 'exp')


def log1p(a: Node) -> Node:
    av = a.value
    return a.tape.record(np.log1p(av), (a,), lambda g: (g / (1.0 + av),), 'log1p')


def log_clamped(a: Node, floor: float = PROB_FLOOR) -> Node:
    """log(max(x, floor)); no gradient flows through clamped entries."""
    safe = np.maximum(a.value, floor)
    live = a.value > floor
    return a.tape.record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), 'log')


def clip(a: Node, low: float, high: float) -> Node:
    live = (a.value >= low) & (a.value <= high)
    return a.tape.record(np.clip(a.value, low, high), (a,), lambda g: (g * live,), 'clip')


def softmax_rows(a: Node) -> Node:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return a.tape.record(out, (a,), backward, 'softmax')


def sum_axis(a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), backward, 'sum')


def mean_axis(a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_axis(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    original = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),), 'reshape')


def transpose(a: Node, axes: Optional[Sequence[int]] = None) -> Node:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose')


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: nothing to concatenate")
    tape = _tape_of(*nodes)
    nodes = [_lift(tape, n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[n.shape for n in nodes]} on axis {axis}") from None
    cuts = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return tape.record(out, nodes, lambda g: tuple(np.split(g, cuts, axis=axis)), 'concat')


def take(a: Node, indices: Sequence[int]) -> Node:
    """Select rows along axis 0 (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(a.value[idx], (a,), backward, 'take')


def normalize_rows(a: Node) -> Node:
    """L2-normalise along the last axis; zero rows raise DegenerateVectorError."""
    norms = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateVectorError(f"zero-norm vector in input of shape {a.shape}")
    out = a.value / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return a.tape.record(out, (a,), backward, 'normalize')


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Normalisation, dropout and attention
# ---------------------------------------------------------------------------

@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer, shape (1, features)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, features: int) -> 'BatchNormStats':
        return cls(np.zeros((1, features)), np.ones((1, features)))


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")


def batch_norm(x: Node, gamma: Node, beta_shift: Node, mode: str, running_stats: BatchNormStats,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Node:
    """Per-feature standardisation over the batch axis followed by an affine map.

    Train mode uses the (biased) batch statistics and folds them into
    ``running_stats`` with ``running = momentum * running + (1 - momentum) * batch``;
    eval mode uses the running statistics verbatim.
    """
    _check_mode(mode)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects a (batch, features) matrix, got {x.shape}")
    n, features = x.shape
    if gamma.shape != (1, features) or beta_shift.shape != (1, features):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta_shift.shape} do not match {features} features")
    g_val, xv = gamma.value, x.value

    if mode == TRAIN:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs at least 2 rows, got {n}")
        mu = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv_std
        running_stats.mean = momentum * running_stats.mean + (1.0 - momentum) * mu
        running_stats.var = momentum * running_stats.var + (1.0 - momentum) * var

        def backward(g):
            dxhat = g * g_val
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
    else:
        inv_std = 1.0 / np.sqrt(running_stats.var + eps)
        xhat = (xv - running_stats.mean) * inv_std

        def backward(g):
            return g * g_val * inv_std, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    out = xhat * g_val + beta_shift.value
    return x.tape.record(out, (x, gamma, beta_shift), backward, 'batch_norm')


def validate_dropout_rate(rate: float) -> float:
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    return rate


def dropout(x: Node, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Node:
    """Inverted dropout in train mode, identity in eval mode."""
    rate = validate_dropout_rate(rate)
    _check_mode(mode)
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, x.tape.constant(mask))


def _split_heads(x: Node, heads: int) -> Node:
    """(..., k, width) -> (..., heads, k, width / heads)."""
    width = x.shape[-1]
    x = reshape(x, x.shape[:-1] + (heads, width // heads))
    n = x.ndim
    return transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])


def _merge_heads(x: Node) -> Node:
    n = x.ndim
    x = transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head_attention(q_in: Node, k_in: Node, v_in: Node, params: Any, heads: int) -> Node:
    """Scaled dot-product attention with learned projections.

    ``params`` exposes Parameters ``wq, bq, wk, wv, bv, wo, bo``; the key
    projection has no bias because softmax cancels it. Per head h the result is
    softmax(Q_h K_h^T / sqrt(d_h)) V_h; heads are concatenated and projected by
    ``wo``.
    """
    width = q_in.shape[-1]
    if k_in.shape[-1] != width or v_in.shape[-1] != width:
        raise ShapeError(f"attention: feature widths differ: {q_in.shape}, {k_in.shape}, {v_in.shape}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"attention: key/value token counts differ: {k_in.shape} vs {v_in.shape}")
    if heads < 1 or width % heads:
        raise ConfigError(f"attention: width {width} is not divisible by {heads} heads")
    tape = q_in.tape
    q = linear(q_in, tape.param(params.wq), tape.param(params.bq))
    k = matmul(k_in, tape.param(params.wk))
    v = linear(v_in, tape.param(params.wv), tape.param(params.bv))
    head_width = width // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(head_width))
    attended = matmul(softmax_rows(scores), vh)
    return linear(_merge_heads(attended), tape.param(params.wo), tape.param(params.bo))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moments and step counter of one optimizer group."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> Dict[str, Any]:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2,
                'epsilon': self.epsilon, 'step': self.step}


def adam_step(state: AdamState, params: Iterable[Parameter],
              grads: Optional[Sequence[np.ndarray]] = None) -> List[Parameter]:
    """One bias-corrected Adam update; ``grads`` defaults to each ``Parameter.grad``."""
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise OptimizerStateError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise OptimizerStateError(f"adam_step: gradient shape {np.shape(g)} does not match '{p.name}' {p.shape}")
        for moments in (state.first_moment, state.second_moment):
            if p.name in moments and moments[p.name].shape != p.shape:
                raise OptimizerStateError(
                    f"adam_step: moment shape {moments[p.name].shape} does not match '{p.name}' {p.shape}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g in zip(params, grads):
        m = state.first_moment.setdefault(p.name, np.zeros(p.shape))
        v = state.second_moment.setdefault(p.name, np.zeros(p.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    parameter: str
    index: int
    analytic: float
    numeric: float
    error: float

    @property
    def absolute_error(self) -> float:
        return abs(self.analytic - self.numeric)


@dataclass
class GradCheckReport:
    """Per-entry errors are |a - n| / max(|a|, |n|, 1e-8), never floored.

    ``atol`` in ``max_error``/``passed`` is an opt-in round-off floor: entries
    whose absolute discrepancy is at or below it are left out of the verdict.
    """

    max_relative_error: float
    entries: List[GradCheckEntry]

    @property
    def checked(self) -> int:
        return len(self.entries)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.error) if self.entries else None

    def max_error(self, atol: float = 0.0) -> float:
        return max((e.error for e in self.entries if e.absolute_error > atol), default=0.0)

    def passed(self, threshold: float = 1e-5, atol: float = 0.0) -> bool:
        return self.max_error(atol) <= threshold


def _evaluate(loss_fn: Callable[[Tape], Node]) -> Tuple[Tape, Node]:
    tape = Tape()
    loss = loss_fn(tape)
    value = np.asarray(loss.value)
    if value.size != 1 or not np.isfinite(value).all():
        raise GradientCheckError(f"loss is not a finite scalar (value={value!r})")
    return tape, loss


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(loss_fn: Callable[[Tape], Node], params: Sequence[Parameter], samples: int = 20,
               step: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` builds the loss on the tape it is given and must be
    deterministic (pin any dropout generator inside it). Up to ``samples``
    parameter entries are drawn at random.
    """
    params = [p for p in params if p.size > 0]
    if not params:
        raise GradientCheckError("no parameters to check")
    for p in params:
        p.zero_grad()
    tape, loss = _evaluate(loss_fn)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.Generator(np.random.Philox(seed))
    picks = []
    for _ in range(samples):
        p = params[int(rng.integers(len(params)))]
        picks.append((p, int(rng.integers(p.size))))

    entries = []
    for p, index in picks:
        original = p.value.flat[index]
        p.value.flat[index] = original + step
        plus = _evaluate(loss_fn)[1].item()
        p.value.flat[index] = original - step
        minus = _evaluate(loss_fn)[1].item()
        p.value.flat[index] = original
        numeric = (plus - minus) / (2.0 * step)
        a = float(analytic[p.name].flat[index])
        entries.append(GradCheckEntry(p.name, index, a, numeric, relative_error(a, numeric)))

    for p in params:
        p.zero_grad()
    max_error = max((e.error for e in entries), default=0.0)
    logger.debug(f"[GradCheck] {len(entries)} entries checked, max relative error {max_error:.3e}")
    return GradCheckReport(max_error, entries)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return {'__ndarray__': value.tolist(), 'dtype': str(value.dtype)}
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if '__ndarray__' in value:
            return np.array(value['__ndarray__'], dtype=value['dtype'])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


class RngStreams:
    """Named counter-based (Philox) generators derived from one seed.

    Each consumer draws from its own stream, keyed by the CRC-32 of its name,
    so adding a consumer never shifts the draws of another.
    """

    __slots__ = ('seed', '_streams')

    def __init__(self, seed: int):
        if int(seed) < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            sequence = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode('utf-8')),))
            self._streams[name] = np.random.Generator(np.random.Philox(sequence))
        return self._streams[name]

    def state(self) -> Dict[str, Any]:
        return {name: _to_jsonable(gen.bit_generator.state) for name, gen in sorted(self._streams.items())}

    def restore(self, states: Dict[str, Any]) -> None:
        for name, state in states.items():
            self.stream(name).bit_generator.state = _from_jsonable(state)
