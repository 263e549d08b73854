"""Parameter-owning building blocks over the numerics primitives."""

from typing import Dict, List, Optional

import numpy as np

from modules.errors import ConfigError
from modules.numerics import (
    BN_EPSILON,
    BN_MOMENTUM,
    BatchNormStats,
    Node,
    Parameter,
    Tape,
    add,
    batch_norm,
    linear,
    multi_head_attention,
)

INITS = ('xavier', 'zeros')
BIAS_INITS = ('zeros', 'uniform')


def init_bias(rng: Optional[np.random.Generator], fan_in: int, fan_out: int, init: str = 'zeros') -> np.ndarray:
    """Zero bias, or U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for 'uniform'."""
    if init not in BIAS_INITS:
        raise ConfigError(f"unknown bias init '{init}', expected one of {BIAS_INITS}")
    if init == 'zeros':
        return np.zeros((1, fan_out))
    if rng is None:
        raise ConfigError("uniform bias init needs a random generator")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(1, fan_out))


def init_matrix(rng: Optional[np.random.Generator], fan_in: int, fan_out: int, init: str = 'xavier') -> np.ndarray:
    if init not in INITS:
        raise ConfigError(f"unknown init '{init}', expected one of {INITS}")
    if init == 'zeros':
        return np.zeros((fan_in, fan_out))
    if rng is None:
        raise ConfigError("xavier init needs a random generator")
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class Linear:
    """x @ W + b with W of shape (in, out) and b of shape (1, out)."""

    __slots__ = ('weight', 'bias')

    def __init__(self, name: str, in_width: int, out_width: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, init: str = 'xavier', bias_init: str = 'zeros'):
        self.weight = Parameter(f"{name}.weight", init_matrix(rng, in_width, out_width, init))
        self.bias = Parameter(f"{name}.bias", init_bias(rng, in_width, out_width, bias_init)) if bias else None

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, tape: Tape, x: Node) -> Node:
        bias = None if self.bias is None else tape.param(self.bias)
        return linear(x, tape.param(self.weight), bias)


class BatchNorm:
    """Batch normalisation with learnable gamma/beta and running statistics."""

    __slots__ = ('name', 'gamma', 'beta', 'stats', 'momentum', 'eps')

    def __init__(self, name: str, features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones((1, features)))
        self.beta = Parameter(f"{name}.beta", np.zeros((1, features)))
        self.stats = BatchNormStats.fresh(features)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.stats.mean, f"{self.name}.running_var": self.stats.var}

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        self.stats.mean = np.array(buffers[f"{self.name}.running_mean"], dtype=np.float64)
        self.stats.var = np.array(buffers[f"{self.name}.running_var"], dtype=np.float64)

    def __call__(self, tape: Tape, x: Node, mode: str) -> Node:
        return batch_norm(x, tape.param(self.gamma), tape.param(self.beta), mode, self.stats,
                          momentum=self.momentum, eps=self.eps)


class Attention:
    """Self-attention parameters: query/value/output projections with bias, key without."""

    __slots__ = ('heads', 'wq', 'bq', 'wk', 'wv', 'bv', 'wo', 'bo')

    def __init__(self, name: str, width: int, heads: int, rng: Optional[np.random.Generator] = None,
                 init: str = 'xavier'):
        if heads < 1 or width % heads:
            raise ConfigError(f"{name}: width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.wq = Parameter(f"{name}.wq", init_matrix(rng, width, width, init))
        self.bq = Parameter(f"{name}.bq", np.zeros((1, width)))
        self.wk = Parameter(f"{name}.wk", init_matrix(rng, width, width, init))
        self.wv = Parameter(f"{name}.wv", init_matrix(rng, width, width, init))
        self.bv = Parameter(f"{name}.bv", np.zeros((1, width)))
        self.wo = Parameter(f"{name}.wo", init_matrix(rng, width, width, init))
        self.bo = Parameter(f"{name}.bo", np.zeros((1, width)))

    @classmethod
    def identity(cls, name: str, width: int, heads: int = 1) -> 'Attention':
        layer = cls(name, width, heads, init='zeros')
        for p in (layer.wq, layer.wk, layer.wv, layer.wo):
            p.value[...] = np.eye(width)
        return layer

    def parameters(self) -> List[Parameter]:
        return [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]

    def __call__(self, tape: Tape, x: Node) -> Node:
        return multi_head_attention(x, x, x, self, self.heads)


class ConstantToken:
    """A learned vector broadcast over the batch, standing in for a removed branch."""

    __slots__ = ('value',)

    def __init__(self, name: str, width: int, rng: Optional[np.random.Generator] = None):
        start = np.zeros((1, width)) if rng is None else rng.normal(0.0, 0.1, size=(1, width))
        self.value = Parameter(name, start)

    def parameters(self) -> List[Parameter]:
        return [self.value]

    def __call__(self, tape: Tape, batch: int) -> Node:
        return add(tape.constant(np.zeros((batch, self.value.shape[1]))), tape.param(self.value))
