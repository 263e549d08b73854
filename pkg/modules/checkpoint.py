"""Checkpoint file: one JSON header line followed by a raw float64 payload.

Header fields: format ("cromekit-ckpt-1"), epoch, config echo, variant, blob
table (name, shape, offset, count in float64 units), optimizer scalars and
RNG stream states. The payload is every blob in table order, little-endian.
Nothing time-dependent is written, so equal runs produce equal bytes.
"""

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from modules.errors import CheckpointError
from modules.numerics import AdamState, RngStreams

logger = logging.getLogger('cromekit')

FORMAT_VERSION = 'cromekit-ckpt-1'
_DTYPE = np.dtype('<f8')


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    tensors: 'OrderedDict[str, np.ndarray]'

    @property
    def epoch(self) -> int:
        return int(self.header['epoch'])

    @property
    def config(self) -> Dict[str, Any]:
        return self.header['config']

    def model_state(self) -> Dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items() if not name.startswith('adam.')}

    def optimizers(self) -> Dict[str, AdamState]:
        states = {}
        for group, meta in self.header.get('optimizers', {}).items():
            state = AdamState(**meta['scalars'])
            for pname in meta['params']:
                state.first_moment[pname] = self.tensors[f"adam.{group}.m.{pname}"].copy()
                state.second_moment[pname] = self.tensors[f"adam.{group}.v.{pname}"].copy()
            states[group] = state
        return states

    def restore_rng(self, streams: RngStreams) -> None:
        streams.restore(self.header.get('rng', {}))


def encode(model_state: Dict[str, np.ndarray], optimizers: Dict[str, AdamState], config: Dict[str, Any],
           epoch: int, variant: str, rng: Optional[Dict[str, Any]] = None,
           extra: Optional[Dict[str, Any]] = None) -> bytes:
    blobs: 'OrderedDict[str, np.ndarray]' = OrderedDict(model_state)
    optimizer_meta = {}
    for group in sorted(optimizers):
        state = optimizers[group]
        names = sorted(state.first_moment)
        for pname in names:
            blobs[f"adam.{group}.m.{pname}"] = state.first_moment[pname]
            blobs[f"adam.{group}.v.{pname}"] = state.second_moment[pname]
        optimizer_meta[group] = {'scalars': state.scalars(), 'params': names}

    table, offset = [], 0
    for name, value in blobs.items():
        count = int(np.size(value))
        table.append({'name': name, 'shape': list(np.shape(value)), 'offset': offset, 'count': count})
        offset += count

    header = {
        'format': FORMAT_VERSION,
        'epoch': int(epoch),
        'variant': variant,
        'config': config,
        'blobs': table,
        'optimizers': optimizer_meta,
        'rng': rng or {},
        'extra': extra or {},
    }
    payload = b''.join(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in blobs.values())
    return json.dumps(header, sort_keys=True).encode('utf-8') + b'\n' + payload


def decode(data: bytes, source: str = '<bytes>') -> Checkpoint:
    newline = data.find(b'\n')
    if newline < 0:
        raise CheckpointError(f"{source}: no header line")
    try:
        header = json.loads(data[:newline].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header ({e})") from None
    if header.get('format') != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint format {header.get('format')!r}")

    payload = data[newline + 1:]
    total = sum(entry['count'] for entry in header['blobs'])
    if len(payload) != total * _DTYPE.itemsize:
        raise CheckpointError(f"{source}: payload holds {len(payload)} bytes, header describes {total * _DTYPE.itemsize}")
    flat = np.frombuffer(payload, dtype=_DTYPE)
    tensors = OrderedDict()
    for entry in header['blobs']:
        chunk = flat[entry['offset']:entry['offset'] + entry['count']]
        tensors[entry['name']] = chunk.astype(np.float64).reshape(entry['shape'])
    return Checkpoint(header, tensors)


def save(path: str, model_state: Dict[str, np.ndarray], optimizers: Dict[str, AdamState],
         config: Dict[str, Any], epoch: int, variant: str, rng: Optional[Dict[str, Any]] = None,
         extra: Optional[Dict[str, Any]] = None) -> str:
    """Write a checkpoint and return its sha256."""
    data = encode(model_state, optimizers, config, epoch, variant, rng, extra)
    with open(path, 'wb') as f:
        f.write(data)
    logger.debug(f"[Checkpoint] wrote epoch {epoch} to {path} ({len(data)} bytes)")
    return hashlib.sha256(data).hexdigest()


def load(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    checkpoint = decode(data, path)
    logger.info(f"[Checkpoint] loaded '{path}' (epoch {checkpoint.epoch}, variant '{checkpoint.header['variant']}')")
    return checkpoint
