"""Checkpoint serialization.

Layout: magic b"TNSN", format version (u32), config digest (32 raw bytes), a
length-prefixed JSON metadata block, then a count of tensors each stored as
name (u16 length + UTF-8), rank (u8), dims (u64 each) and little-endian float64 data.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from .errors import CheckpointError
from .nn.optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b'TNSN'
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    digest: str
    params: Dict[str, np.ndarray]
    optimizers: Dict[str, AdamState]
    vocab_tokens: List[str]
    embeddings: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)
    best_val_mse: float = float('inf')
    test_mse_at_best: float = float('nan')
    batch: int = 0

    @classmethod
    def capture(cls, model, optimizers: Dict[str, AdamState], config: Dict[str, Any], digest: str,
                vocab_tokens: List[str], embeddings: np.ndarray, metadata: Dict[str, Any] = None,
                best_val_mse: float = float('inf'), test_mse_at_best: float = float('nan'),
                batch: int = 0) -> "Checkpoint":
        """Deep snapshot of a model and its optimizer states."""
        return cls(
            config=dict(config),
            digest=digest,
            params={name: value.copy() for name, value in model.state_dict().items()},
            optimizers={group: AdamState(state.beta1, state.beta2, state.epsilon, state.timestep,
                                         {k: v.copy() for k, v in state.m.items()},
                                         {k: v.copy() for k, v in state.v.items()})
                        for group, state in optimizers.items()},
            vocab_tokens=list(vocab_tokens),
            embeddings=np.array(embeddings, copy=True),
            metadata=dict(metadata or {}),
            best_val_mse=best_val_mse,
            test_mse_at_best=test_mse_at_best,
            batch=batch,
        )


def _tensor_entries(checkpoint: Checkpoint):
    yield 'embeddings', checkpoint.embeddings
    for name, value in checkpoint.params.items():
        yield f"param/{name}", value
    for group, state in checkpoint.optimizers.items():
        for name, value in state.m.items():
            yield f"opt/{group}/m/{name}", value
        for name, value in state.v.items():
            yield f"opt/{group}/v/{name}", value


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        'config': checkpoint.config,
        'vocab_tokens': checkpoint.vocab_tokens,
        'metadata': checkpoint.metadata,
        'best_val_mse': checkpoint.best_val_mse,
        'test_mse_at_best': checkpoint.test_mse_at_best,
        'batch': checkpoint.batch,
        'optimizers': {group: {'beta1': s.beta1, 'beta2': s.beta2, 'epsilon': s.epsilon, 'timestep': s.timestep}
                       for group, s in checkpoint.optimizers.items()},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    entries = list(_tensor_entries(checkpoint))

    chunks = [MAGIC, struct.pack('<I', FORMAT_VERSION), bytes.fromhex(checkpoint.digest),
              struct.pack('<I', len(meta_bytes)), meta_bytes, struct.pack('<I', len(entries))]
    for name, value in entries:
        name_bytes = name.encode('utf-8')
        value = np.asarray(value, dtype='<f8')
        chunks.append(struct.pack('<H', len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack('<B', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        chunks.append(value.tobytes(order='C'))

    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'wb') as f:
        f.write(b''.join(chunks))
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint saved to {path}")
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Parse a whole checkpoint file; nothing is returned unless every field decodes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())

    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    digest = reader.take(32).hex()
    (meta_len,) = reader.unpack('<I')
    try:
        meta = json.loads(reader.take(meta_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt metadata block: {e}") from e

    tensors = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path} has a corrupt tensor name: {e}") from e
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}Q') if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(shape).astype(np.float64)
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path} has {len(reader.blob) - reader.offset} trailing bytes")

    try:
        optimizers = {}
        for group, scalars in meta['optimizers'].items():
            prefix_m, prefix_v = f"opt/{group}/m/", f"opt/{group}/v/"
            optimizers[group] = AdamState(
                beta1=scalars['beta1'], beta2=scalars['beta2'], epsilon=scalars['epsilon'],
                timestep=int(scalars['timestep']),
                m={k[len(prefix_m):]: v for k, v in tensors.items() if k.startswith(prefix_m)},
                v={k[len(prefix_v):]: v for k, v in tensors.items() if k.startswith(prefix_v)},
            )
        checkpoint = Checkpoint(
            config=meta['config'],
            digest=digest,
            params={k[len('param/'):]: v for k, v in tensors.items() if k.startswith('param/')},
            optimizers=optimizers,
            vocab_tokens=meta['vocab_tokens'],
            embeddings=tensors['embeddings'],
            metadata=meta['metadata'],
            best_val_mse=meta['best_val_mse'],
            test_mse_at_best=meta['test_mse_at_best'],
            batch=int(meta['batch']),
        )
    except KeyError as e:
        raise CheckpointError(f"{path} is missing field {e}") from e
    logger.info(f"Checkpoint loaded from {path} (batch {checkpoint.batch})")
    return checkpoint
