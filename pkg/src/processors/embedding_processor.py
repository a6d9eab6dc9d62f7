"""Fixed word embeddings: text-file import, seeded random fallback and lookup."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DatasetFormatError, ShapeError
from ..nn.tensor import Tensor
from .corpus_processor import PAD_ID, TokenSequence, Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    """(|vocab| + 2) x d matrix; row 0 (PAD) is all zeros."""

    matrix: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        if self.frozen:
            self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def random_embeddings(vocab: Vocabulary, d: int, seed: int, dtype=np.float64) -> EmbeddingTable:
    """Uniform draws in [-0.5/d, 0.5/d], PAD row zeroed."""
    if d < 1:
        raise ValueError(f"embedding dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.5 / d, 0.5 / d, size=(vocab.size, d)).astype(dtype)
    matrix[PAD_ID] = 0.0
    return EmbeddingTable(matrix)


def load_embeddings(path, vocab: Vocabulary, d: int = None, seed: int = 42, dtype=np.float64) -> EmbeddingTable:
    """Read `token v1 ... vd` lines; tokens missing from the file get seeded random rows.

    A token listed twice keeps its last vector. `d` is taken from the file unless the
    file is empty, in which case it must be given.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")

    vectors = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.rstrip('\n').split(' ')
            if not line.strip():
                continue
            token, values = parts[0], parts[1:]
            try:
                vector = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as e:
                raise DatasetFormatError(f"{path}: bad embedding value on line {line_number}: {e}") from e
            if d is None:
                d = len(vector)
            if len(vector) != d or d == 0:
                raise ShapeError(f"{path}: line {line_number} has dimension {len(vector)}, expected {d}")
            if token in vocab:
                vectors[token] = vector

    if d is None:
        raise ShapeError(f"{path} is empty and no embedding dimension was given")

    table = random_embeddings(vocab, d, seed, dtype=np.float64).matrix.copy()
    for token, vector in vectors.items():
        table[vocab.id_of(token)] = vector
    table[PAD_ID] = 0.0
    logger.info(f"Loaded {len(vectors)} of {len(vocab)} vocabulary vectors from {path} (d={d})")
    return EmbeddingTable(table.astype(dtype))


def lookup(table: EmbeddingTable, seq) -> Tensor:
    """Rows of the table for each id; accepts a TokenSequence or an id array of any shape."""
    ids = seq.tokens if isinstance(seq, TokenSequence) else np.asarray(seq, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise IndexError(f"token id out of range [0, {table.rows})")
    return Tensor(table.matrix[ids])
