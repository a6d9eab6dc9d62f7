"""Corpus processing: review ingestion, tokenization, vocabulary, splits and profile texts."""

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DatasetFormatError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = '<pad>'
UNK_TOKEN = '<unk>'

# format id -> (user key, item key, rating key, text key)
DATASET_FORMATS: Dict[str, Tuple[str, str, str, str]] = {
    'jsonl': ('user_id', 'item_id', 'rating', 'text'),
    'yelp': ('user_id', 'business_id', 'stars', 'text'),
    'amazon': ('reviewerID', 'asin', 'overall', 'reviewText'),
}

_EDGES = re.compile(r'^([^\w\s]*)(.*?)([^\w\s]*)$', re.DOTALL)


@dataclass(frozen=True)
class ReviewRecord:
    """One (user, item, rating, text) interaction."""

    user_id: str
    item_id: str
    rating: float
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"review text is empty for ({self.user_id}, {self.item_id})")
        if not math.isfinite(self.rating):
            raise ValueError(f"rating is not finite for ({self.user_id}, {self.item_id})")

    def to_json(self) -> str:
        return json.dumps({'user_id': self.user_id, 'item_id': self.item_id,
                           'rating': self.rating, 'text': self.text}, ensure_ascii=False)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids into a Vocabulary (PAD and UNK included)."""

    tokens: np.ndarray

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    def __len__(self):
        return self.length


class Vocabulary:
    """Dense token ids; PAD is id 0, UNK is id 1 and real tokens start at 2."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: List[str] = list(tokens)
        self.token_to_id: Dict[str, int] = {token: i + 2 for i, token in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def size(self) -> int:
        """Number of rows an embedding table needs (tokens plus PAD and UNK)."""
        return len(self.tokens) + 2

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if token_id == PAD_ID:
            return PAD_TOKEN
        if token_id == UNK_ID:
            return UNK_TOKEN
        return self.tokens[token_id - 2]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id_of(token) for token in tokens], dtype=np.int64)

    def save(self, path: Path):
        with open(path, 'w', encoding='utf-8') as f:
            for token in self.tokens:
                f.write(f"{token}\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        with open(path, 'r', encoding='utf-8') as f:
            return cls([line.rstrip('\n') for line in f if line.rstrip('\n')])


@dataclass
class DatasetSplit:
    train: List[ReviewRecord]
    validation: List[ReviewRecord]
    test: List[ReviewRecord]
    seed: int
    train_indices: List[int] = field(default_factory=list)
    validation_indices: List[int] = field(default_factory=list)
    test_indices: List[int] = field(default_factory=list)

    def partition(self, name: str) -> List[ReviewRecord]:
        if name not in ('train', 'validation', 'test'):
            raise ValueError(f"Unknown split: {name}")
        return getattr(self, name)


@dataclass
class TrainExample:
    """(text_A, text_B, rev_AB, r_AB) plus the identities of the pair.

    `review` is None for held-out examples, whose joint review is never read.
    """

    user_id: str
    item_id: str
    text_a: TokenSequence
    text_b: TokenSequence
    review: Optional[TokenSequence]
    rating: float


@dataclass
class ExampleBatch:
    user_ids: List[str]
    item_ids: List[str]
    text_a: np.ndarray
    text_b: np.ndarray
    review: Optional[np.ndarray]
    ratings: np.ndarray

    def __len__(self):
        return len(self.ratings)

    @classmethod
    def from_examples(cls, examples: Sequence[TrainExample]) -> "ExampleBatch":
        has_review = all(ex.review is not None for ex in examples)
        return cls(
            user_ids=[ex.user_id for ex in examples],
            item_ids=[ex.item_id for ex in examples],
            text_a=np.stack([ex.text_a.tokens for ex in examples]),
            text_b=np.stack([ex.text_b.tokens for ex in examples]),
            review=np.stack([ex.review.tokens for ex in examples]) if has_review else None,
            ratings=np.array([ex.rating for ex in examples], dtype=np.float64),
        )


def load_reviews(path, format: str = 'jsonl') -> Tuple[List[ReviewRecord], int]:
    """Read one JSON record per line, dropping records whose text is empty.

    Returns the records and the number of dropped records.
    """
    if format not in DATASET_FORMATS:
        raise DatasetFormatError(f"Unknown dataset format: {format}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    user_key, item_key, rating_key, text_key = DATASET_FORMATS[format]

    records, dropped = [], 0
    with open(path, 'rb') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line.decode('utf-8'))
                user_id, item_id = str(raw[user_key]), str(raw[item_key])
                rating = float(raw[rating_key])
                text = raw.get(text_key) or ''
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as e:
                raise DatasetFormatError(f"{path}: malformed record on line {line_number}: {e}") from e
            if not math.isfinite(rating):
                raise DatasetFormatError(f"{path}: non-finite rating on line {line_number}")
            if not str(text).strip():
                dropped += 1
                continue
            records.append(ReviewRecord(user_id, item_id, rating, str(text)))

    if dropped:
        logger.warning(f"Dropped {dropped} records with empty review text from {path}")
    logger.info(f"Loaded {len(records)} reviews from {path}")
    return records, dropped


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and detach leading/trailing punctuation marks."""
    tokens = []
    for chunk in text.lower().split():
        lead, core, trail = _EDGES.match(chunk).groups()
        tokens.extend(lead)
        if core:
            tokens.append(core)
        tokens.extend(trail)
    return tokens


def build_vocab(corpus: Iterable[Sequence[str]], M: int) -> Vocabulary:
    """Keep the M most frequent tokens, ties broken lexicographically."""
    if M < 1:
        raise ValueError(f"vocabulary size M must be >= 1, got {M}")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return Vocabulary([token for token, _ in ranked[:M]])


def split_dataset(records: Sequence[ReviewRecord], ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 42) -> DatasetSplit:
    """Random train/validation/test partition, deterministic in `seed`."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three values summing to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")

    n_validation = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_validation - n_test
    if n_train < 1:
        raise ValueError(f"ratios {ratios} leave no training records out of {n}")

    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train].tolist())
    validation_idx = sorted(order[n_train:n_train + n_validation].tolist())
    test_idx = sorted(order[n_train + n_validation:].tolist())
    return DatasetSplit(
        train=[records[i] for i in train_idx],
        validation=[records[i] for i in validation_idx],
        test=[records[i] for i in test_idx],
        seed=seed,
        train_indices=train_idx,
        validation_indices=validation_idx,
        test_indices=test_idx,
    )


def _assemble(encoded: Sequence[np.ndarray], T: int, rng: np.random.Generator) -> TokenSequence:
    """Shuffle reviews, concatenate, keep the first T ids and right-pad with PAD."""
    out = np.full(T, PAD_ID, dtype=np.int64)
    filled = 0
    for i in rng.permutation(len(encoded)):
        if filled >= T:
            break
        ids = encoded[i][:T - filled]
        out[filled:filled + len(ids)] = ids
        filled += len(ids)
    return TokenSequence(out)


def build_profile_text(reviews: Sequence[ReviewRecord], exclude: Optional[Tuple[str, str]], T: int,
                       rng: np.random.Generator, vocab: Vocabulary) -> TokenSequence:
    """Profile of exactly T ids from `reviews`, leaving out the review of the `exclude` pair."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    kept = [r for r in reviews if exclude is None or (r.user_id, r.item_id) != tuple(exclude)]
    return _assemble([vocab.encode(tokenize(r.text)) for r in kept], T, rng)


def pad_sequence(ids: np.ndarray, T: int) -> TokenSequence:
    out = np.full(T, PAD_ID, dtype=np.int64)
    ids = ids[:T]
    out[:len(ids)] = ids
    return TokenSequence(out)


class ProfileBuilder:
    """Builds profile texts and examples from a pool of reviews, tokenizing each review once."""

    def __init__(self, pool: Sequence[ReviewRecord], vocab: Vocabulary, T: int):
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        self.pool = list(pool)
        self.vocab = vocab
        self.T = T
        self.encoded = [vocab.encode(tokenize(r.text)) for r in self.pool]
        self.by_user: Dict[str, List[int]] = defaultdict(list)
        self.by_item: Dict[str, List[int]] = defaultdict(list)
        for i, record in enumerate(self.pool):
            self.by_user[record.user_id].append(i)
            self.by_item[record.item_id].append(i)

    def _profile(self, indices: List[int], exclude: Optional[Tuple[str, str]], rng) -> TokenSequence:
        if exclude is not None:
            indices = [i for i in indices if (self.pool[i].user_id, self.pool[i].item_id) != exclude]
        return _assemble([self.encoded[i] for i in indices], self.T, rng)

    def user_profile(self, user_id: str, exclude: Optional[Tuple[str, str]], rng) -> TokenSequence:
        return self._profile(self.by_user.get(user_id, []), exclude, rng)

    def item_profile(self, item_id: str, exclude: Optional[Tuple[str, str]], rng) -> TokenSequence:
        return self._profile(self.by_item.get(item_id, []), exclude, rng)

    def encode_review(self, record: ReviewRecord) -> TokenSequence:
        return pad_sequence(self.vocab.encode(tokenize(record.text)), self.T)

    def build_examples(self, targets: Sequence[ReviewRecord], rng: np.random.Generator,
                       exclude_joint: bool, include_review: bool) -> List[TrainExample]:
        """One example per target review; profiles come from this builder's pool only."""
        examples = []
        for record in targets:
            exclude = (record.user_id, record.item_id) if exclude_joint else None
            examples.append(TrainExample(
                user_id=record.user_id,
                item_id=record.item_id,
                text_a=self.user_profile(record.user_id, exclude, rng),
                text_b=self.item_profile(record.item_id, exclude, rng),
                review=self.encode_review(record) if include_review else None,
                rating=record.rating,
            ))
        return examples


def id_only_examples(targets: Sequence[ReviewRecord], T: int) -> List[TrainExample]:
    """Examples without text, for the ratings-only baseline."""
    empty = TokenSequence(np.full(T, PAD_ID, dtype=np.int64))
    return [TrainExample(r.user_id, r.item_id, empty, empty, None, r.rating) for r in targets]


class CorpusProcessor:
    """Writes and reads the prepared dataset directory."""

    def __init__(self, vocab_size: int, seed: int = 42, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)):
        self.vocab_size = vocab_size
        self.seed = seed
        self.ratios = ratios

    def prepare(self, raw_path: str, format: str, output_dir: Path) -> Dict[str, int]:
        """Canonical records, split manifests, vocabulary and statistics for a raw dataset."""
        records, dropped = load_reviews(raw_path, format)
        split = split_dataset(records, self.ratios, self.seed)
        vocab = build_vocab((tokenize(r.text) for r in split.train), self.vocab_size)

        output_dir = Path(output_dir)
        split_dir = output_dir / 'split'
        split_dir.mkdir(parents=True, exist_ok=True)

        with open(output_dir / 'reviews.jsonl', 'w', encoding='utf-8') as f:
            for record in records:
                f.write(record.to_json() + '\n')
        for name, indices in (('train', split.train_indices), ('validation', split.validation_indices),
                              ('test', split.test_indices)):
            with open(split_dir / f"{name}.idx", 'w', encoding='utf-8') as f:
                f.writelines(f"{i}\n" for i in indices)
        (split_dir / 'seed.txt').write_text(f"{self.seed}\n", encoding='utf-8')
        vocab.save(output_dir / 'vocab.txt')

        stats = dataset_stats(records, dropped)
        with open(output_dir / 'stats.tsv', 'w', encoding='utf-8') as f:
            f.write('\t'.join(stats.keys()) + '\n')
            f.write('\t'.join(str(v) for v in stats.values()) + '\n')

        logger.info(f"Prepared {len(records)} reviews into {output_dir}: "
                    f"{len(split.train)}/{len(split.validation)}/{len(split.test)} train/validation/test, "
                    f"{len(vocab)} vocabulary tokens")
        return stats

    @staticmethod
    def load_prepared(data_dir: Path) -> Tuple[DatasetSplit, Vocabulary]:
        data_dir = Path(data_dir)
        manifest = data_dir / 'split'
        for required in (data_dir / 'reviews.jsonl', data_dir / 'vocab.txt', manifest / 'train.idx'):
            if not required.exists():
                raise FileNotFoundError(f"Prepared dataset is missing {required}; run `prepare` first")

        records, _ = load_reviews(data_dir / 'reviews.jsonl', 'jsonl')

        def read_indices(name):
            with open(manifest / f"{name}.idx", 'r', encoding='utf-8') as f:
                return [int(line) for line in f if line.strip()]

        indices = {name: read_indices(name) for name in ('train', 'validation', 'test')}
        seed = int((manifest / 'seed.txt').read_text(encoding='utf-8').strip())
        split = DatasetSplit(
            train=[records[i] for i in indices['train']],
            validation=[records[i] for i in indices['validation']],
            test=[records[i] for i in indices['test']],
            seed=seed,
            train_indices=indices['train'],
            validation_indices=indices['validation'],
            test_indices=indices['test'],
        )
        return split, Vocabulary.load(data_dir / 'vocab.txt')


def dataset_stats(records: Sequence[ReviewRecord], dropped: int = 0) -> Dict[str, int]:
    return {
        '#Users': len({r.user_id for r in records}),
        '#Items': len({r.item_id for r in records}),
        '#Ratings & Reviews': len(records),
        '#Discarded': dropped,
    }
