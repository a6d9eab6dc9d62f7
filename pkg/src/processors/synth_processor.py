"""Synthetic review corpus: users with a latent mood, items with a latent quality."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .corpus_processor import ReviewRecord

logger = logging.getLogger(__name__)

RATING_WORDS = {
    1: ('awful', 'terrible', 'dreadful'),
    2: ('poor', 'disappointing', 'mediocre'),
    3: ('okay', 'average', 'decent'),
    4: ('good', 'nice', 'solid'),
    5: ('excellent', 'superb', 'outstanding'),
}
# one word group per fifth of the latent range [-1, 1], lowest first
MOOD_WORDS = (('furious', 'hostile'), ('grumpy', 'picky'), ('calm', 'neutral'), ('cheerful', 'upbeat'),
              ('delighted', 'ecstatic'))
QUALITY_WORDS = (('filthy', 'broken'), ('dirty', 'cramped'), ('plain', 'ordinary'), ('fresh', 'tidy'),
                 ('spotless', 'lovely'))
NOUNS = ('food', 'service', 'place', 'staff', 'menu', 'room', 'coffee', 'dessert')
FILLER = ('we', 'went', 'there', 'on', 'a', 'friday', 'with', 'friends', 'and', 'it', 'was', 'busy', 'again',
          'parking', 'took', 'while', 'the', 'music', 'played', 'loud')


def rating_for(mood: float, quality: float) -> int:
    """clip(round(3 + 1.2 mood + 1.2 quality), 1, 5)."""
    return int(np.clip(np.rint(3.0 + 1.2 * mood + 1.2 * quality), 1, 5))


def _level(value: float, levels: int = 5) -> int:
    return min(max(int((value + 1.0) / 2.0 * levels), 0), levels - 1)


@dataclass
class SynthCorpus:
    reviews: List[ReviewRecord]
    user_mood: Dict[str, float]
    item_quality: Dict[str, float]

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for record in self.reviews:
                f.write(record.to_json() + '\n')
        logger.info(f"Wrote {len(self.reviews)} synthetic reviews to {path}")
        return path


class SynthProcessor:
    """Generates a JSON-lines corpus whose ratings are recoverable from the text.

    Every review names its rating through a keyword and mentions the author's mood
    and the item's quality, so user and item profiles carry the signal the source
    network needs.
    """

    def __init__(self, users: int = 500, items: int = 200, reviews: int = 5000, seed: int = 42,
                 filler_words: int = 6):
        if users < 1 or items < 1:
            raise ValueError("synthetic corpus needs at least one user and one item")
        if reviews > users * items:
            raise ValueError(f"cannot draw {reviews} distinct (user, item) pairs from {users} x {items}")
        self.users = users
        self.items = items
        self.reviews = reviews
        self.seed = seed
        self.filler_words = filler_words

    def _text(self, rng: np.random.Generator, rating: int, mood: float, quality: float) -> str:
        words = [
            'the', rng.choice(NOUNS), 'was', rng.choice(RATING_WORDS[rating]), '.',
            'i', 'am', rng.choice(MOOD_WORDS[_level(mood)]), 'and', 'it', 'felt',
            rng.choice(QUALITY_WORDS[_level(quality)]), '.',
        ]
        words += list(rng.choice(FILLER, size=self.filler_words))
        words.append('!' if rating >= 4 else '.')
        return ' '.join(str(w) for w in words)

    def generate(self) -> SynthCorpus:
        rng = np.random.default_rng(self.seed)
        user_ids = [f"u{i:04d}" for i in range(self.users)]
        item_ids = [f"i{i:04d}" for i in range(self.items)]
        mood = dict(zip(user_ids, rng.uniform(-1.0, 1.0, size=self.users).tolist()))
        quality = dict(zip(item_ids, rng.uniform(-1.0, 1.0, size=self.items).tolist()))

        seen = set()
        records = []
        while len(records) < self.reviews:
            user = user_ids[int(rng.integers(self.users))]
            item = item_ids[int(rng.integers(self.items))]
            if (user, item) in seen:
                continue
            seen.add((user, item))
            rating = rating_for(mood[user], quality[item])
            records.append(ReviewRecord(user, item, float(rating), self._text(rng, rating, mood[user], quality[item])))

        logger.info(f"Generated {len(records)} synthetic reviews over {self.users} users and {self.items} items "
                    f"(seed {self.seed})")
        return SynthCorpus(records, mood, quality)
