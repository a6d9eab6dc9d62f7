"""MSE evaluation and most-similar-review retrieval."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus_processor import ExampleBatch, ProfileBuilder, ReviewRecord, TrainExample

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    n: int
    mse: float
    residuals: Optional[np.ndarray] = None

    def to_text(self, label: str = '') -> str:
        lines = [f"split\t{label}" if label else None, f"N\t{self.n}", f"MSE\t{self.mse:.6f}"]
        return '\n'.join(line for line in lines if line) + '\n'


@dataclass
class RetrievalResult:
    user_id: str
    item_id: str
    ranking: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def top(self) -> Tuple[int, float]:
        return self.ranking[0]

    def to_lines(self, k: Optional[int] = None) -> List[str]:
        ranked = self.ranking if k is None else self.ranking[:k]
        return [f"{rank}\t{review_id}\t{distance:.9g}" for rank, (review_id, distance) in enumerate(ranked, start=1)]


def mse(pairs: Iterable[Tuple[float, float]]) -> float:
    """(1/N) sum (r - r_hat)^2 over (r, r_hat) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mse needs at least one (rating, prediction) pair")
    actual = np.array([p[0] for p in pairs], dtype=np.float64)
    predicted = np.array([p[1] for p in pairs], dtype=np.float64)
    return float(np.mean((actual - predicted) ** 2))


def rank_candidates(z_l: np.ndarray, encodings: np.ndarray, review_ids: Sequence[int]) -> List[Tuple[int, float]]:
    """(review id, Euclidean distance) ascending by distance, ties by review id."""
    distances = np.linalg.norm(np.asarray(encodings) - np.asarray(z_l)[None, :], axis=1)
    return sorted(((int(rid), float(dist)) for rid, dist in zip(review_ids, distances)),
                  key=lambda pair: (pair[1], pair[0]))


def most_similar_review(user_id: str, item_id: str, model, builder: ProfileBuilder,
                        candidates: Sequence[Tuple[int, ReviewRecord]],
                        rng: np.random.Generator) -> RetrievalResult:
    """Rank candidate reviews by the distance of their Gamma_T encoding to the source network's z_L.

    `builder` must hold the training reviews; the query pair's own review is left out of
    its profiles.
    """
    if not candidates:
        raise ValueError(f"no candidate reviews for item {item_id!r}")
    exclude = (user_id, item_id)
    query = ExampleBatch.from_examples([TrainExample(
        user_id=user_id,
        item_id=item_id,
        text_a=builder.user_profile(user_id, exclude, rng),
        text_b=builder.item_profile(item_id, exclude, rng),
        review=None,
        rating=0.0,
    )])
    z_l = model.encode_source(query)[0]
    reviews = np.stack([builder.encode_review(record).tokens for _, record in candidates])
    encodings = model.encode_review(reviews)
    ranking = rank_candidates(z_l, encodings, [review_id for review_id, _ in candidates])
    logger.info(f"Ranked {len(ranking)} candidate reviews for ({user_id}, {item_id}); "
                f"closest is review {ranking[0][0]} at distance {ranking[0][1]:.6f}")
    return RetrievalResult(user_id, item_id, ranking)


def write_retrieval(result: RetrievalResult, path: Path, k: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write('rank\treview_id\tdistance\n')
        for line in result.to_lines(k):
            f.write(line + '\n')
    return path


class EvaluationProcessor:
    """Eval-mode prediction over example sets, fanned out over worker threads."""

    def __init__(self, thread_count: int = 4, batch_size: int = 500):
        self.thread_count = thread_count
        self.batch_size = batch_size

    def _predict_chunk(self, model, examples: Sequence[TrainExample], target: bool) -> np.ndarray:
        batch = ExampleBatch.from_examples(examples)
        return model.predict_target(batch) if target else model.predict(batch)

    def predict(self, model, examples: Sequence[TrainExample], target: bool = False) -> np.ndarray:
        """Predictions in example order; `target` uses the target network on the joint review."""
        chunks = [examples[i:i + self.batch_size] for i in range(0, len(examples), self.batch_size)]
        if not chunks:
            return np.zeros(0)
        with ThreadPoolExecutor(max_workers=self.thread_count) as executor:
            futures = [executor.submit(self._predict_chunk, model, chunk, target) for chunk in chunks]
            results = []
            for chunk, future in zip(chunks, futures):
                try:
                    results.append(future.result())
                except Exception as exc:
                    logger.error(f"Error predicting a chunk of {len(chunk)} examples: {exc}")
                    raise
        return np.concatenate(results)

    def evaluate(self, model, examples: Sequence[TrainExample], target: bool = False,
                 keep_residuals: bool = False) -> EvalReport:
        predictions = self.predict(model, examples, target)
        ratings = np.array([ex.rating for ex in examples], dtype=np.float64)
        value = mse(zip(ratings, predictions))
        return EvalReport(n=len(examples), mse=value, residuals=(ratings - predictions) if keep_residuals else None)
