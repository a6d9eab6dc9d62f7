"""Main pipeline orchestrator for TransNets experiments."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import Config, TrainConfig
from .errors import CheckpointError, ConfigError, GradientError
from .models import ModelFactory, RatingModel, TransNetModel
from .processors.corpus_processor import (PAD_ID, CorpusProcessor, DatasetSplit, ExampleBatch, ProfileBuilder,
                                          TokenSequence, TrainExample, Vocabulary)
from .processors.embedding_processor import EmbeddingTable, load_embeddings, random_embeddings
from .processors.evaluation_processor import (EvalReport, EvaluationProcessor, RetrievalResult, most_similar_review,
                                              write_retrieval)
from .processors.gradcheck_processor import GradcheckProcessor, GradcheckReport
from .processors.synth_processor import SynthCorpus, SynthProcessor
from .processors.training_processor import HELDOUT_STREAM, INIT_STREAM, TrainingProcessor

logger = logging.getLogger(__name__)

# Stream of held-out profile draws reserved for ad-hoc queries (predict / similar)
QUERY_STREAM = 2


class TransNetsPipeline:
    """Binds corpus preparation, training, evaluation and retrieval into reproducible runs."""

    def __init__(self, config: Config):
        self.config = config
        self._setup_processors()
        self._ensure_directories()

    def _setup_processors(self):
        """Initialize all processors with configuration."""
        train = self.config.train
        self.corpus_processor = CorpusProcessor(vocab_size=train.vocab_size, seed=train.seed)
        self.evaluation_processor = EvaluationProcessor(thread_count=train.thread_count, batch_size=train.batch_size)

    def _ensure_directories(self):
        """Create all necessary output directories."""
        self.config.ensure_output_dirs()

    # Data

    def prepare(self, raw_path: str, format: str = 'jsonl') -> dict:
        """Canonical records, split manifests, vocabulary and statistics under the data directory."""
        return self.corpus_processor.prepare(raw_path, format, self.config.data_dir)

    def load_data(self) -> Tuple[DatasetSplit, Vocabulary]:
        return CorpusProcessor.load_prepared(self.config.data_dir)

    def build_embeddings(self, vocab: Vocabulary) -> EmbeddingTable:
        train = self.config.train
        if self.config.embeddings:
            table = load_embeddings(self.config.embeddings, vocab, seed=train.seed, dtype=train.np_dtype)
            if table.dim != train.embedding_dim:
                raise ConfigError(f"embedding file has d={table.dim} but embedding_dim is {train.embedding_dim}")
            return table
        return random_embeddings(vocab, train.embedding_dim, train.seed, dtype=train.np_dtype)

    # Models

    @staticmethod
    def create_model(train: TrainConfig, table: Optional[EmbeddingTable], user_ids: Sequence[str],
                     item_ids: Sequence[str], mean_rating: float) -> RatingModel:
        return ModelFactory.create_model(
            train.model, table, np.random.default_rng([train.seed, INIT_STREAM]),
            m=train.filters, t=train.window, n=train.latent_dim, k=train.fm_rank, layers=train.layers,
            keep_prob=train.keep_prob, conv_activation=train.conv_activation,
            transform_activation=train.transform_activation, user_ids=user_ids, item_ids=item_ids,
            mean_rating=mean_rating, unseen_seed=train.seed, dtype=train.np_dtype,
        )

    def load_model(self, checkpoint_path: Optional[Path] = None) -> Tuple[RatingModel, Checkpoint, Vocabulary]:
        """Rebuild the model stored in a checkpoint, refusing one trained under another architecture."""
        path = Path(checkpoint_path or self.config.checkpoint_path)
        checkpoint = load_checkpoint(path)
        expected = self.config.train.digest()
        if checkpoint.digest != expected:
            raise CheckpointError(f"{path} was trained with config digest {checkpoint.digest[:12]}, "
                                  f"current configuration has {expected[:12]}")
        train = self.config.train
        vocab = Vocabulary(checkpoint.vocab_tokens)
        table = EmbeddingTable(checkpoint.embeddings.astype(train.np_dtype))
        model = self.create_model(train, table, checkpoint.metadata.get('user_ids', []),
                                  checkpoint.metadata.get('item_ids', []), mean_rating=0.0)
        model.load_state_dict(checkpoint.params)
        logger.info(f"Loaded {model.kind} model from {path} (best validation MSE {checkpoint.best_val_mse:.6f})")
        return model, checkpoint, vocab

    # Training

    def train(self) -> Checkpoint:
        """Run the training loop, writing config.json, the training log and the best checkpoint."""
        train = self.config.train
        split, vocab = self.load_data()
        table = self.build_embeddings(vocab)
        user_ids = sorted({r.user_id for r in split.train})
        item_ids = sorted({r.item_id for r in split.train})
        mean_rating = float(np.mean([r.rating for r in split.train])) if split.train else 0.0
        model = self.create_model(train, table, user_ids, item_ids, mean_rating)

        self.config.write()
        logger.info(f"Training {train.model} (L={train.layers}) into {self.config.output_dir}")
        trainer = TrainingProcessor(train, model, vocab, table.matrix, metadata=model.metadata(),
                                    log_path=self.config.log_path, checkpoint_path=self.config.checkpoint_path)
        checkpoint = trainer.train_loop(split)
        logger.info(f"Training log: {self.config.log_path}")
        logger.info(f"Best checkpoint: {self.config.checkpoint_path}")
        return checkpoint

    def train_layers_sweep(self, layers: Sequence[int]) -> List[Tuple[int, float, float]]:
        """Train one model per Transform depth into L<k>/ and tabulate the results."""
        if self.config.train.model not in ('transnet', 'transnet-ext'):
            raise ConfigError("a layers sweep needs a transnet model")
        rows = []
        for depth in layers:
            sub_config = self.config.with_overrides(layers=depth, output_dir=self.config.output_dir / f"L{depth}")
            checkpoint = TransNetsPipeline(sub_config).train()
            rows.append((depth, checkpoint.best_val_mse, checkpoint.test_mse_at_best))

        summary = self.config.output_dir / 'layers_sweep.tsv'
        with open(summary, 'w', encoding='utf-8') as f:
            f.write('L\tbest_val_mse\ttest_mse_at_best\n')
            for depth, val, test in rows:
                f.write(f"{depth}\t{val:.6f}\t{test:.6f}\n")
        logger.info(f"Layers sweep summary: {summary}")
        return rows

    # Evaluation and queries

    def evaluate(self, split_name: str = 'test', checkpoint_path: Optional[Path] = None) -> EvalReport:
        """MSE of a trained model on one split; transnet models also report the target network on train."""
        model, checkpoint, vocab = self.load_model(checkpoint_path)
        split, _ = self.load_data()
        trainer = TrainingProcessor(self.config.train, model, vocab, checkpoint.embeddings)
        if split_name == 'train':
            builder = ProfileBuilder(split.train, vocab, self.config.train.max_len) if model.uses_text else None
            examples = trainer.build_train_examples(split, builder)
        else:
            examples = trainer.build_heldout_examples(split, split_name)
        if not examples:
            raise ValueError(f"the {split_name} partition is empty")

        report = self.evaluation_processor.evaluate(model, examples)
        text = report.to_text(split_name)
        logger.info(f"{model.kind} MSE on {split_name}: {report.mse:.6f} (N={report.n})")
        if split_name == 'train' and isinstance(model, TransNetModel):
            target = self.evaluation_processor.evaluate(model, examples, target=True)
            text += f"target_MSE\t{target.mse:.6f}\n"
            logger.info(f"Target network MSE on train: {target.mse:.6f}")

        path = self.config.reports_dir / f"eval_{split_name}.txt"
        path.write_text(text, encoding='utf-8')
        logger.info(f"Report written to {path}")
        return report

    def _query_builder(self, split: DatasetSplit, vocab: Vocabulary) -> ProfileBuilder:
        return ProfileBuilder(split.train, vocab, self.config.train.max_len)

    def predict(self, user_id: str, item_id: str, checkpoint_path: Optional[Path] = None) -> float:
        """Predicted rating for one (user, item) pair in the test setup."""
        model, _, vocab = self.load_model(checkpoint_path)
        train = self.config.train
        if model.uses_text:
            split, _ = self.load_data()
            builder = self._query_builder(split, vocab)
            rng = np.random.default_rng([train.seed, HELDOUT_STREAM, QUERY_STREAM])
            exclude = (user_id, item_id)
            example = TrainExample(user_id, item_id, builder.user_profile(user_id, exclude, rng),
                                   builder.item_profile(item_id, exclude, rng), None, 0.0)
        else:
            empty = TokenSequence(np.full(train.max_len, PAD_ID, dtype=np.int64))
            example = TrainExample(user_id, item_id, empty, empty, None, 0.0)
        rating = float(model.predict(ExampleBatch.from_examples([example]))[0])
        logger.info(f"Predicted rating for ({user_id}, {item_id}): {rating:.4f}")
        return rating

    def similar(self, user_id: str, item_id: str, k: Optional[int] = None,
                checkpoint_path: Optional[Path] = None) -> RetrievalResult:
        """Training reviews of the item by other users, ranked by closeness to the source network's z_L."""
        model, _, vocab = self.load_model(checkpoint_path)
        if not isinstance(model, TransNetModel):
            raise ConfigError(f"retrieval needs a transnet model, checkpoint holds {model.kind}")
        split, _ = self.load_data()
        candidates = [(index, record) for index, record in zip(split.train_indices, split.train)
                      if record.item_id == item_id and record.user_id != user_id]
        rng = np.random.default_rng([self.config.train.seed, HELDOUT_STREAM, QUERY_STREAM])
        result = most_similar_review(user_id, item_id, model, self._query_builder(split, vocab), candidates, rng)
        path = write_retrieval(result, self.config.reports_dir / f"similar_{user_id}_{item_id}.tsv", k)
        logger.info(f"Retrieval written to {path}")
        return result

    def gradcheck(self, instances: int = 100) -> GradcheckReport:
        report = GradcheckProcessor(instances=instances, seed=self.config.train.seed).run()
        path = report.write(self.config.reports_dir / 'gradcheck.tsv')
        logger.info(f"Gradient check report: {path}")
        if not report.passed:
            raise GradientError(f"max relative error {report.max_rel_error:.3e} exceeds {report.tolerance:.0e}")
        return report

    def synth(self, output_path: Path, users: int = 500, items: int = 200, reviews: int = 5000) -> SynthCorpus:
        corpus = SynthProcessor(users, items, reviews, seed=self.config.train.seed).generate()
        corpus.write(output_path)
        return corpus
