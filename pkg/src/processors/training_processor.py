"""Training: TransNet sub-step batches, baseline batches and the evaluation-driven loop."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..checkpoint import Checkpoint, save_checkpoint
from ..config import TrainConfig
from ..fm import fm_forward
from ..models import DeepCoNNModel, MFModel, RatingModel, TransNetExtModel, TransNetModel
from ..nn.layers import dropout, l1_loss, l2_loss, mse_loss
from ..nn.optim import AdamState, adam_step
from ..nn.tensor import compute_gradients
from .corpus_processor import (DatasetSplit, ExampleBatch, ProfileBuilder, TrainExample, Vocabulary,
                               id_only_examples)
from .evaluation_processor import EvaluationProcessor

logger = logging.getLogger(__name__)

LOG_HEADER = 'batch\tloss_T\tloss_trans\tloss_S\tval_mse\ttest_mse'

# Seed streams derived from TrainConfig.seed
INIT_STREAM, PROFILE_STREAM, HELDOUT_STREAM, ORDER_STREAM, DROPOUT_STREAM = range(5)

SubstepHook = Callable[[str], None]


def transnet_train_batch(batch: ExampleBatch, model: TransNetModel, optimizers: Dict[str, AdamState], lr: float,
                         rng: np.random.Generator, loss_trans_squared: bool = True, reuse_dropout_mask: bool = True,
                         transform_dropout: bool = True,
                         on_substep: Optional[SubstepHook] = None) -> Tuple[float, float, float]:
    """One batch of the three sub-steps; returns (loss_T, loss_trans, loss_S).

    Step 1 updates only the target network, step 2 only Gamma_A, Gamma_B and the
    Transform, step 3 only the source FM (plus the id embeddings and FM_SE for the
    extended model). x_T is the pre-update target encoding and is held constant in
    step 2; step 3 reuses the step-2 z_bar_L.
    """
    if len(batch) == 0:
        raise ValueError("cannot train on an empty batch")
    groups = model.parameter_groups()

    # Step 1: target network on the actual review
    x_t, r_t = model.target_forward(batch.review, training=True, rng=rng)
    loss_t = l1_loss(r_t, batch.ratings)
    compute_gradients(loss_t)
    adam_step(groups['target'], optimizers['target'], lr)
    x_t_const = x_t.detach()
    if on_substep:
        on_substep('target')

    # Step 2: learn to transform
    z_l, z_l_bar, _, mask = model.source_forward(batch, training=True, rng=rng)
    loss_trans = l2_loss(z_l_bar if transform_dropout else z_l, x_t_const, squared=loss_trans_squared)
    compute_gradients(loss_trans)
    adam_step(groups['trans'], optimizers['trans'], lr)
    if on_substep:
        on_substep('trans')

    # Step 3: predictor on the transformed representation
    if reuse_dropout_mask:
        z_in = z_l_bar.detach()
    else:
        z_in, _ = dropout(z_l.detach(), model.keep_prob, True, rng)
    loss_s = l1_loss(fm_forward(z_in, model.params.source.fm_s), batch.ratings)
    reported_s = loss_s
    if isinstance(model, TransNetExtModel):
        loss_se = l1_loss(model.ext_forward(batch, z_in, training=True, rng=rng), batch.ratings)
        loss_s = loss_s + loss_se
        reported_s = loss_se
    compute_gradients(loss_s)
    adam_step(groups['source'], optimizers['source'], lr)
    if on_substep:
        on_substep('source')

    return loss_t.item(), loss_trans.item(), reported_s.item()


def transnet_joint_train_batch(batch: ExampleBatch, model: TransNetModel, optimizers: Dict[str, AdamState],
                               lr: float, rng: np.random.Generator,
                               loss_trans_squared: bool = True) -> Tuple[float, float, float]:
    """Diagnostic: minimise loss_T + loss_trans + loss_S in a single backward pass."""
    x_t, r_t = model.target_forward(batch.review, training=True, rng=rng)
    loss_t = l1_loss(r_t, batch.ratings)
    _, z_l_bar, r_s, _ = model.source_forward(batch, training=True, rng=rng)
    loss_trans = l2_loss(z_l_bar, x_t, squared=loss_trans_squared)
    if isinstance(model, TransNetExtModel):
        loss_s = l1_loss(model.ext_forward(batch, z_l_bar, training=True, rng=rng), batch.ratings)
    else:
        loss_s = l1_loss(r_s, batch.ratings)
    total = loss_t + loss_trans + loss_s
    if isinstance(model, TransNetExtModel):
        total = total + l1_loss(r_s, batch.ratings)
    compute_gradients(total)
    for name, params in model.parameter_groups().items():
        adam_step(params, optimizers[name], lr)
    return loss_t.item(), loss_trans.item(), loss_s.item()


def deepconn_train_batch(batch: ExampleBatch, model: DeepCoNNModel, optimizer: AdamState, lr: float,
                         rng: np.random.Generator) -> float:
    """Single L1 step on every DeepCoNN parameter.

    Whether the profiles contain the joint review is fixed when the examples are built
    (see `TrainingProcessor.build_train_examples`).
    """
    loss = l1_loss(model.forward(batch, training=True, rng=rng), batch.ratings)
    compute_gradients(loss)
    adam_step(model.parameters(), optimizer, lr)
    return loss.item()


def mf_train_batch(batch: ExampleBatch, model: MFModel, optimizer: AdamState, lr: float) -> float:
    loss = mse_loss(model.forward(batch), batch.ratings)
    compute_gradients(loss)
    adam_step(model.parameters(), optimizer, lr)
    return loss.item()


@dataclass
class EvalPoint:
    batch: int
    loss_t: float
    loss_trans: float
    loss_s: float
    val_mse: float
    test_mse: float

    def to_line(self) -> str:
        return '\t'.join([str(self.batch)] + [f"{v:.6f}" for v in
                                              (self.loss_t, self.loss_trans, self.loss_s, self.val_mse,
                                               self.test_mse)])


@dataclass
class EvalHistory:
    """Evaluation points and the one with the lowest validation MSE."""

    points: List[EvalPoint] = field(default_factory=list)
    best: Optional[EvalPoint] = None

    def record(self, point: EvalPoint) -> bool:
        """Append a point; True when it improves on the best validation MSE."""
        self.points.append(point)
        if self.best is None or point.val_mse < self.best.val_mse:
            self.best = point
            return True
        return False


class _LossMeter:
    def __init__(self):
        self.sums = np.zeros(3)
        self.count = 0

    def add(self, loss_t: float, loss_trans: float, loss_s: float):
        self.sums += (loss_t, loss_trans, loss_s)
        self.count += 1

    def pop(self) -> Tuple[float, float, float]:
        means = self.sums / max(self.count, 1)
        self.sums[:] = 0.0
        self.count = 0
        return tuple(float(v) for v in means)


class TrainingProcessor:
    """Runs the training loop for any model kind."""

    def __init__(self, config: TrainConfig, model: RatingModel, vocab: Vocabulary, embeddings: np.ndarray,
                 metadata: Dict = None, log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None):
        self.config = config
        self.model = model
        self.vocab = vocab
        self.embeddings = embeddings
        self.metadata = dict(metadata or {})
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.optimizers = {name: AdamState() for name in model.parameter_groups()}
        self.dropout_rng = np.random.default_rng([config.seed, DROPOUT_STREAM])
        self.evaluator = EvaluationProcessor(config.thread_count, config.batch_size)
        self.history = EvalHistory()
        self.loss_trace: List[Tuple[float, float, float]] = []

    def _rng(self, stream: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stream, *extra])

    def build_train_examples(self, split: DatasetSplit, builder: Optional[ProfileBuilder],
                             epoch: int = 0) -> List[TrainExample]:
        if not self.model.uses_text:
            return id_only_examples(split.train, self.config.max_len)
        extra = (epoch,) if self.config.profile_shuffle == 'epoch' else ()
        return builder.build_examples(split.train, self._rng(PROFILE_STREAM, *extra),
                                      exclude_joint=self.model.exclude_joint_in_training,
                                      include_review=isinstance(self.model, TransNetModel))

    def build_heldout_examples(self, split: DatasetSplit, name: str) -> List[TrainExample]:
        """Validation/test examples whose profiles come from training reviews only.

        With include_test_reviews the evaluated split's own reviews join the pool.
        """
        targets = split.partition(name)
        if not self.model.uses_text:
            return id_only_examples(targets, self.config.max_len)
        pool = list(split.train) + (list(targets) if self.config.include_test_reviews else [])
        builder = ProfileBuilder(pool, self.vocab, self.config.max_len)
        stream = (HELDOUT_STREAM, 0 if name == 'validation' else 1)
        return builder.build_examples(targets, self._rng(*stream), exclude_joint=False, include_review=False)

    def train_batch(self, batch: ExampleBatch) -> Tuple[float, float, float]:
        """One optimisation step for the configured model; missing loss columns are nan."""
        cfg = self.config
        if isinstance(self.model, TransNetModel):
            if cfg.joint_training:
                return transnet_joint_train_batch(batch, self.model, self.optimizers, cfg.lr, self.dropout_rng,
                                                  cfg.loss_trans == 'squared')
            return transnet_train_batch(batch, self.model, self.optimizers, cfg.lr, self.dropout_rng,
                                        loss_trans_squared=cfg.loss_trans == 'squared',
                                        reuse_dropout_mask=cfg.reuse_dropout_mask,
                                        transform_dropout=cfg.transform_dropout)
        if isinstance(self.model, DeepCoNNModel):
            loss = deepconn_train_batch(batch, self.model, self.optimizers['deepconn'], cfg.lr, self.dropout_rng)
        else:
            loss = mf_train_batch(batch, self.model, self.optimizers['mf'], cfg.lr)
        return math.nan, math.nan, loss

    def _checkpoint(self, point: EvalPoint) -> Checkpoint:
        return Checkpoint.capture(self.model, self.optimizers, self.config.to_dict(), self.config.digest(),
                                  self.vocab.tokens, self.embeddings, self.metadata,
                                  best_val_mse=point.val_mse, test_mse_at_best=point.test_mse, batch=point.batch)

    def _write_log(self, line: str, mode: str = 'a'):
        if self.log_path:
            with open(self.log_path, mode, encoding='utf-8') as f:
                f.write(line + '\n')

    def train_loop(self, split: DatasetSplit) -> Checkpoint:
        """Train for max_epochs, evaluating every eval_every batches and keeping the best-validation state."""
        for name in ('train', 'validation', 'test'):
            if not split.partition(name):
                raise ValueError(f"the {name} partition is empty")
        cfg = self.config

        builder = ProfileBuilder(split.train, self.vocab, cfg.max_len) if self.model.uses_text else None
        train_examples = self.build_train_examples(split, builder)
        validation = self.build_heldout_examples(split, 'validation')
        test = self.build_heldout_examples(split, 'test')
        logger.info(f"Training {self.model.kind} on {len(train_examples)} examples "
                    f"({len(validation)} validation, {len(test)} test), batch size {cfg.batch_size}")

        self._write_log(LOG_HEADER, mode='w')
        meter = _LossMeter()
        best_checkpoint: Optional[Checkpoint] = None
        batch_counter = 0

        def evaluate_now():
            nonlocal best_checkpoint
            losses = meter.pop()
            val = self.evaluator.evaluate(self.model, validation).mse
            tst = self.evaluator.evaluate(self.model, test).mse
            point = EvalPoint(batch_counter, *losses, val_mse=val, test_mse=tst)
            self._write_log(point.to_line())
            logger.info(f"batch {batch_counter}: loss_T={losses[0]:.4f} loss_trans={losses[1]:.4f} "
                        f"loss_S={losses[2]:.4f} val_mse={val:.4f} test_mse={tst:.4f}")
            if self.history.record(point):
                best_checkpoint = self._checkpoint(point)
                if self.checkpoint_path:
                    save_checkpoint(self.checkpoint_path, best_checkpoint)

        for epoch in range(cfg.max_epochs):
            if epoch > 0 and cfg.profile_shuffle == 'epoch':
                train_examples = self.build_train_examples(split, builder, epoch)
            order = self._rng(ORDER_STREAM, epoch).permutation(len(train_examples))
            for start in range(0, len(order), cfg.batch_size):
                batch = ExampleBatch.from_examples([train_examples[i] for i in order[start:start + cfg.batch_size]])
                losses = self.train_batch(batch)
                self.loss_trace.append(losses)
                meter.add(*losses)
                batch_counter += 1
                logger.debug(f"epoch {epoch} batch {batch_counter}: losses {losses}")
                if batch_counter % cfg.eval_every == 0:
                    evaluate_now()
            logger.info(f"Finished epoch {epoch + 1}/{cfg.max_epochs}")

        if not self.history.points:
            evaluate_now()

        best = self.history.best
        logger.info(f"Best validation MSE {best.val_mse:.6f} at batch {best.batch}; test MSE there {best.test_mse:.6f}")
        return best_checkpoint
