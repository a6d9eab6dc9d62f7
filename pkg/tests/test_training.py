import math

import numpy as np
import pytest

from conftest import build_model, record, tiny_config
from src.nn.layers import l2_loss
from src.processors.corpus_processor import DatasetSplit, ExampleBatch, ProfileBuilder, Vocabulary, tokenize
from src.processors.training_processor import (LOG_HEADER, EvalHistory, EvalPoint, TrainingProcessor,
                                               deepconn_train_batch, transnet_train_batch)


def snapshot(model):
    return {p.name: p.data.copy() for p in model.parameters()}


def make_trainer(config, vocab, records, **kwargs):
    model, table = build_model(config, vocab, records)
    return TrainingProcessor(config, model, vocab, table.matrix, **kwargs)


def train_examples(trainer, split):
    builder = ProfileBuilder(split.train, trainer.vocab, trainer.config.max_len)
    return trainer.build_train_examples(split, builder)


@pytest.mark.parametrize('kind', ['transnet', 'transnet-ext'])
def test_substeps_touch_only_their_parameter_sets(kind, small_split, small_vocab):
    config = tiny_config(model=kind)
    trainer = make_trainer(config, small_vocab, small_split.train)
    model = trainer.model
    examples = train_examples(trainer, small_split)
    groups = {name: {p.name for p in params} for name, params in model.parameter_groups().items()}
    target_params = model.parameter_groups()['target']

    state = {'before': snapshot(model)}
    changes = []

    def on_substep(stage):
        after = snapshot(model)
        changes.append((stage, {name for name in after if not np.array_equal(after[name], state['before'][name])}))
        if stage == 'trans':
            # x_T is a constant in the transform step
            assert all(not p.grad.any() for p in target_params)
        state['before'] = after

    rng = np.random.default_rng(0)
    for i in range(20):
        batch = ExampleBatch.from_examples(examples[4 * i:4 * i + 4])
        transnet_train_batch(batch, model, trainer.optimizers, config.lr, rng, on_substep=on_substep)

    assert [stage for stage, _ in changes] == ['target', 'trans', 'source'] * 20
    for stage, changed in changes:
        assert changed, stage
        assert changed <= groups[stage]
    if kind == 'transnet-ext':
        source_changes = set().union(*(changed for stage, changed in changes if stage == 'source'))
        assert {'omega_a', 'omega_b', 'fm_se.w'} <= source_changes


def test_zero_gradient_batch_changes_nothing(small_split, small_vocab):
    config = tiny_config(keep_prob=1.0)
    trainer = make_trainer(config, small_vocab, small_split.train)
    model = trainer.model
    source, target = model.params.source, model.params.target
    for p in source.transform_parameters() + target.gamma_t.parameters():
        p.data[...] = 0.0
    for fm in (source.fm_s, target.fm_t):
        fm.w.data[...] = 0.0
        fm.V.data[...] = 0.0
        fm.w0.data[...] = 4.0

    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:6])
    batch.ratings = np.full(len(batch), 4.0)
    before = snapshot(model)
    losses = transnet_train_batch(batch, model, trainer.optimizers, config.lr, np.random.default_rng(0))
    assert losses == (0.0, 0.0, 0.0)
    for name, value in snapshot(model).items():
        np.testing.assert_array_equal(value, before[name], err_msg=name)


def test_transform_step_compares_against_pre_update_target(small_split, small_vocab):
    config = tiny_config(keep_prob=1.0)
    trainer = make_trainer(config, small_vocab, small_split.train)
    model = trainer.model
    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:8])
    z_l = model.source_forward(batch, training=False)[0]
    x_t = model.target_forward(batch.review, training=False)[0]
    expected = l2_loss(z_l, x_t).item()

    _, loss_trans, _ = transnet_train_batch(batch, model, trainer.optimizers, config.lr, np.random.default_rng(0))
    assert loss_trans == pytest.approx(expected)


def test_transform_without_dropout_matches_undropped_z(small_split, small_vocab):
    config = tiny_config(keep_prob=0.5)
    trainer = make_trainer(config, small_vocab, small_split.train)
    model = trainer.model
    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:8])
    expected = l2_loss(model.source_forward(batch, training=False)[0],
                       model.target_forward(batch.review, training=False)[0]).item()
    _, loss_trans, _ = transnet_train_batch(batch, model, trainer.optimizers, config.lr, np.random.default_rng(0),
                                            transform_dropout=False)
    assert loss_trans == pytest.approx(expected)


def test_joint_training_updates_every_group(small_split, small_vocab):
    config = tiny_config(joint_training=True)
    trainer = make_trainer(config, small_vocab, small_split.train)
    before = snapshot(trainer.model)
    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:8])
    trainer.train_batch(batch)
    after = snapshot(trainer.model)
    for name, params in trainer.model.parameter_groups().items():
        assert any(not np.array_equal(after[p.name], before[p.name]) for p in params), name


def test_fresh_dropout_mask_variant_runs(small_split, small_vocab):
    config = tiny_config(reuse_dropout_mask=False)
    trainer = make_trainer(config, small_vocab, small_split.train)
    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:8])
    losses = trainer.train_batch(batch)
    assert all(math.isfinite(v) for v in losses)


@pytest.fixture
def sentinel_split():
    train = [
        record('u1', 'i1', 5, 'alpha jointword'),
        record('u1', 'i2', 3, 'beta'),
        record('u2', 'i1', 4, 'gamma'),
        record('u2', 'i2', 2, 'delta'),
    ]
    validation = [record('u1', 'i3', 1, 'valsentinel')]
    test = [record('u2', 'i3', 2, 'testsentinel')]
    return DatasetSplit(train, validation, test, seed=0)


@pytest.fixture
def sentinel_vocab(sentinel_split):
    tokens = sorted({t for r in sentinel_split.train + sentinel_split.validation + sentinel_split.test
                     for t in tokenize(r.text)})
    return Vocabulary(tokens)


def profile_ids(examples):
    return set(np.concatenate([np.concatenate([ex.text_a.tokens, ex.text_b.tokens]) for ex in examples]).tolist())


@pytest.mark.parametrize('kind, joint_visible', [('deepconn', True), ('deepconn-revab', False)])
def test_deepconn_joint_review_flag(kind, joint_visible, sentinel_split, sentinel_vocab):
    config = tiny_config(model=kind)
    trainer = make_trainer(config, sentinel_vocab, sentinel_split.train)
    examples = train_examples(trainer, sentinel_split)
    joint = next(ex for ex in examples if (ex.user_id, ex.item_id) == ('u1', 'i1'))
    assert (sentinel_vocab.id_of('jointword') in joint.text_a.tokens) is joint_visible
    assert (sentinel_vocab.id_of('jointword') in joint.text_b.tokens) is joint_visible


def test_deepconn_batch_reduces_loss(small_split, small_vocab):
    config = tiny_config(model='deepconn', lr=0.01)
    trainer = make_trainer(config, small_vocab, small_split.train)
    batch = ExampleBatch.from_examples(train_examples(trainer, small_split)[:16])
    rng = np.random.default_rng(0)
    losses = [deepconn_train_batch(batch, trainer.model, trainer.optimizers['deepconn'], config.lr, rng)
              for _ in range(40)]
    assert losses[-1] < losses[0]


@pytest.mark.parametrize('kind', ['transnet', 'transnet-ext', 'deepconn-revab'])
def test_held_out_reviews_never_reach_profiles(kind, sentinel_split, sentinel_vocab):
    config = tiny_config(model=kind, max_len=64)
    trainer = make_trainer(config, sentinel_vocab, sentinel_split.train)
    sentinels = {sentinel_vocab.id_of('valsentinel'), sentinel_vocab.id_of('testsentinel')}
    examples = train_examples(trainer, sentinel_split)
    examples += trainer.build_heldout_examples(sentinel_split, 'validation')
    examples += trainer.build_heldout_examples(sentinel_split, 'test')
    assert not sentinels & profile_ids(examples)


def test_test_review_diagnostic_exposes_held_out_reviews(sentinel_split, sentinel_vocab):
    config = tiny_config(model='deepconn', max_len=64, include_test_reviews=True)
    trainer = make_trainer(config, sentinel_vocab, sentinel_split.train)
    validation = trainer.build_heldout_examples(sentinel_split, 'validation')
    test = trainer.build_heldout_examples(sentinel_split, 'test')
    assert sentinel_vocab.id_of('valsentinel') in profile_ids(validation)
    assert sentinel_vocab.id_of('testsentinel') in profile_ids(test)


def test_best_validation_selection():
    history = EvalHistory()
    for batch, (val, test) in enumerate([(1.0, 5.0), (0.8, 6.0), (0.9, 7.0)], start=1):
        history.record(EvalPoint(batch, math.nan, math.nan, 0.0, val, test))
    assert history.best.val_mse == 0.8
    assert history.best.test_mse == 6.0


def _mf_split(n_train=10):
    train = [record(f"u{i % 4}", f"i{i % 3}", 1 + i % 5, 'text') for i in range(n_train)]
    return DatasetSplit(train, [record('u0', 'i1', 3, 'text')], [record('u1', 'i2', 4, 'text')], seed=0)


def test_eval_cadence(tmp_path):
    config = tiny_config(model='mf', batch_size=1, eval_every=3)
    split = _mf_split()
    trainer = make_trainer(config, Vocabulary(['text']), split.train, log_path=tmp_path / 'train.log')
    trainer.train_loop(split)
    assert [p.batch for p in trainer.history.points] == [3, 6, 9]
    lines = (tmp_path / 'train.log').read_text().splitlines()
    assert lines[0] == LOG_HEADER
    assert [line.split('\t')[0] for line in lines[1:]] == ['3', '6', '9']
    assert lines[1].split('\t')[1:3] == ['nan', 'nan']


def test_final_evaluation_when_cadence_never_fires(tmp_path):
    config = tiny_config(model='mf', batch_size=4, eval_every=100)
    split = _mf_split()
    trainer = make_trainer(config, Vocabulary(['text']), split.train)
    checkpoint = trainer.train_loop(split)
    assert [p.batch for p in trainer.history.points] == [3]
    assert checkpoint.batch == 3


def test_empty_partition_is_rejected():
    split = _mf_split()
    split.validation = []
    trainer = make_trainer(tiny_config(model='mf'), Vocabulary(['text']), split.train)
    with pytest.raises(ValueError, match='validation'):
        trainer.train_loop(split)


def test_train_loop_keeps_best_checkpoint_and_is_deterministic(tmp_path, small_split, small_vocab):
    config = tiny_config(model='transnet', eval_every=3)
    runs = []
    for name in ('one', 'two'):
        trainer = make_trainer(config, small_vocab, small_split.train, log_path=tmp_path / f"{name}.log",
                               checkpoint_path=tmp_path / f"{name}.tnsn")
        checkpoint = trainer.train_loop(small_split)
        runs.append((trainer, checkpoint))

    (first, ckpt), (second, _) = runs
    assert first.loss_trace == second.loss_trace
    assert (tmp_path / 'one.log').read_bytes() == (tmp_path / 'two.log').read_bytes()
    assert ckpt.best_val_mse == min(p.val_mse for p in first.history.points)
    assert ckpt.test_mse_at_best == first.history.best.test_mse
    assert (tmp_path / 'one.tnsn').exists()
