import struct

import numpy as np
import pytest

from conftest import build_model, tiny_config
from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.errors import CheckpointError
from src.models import ModelFactory
from src.processors.corpus_processor import ExampleBatch, ProfileBuilder
from src.processors.training_processor import TrainingProcessor


@pytest.fixture
def trained(small_split, small_vocab):
    config = tiny_config(model='transnet-ext')
    model, table = build_model(config, small_vocab, small_split.train)
    trainer = TrainingProcessor(config, model, small_vocab, table.matrix, metadata=model.metadata())
    builder = ProfileBuilder(small_split.train, small_vocab, config.max_len)
    examples = trainer.build_train_examples(small_split, builder)
    for start in (0, 8, 16):
        trainer.train_batch(ExampleBatch.from_examples(examples[start:start + 8]))
    checkpoint = Checkpoint.capture(model, trainer.optimizers, config.to_dict(), config.digest(), small_vocab.tokens,
                                    table.matrix, metadata=model.metadata(), best_val_mse=1.25,
                                    test_mse_at_best=1.5, batch=3)
    return config, model, table, checkpoint


def random_batch(rng, rows, users, items, size, T):
    return ExampleBatch(
        user_ids=[users[i] for i in rng.integers(0, len(users), size)],
        item_ids=[items[i] for i in rng.integers(0, len(items), size)],
        text_a=rng.integers(0, rows, size=(size, T)),
        text_b=rng.integers(0, rows, size=(size, T)),
        review=None,
        ratings=np.zeros(size),
    )


def test_round_trip_reproduces_predictions(tmp_path, trained):
    config, model, table, checkpoint = trained
    path = save_checkpoint(tmp_path / 'model.tnsn', checkpoint)
    loaded = load_checkpoint(path)

    assert loaded.digest == config.digest()
    assert loaded.batch == 3
    assert loaded.best_val_mse == 1.25
    assert loaded.test_mse_at_best == 1.5
    assert loaded.config == config.to_dict()
    np.testing.assert_array_equal(loaded.embeddings, table.matrix)

    restored = ModelFactory.create_model('transnet-ext', table, np.random.default_rng(1234), m=config.filters,
                                         t=config.window, n=config.latent_dim, k=config.fm_rank,
                                         layers=config.layers, user_ids=loaded.metadata['user_ids'],
                                         item_ids=loaded.metadata['item_ids'], unseen_seed=config.seed)
    restored.load_state_dict(loaded.params)

    users, items = loaded.metadata['user_ids'], loaded.metadata['item_ids']
    batch = random_batch(np.random.default_rng(5), table.rows, users, items, 100, config.max_len)
    np.testing.assert_array_equal(restored.predict(batch), model.predict(batch))


def test_optimizer_state_survives(tmp_path, trained):
    _, _, _, checkpoint = trained
    loaded = load_checkpoint(save_checkpoint(tmp_path / 'model.tnsn', checkpoint))
    assert set(loaded.optimizers) == {'target', 'trans', 'source'}
    for group, state in checkpoint.optimizers.items():
        assert loaded.optimizers[group].timestep == state.timestep == 3
        assert loaded.optimizers[group].m.keys() == state.m.keys()
        for name in state.m:
            np.testing.assert_array_equal(loaded.optimizers[group].m[name], state.m[name])
            np.testing.assert_array_equal(loaded.optimizers[group].v[name], state.v[name])


def test_capture_is_a_snapshot(trained):
    _, model, _, checkpoint = trained
    name, value = next(iter(model.state_dict().items()))
    value += 1.0
    assert not np.array_equal(checkpoint.params[name], value)


def test_save_is_deterministic(tmp_path, trained):
    checkpoint = trained[3]
    first = save_checkpoint(tmp_path / 'a.tnsn', checkpoint).read_bytes()
    assert first[:4] == b'TNSN'
    assert save_checkpoint(tmp_path / 'b.tnsn', checkpoint).read_bytes() == first
    assert not (tmp_path / 'a.tnsn.tmp').exists()


@pytest.mark.parametrize('damage', ['truncate', 'magic', 'version', 'trailing'])
def test_damaged_files_are_rejected(tmp_path, trained, damage):
    blob = save_checkpoint(tmp_path / 'model.tnsn', trained[3]).read_bytes()
    if damage == 'truncate':
        blob = blob[:-13]
    elif damage == 'magic':
        blob = b'NOPE' + blob[4:]
    elif damage == 'version':
        blob = blob[:4] + struct.pack('<I', 99) + blob[8:]
    else:
        blob = blob + b'\x00'
    path = tmp_path / 'damaged.tnsn'
    path.write_bytes(blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'absent.tnsn')
