import numpy as np
import pytest

from src.errors import ShapeError
from src.processors.corpus_processor import PAD_ID, UNK_ID, TokenSequence, Vocabulary
from src.processors.embedding_processor import load_embeddings, lookup, random_embeddings


@pytest.fixture
def vocab():
    return Vocabulary(['good', 'bad', 'food'])


def write_vectors(path, rows):
    path.write_text(''.join(f"{token} {' '.join(str(v) for v in values)}\n" for token, values in rows))
    return path


def test_load_embeddings_covers_vocab(tmp_path, vocab):
    rng = np.random.default_rng(0)
    rows = [(token, rng.normal(size=64).round(6)) for token in vocab.tokens]
    table = load_embeddings(write_vectors(tmp_path / 'v.txt', rows), vocab)
    assert table.matrix.shape == (5, 64)
    for token, values in rows:
        np.testing.assert_allclose(table.matrix[vocab.id_of(token)], values)
    assert not table.matrix[PAD_ID].any()


def test_load_embeddings_empty_file_falls_back_to_random(tmp_path, vocab):
    path = tmp_path / 'v.txt'
    path.write_text('')
    table = load_embeddings(path, vocab, d=4, seed=3)
    np.testing.assert_array_equal(table.matrix, random_embeddings(vocab, 4, 3).matrix)
    assert not table.matrix[PAD_ID].any()


def test_load_embeddings_last_occurrence_wins(tmp_path, vocab):
    path = write_vectors(tmp_path / 'v.txt', [('good', [1.0, 2.0]), ('bad', [0.0, 0.0]), ('good', [3.0, 4.0])])
    table = load_embeddings(path, vocab)
    np.testing.assert_array_equal(table.matrix[vocab.id_of('good')], [3.0, 4.0])


def test_load_embeddings_inconsistent_dimension(tmp_path, vocab):
    path = write_vectors(tmp_path / 'v.txt', [('good', [1.0, 2.0]), ('bad', [1.0, 2.0, 3.0])])
    with pytest.raises(ShapeError):
        load_embeddings(path, vocab)


def test_random_embeddings_deterministic_and_shaped(vocab):
    small = Vocabulary(['a', 'b', 'c'])
    table = random_embeddings(small, 4, seed=1)
    assert table.matrix.shape == (5, 4)
    np.testing.assert_array_equal(table.matrix, random_embeddings(small, 4, seed=1).matrix)
    assert not table.matrix[PAD_ID].any()
    assert np.abs(table.matrix).max() <= 0.5 / 4


def test_tables_are_frozen(vocab):
    table = random_embeddings(vocab, 4, seed=1)
    with pytest.raises(ValueError):
        table.matrix[2, 0] = 1.0


def test_lookup_all_pad_is_zero(vocab):
    table = random_embeddings(vocab, 4, seed=1)
    out = lookup(table, TokenSequence(np.zeros(6, dtype=np.int64)))
    assert out.shape == (6, 4)
    assert not out.data.any()


def test_lookup_repeated_unk(vocab):
    table = random_embeddings(vocab, 4, seed=1)
    out = lookup(table, TokenSequence(np.array([UNK_ID, UNK_ID])))
    np.testing.assert_array_equal(out.data[0], out.data[1])


def test_lookup_matches_indexing(vocab):
    table = random_embeddings(vocab, 4, seed=1)
    ids = np.random.default_rng(2).integers(0, vocab.size, size=(3, 7))
    np.testing.assert_array_equal(lookup(table, ids).data, table.matrix[ids])


def test_lookup_rejects_out_of_range(vocab):
    table = random_embeddings(vocab, 4, seed=1)
    with pytest.raises(IndexError):
        lookup(table, np.array([0, vocab.size]))
