import os

import numpy as np
import pytest

from src.config import TrainConfig
from src.models import ModelFactory
from src.processors.corpus_processor import ReviewRecord, Vocabulary, split_dataset, tokenize
from src.processors.embedding_processor import random_embeddings
from src.processors.synth_processor import SynthProcessor


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Keep TRANSNETS_* variables and stray .env files out of every test."""
    for key in list(os.environ):
        if key.startswith('TRANSNETS_'):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


def write_jsonl(path, records):
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(record.to_json() + '\n')
    return path


@pytest.fixture
def small_corpus():
    return SynthProcessor(users=20, items=10, reviews=150, seed=7, filler_words=2).generate()


@pytest.fixture
def small_split(small_corpus):
    return split_dataset(small_corpus.reviews, seed=3)


@pytest.fixture
def small_vocab(small_split):
    counts = sorted({token for r in small_split.train + small_split.validation + small_split.test
                     for token in tokenize(r.text)})
    return Vocabulary(counts)


def tiny_config(**changes) -> TrainConfig:
    values = dict(batch_size=8, eval_every=4, max_len=16, filters=3, window=2, latent_dim=3, embedding_dim=4,
                  fm_rank=2, vocab_size=200, max_epochs=1, thread_count=2, seed=11)
    values.update(changes)
    return TrainConfig(**values)


def build_model(config: TrainConfig, vocab: Vocabulary, records):
    table = random_embeddings(vocab, config.embedding_dim, config.seed)
    users = sorted({r.user_id for r in records})
    items = sorted({r.item_id for r in records})
    mean = float(np.mean([r.rating for r in records]))
    return ModelFactory.create_model(config.model, table, np.random.default_rng([config.seed, 0]),
                                     m=config.filters, t=config.window, n=config.latent_dim, k=config.fm_rank,
                                     layers=config.layers, keep_prob=config.keep_prob, user_ids=users,
                                     item_ids=items, mean_rating=mean, unseen_seed=config.seed), table


def record(user, item, rating, text):
    return ReviewRecord(user, item, float(rating), text)
