from pathlib import Path

import numpy as np
import pytest
import torch

from dpp import domain, net, zoo
from dpp.textstats import EmbeddingTable, Utterance

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def grammar_pairs():
    return domain.enumerate_pairs(domain.default_grammar(), 3)


@pytest.fixture(scope="session")
def db():
    return domain.default_database()


@pytest.fixture(scope="session")
def small_corpora(grammar_pairs):
    return domain.build_corpora(grammar_pairs, domain.default_rewrite_rules(), seed=0,
                                paraphrases_per_canonical=2)


@pytest.fixture(scope="session")
def small_vocabs(small_corpora, grammar_pairs):
    return zoo.Vocabs.build(small_corpora.X, small_corpora.Z, [domain.lf_tokens(lf) for _, lf in grammar_pairs])


@pytest.fixture
def tiny_hp():
    return net.Hyperparams(emb_dim=8, hidden=6, dropout=0.0, batch=4, beam=3, K=3, max_decode_len=12)


@pytest.fixture
def tiny_models(tiny_hp, small_vocabs):
    emb = EmbeddingTable.random(small_vocabs.src.content_tokens, tiny_hp.emb_dim, seed=1)
    return zoo.init_models(tiny_hp, small_vocabs, emb, seed=3)


def utt(text, kind="natural"):
    return Utterance.from_text(text, kind)


DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"


@pytest.fixture(scope="session")
def desk_world():
    """Corpora, vocabularies and database at the desk configuration (no training)."""
    from dpp import config, harness
    cfg = config.load_config(DESK_CONFIG)
    return cfg, harness.build_world(cfg)


@pytest.fixture(scope="session")
def trained_nsp(desk_world):
    """Naive parser fitted on the training (canonical, LF) pairs, then frozen (about a minute)."""
    from dpp import harness, train
    cfg, world = desk_world
    _, nsp, _ = harness.fresh_models(world, cfg)
    rng = np.random.default_rng(train.sub_seeds(cfg.seed)["batching"])
    torch.manual_seed(0)
    train.train_nsp(nsp, world.corpora.train_pairs, cfg.train, rng)
    return nsp.freeze()


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
