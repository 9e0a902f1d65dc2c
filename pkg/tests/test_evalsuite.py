import csv
import io
import re

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dpp import domain, evalsuite, net, train, zoo
from dpp.errors import ConfigurationError
from dpp.textstats import EmbeddingTable, Utterance, wmd

from conftest import utt


class LookupParser:
    """Maps canonical token tuples to fixed LF token tuples; anything else fails to parse."""

    def __init__(self, table):
        self.table = {tuple(k): tuple(v) for k, v in table.items()}

    def parse_tokens(self, canonicals):
        return [self.table.get(tuple(c)) for c in canonicals]


@pytest.fixture(scope="module")
def lookup(grammar_pairs):
    return LookupParser({z.tokens: domain.lf_tokens(lf) for z, lf in grammar_pairs})


def test_oracle_canonicals_score_one(small_corpora, lookup, db):
    ev = small_corpora.eval
    rep = evalsuite.evaluate_canonicals([g.canonical.tokens for g in ev], lookup, db, ev)
    assert rep.accuracy == 1.0 and rep.matches == len(ev)


def test_gibberish_scores_zero(small_corpora, lookup, db):
    ev = small_corpora.eval
    rep = evalsuite.evaluate_canonicals([("zzz", "of")] * len(ev), lookup, db, ev)
    assert rep.accuracy == 0.0
    assert all(r.lf.startswith("<parse failure") for r in rep.records)
    with pytest.raises(ValueError):
        evalsuite.evaluate_canonicals([()], lookup, db, ev)


def test_denotation_equivalent_lfs_match(grammar_pairs, db):
    """Two different logical forms with the same denotation count as a match."""
    by_den = {}
    pair = None
    for z, lf in grammar_pairs:
        den = domain.execute(lf, db)
        key = (type(den).__name__, den if not isinstance(den, domain.ExecutionError) else None)
        other = by_den.setdefault(key, (z, lf))
        if domain.serialize(other[1]) != domain.serialize(lf):
            pair = (other, (z, lf))
            break
    assert pair is not None
    (z1, lf1), (z2, lf2) = pair
    gold = domain.GoldPair(Utterance.from_text("some question"), z1, lf1)
    parser = LookupParser({z2.tokens: domain.lf_tokens(lf2)})
    rep = evalsuite.evaluate_canonicals([z2.tokens], parser, db, [gold])
    assert rep.accuracy == 1.0
    assert rep.records[0].lf == domain.serialize(lf2) != domain.serialize(lf1)


def test_evaluate_uses_beam_top1_and_is_pure(tiny_models, small_corpora, lookup, db, tmp_path):
    para, _, _ = tiny_models
    ev = small_corpora.eval[:5]
    before = zoo.parameters_snapshot(para)
    para.train()
    rep = evalsuite.evaluate(para, lookup, db, ev, beam=3, fingerprint="abc")
    assert para.training
    assert zoo.bit_identical(before, zoo.parameters_snapshot(para))
    para.eval()
    for g, r in zip(ev, rep.records):
        top = para.decode([g.natural], zoo.TO_CANONICAL, "beam", width=3)[0][0]
        assert r.canonical == " ".join(para.vocabs.z.decode(top.tokens))
    rep.write(tmp_path, "eval")
    assert (tmp_path / "eval.jsonl").read_text().count("\n") == 5
    summary = (tmp_path / "eval_summary.txt").read_text()
    assert "examples   5" in summary and "config     abc" in summary


# ---------------------------------------------------------------------------
# WMD nearest neighbours
# ---------------------------------------------------------------------------

EMB = EmbeddingTable.random([f"w{i}" for i in range(8)], 5, seed=4)
WORDS = st.lists(st.sampled_from([f"w{i}" for i in range(8)]), min_size=1, max_size=5)


def brute_nearest(q, cands):
    d = [wmd(q, c, EMB) for c in cands]
    return int(np.argmin(d))  # first index among ties


@settings(max_examples=60, deadline=None)
@given(st.lists(WORDS, min_size=1, max_size=3), st.lists(WORDS, min_size=1, max_size=6))
def test_nearest_matches_brute_force(queries, cands):
    qs = [Utterance(tuple(q), "natural") for q in queries]
    cs = [Utterance(tuple(c), "canonical") for c in cands]
    assert evalsuite.nearest_by_wmd(qs, cs, EMB) == [brute_nearest(q, cs) for q in qs]


def test_nearest_ties_go_to_first_index():
    a = Utterance(("w1", "w2"), "canonical")
    cs = [Utterance(("w5",), "canonical"), Utterance(("w2", "w1"), "canonical"), a]
    assert evalsuite.nearest_by_wmd([Utterance(("w1", "w2"), "natural")], cs, EMB) == [1]


def test_wmd_samples_modes_run(tiny_hp, small_corpora, small_vocabs, lookup, db):
    c = small_corpora
    emb = EmbeddingTable.random(small_vocabs.src.content_tokens, tiny_hp.emb_dim, seed=0)
    for mode in ("two_stage", "one_stage"):
        rep = evalsuite.wmd_samples_baseline(c.X[:12], c.Z, c.train_pairs, emb, c.eval[:4], lookup, db, tiny_hp,
                                             small_vocabs, mode, epochs=1, seed=0)
        assert 0.0 <= rep.accuracy <= 1.0 and len(rep.records) == 4
        assert rep.meta["baseline"] == f"wmd_samples_{mode}"
    with pytest.raises(ConfigurationError):
        evalsuite.wmd_samples_baseline(c.X[:2], c.Z, c.train_pairs, emb, c.eval[:1], lookup, db, tiny_hp,
                                       small_vocabs, "three_stage")


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("axis,n", [("noise", 8), ("cycle", 7), ("shared_encoder", 2)])
def test_ablation_rows(axis, n):
    base = train.TrainConfig(seed=7)
    rows = evalsuite.ablation_rows(axis, base)
    assert len(rows) == n
    assert all(cfg.seed == 7 for _, cfg in rows)
    fps = {evalsuite.config_fingerprint(cfg.to_dict()) for _, cfg in rows}
    assert len(fps) == n
    assert base.noise.enabled == train.TrainConfig().noise.enabled  # base untouched


def test_ablation_labels():
    labels = [l for l, _ in evalsuite.ablation_rows("noise", train.TrainConfig())]
    assert labels[0] == "none" and len(labels[-1].split("+")) == 3
    assert [l for l, _ in evalsuite.ablation_rows("cycle", train.TrainConfig())][-1].count("+") == 2
    with pytest.raises(ConfigurationError):
        evalsuite.ablation_rows("learning_rate", train.TrainConfig())


def test_run_ablation_records_failures():
    def runner(label, cfg):
        if label == "BT":
            raise RuntimeError("boom")
        return 0.5, 2.0

    rows = evalsuite.run_ablation("cycle", train.TrainConfig(), runner)
    failed = [r for r in rows if r.accuracy is None]
    assert [r.label for r in failed] == ["BT"] and "boom" in failed[0].error
    assert sum(r.accuracy == 0.5 for r in rows) == 6
    table = list(csv.reader(io.StringIO(evalsuite.ablation_csv(rows))))
    assert table[0] == ["configuration", "accuracy", "selection", "seed", "fingerprint", "error"]
    assert len(table) == 8
    text = evalsuite.ablation_table(rows, "cycle tasks")
    assert "failed" in text and text.startswith("cycle tasks\n")


# ---------------------------------------------------------------------------
# case reports
# ---------------------------------------------------------------------------


def test_typed_rendering():
    assert evalsuite.typed(("player", "on", "lakers", "with", "3", "steals")) == \
        "player on _team_ with _number_ steals"
    assert evalsuite.typed(("guard",)) == "_position_"


def test_dump_cases_format(tiny_models, lookup, db, tmp_path):
    para, _, _ = tiny_models
    inputs = [utt("list all players on team lakers"), utt("how many teams are there"), utt("show me guards")]
    path = tmp_path / "cases.txt"
    evalsuite.dump_cases(para, lookup, inputs, path, db)
    blocks = path.read_text().strip().split("\n\n")
    assert len(blocks) == 3
    para.eval()
    for u, block in zip(inputs, blocks):
        lines = block.split("\n")
        assert [line.split(":")[0] for line in lines] == ["input", "canonical", "lf", "denotation"]
        mid = zoo.paraphrase(para, u, zoo.TO_CANONICAL)
        assert lines[1] == "canonical:  " + evalsuite.typed(para.vocabs.z.decode(mid.tokens))
    assert "_team_" in blocks[0]
    assert not re.search(r"\blakers\b", path.read_text())


def test_dump_cases_io_error(tiny_models, lookup, db, tmp_path):
    para, _, _ = tiny_models
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        evalsuite.dump_cases(para, lookup, [utt("teams")], blocker / "sub" / "cases.txt", db)
