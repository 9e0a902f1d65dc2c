"""Rewards for dual reinforcement learning.

Canonical direction (x -> z~):  R = LM_z fluency + executability + P_dis(z~) + log P(x | z~)
Natural direction   (z -> x~):  R = LM_x fluency + (1 - P_dis(x~)) + log P(z | x~)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from dpp import net, zoo
from dpp.textstats import Utterance

CANONICAL = "canonical"
NATURAL = "natural"
# total reward assigned to an empty sample; it has no length to normalize by
EMPTY_REWARD = -10.0


@dataclass
class RewardBundle:
    fluency: np.ndarray
    style: np.ndarray
    relevance: np.ndarray
    total: np.ndarray
    adjusted: np.ndarray
    baseline: float

    def stats(self):
        return {name: {"mean": float(np.mean(v)), "std": float(np.std(v))}
                for name, v in (("fluency", self.fluency), ("style", self.style),
                                ("relevance", self.relevance), ("total", self.total))}


def _toks(u):
    return u.tokens if isinstance(u, Utterance) else tuple(u)


def fluency_natural_batch(samples, lm_x, vocab_x) -> np.ndarray:
    seqs = [vocab_x.encode(_toks(s)) for s in samples]
    with torch.no_grad():
        lp = net.lm_logprobs(lm_x, seqs).double().numpy()
    return lp / np.array([len(s) for s in seqs], dtype=np.float64)


def fluency_natural(x_tilde, lm_x, vocab_x) -> float:
    """(1/|x~|) log LM_x(x~)."""
    return float(fluency_natural_batch([x_tilde], lm_x, vocab_x)[0])


def executability_batch(samples, nsp, db) -> np.ndarray:
    results = zoo.parse_canonical_batch(nsp, [_toks(s) for s in samples], db)
    return np.array([1.0 if zoo.executable(r) else 0.0 for r in results])


def fluency_canonical_batch(samples, lm_z, vocab_z, nsp, db) -> np.ndarray:
    return fluency_natural_batch(samples, lm_z, vocab_z) + executability_batch(samples, nsp, db)


def fluency_canonical(z_tilde, lm_z, vocab_z, nsp, db) -> float:
    """(1/|z~|) log LM_z(z~) + 1{P_nsp's greedy parse of z~ executes without error}."""
    return float(fluency_canonical_batch([z_tilde], lm_z, vocab_z, nsp, db)[0])


def style_batch(samples, disc, vocab_src, target_kind) -> np.ndarray:
    seqs = [vocab_src.encode(_toks(s)) for s in samples]
    with torch.no_grad():
        p = torch.sigmoid(net.cnn_logits(disc, seqs)).double().numpy()
    if target_kind == CANONICAL:
        return p
    if target_kind == NATURAL:
        return 1.0 - p
    raise ValueError(f"unknown target kind {target_kind!r}")


def style(u, disc, vocab_src, target_kind) -> float:
    return float(style_batch([u], disc, vocab_src, target_kind)[0])


def relevance_batch(originals, samples, dual_model: zoo.ParaphraseModel, dual_direction) -> np.ndarray:
    """log P(original | sample) under the dual route of the current paraphrase model."""
    route = dual_model.route(dual_direction)
    tgt_vocab = dual_model.target_vocab(dual_direction)
    srcs = [dual_model.vocabs.src.encode(_toks(s)) for s in samples]
    tgts = [tgt_vocab.encode(_toks(o)) for o in originals]
    was_training = dual_model.training
    dual_model.eval()
    try:
        with torch.no_grad():
            nll = net.sequence_nll(route, srcs, tgts).double().numpy()
    finally:
        dual_model.train(was_training)
    return -nll


def relevance(original, sampled, dual_model, dual_direction) -> float:
    return float(relevance_batch([original], [sampled], dual_model, dual_direction)[0])


def total_and_baseline(fluency, style_, relevance_) -> RewardBundle:
    """Per-sample totals and mean-baseline adjustment over the K samples of one input."""
    fl, st, rel = (np.asarray(a, dtype=np.float64) for a in (fluency, style_, relevance_))
    if fl.size < 1:
        raise ValueError("need K >= 1 samples")
    total = fl + st + rel
    b = float(total.mean())
    return RewardBundle(fl, st, rel, total, total - b, b)


@dataclass
class RewardContext:
    """Everything reward computation reads; none of it is modified."""
    model: zoo.ParaphraseModel
    aux: zoo.AuxiliaryBundle
    nsp: zoo.NaiveParser
    db: object


def group_rewards(ctx: RewardContext, originals, samples, target_kind, K: int) -> list:
    """Rewards for flattened ``(input, sample)`` lists holding K consecutive samples per input.

    ``samples`` are token tuples in the target vocabulary. Empty samples get
    EMPTY_REWARD as fluency and zero style/relevance.
    """
    if K < 1:
        raise ValueError("need K >= 1 samples")
    v = ctx.model.vocabs
    n = len(samples)
    fl, st, rel = np.zeros(n), np.zeros(n), np.zeros(n)
    idx = [i for i, s in enumerate(samples) if len(s) > 0]
    empty = np.ones(n, dtype=bool)
    empty[idx] = False
    fl[empty] = EMPTY_REWARD
    if idx:
        live = [samples[i] for i in idx]
        orig = [originals[i] for i in idx]
        if target_kind == CANONICAL:
            f = fluency_canonical_batch(live, ctx.aux.lm_z, v.z, ctx.nsp, ctx.db)
            dual = zoo.TO_NATURAL
        else:
            f = fluency_natural_batch(live, ctx.aux.lm_x, v.x)
            dual = zoo.TO_CANONICAL
        fl[idx] = f
        st[idx] = style_batch(live, ctx.aux.dis, v.src, target_kind)
        rel[idx] = relevance_batch(orig, live, ctx.model, dual)
    return [total_and_baseline(fl[i:i + K], st[i:i + K], rel[i:i + K]) for i in range(0, n, K)]
