"""Noisy channels for the denoising auto-encoder task."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dpp.errors import ConfigurationError
from dpp.textstats import EmbeddingTable, Utterance, Vocab, relaxed_wmd, wmd

CHANNELS = ("drop", "add", "shuffle")


@dataclass
class NoiseSpec:
    p_max: float = 0.2
    candidates: int = 50
    insert_fraction: tuple = (0.10, 0.20)
    ngram: int = 2
    enabled: frozenset = field(default_factory=lambda: frozenset(CHANNELS))

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        self.insert_fraction = tuple(self.insert_fraction)
        self.validate()

    def validate(self):
        if not 0 < self.p_max <= 1:
            raise ConfigurationError("noise.p_max must lie in (0, 1]")
        if self.candidates < 1:
            raise ConfigurationError("noise.candidates must be >= 1")
        lo, hi = self.insert_fraction
        if not 0 <= lo <= hi <= 1:
            raise ConfigurationError("noise.insert_fraction must satisfy 0 <= low <= high <= 1")
        if self.ngram < 1:
            raise ConfigurationError("noise.ngram must be >= 1")
        unknown = self.enabled - set(CHANNELS)
        if unknown:
            raise ConfigurationError(f"unknown noise channels: {sorted(unknown)}")

    def to_dict(self):
        return {"p_max": self.p_max, "candidates": self.candidates,
                "insert_fraction": list(self.insert_fraction), "ngram": self.ngram,
                "enabled": [c for c in CHANNELS if c in self.enabled]}


def drop_probabilities(tokens, vocab: Vocab, p_max: float) -> np.ndarray:
    w = np.array([vocab.count(t) for t in tokens], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return np.zeros(len(tokens))
    return np.minimum(p_max, w / total)


def drop_words(u: Utterance, vocab: Vocab, p_max: float, rng: np.random.Generator) -> Utterance:
    """Drop each token with probability min(p_max, w(x_i) / sum_j w(x_j))."""
    p = drop_probabilities(u.tokens, vocab, p_max)
    keep = rng.random(len(p)) >= p
    if not keep.any():
        keep[int(np.argmin(p))] = True
    return Utterance(tuple(t for t, k in zip(u.tokens, keep) if k), u.kind)


def select_candidate(u: Utterance, pool, C: int, emb: EmbeddingTable, rng: np.random.Generator) -> Utterance:
    """WMD-nearest of ``min(C, |pool|)`` candidates sampled without replacement."""
    if not pool:
        raise ConfigurationError("mixed-source addition needs a non-empty candidate pool")
    idx = rng.choice(len(pool), size=min(C, len(pool)), replace=False)
    best, best_d = None, np.inf
    for i in idx:
        cand = pool[int(i)]
        if best is not None and relaxed_wmd(u, cand, emb) >= best_d:
            continue
        d = wmd(u, cand, emb)
        if d < best_d:
            best, best_d = cand, d
    return best


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def add_mixed(u: Utterance, source: Utterance, frac, rng: np.random.Generator) -> Utterance:
    """Insert k words sampled from ``source`` at independently drawn positions."""
    lo, hi = frac
    f = rng.uniform(lo, hi) if hi > lo else lo
    k = min(max(_round_half_up(f * len(source)), 1), len(source))
    picks = rng.choice(len(source), size=k, replace=False)
    out = list(u.tokens)
    for i in picks:
        out.insert(int(rng.integers(0, len(out) + 1)), source.tokens[int(i)])
    return Utterance(tuple(out), u.kind)


def shuffle_ngrams(u: Utterance, n: int, rng: np.random.Generator) -> Utterance:
    if n < 1:
        raise ConfigurationError("ngram size must be >= 1")
    toks = u.tokens
    groups = [toks[i:i + n] for i in range(0, len(toks), n)]
    if len(groups) == 1:
        return u
    order = rng.permutation(len(groups))
    return Utterance(tuple(t for g in order for t in groups[g]), u.kind)


def corrupt(u: Utterance, spec: NoiseSpec, vocab: Vocab, pool, emb: EmbeddingTable,
            rng: np.random.Generator) -> Utterance:
    """drop -> add -> shuffle; disabled channels are the identity."""
    out = u
    if "drop" in spec.enabled:
        out = drop_words(out, vocab, spec.p_max, rng)
    if "add" in spec.enabled:
        source = select_candidate(u, pool, spec.candidates, emb, rng)
        out = add_mixed(out, source, spec.insert_fraction, rng)
    if "shuffle" in spec.enabled:
        out = shuffle_ngrams(out, spec.ngram, rng)
    return out
