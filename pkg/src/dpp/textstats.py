"""Tokens, vocabularies, embeddings, sentence BLEU and Word Mover's Distance."""

from __future__ import annotations

import functools
import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from dpp.errors import ConfigurationError

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

KINDS = ("natural", "canonical")


@dataclass(frozen=True)
class Utterance:
    tokens: tuple
    kind: str = "natural"

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if not toks:
            raise ValueError("utterance must contain at least one token")
        if any(not t or t.strip() != t or " " in t for t in toks):
            raise ValueError(f"malformed token in {toks!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown utterance kind {self.kind!r}")

    @classmethod
    def from_text(cls, text: str, kind: str = "natural") -> "Utterance":
        return cls(tuple(tokenize(text)), kind)

    def __len__(self):
        return len(self.tokens)

    def __str__(self):
        return " ".join(self.tokens)


def tokenize(text: str) -> list:
    return text.lower().split()


def _tokens(u) -> tuple:
    return u.tokens if isinstance(u, Utterance) else tuple(u)


class Vocab:
    """Token/id maps with corpus counts; ids 0-3 are reserved."""

    def __init__(self, tokens: Sequence[str], counts: dict, unk_count: int = 0):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.counts = MappingProxyType(dict(counts))
        self.unk_count = unk_count

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens) -> list:
        return [self.stoi.get(t, UNK_ID) for t in _tokens(tokens)]

    def decode(self, ids, strip=True) -> list:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def count(self, token) -> int:
        """Corpus frequency w(token); out-of-vocabulary tokens get the aggregate <unk> mass."""
        if token in self.counts:
            return self.counts[token]
        return self.unk_count

    @property
    def content_tokens(self) -> list:
        return self.itos[len(RESERVED):]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def save(self, path):
        lines = [f"{t}\t{self.counts.get(t, 0)}" for t in self.content_tokens]
        Path(path).write_text("\n".join([f"{UNK}\t{self.unk_count}"] + lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        unk = int(rows[0][1])
        toks = [r[0] for r in rows[1:]]
        return cls(toks, {r[0]: int(r[1]) for r in rows[1:]}, unk)


def build_vocab(corpus: Iterable, min_freq: int = 1) -> Vocab:
    counts = Counter()
    n = 0
    for u in corpus:
        counts.update(_tokens(u))
        n += 1
    if n == 0:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    kept = {t: c for t, c in counts.items() if c >= min_freq and t not in RESERVED}
    unk = sum(c for t, c in counts.items() if t not in kept)
    order = sorted(kept, key=lambda t: (-kept[t], t))
    return Vocab(order, kept, unk)


def merge_vocabs(*vocabs: Vocab) -> Vocab:
    counts = Counter()
    for v in vocabs:
        counts.update(dict(v.counts))
    order = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(order, counts, sum(v.unk_count for v in vocabs))


class EmbeddingTable:
    """Immutable token -> vector map; missing tokens fall back to the <unk> vector."""

    def __init__(self, vectors: dict, dim: int):
        for tok, vec in vectors.items():
            if len(vec) != dim:
                raise ConfigurationError(f"embedding for {tok!r} has dimension {len(vec)}, expected {dim}")
        self.dim = dim
        self._vectors = MappingProxyType({t: np.asarray(v, dtype=np.float64).copy() for t, v in vectors.items()})
        for v in self._vectors.values():
            v.setflags(write=False)
        self.loaded_tokens = frozenset()

    def __contains__(self, token):
        return token in self._vectors

    def __getitem__(self, token) -> np.ndarray:
        if token in self._vectors:
            return self._vectors[token]
        return self._vectors[UNK]

    def matrix(self, tokens) -> np.ndarray:
        return np.stack([self[t] for t in tokens])

    @classmethod
    def random(cls, tokens: Iterable[str], dim: int = 100, seed: int = 0, scale: float = 0.2):
        rng = np.random.default_rng(seed)
        toks = sorted(set(tokens) | {UNK})
        return cls({t: rng.uniform(-scale, scale, dim) for t in toks}, dim)

    @classmethod
    def load(cls, path, tokens: Iterable[str] = (), dim: int = 100, seed: int = 0, scale: float = 0.2):
        """Read ``token v1 ... v_dim`` lines; tokens absent from the file get uniform random vectors."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                if len(parts) - 1 != dim:
                    raise ConfigurationError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        rng = np.random.default_rng(seed)
        loaded = frozenset(vectors)
        for t in sorted(set(tokens) | {UNK}):
            if t not in vectors:
                vectors[t] = rng.uniform(-scale, scale, dim)
        table = cls(vectors, dim)
        table.loaded_tokens = loaded
        return table


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Sentence BLEU with brevity penalty; zero-match precisions for n >= 2 get add-one smoothing."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        match = sum(min(k, r[g]) for g, k in c.items())
        total = max(len(cand) - n + 1, 0)
        if match == 0:
            if n == 1:
                return 0.0
            match, total = 1, total + 1
        log_p += math.log(match / total)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_p / max_n)


# ---------------------------------------------------------------------------
# Word Mover's Distance
# ---------------------------------------------------------------------------

EXACT_WMD_MAX_LEN = 12


def _distance_matrix(emb: EmbeddingTable, a, b) -> np.ndarray:
    A, B = emb.matrix(a), emb.matrix(b)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def _exact_ot(D: np.ndarray) -> float:
    # Uniform masses 1/n and 1/m: replicating rows/cols up to lcm(n, m) turns the
    # transportation LP into an assignment problem with the same optimum.
    n, m = D.shape
    L = n * m // math.gcd(n, m)
    big = np.repeat(np.repeat(D, L // n, axis=0), L // m, axis=1)
    rows, cols = linear_sum_assignment(big)
    return float(big[rows, cols].sum() / L)


def relaxed_wmd(a, b, emb: EmbeddingTable) -> float:
    """Max of the two one-sided relaxations; a lower bound on the exact distance."""
    D = _distance_matrix(emb, _tokens(a), _tokens(b))
    return float(max(D.min(axis=1).mean(), D.min(axis=0).mean()))


@functools.lru_cache(maxsize=1 << 18)
def _wmd_cached(emb: EmbeddingTable, a: tuple, b: tuple) -> float:
    if sorted(a) == sorted(b):
        return 0.0
    D = _distance_matrix(emb, a, b)
    if len(a) > EXACT_WMD_MAX_LEN or len(b) > EXACT_WMD_MAX_LEN:
        return float(max(D.min(axis=1).mean(), D.min(axis=0).mean()))
    return _exact_ot(D)


def wmd(a, b, emb: EmbeddingTable) -> float:
    """Word Mover's Distance between normalized bags of words (Euclidean ground metric)."""
    a, b = _tokens(a), _tokens(b)
    if not a or not b:
        raise ValueError("wmd requires non-empty utterances")
    # order-independent cache key keeps the function exactly symmetric
    key = (tuple(sorted(a)), tuple(sorted(b)))
    if key[0] > key[1]:
        key = (key[1], key[0])
    return _wmd_cached(emb, *key)
