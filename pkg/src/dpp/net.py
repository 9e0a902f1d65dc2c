"""Sequence-model primitives: BiLSTM encoder, attention decoder, LSTM language
model, CNN sentence classifier, and greedy / sampling / beam decoding.

All batched entry points take plain Python lists of token-id lists; padding
and framing with ``<s>``/``</s>`` happen here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from dpp.textstats import BOS_ID, EOS_ID, PAD_ID

NEG_INF = float("-inf")


class ContractViolation(RuntimeError):
    pass


@dataclass
class Hyperparams:
    emb_dim: int = 100
    hidden: int = 200
    dropout: float = 0.5
    init_range: float = 0.2
    lr: float = 0.001
    batch: int = 16
    beam: int = 5
    K: int = 6
    max_decode_len: int = 0  # 0: derived from the corpora (longest + 4)
    attn_dim: int = 0  # 0: equal to hidden
    grad_clip: float = 5.0

    def __post_init__(self):
        if not self.attn_dim:
            self.attn_dim = self.hidden

    def to_dict(self):
        return asdict(self)


def pad_batch(seqs: Sequence[Sequence[int]], device=None):
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    if (lengths < 1).any():
        raise ContractViolation("encoder inputs must contain at least one token")
    out = torch.full((len(seqs), int(lengths.max())), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def _banned_mask(vocab_size):
    m = torch.zeros(vocab_size, dtype=torch.bool)
    m[PAD_ID] = True
    m[BOS_ID] = True
    return m


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


@dataclass
class EncoderStates:
    states: torch.Tensor  # [B, S, 2H]
    mask: torch.Tensor  # [B, S] True on real tokens
    lengths: torch.Tensor

    def __len__(self):
        return self.states.size(0)

    def index_select(self, idx):
        return EncoderStates(self.states[idx], self.mask[idx], self.lengths[idx])


class Encoder(nn.Module):
    def __init__(self, vocab_size, emb_dim, hidden, dropout=0.5):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD_ID)
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True, bidirectional=True)
        self.dropout = nn.Dropout(dropout)
        self.out_dim = 2 * hidden

    def forward(self, src: torch.Tensor, lengths: torch.Tensor) -> EncoderStates:
        if src.numel() and (src.max() >= self.vocab_size or src.min() < 0):
            raise ContractViolation(f"token id out of range for encoder vocabulary of {self.vocab_size}")
        x = self.dropout(self.embedding(src))
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=src.size(1))
        mask = torch.arange(src.size(1))[None, :] < lengths[:, None]
        return EncoderStates(self.dropout(out), mask, lengths)


class AttnDecoder(nn.Module):
    """LSTM decoder with additive attention; no state bridge from the encoder (s_0 = 0)."""

    def __init__(self, vocab_size, emb_dim, hidden, ctx_dim, attn_dim, dropout=0.5):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embedding = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD_ID)
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True)
        self.W_h = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.W_s = nn.Linear(hidden, attn_dim)  # its bias is b_a
        self.v = nn.Linear(attn_dim, 1, bias=False)
        self.out = nn.Linear(hidden + ctx_dim, vocab_size)
        self.dropout = nn.Dropout(dropout)
        self.register_buffer("banned", _banned_mask(vocab_size), persistent=False)

    def zero_state(self, batch, like: torch.Tensor):
        z = like.new_zeros(1, batch, self.hidden)
        return (z, z.clone())

    def _fuse(self, s, enc: EncoderStates, enc_proj):
        # s: [B, T, H]; enc_proj: [B, S, A]
        u = self.v(torch.tanh(enc_proj[:, None, :, :] + self.W_s(s)[:, :, None, :])).squeeze(-1)
        u = u.masked_fill(~enc.mask[:, None, :], NEG_INF)
        a = torch.softmax(u, dim=-1)
        c = torch.bmm(a, enc.states)
        logits = self.out(self.dropout(torch.cat([s, c], dim=-1)))
        logits = logits.masked_fill(self.banned, NEG_INF)
        return torch.log_softmax(logits, dim=-1), a

    def forward(self, enc: EncoderStates, tgt_in: torch.Tensor):
        """Teacher forcing: log-probabilities [B, T, V] for every target position."""
        x = self.dropout(self.embedding(tgt_in))
        s, _ = self.rnn(x, self.zero_state(tgt_in.size(0), enc.states))
        return self._fuse(s, enc, self.W_h(enc.states))

    def step(self, enc: EncoderStates, enc_proj, prev: torch.Tensor, state):
        x = self.dropout(self.embedding(prev[:, None]))
        s, state = self.rnn(x, state)
        logp, a = self._fuse(s, enc, enc_proj)
        return logp[:, 0], state, a[:, 0]


class Seq2Seq(nn.Module):
    def __init__(self, encoder: Encoder, decoder: AttnDecoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder


class Route:
    """Unregistered (encoder, decoder) view; lets two routes share one encoder."""

    def __init__(self, encoder: Encoder, decoder: AttnDecoder):
        self.encoder = encoder
        self.decoder = decoder

    def parameters(self):
        seen = {}
        for p in list(self.encoder.parameters()) + list(self.decoder.parameters()):
            seen[id(p)] = p
        return iter(seen.values())


class LanguageModel(nn.Module):
    def __init__(self, vocab_size, emb_dim, hidden, dropout=0.5):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD_ID)
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)
        self.dropout = nn.Dropout(dropout)
        self.register_buffer("banned", _banned_mask(vocab_size), persistent=False)

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        s, _ = self.rnn(self.dropout(self.embedding(inp)))
        logits = self.out(self.dropout(s)).masked_fill(self.banned, NEG_INF)
        return torch.log_softmax(logits, dim=-1)


class CNNClassifier(nn.Module):
    """Convolutional sentence classifier; outputs the logit of "canonical"."""

    windows = (3, 4, 5)
    feature_maps = (10, 20, 30)

    def __init__(self, vocab_size, emb_dim, dropout=0.5):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD_ID)
        self.convs = nn.ModuleList(nn.Conv1d(emb_dim, n, w) for w, n in zip(self.windows, self.feature_maps))
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(sum(self.feature_maps), 1)

    @property
    def min_len(self):
        return max(self.windows)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Windows that run past ``max(length, min_len)`` are excluded from the max-pool,
        so a sentence scores the same whatever it is batched with."""
        e = self.dropout(self.embedding(x)).transpose(1, 2)
        feats = []
        for conv, w in zip(self.convs, self.windows):
            h = F.relu(conv(e))
            if lengths is not None:
                last = lengths.clamp(min=self.min_len) - w
                h = h.masked_fill(torch.arange(h.size(2))[None, None, :] > last[:, None, None], float("-inf"))
            feats.append(h.max(dim=2).values)
        return self.out(self.dropout(torch.cat(feats, dim=1))).squeeze(-1)


def init_uniform(module: nn.Module, scale: float = 0.2, generator: torch.Generator | None = None):
    """Uniform init in [-scale, scale] for every parameter; <pad> embedding rows stay zero."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * scale - scale)
        for m in module.modules():
            if isinstance(m, nn.Embedding) and m.padding_idx is not None:
                m.weight[m.padding_idx].zero_()


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def encode(model, srcs) -> EncoderStates:
    src, lengths = pad_batch(srcs)
    return model.encoder(src, lengths)


def attend_step(model, prev_tokens, state, enc: EncoderStates):
    """One decoder step; returns (probabilities [B, V], new state, attention [B, S])."""
    if state is None:
        state = model.decoder.zero_state(len(enc), enc.states)
    prev = torch.as_tensor(prev_tokens, dtype=torch.long).reshape(-1)
    logp, state, a = model.decoder.step(enc, model.decoder.W_h(enc.states), prev, state)
    return logp.exp(), state, a


def _frame_targets(outs):
    t_in = [[BOS_ID] + list(o[:-1]) for o in outs]
    tgt_in, _ = pad_batch(t_in)
    width = tgt_in.size(1)
    tgt_out = torch.full_like(tgt_in, EOS_ID)
    mask = torch.zeros_like(tgt_in, dtype=torch.bool)
    for i, o in enumerate(outs):
        tgt_out[i, :len(o)] = torch.as_tensor(list(o), dtype=torch.long)
        mask[i, :len(o)] = True
    return tgt_in, tgt_out, mask, width


def score_emitted(model, srcs, outs) -> torch.Tensor:
    """log P(outs | srcs) where each ``outs[i]`` is an emitted sequence (ending in </s>
    unless it was cut off at the length limit). Differentiable; shape [B]."""
    enc = encode(model, srcs)
    tgt_in, tgt_out, mask, _ = _frame_targets(outs)
    logp, _ = model.decoder(enc, tgt_in)
    tok = logp.gather(-1, tgt_out[..., None]).squeeze(-1)
    return torch.where(mask, tok, torch.zeros_like(tok)).sum(dim=1)


def sequence_nll(model, srcs, tgts) -> torch.Tensor:
    """-sum_t log P(tgt_t | tgt_<t, src) with targets framed by <s> ... </s>; shape [B]."""
    return -score_emitted(model, srcs, [list(t) + [EOS_ID] for t in tgts])


@dataclass
class Hypothesis:
    tokens: list  # content tokens, without </s>
    log_prob: float
    finished: bool  # emitted </s> (False when cut at max_len)
    step: int = 0

    @property
    def emitted(self):
        return self.tokens + ([EOS_ID] if self.finished else [])

    @property
    def normalized(self):
        return self.log_prob / max(len(self.emitted), 1)


def _stepwise(model, srcs, max_len, choose):
    enc = encode(model, srcs)
    B = len(srcs)
    proj = model.decoder.W_h(enc.states)
    state = model.decoder.zero_state(B, enc.states)
    prev = torch.full((B,), BOS_ID, dtype=torch.long)
    alive = torch.ones(B, dtype=torch.bool)
    total = torch.zeros(B, dtype=torch.float64)
    toks = [[] for _ in range(B)]
    finished = [False] * B
    for _ in range(max_len):
        logp, state, _ = model.decoder.step(enc, proj, prev, state)
        nxt = choose(logp)
        lp = logp.gather(1, nxt[:, None]).squeeze(1).double()
        total = total + torch.where(alive, lp, torch.zeros_like(lp))
        for i in torch.nonzero(alive).flatten().tolist():
            t = int(nxt[i])
            if t == EOS_ID:
                finished[i] = True
            else:
                toks[i].append(t)
        alive = alive & (nxt != EOS_ID)
        if not alive.any():
            break
        prev = nxt
    return [Hypothesis(toks[i], float(total[i]), finished[i]) for i in range(B)]


def greedy_decode(model, srcs, max_len: int):
    with torch.no_grad():
        return _stepwise(model, srcs, max_len, lambda lp: lp.argmax(dim=-1))


def sample_decode(model, srcs, max_len: int, generator: torch.Generator):
    with torch.no_grad():
        return _stepwise(model, srcs, max_len,
                         lambda lp: torch.multinomial(lp.exp(), 1, generator=generator).squeeze(1))


def beam_decode(model, src, width: int, max_len: int):
    """Beam search for one source; returns hypotheses sorted by length-normalized log-prob,
    ties broken by earlier completion."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    with torch.no_grad():
        enc = encode(model, [src])
        proj = model.decoder.W_h(enc.states)
        beams = [([], 0.0)]
        state = model.decoder.zero_state(1, enc.states)
        prev = torch.tensor([BOS_ID])
        done = []
        for step in range(1, max_len + 1):
            k = len(beams)
            e = enc.index_select(torch.zeros(k, dtype=torch.long))
            p = proj.expand(k, -1, -1)
            logp, state, _ = model.decoder.step(e, p, prev, state)
            base = torch.tensor([b[1] for b in beams], dtype=torch.float64)
            cand = (base[:, None] + logp.double()).flatten()
            top = torch.topk(cand, min(width, int(torch.isfinite(cand).sum())))
            V = logp.size(1)
            keep_rows, new_beams = [], []
            for score, flat in zip(top.values.tolist(), top.indices.tolist()):
                row, tok = divmod(flat, V)
                if tok == EOS_ID:
                    done.append(Hypothesis(list(beams[row][0]), score, True, step))
                else:
                    keep_rows.append(row)
                    new_beams.append((beams[row][0] + [tok], score))
            if len(done) >= width or not new_beams:
                beams = []
                break
            idx = torch.tensor(keep_rows, dtype=torch.long)
            state = (state[0][:, idx], state[1][:, idx])
            prev = torch.tensor([b[0][-1] for b in new_beams])
            beams = new_beams
        for toks, score in beams:
            done.append(Hypothesis(toks, score, False, max_len + 1))
    order = sorted(range(len(done)), key=lambda i: (-done[i].normalized, done[i].step, i))
    return [done[i] for i in order][:width]


def decode(model, srcs, mode: str = "greedy", max_len: int = 20, width: int = 1, generator=None):
    """Dispatch on ``mode``: greedy / sample return one Hypothesis per source, beam a sorted list."""
    if mode == "greedy":
        return greedy_decode(model, srcs, max_len)
    if mode == "sample":
        if generator is None:
            raise ValueError("sampling requires a torch.Generator")
        return sample_decode(model, srcs, max_len, generator)
    if mode == "beam":
        return [beam_decode(model, s, width, max_len) for s in srcs]
    raise ValueError(f"unknown decode mode {mode!r}")


def lm_logprobs(lm: LanguageModel, seqs) -> torch.Tensor:
    """Sum of log P(w_t | <s>, w_<t) over content tokens (the </s> step is not scored); [B]."""
    inp, _ = pad_batch([[BOS_ID] + list(s) for s in seqs])
    logp = lm(inp[:, :-1] if inp.size(1) > 1 else inp)
    tgt = torch.full(logp.shape[:2], EOS_ID, dtype=torch.long)
    mask = torch.zeros(logp.shape[:2], dtype=torch.bool)
    for i, s in enumerate(seqs):
        tgt[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, :len(s)] = True
    tok = logp.gather(-1, tgt[..., None]).squeeze(-1)
    return torch.where(mask, tok, torch.zeros_like(tok)).sum(dim=1)


def lm_logprob(lm: LanguageModel, tokens) -> float:
    with torch.no_grad():
        return float(lm_logprobs(lm, [tokens])[0])


def lm_nll(lm: LanguageModel, seqs) -> torch.Tensor:
    """Training objective: next-token NLL including the final </s>; [B]."""
    framed = [[BOS_ID] + list(s) + [EOS_ID] for s in seqs]
    inp, lengths = pad_batch(framed)
    logp = lm(inp[:, :-1])
    tgt = inp[:, 1:].clone()
    mask = torch.arange(tgt.size(1))[None, :] < (lengths - 1)[:, None]
    tgt[~mask] = EOS_ID
    tok = logp.gather(-1, tgt[..., None]).squeeze(-1)
    return -torch.where(mask, tok, torch.zeros_like(tok)).sum(dim=1)


def cnn_logits(disc: CNNClassifier, seqs) -> torch.Tensor:
    width = max(disc.min_len, max(len(s) for s in seqs))
    x = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        x[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return disc(x, torch.tensor([len(s) for s in seqs]))


def cnn_prob(disc: CNNClassifier, tokens) -> float:
    """Probability that ``tokens`` is a canonical utterance."""
    with torch.no_grad():
        return float(torch.sigmoid(cnn_logits(disc, [tokens]))[0])


def grad(loss_fn: Callable[[], torch.Tensor], params):
    """Reverse-mode gradient of ``loss_fn()`` w.r.t. ``params`` (list of tensors)."""
    params = list(params)
    loss = loss_fn()
    if not torch.is_tensor(loss) or not loss.is_floating_point():
        raise ContractViolation(f"loss is not a floating tensor (got {type(loss).__name__}"
                                f"{'' if not torch.is_tensor(loss) else ' ' + str(loss.dtype)})")
    if loss.grad_fn is None:
        return [torch.zeros_like(p) for p in params]
    try:
        gs = torch.autograd.grad(loss, params, allow_unused=True)
    except RuntimeError as exc:
        raise ContractViolation(f"non-differentiable operation in loss: {exc}") from exc
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]
