"""Denotation-level evaluation, baselines, ablation tables and case dumps."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from dpp import domain, net, noise, train, zoo
from dpp.errors import ConfigurationError
from dpp.textstats import EmbeddingTable, Utterance, relaxed_wmd, wmd


@dataclass
class EvalRecord:
    index: int
    natural: str
    canonical: str  # predicted intermediate canonical utterance
    lf: str  # predicted logical form, or the failure reason
    predicted: object
    gold: object
    match: bool

    def to_dict(self):
        return {"index": self.index, "input": self.natural, "canonical": self.canonical, "lf": self.lf,
                "predicted": self.predicted, "gold": self.gold, "match": self.match}


@dataclass
class EvalReport:
    accuracy: float
    records: list
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def matches(self):
        return sum(r.match for r in self.records)

    def summary(self) -> str:
        lines = [f"examples   {len(self.records)}", f"matches    {self.matches}",
                 f"accuracy   {100 * self.accuracy:.1f}%"]
        if self.fingerprint:
            lines.append(f"config     {self.fingerprint}")
        return "\n".join(lines) + "\n"

    def write(self, directory, name="eval"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        domain.write_jsonl(d / f"{name}.jsonl", (r.to_dict() for r in self.records))
        (d / f"{name}_summary.txt").write_text(self.summary(), encoding="utf-8")
        (d / f"{name}_summary.json").write_text(json.dumps(
            {"accuracy": self.accuracy, "examples": len(self.records), "matches": self.matches,
             "fingerprint": self.fingerprint, **self.meta}, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def config_fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _score(canonicals, eval_pairs, nsp, db, fingerprint="", meta=None) -> EvalReport:
    results = zoo.parse_canonical_batch(nsp, canonicals, db)
    records = []
    for i, (z, (lf, den), g) in enumerate(zip(canonicals, results, eval_pairs)):
        gold = domain.execute(g.lf, db)
        ok = zoo.executable((lf, den)) and domain.denotations_match(den, gold)
        lf_text = domain.serialize(lf) if not isinstance(lf, zoo.ParseFailure) else f"<parse failure: {lf.reason}>"
        pred = domain.denotation_to_json(den) if den is not None else None
        records.append(EvalRecord(i, " ".join(g.natural.tokens), " ".join(z), lf_text, pred,
                                  domain.denotation_to_json(gold), bool(ok)))
    acc = sum(r.match for r in records) / len(records) if records else 0.0
    return EvalReport(acc, records, fingerprint, dict(meta or {}))


def evaluate(model: zoo.ParaphraseModel, nsp, db, eval_pairs, beam: int = 5, max_len: int | None = None,
             fingerprint: str = "") -> EvalReport:
    """x -> beam top-1 canonical -> greedy P_nsp -> execute -> compare denotations."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            hyps = model.decode([g.natural for g in eval_pairs], zoo.TO_CANONICAL, "beam",
                                max_len=max_len, width=beam)
    finally:
        model.train(was)
    vocab = model.vocabs.z
    canonicals = [tuple(vocab.decode(h[0].tokens)) if h else () for h in hyps]
    return _score(canonicals, eval_pairs, nsp, db, fingerprint,
                  {"beam": beam, "tie_break": "earlier completion step, then hypothesis index"})


def evaluate_canonicals(canonicals, nsp, db, eval_pairs, fingerprint="") -> EvalReport:
    """Score externally produced canonical utterances (oracles, baselines)."""
    if len(canonicals) != len(eval_pairs):
        raise ValueError("one canonical per eval example required")
    return _score([tuple(c) for c in canonicals], eval_pairs, nsp, db, fingerprint)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def nearest_by_wmd(queries, candidates, emb: EmbeddingTable) -> list:
    """Index of the WMD-nearest candidate per query; ties go to the first index.

    Candidates are visited in order of their relaxed lower bound, which lets most
    exact computations be skipped without changing the answer.
    """
    out = []
    for q in queries:
        bounds = np.array([relaxed_wmd(q, c, emb) for c in candidates])
        best, best_d = -1, math.inf
        for j in np.argsort(bounds, kind="stable").tolist():
            if bounds[j] > best_d:
                break
            d = wmd(q, candidates[j], emb)
            if d < best_d or (d == best_d and j < best):
                best, best_d = j, d
        out.append(best)
    return out


def _fit_seq2seq(model, srcs, tgts, hp, epochs, seed, extra_loss=None):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hp.lr)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model.train()
    for _ in range(epochs):
        for idx in train._batches(len(srcs), hp.batch, rng):
            loss = net.sequence_nll(model, [srcs[i] for i in idx], [tgts[i] for i in idx]).sum()
            if extra_loss is not None:
                loss = loss + extra_loss(idx, rng)
            train._step(opt, params, loss, hp.grad_clip)
    model.eval()
    return model


def wmd_samples_baseline(X, Z, pairs_zy, emb, eval_pairs, nsp, db, hp, vocabs, mode="two_stage",
                         epochs: int = 10, seed: int = 0) -> EvalReport:
    """Label each unlabeled x with its WMD-nearest canonical (two-stage) or that canonical's
    logical form (one-stage), then train a supervised model on the faked pairs."""
    if mode not in ("one_stage", "two_stage"):
        raise ConfigurationError(f"unknown WmdSamples mode {mode!r}")
    lf_of = {z.tokens: lf for z, lf in pairs_zy}
    cands = [z for z in Z if z.tokens in lf_of]
    nearest = nearest_by_wmd(X, cands, emb)
    gen = torch.Generator().manual_seed(seed)
    if mode == "two_stage":
        para = zoo.ParaphraseModel(hp, vocabs)
        net.init_uniform(para, hp.init_range, gen)
        route = para.route(zoo.TO_CANONICAL)
        model = net.Seq2Seq(route.encoder, route.decoder)
        srcs = [vocabs.src.encode(x) for x in X]
        tgts = [vocabs.z.encode(cands[j]) for j in nearest]
        _fit_seq2seq(model, srcs, tgts, hp, epochs, seed)
        report = evaluate(para, nsp, db, eval_pairs, hp.beam)
    else:
        parser = one_stage_parser(hp, vocabs, gen)
        srcs = [vocabs.src.encode(x) for x in X]
        tgts = [vocabs.lf.encode(domain.lf_tokens(lf_of[cands[j].tokens])) for j in nearest]
        _fit_seq2seq(parser, srcs, tgts, hp, epochs, seed)
        report = evaluate_one_stage(parser, vocabs, db, eval_pairs, hp.beam)
    report.meta.update(baseline=f"wmd_samples_{mode}", faked_pairs=len(X))
    return report


def one_stage_parser(hp, vocabs, gen=None):
    enc = net.Encoder(len(vocabs.src), hp.emb_dim, hp.hidden, hp.dropout)
    dec = net.AttnDecoder(len(vocabs.lf), hp.emb_dim, hp.hidden, 2 * hp.hidden, hp.attn_dim, hp.dropout)
    model = net.Seq2Seq(enc, dec)
    net.init_uniform(model, hp.init_range, gen)
    return model


def evaluate_one_stage(parser, vocabs, db, eval_pairs, beam=5, max_len=60) -> EvalReport:
    """x -> logical form directly; the canonical column is left empty."""
    parser.eval()
    with torch.no_grad():
        hyps = [net.beam_decode(parser, vocabs.src.encode(g.natural), beam, max_len) for g in eval_pairs]
    records = []
    for i, (h, g) in enumerate(zip(hyps, eval_pairs)):
        gold = domain.execute(g.lf, db)
        toks = vocabs.lf.decode(h[0].tokens) if h and h[0].finished else None
        pred, lf_text, ok = None, "<parse failure: no complete decode>", False
        if toks is not None:
            try:
                lf = domain.parse_lf(toks)
                den = domain.execute(lf, db)
                lf_text = domain.serialize(lf)
                pred = domain.denotation_to_json(den)
                ok = not isinstance(den, domain.ExecutionError) and domain.denotations_match(den, gold)
            except domain.ParseError as exc:
                lf_text = f"<parse failure: {exc}>"
        records.append(EvalRecord(i, " ".join(g.natural.tokens), "", lf_text, pred,
                                  domain.denotation_to_json(gold), bool(ok)))
    acc = sum(r.match for r in records) / len(records) if records else 0.0
    return EvalReport(acc, records)


def embed_baseline(pairs_zy, eval_pairs, db, hp, vocabs, epochs=10, seed=0) -> EvalReport:
    """One-stage parser trained on (canonical, LF) pairs and applied directly to natural input."""
    gen = torch.Generator().manual_seed(seed)
    parser = one_stage_parser(hp, vocabs, gen)
    srcs = [vocabs.src.encode(z) for z, _ in pairs_zy]
    tgts = [vocabs.lf.encode(domain.lf_tokens(lf)) for _, lf in pairs_zy]
    _fit_seq2seq(parser, srcs, tgts, hp, epochs, seed)
    report = evaluate_one_stage(parser, vocabs, db, eval_pairs, hp.beam)
    report.meta.update(baseline="embed")
    return report


def multitask_dae_baseline(pairs_zy, X, eval_pairs, db, hp, vocabs, noise_spec, emb, Z, epochs=10,
                           seed=0) -> EvalReport:
    """One-stage parser plus a DAE decoder on natural utterances sharing the encoder."""
    gen = torch.Generator().manual_seed(seed)
    parser = one_stage_parser(hp, vocabs, gen)
    dae_dec = net.AttnDecoder(len(vocabs.x), hp.emb_dim, hp.hidden, 2 * hp.hidden, hp.attn_dim, hp.dropout)
    net.init_uniform(dae_dec, hp.init_range, gen)
    dae = net.Seq2Seq(parser.encoder, dae_dec)
    parser.add_module("dae_decoder", dae_dec)
    srcs = [vocabs.src.encode(z) for z, _ in pairs_zy]
    tgts = [vocabs.lf.encode(domain.lf_tokens(lf)) for _, lf in pairs_zy]
    noise_rng = np.random.default_rng(seed + 1)

    def dae_term(idx, rng):
        xs = [X[int(i)] for i in rng.choice(len(X), size=len(idx), replace=False)]
        noisy = [noise.corrupt(x, noise_spec, vocabs.x, Z, emb, noise_rng) for x in xs]
        return net.sequence_nll(dae, [vocabs.src.encode(u) for u in noisy], [vocabs.x.encode(x) for x in xs]).sum()

    _fit_seq2seq(parser, srcs, tgts, hp, epochs, seed, extra_loss=dae_term)
    report = evaluate_one_stage(parser, vocabs, db, eval_pairs, hp.beam)
    report.meta.update(baseline="multitask_dae")
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

AXES = ("noise", "cycle", "shared_encoder")


def ablation_rows(axis: str, base: train.TrainConfig) -> list:
    """(label, TrainConfig) rows; every row keeps the base seed."""
    rows = []
    if axis == "noise":
        subsets = [()] + [c for k in (1, 2) for c in combinations(noise.CHANNELS, k)] + [noise.CHANNELS]
        for s in subsets:
            cfg = copy.deepcopy(base)
            cfg.noise.enabled = frozenset(s)
            rows.append(("+".join(s) if s else "none", cfg))
    elif axis == "cycle":
        for k in (1, 2, 3):
            for s in combinations(train.TASKS, k):
                cfg = copy.deepcopy(base)
                cfg.enabled_cycle_tasks = frozenset(s)
                rows.append(("+".join(s), cfg))
    elif axis == "shared_encoder":
        for shared in (True, False):
            cfg = copy.deepcopy(base)
            cfg.shared_encoder = shared
            rows.append(("shared" if shared else "separate", cfg))
    else:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    return rows


@dataclass
class AblationRow:
    label: str
    fingerprint: str
    seed: int
    accuracy: float | None
    selection: float | None
    error: str = ""


def run_ablation(axis: str, base: train.TrainConfig, runner) -> list:
    """``runner(label, cfg) -> (accuracy, selection)``; a failing row is recorded and the rest proceed."""
    out = []
    for label, cfg in ablation_rows(axis, base):
        fp = config_fingerprint(cfg.to_dict())
        try:
            acc, sel = runner(label, cfg)
            out.append(AblationRow(label, fp, cfg.seed, acc, sel))
        except Exception as exc:  # noqa: BLE001 - recorded per row by contract
            out.append(AblationRow(label, fp, cfg.seed, None, None, f"{type(exc).__name__}: {exc}"))
    return out


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", "accuracy", "selection", "seed", "fingerprint", "error"])
    for r in rows:
        w.writerow([r.label, "" if r.accuracy is None else f"{r.accuracy:.4f}",
                    "" if r.selection is None else f"{r.selection:.4f}", r.seed, r.fingerprint, r.error])
    return buf.getvalue()


def ablation_table(rows, title="") -> str:
    width = max([len("configuration")] + [len(r.label) for r in rows])
    lines = [title] if title else []
    lines.append(f"{'configuration':<{width}}  {'accuracy':>8}  {'selection':>9}")
    lines.append("-" * (width + 21))
    for r in rows:
        acc = "failed" if r.accuracy is None else f"{100 * r.accuracy:.1f}"
        sel = "-" if r.selection is None else f"{r.selection:.3f}"
        lines.append(f"{r.label:<{width}}  {acc:>8}  {sel:>9}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Case study
# ---------------------------------------------------------------------------

ENTITY_TYPES = {"lakers": "_team_", "celtics": "_team_", "guard": "_position_", "forward": "_position_",
                "center": "_position_"}


def typed(tokens, db=None) -> str:
    """Render entity mentions by their type, numbers as _number_."""
    out = []
    for t in tokens:
        if t in ENTITY_TYPES:
            out.append(ENTITY_TYPES[t])
        elif t.isdigit():
            out.append("_number_")
        else:
            out.append(t)
    return " ".join(out)


def dump_cases(model, nsp, inputs, path, db=None, typed_entities=True):
    """One block per input: input / canonical / logical form / denotation."""
    utts = [u if isinstance(u, Utterance) else Utterance.from_text(u) for u in inputs]
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            mids = [zoo.paraphrase(model, u, zoo.TO_CANONICAL, "greedy") for u in utts]
    finally:
        model.train(was)
    canon = [tuple(model.vocabs.z.decode(h.tokens)) for h in mids]
    results = zoo.parse_canonical_batch(nsp, canon, db) if db is not None else [
        (None, None)] * len(canon)
    blocks = []
    for u, z, (lf, den) in zip(utts, canon, results):
        if lf is None:
            lf_text = "-"
        elif isinstance(lf, zoo.ParseFailure):
            lf_text = f"<parse failure: {lf.reason}>"
        else:
            lf_text = domain.serialize(lf)
        if den is None:
            den_text = "-"
        elif isinstance(den, domain.ExecutionError):
            den_text = f"<execution error: {den.message}>"
        else:
            den_text = json.dumps(domain.denotation_to_json(den))
        fmt = typed if typed_entities else (lambda t, db=None: " ".join(t))
        blocks.append("\n".join([f"input:      {fmt(u.tokens)}", f"canonical:  {fmt(z)}",
                                 f"lf:         {lf_text}", f"denotation: {den_text}"]))
    text = "\n\n".join(blocks) + "\n"
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write case report to {path}: {exc}") from exc
    return text
