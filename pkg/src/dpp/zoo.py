"""Concrete models, their initialization, freezing and persistence."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from dpp import domain, net
from dpp.errors import CheckpointError, ConfigurationError
from dpp.net import Hyperparams, Route
from dpp.textstats import EmbeddingTable, Utterance, Vocab, build_vocab, merge_vocabs

TO_CANONICAL = "to_canonical"
TO_NATURAL = "to_natural"


@dataclass
class Vocabs:
    x: Vocab  # natural side (D_x targets)
    z: Vocab  # canonical side (D_z targets, naive parser source)
    src: Vocab  # union vocabulary for the shared encoder and the discriminator
    lf: Vocab  # logical-form tokens (naive parser targets)

    @classmethod
    def build(cls, X, Z, lf_token_seqs, min_freq=1):
        vx = build_vocab(X, min_freq)
        vz = build_vocab(Z, min_freq)
        return cls(vx, vz, merge_vocabs(vx, vz), build_vocab(lf_token_seqs, 1))

    def fingerprints(self):
        return {k: getattr(self, k).fingerprint() for k in ("x", "z", "src", "lf")}


class ParaphraseModel(nn.Module):
    """Encoder E (or E_x / E_z when not shared) plus decoders D_x and D_z."""

    def __init__(self, hp: Hyperparams, vocabs: Vocabs, shared_encoder: bool = True):
        super().__init__()
        self.hp = hp
        self.vocabs = vocabs
        self.shared_encoder = shared_encoder
        V = len(vocabs.src)
        self.enc_z = net.Encoder(V, hp.emb_dim, hp.hidden, hp.dropout)
        self.enc_x = self.enc_z if shared_encoder else net.Encoder(V, hp.emb_dim, hp.hidden, hp.dropout)
        ctx = 2 * hp.hidden
        self.dec_x = net.AttnDecoder(len(vocabs.x), hp.emb_dim, hp.hidden, ctx, hp.attn_dim, hp.dropout)
        self.dec_z = net.AttnDecoder(len(vocabs.z), hp.emb_dim, hp.hidden, ctx, hp.attn_dim, hp.dropout)

    def route(self, direction) -> Route:
        if direction == TO_CANONICAL:
            return Route(self.enc_z, self.dec_z)
        if direction == TO_NATURAL:
            return Route(self.enc_x, self.dec_x)
        raise ValueError(f"unknown direction {direction!r}")

    def target_vocab(self, direction) -> Vocab:
        return self.vocabs.z if direction == TO_CANONICAL else self.vocabs.x

    def encode_src(self, utterances):
        return [self.vocabs.src.encode(u) for u in utterances]

    def translate(self, utterances, direction, mode="greedy", max_len=None, width=None, generator=None):
        """Token-level paraphrases; returns a list of token tuples (top-1 for beam)."""
        hyps = self.decode(utterances, direction, mode, max_len, width, generator)
        if mode == "beam":
            hyps = [h[0] for h in hyps]
        vocab = self.target_vocab(direction)
        return [tuple(vocab.decode(h.tokens)) for h in hyps]

    def decode(self, utterances, direction, mode="greedy", max_len=None, width=None, generator=None):
        max_len = max_len or self.hp.max_decode_len or 20
        width = width or self.hp.beam
        return net.decode(self.route(direction), self.encode_src(utterances), mode, max_len, width, generator)


class NaiveParser(nn.Module):
    """Seq2seq from canonical utterances to logical-form tokens; frozen after pre-training."""

    def __init__(self, hp: Hyperparams, vocabs: Vocabs):
        super().__init__()
        self.hp = hp
        self.vocabs = vocabs
        enc = net.Encoder(len(vocabs.z), hp.emb_dim, hp.hidden, hp.dropout)
        dec = net.AttnDecoder(len(vocabs.lf), hp.emb_dim, hp.hidden, 2 * hp.hidden, hp.attn_dim, hp.dropout)
        self.model = net.Seq2Seq(enc, dec)
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode=True):
        if mode and self.frozen:
            raise RuntimeError("naive parser is frozen")
        return super().train(mode)

    def max_len(self):
        return self.hp.max_decode_len * 3 if self.hp.max_decode_len else 60

    def parse_tokens(self, canonicals):
        """Greedy LF token sequences for a batch of canonical token sequences."""
        out = [None] * len(canonicals)
        idx = [i for i, c in enumerate(canonicals) if len(c) > 0]
        if idx:
            srcs = [self.vocabs.z.encode(canonicals[i]) for i in idx]
            hyps = net.greedy_decode(self.model, srcs, self.max_len())
            for i, h in zip(idx, hyps):
                out[i] = tuple(self.vocabs.lf.decode(h.tokens)) if h.finished else None
        return out


@dataclass
class AuxiliaryBundle:
    lm_x: net.LanguageModel
    lm_z: net.LanguageModel
    dis: net.CNNClassifier
    summaries: dict = field(default_factory=dict)
    frozen: bool = False

    def modules(self):
        return {"lmx": self.lm_x, "lmz": self.lm_z, "dis": self.dis}

    def freeze(self):
        for m in self.modules().values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        self.frozen = True
        return self


def _seed_embeddings(embedding: nn.Embedding, vocab: Vocab, emb: EmbeddingTable | None):
    if emb is None:
        return
    if emb.dim != embedding.embedding_dim:
        raise ConfigurationError(f"embedding table dimension {emb.dim} does not match emb_dim "
                                 f"{embedding.embedding_dim}")
    with torch.no_grad():
        for tok in vocab.content_tokens:
            if tok in emb:
                embedding.weight[vocab.id(tok)] = torch.as_tensor(np.array(emb[tok]), dtype=embedding.weight.dtype)


def init_models(hp: Hyperparams, vocabs: Vocabs, emb: EmbeddingTable | None = None, seed: int = 0,
                shared_encoder: bool = True):
    """Paraphrase model, naive parser and auxiliaries with uniform init; embeddings seeded from ``emb``."""
    gen = torch.Generator().manual_seed(seed)
    para = ParaphraseModel(hp, vocabs, shared_encoder)
    nsp = NaiveParser(hp, vocabs)
    aux = AuxiliaryBundle(
        net.LanguageModel(len(vocabs.x), hp.emb_dim, hp.hidden, hp.dropout),
        net.LanguageModel(len(vocabs.z), hp.emb_dim, hp.hidden, hp.dropout),
        net.CNNClassifier(len(vocabs.src), hp.emb_dim, hp.dropout),
    )
    for m in (para, nsp, aux.lm_x, aux.lm_z, aux.dis):
        net.init_uniform(m, hp.init_range, gen)
    _seed_embeddings(para.enc_z.embedding, vocabs.src, emb)
    if not shared_encoder:
        _seed_embeddings(para.enc_x.embedding, vocabs.src, emb)
    _seed_embeddings(para.dec_x.embedding, vocabs.x, emb)
    _seed_embeddings(para.dec_z.embedding, vocabs.z, emb)
    _seed_embeddings(nsp.model.encoder.embedding, vocabs.z, emb)
    _seed_embeddings(aux.lm_x.embedding, vocabs.x, emb)
    _seed_embeddings(aux.lm_z.embedding, vocabs.z, emb)
    _seed_embeddings(aux.dis.embedding, vocabs.src, emb)
    return para, nsp, aux


# ---------------------------------------------------------------------------
# Pipeline helpers
# ---------------------------------------------------------------------------


def paraphrase(model: ParaphraseModel, u: Utterance, direction: str, mode="greedy", width=None,
               generator=None):
    hyps = model.decode([u], direction, mode, width=width, generator=generator)
    return hyps[0]


@dataclass(frozen=True)
class ParseFailure:
    tokens: tuple
    reason: str

    def __bool__(self):
        return False


def parse_canonical_batch(nsp, canonicals, db):
    """[(LogicalForm | ParseFailure, Denotation | ExecutionError | None)] without raising."""
    seqs = nsp.parse_tokens([tuple(c.tokens if isinstance(c, Utterance) else c) for c in canonicals])
    out = []
    for toks in seqs:
        if toks is None:
            out.append((ParseFailure((), "no complete decode"), None))
            continue
        try:
            lf = domain.parse_lf(list(toks))
        except domain.ParseError as exc:
            out.append((ParseFailure(toks, str(exc)), None))
            continue
        out.append((lf, domain.execute(lf, db)))
    return out


def parse_canonical(nsp, z, db):
    return parse_canonical_batch(nsp, [z], db)[0]


def executable(result) -> bool:
    lf, den = result
    return not isinstance(lf, ParseFailure) and den is not None and not isinstance(den, domain.ExecutionError)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DPPT"
GROUP_FILES = {"E": "E.bin", "Dx": "Dx.bin", "Dz": "Dz.bin", "nsp": "nsp.bin",
               "lmx": "lmx.bin", "lmz": "lmz.bin", "dis": "dis.bin"}


def _write_tensors(path: Path, tensors: dict):
    body = bytearray()
    body += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    path.write_bytes(MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body)))


def _read_tensors(path: Path) -> dict:
    if not path.exists():
        raise CheckpointError(f"missing checkpoint file {path.name}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path.name}: not a tensor file")
    body, crc = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path.name}: checksum mismatch (corrupted or truncated)")
    out, pos = {}, 4
    (n,) = struct.unpack_from("<I", body, 0)
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", body, pos)
            pos += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path.name}: truncated tensor data") from exc
    if pos != len(body):
        raise CheckpointError(f"{path.name}: trailing bytes")
    return out


def _prefixed(module: nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _groups(models: dict) -> dict:
    groups = {}
    para = models.get("paraphrase")
    if para is not None:
        enc = _prefixed(para.enc_z, "enc_z")
        if not para.shared_encoder:
            enc.update(_prefixed(para.enc_x, "enc_x"))
        groups["E"] = enc
        groups["Dx"] = _prefixed(para.dec_x, "dec_x")
        groups["Dz"] = _prefixed(para.dec_z, "dec_z")
    if models.get("nsp") is not None:
        groups["nsp"] = _prefixed(models["nsp"].model, "model")
    aux = models.get("aux")
    if aux is not None:
        groups["lmx"] = _prefixed(aux.lm_x, "lm_x")
        groups["lmz"] = _prefixed(aux.lm_z, "lm_z")
        groups["dis"] = _prefixed(aux.dis, "dis")
    return groups


def save_checkpoint(models: dict, path, extra_meta: dict | None = None):
    """``models`` keys: paraphrase, nsp, aux (any subset)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    any_model = next(m for m in (models.get("paraphrase"), models.get("nsp")) if m is not None) \
        if (models.get("paraphrase") is not None or models.get("nsp") is not None) else None
    vocabs = models.get("vocabs") or (any_model.vocabs if any_model is not None else None)
    hp = models.get("hp") or (any_model.hp if any_model is not None else None)
    if vocabs is None or hp is None:
        raise ValueError("save_checkpoint needs vocabs and hyperparameters")
    meta = {"architecture": "bilstm-attention-seq2seq",
            "shared_encoder": getattr(models.get("paraphrase"), "shared_encoder", True),
            "encoder_vocab": "union of natural and canonical vocabularies"}
    meta.update({f"hp.{k}": v for k, v in hp.to_dict().items()})
    meta.update({f"vocab_hash.{k}": v for k, v in vocabs.fingerprints().items()})
    groups = _groups(models)
    meta["groups"] = ",".join(sorted(groups))
    meta.update(extra_meta or {})
    for key, tensors in groups.items():
        _write_tensors(path / GROUP_FILES[key], tensors)
    for k in ("x", "z", "src", "lf"):
        getattr(vocabs, k).save(path / f"vocab_{k}.txt")
    (path / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")


def read_meta(path) -> dict:
    f = Path(path) / "meta.txt"
    if not f.exists():
        raise CheckpointError(f"missing checkpoint file meta.txt in {path}")
    meta = {}
    for line in f.read_text(encoding="utf-8").splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            meta[k] = v
    return meta


def _hp_from_meta(meta) -> Hyperparams:
    kw = {}
    for f in Hyperparams.__dataclass_fields__.values():
        key = f"hp.{f.name}"
        if key in meta:
            kw[f.name] = type(f.default)(meta[key])
    return Hyperparams(**kw)


def load_checkpoint(path, vocabs: Vocabs | None = None):
    """Rebuild the saved model set; refuses vocabularies whose hashes differ from the saved ones."""
    path = Path(path)
    meta = read_meta(path)
    saved = {k[len("vocab_hash."):]: v for k, v in meta.items() if k.startswith("vocab_hash.")}
    if vocabs is None:
        for k in ("x", "z", "src", "lf"):
            if not (path / f"vocab_{k}.txt").exists():
                raise CheckpointError(f"missing checkpoint file vocab_{k}.txt")
        vocabs = Vocabs(*(Vocab.load(path / f"vocab_{k}.txt") for k in ("x", "z", "src", "lf")))
    given = vocabs.fingerprints()
    diff = {k: (saved.get(k), given[k]) for k in given if saved.get(k) != given[k]}
    if diff:
        raise CheckpointError("vocabulary hash mismatch: " +
                              ", ".join(f"{k}: saved {a} != given {b}" for k, (a, b) in diff.items()))
    hp = _hp_from_meta(meta)
    groups = [g for g in meta.get("groups", "").split(",") if g]
    shared = meta.get("shared_encoder", "True") == "True"
    para, nsp, aux = init_models(hp, vocabs, None, 0, shared)
    out = {"hp": hp, "vocabs": vocabs, "meta": meta}
    tensors = {}
    for g in groups:
        tensors[g] = _read_tensors(path / GROUP_FILES[g])
    if {"E", "Dx", "Dz"} <= set(groups):
        state = {}
        for g in ("E", "Dx", "Dz"):
            state.update(tensors[g])
        if shared:
            state.update({k.replace("enc_z.", "enc_x.", 1): v for k, v in tensors["E"].items()})
        _load_state(para, state, "E/Dx/Dz")
        out["paraphrase"] = para
    if "nsp" in groups:
        _load_state(nsp, tensors["nsp"], GROUP_FILES["nsp"])
        nsp.freeze()
        out["nsp"] = nsp
    if {"lmx", "lmz", "dis"} <= set(groups):
        _load_state(aux.lm_x, {k[len("lm_x."):]: v for k, v in tensors["lmx"].items()}, "lmx.bin")
        _load_state(aux.lm_z, {k[len("lm_z."):]: v for k, v in tensors["lmz"].items()}, "lmz.bin")
        _load_state(aux.dis, {k[len("dis."):]: v for k, v in tensors["dis"].items()}, "dis.bin")
        out["aux"] = aux.freeze()
    return out


def _load_state(module: nn.Module, state: dict, name: str):
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{name}: {exc}") from exc


def parameters_snapshot(*modules) -> list:
    return [p.detach().clone() for m in modules for p in m.parameters()]


def bit_identical(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))
