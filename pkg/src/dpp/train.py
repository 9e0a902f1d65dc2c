"""Training: auxiliary pre-training, DAE pre-training, cycle learning (BT + DRL),
semi-supervised mixing and the unsupervised model-selection metric."""

from __future__ import annotations

import copy
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dpp import domain, net, noise, reward, zoo
from dpp.errors import ConfigurationError, TrainingAborted
from dpp.net import Hyperparams
from dpp.noise import NoiseSpec
from dpp.textstats import EOS_ID, Utterance, bleu

TASKS = ("DAE", "BT", "DRL")
PHASE_AUX, PHASE_DAE, PHASE_CYCLE = "aux", "dae", "cycle"


@dataclass
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_cycle: int = 50
    epochs_aux: int = 100
    hp: Hyperparams = field(default_factory=Hyperparams)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    semi_fraction: float = 0.0
    enabled_cycle_tasks: frozenset = frozenset({"BT", "DRL"})
    seed: int = 0
    selection_lambda: float = 4.0
    shared_encoder: bool = True
    dev_size: int = 100
    nsp_dev_fraction: float = 0.1
    aux_patience: int = 10  # epochs without held-out improvement before an auxiliary model stops
    track_accuracy: bool = True  # log greedy denotation accuracy on the eval split each epoch

    def __post_init__(self):
        self.enabled_cycle_tasks = frozenset(self.enabled_cycle_tasks)
        self.validate()

    def validate(self):
        for name in ("epochs_pretrain", "epochs_cycle", "epochs_aux"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"train.{name} must be >= 0")
        if not 0.0 <= self.semi_fraction <= 1.0:
            raise ConfigurationError("train.semi_fraction must lie in [0, 1]")
        unknown = self.enabled_cycle_tasks - set(TASKS)
        if unknown:
            raise ConfigurationError(f"train.cycle_tasks: unknown tasks {sorted(unknown)}")
        if self.epochs_cycle > 0 and not self.enabled_cycle_tasks:
            raise ConfigurationError("train.cycle_tasks must enable at least one task when epochs_cycle > 0")
        if self.hp.K < 1:
            raise ConfigurationError("model.K must be >= 1")
        if self.hp.batch < 1:
            raise ConfigurationError("model.batch must be >= 1")
        if self.hp.beam < 1:
            raise ConfigurationError("model.beam must be >= 1")
        if not 0.0 <= self.hp.dropout < 1.0:
            raise ConfigurationError("model.dropout must lie in [0, 1)")
        if self.hp.lr <= 0:
            raise ConfigurationError("model.lr must be > 0")
        if self.dev_size < 1:
            raise ConfigurationError("train.dev_size must be >= 1")
        if not 0.0 < self.nsp_dev_fraction < 1.0:
            raise ConfigurationError("train.nsp_dev_fraction must lie in (0, 1)")

    def to_dict(self):
        return {"epochs_pretrain": self.epochs_pretrain, "epochs_cycle": self.epochs_cycle,
                "epochs_aux": self.epochs_aux, "hp": self.hp.to_dict(), "noise": self.noise.to_dict(),
                "semi_fraction": self.semi_fraction,
                "enabled_cycle_tasks": [t for t in TASKS if t in self.enabled_cycle_tasks],
                "seed": self.seed, "selection_lambda": self.selection_lambda,
                "shared_encoder": self.shared_encoder, "dev_size": self.dev_size,
                "nsp_dev_fraction": self.nsp_dev_fraction, "aux_patience": self.aux_patience,
                "track_accuracy": self.track_accuracy}


# ---------------------------------------------------------------------------
# Seeds and metrics
# ---------------------------------------------------------------------------

SEED_STREAMS = ("data", "init", "noise", "sampling", "batching", "dropout", "dev", "semi")


def sub_seeds(seed: int) -> dict:
    """One global seed fanned out into independent per-component seeds."""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: int(c.generate_state(1, dtype=np.uint32)[0]) for name, c in zip(SEED_STREAMS, children)}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class MetricsSink:
    """Append-only JSONL stream of MetricsRecords, one per (phase, epoch).

    Wall-clock goes to a sibling ``timings.jsonl`` so the metrics stream itself is
    reproducible byte for byte.
    """

    def __init__(self, path=None, timings_path=None):
        self.path = Path(path) if path else None
        self.timings_path = Path(timings_path) if timings_path else (
            self.path.with_name("timings.jsonl") if self.path else None)
        self.records = []
        self._seen = set()
        self._lock = threading.Lock()
        for p in (self.path, self.timings_path):
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_text("", encoding="utf-8")

    def write(self, phase, epoch, wall_clock=None, **fields):
        rec = _clean({"phase": phase, "epoch": epoch, **fields})
        with self._lock:
            key = (phase, epoch)
            if key in self._seen:
                raise ValueError(f"duplicate metrics record for {key}")
            self._seen.add(key)
            self.records.append(rec)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if self.timings_path is not None and wall_clock is not None:
                with self.timings_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"phase": phase, "epoch": epoch, "seconds": round(wall_clock, 3)}) + "\n")
        return rec


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def epoch_schedule(n_x: int, n_z: int, batch: int, rng: np.random.Generator):
    """One pass over the larger corpus with the smaller one cycled; yields index batches."""
    if n_x < 1 or n_z < 1:
        raise ConfigurationError("both corpora must be non-empty")
    n = max(n_x, n_z)

    def stream(m):
        reps = -(-n // m)
        return np.concatenate([rng.permutation(m) for _ in range(reps)])[:n]

    ix, iz = stream(n_x), stream(n_z)
    for s in range(0, n, batch):
        yield ix[s:s + batch].tolist(), iz[s:s + batch].tolist()


def _batches(n, batch, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch].tolist()


def _finite(t: torch.Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def _optimizer(params, hp: Hyperparams):
    return torch.optim.Adam([p for p in params if p.requires_grad], lr=hp.lr)


def _step(opt, params, loss, clip):
    opt.zero_grad()
    loss.backward()
    if clip and clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def max_decode_len(hp: Hyperparams, *corpora) -> int:
    if hp.max_decode_len:
        return hp.max_decode_len
    longest = max((len(u) for c in corpora for u in c), default=10)
    return longest + 4


# ---------------------------------------------------------------------------
# Auxiliary pre-training
# ---------------------------------------------------------------------------


def _split_dev(n, frac, rng):
    k = max(1, int(round(frac * n)))
    if n - k < 1:
        raise ConfigurationError(f"too few items ({n}) to hold out a development slice")
    order = rng.permutation(n)
    return sorted(order[k:].tolist()), sorted(order[:k].tolist())


def _fit(module, loss_fn, dev_score, n_items, cfg, rng, name, sink=None, batch=None):
    """Generic supervised fit: minibatch Adam, keep the state with the best held-out score."""
    hp = cfg.hp
    params = [p for p in module.parameters() if p.requires_grad]
    opt = _optimizer(params, hp)
    best, best_state, since = None, copy.deepcopy(module.state_dict()), 0
    history = []
    for epoch in range(1, cfg.epochs_aux + 1):
        module.train()
        total = 0.0
        for idx in _batches(n_items, batch or hp.batch, rng):
            loss = loss_fn(idx)
            if not _finite(loss):
                module.load_state_dict(best_state)
                raise TrainingAborted(f"{name}: non-finite loss in epoch {epoch}")
            _step(opt, params, loss, hp.grad_clip)
            total += float(loss.detach())
        module.eval()
        score = dev_score()
        history.append({"epoch": epoch, "loss": total / n_items, "dev": score})
        if best is None or score > best:
            best, best_state, since = score, copy.deepcopy(module.state_dict()), 0
        else:
            since += 1
        if since >= cfg.aux_patience:
            break
    module.load_state_dict(best_state)
    module.eval()
    return {"best_dev": best, "epochs_run": len(history), "history": history}


def nsp_exact_match(nsp: zoo.NaiveParser, pairs) -> float:
    if not pairs:
        return 0.0
    preds = nsp.parse_tokens([z.tokens for z, _ in pairs])
    gold = [tuple(domain.lf_tokens(lf)) for _, lf in pairs]
    return float(np.mean([p == g for p, g in zip(preds, gold)]))


def train_nsp(nsp: zoo.NaiveParser, pairs_zy, cfg: TrainConfig, rng):
    v = nsp.vocabs
    tr, dev = _split_dev(len(pairs_zy), cfg.nsp_dev_fraction, rng)
    src = [v.z.encode(z) for z, _ in pairs_zy]
    tgt = [v.lf.encode(domain.lf_tokens(lf)) for _, lf in pairs_zy]
    dev_pairs = [pairs_zy[i] for i in dev]

    def loss_fn(idx):
        ids = [tr[i] for i in idx]
        return net.sequence_nll(nsp.model, [src[i] for i in ids], [tgt[i] for i in ids]).sum()

    def dev_score():
        # exact match first; held-out NLL breaks ties once the small dev slice saturates
        with torch.no_grad():
            nll = float(net.sequence_nll(nsp.model, [src[i] for i in dev], [tgt[i] for i in dev]).sum())
        return (nsp_exact_match(nsp, dev_pairs), -nll / len(dev))

    return _fit(nsp, loss_fn, dev_score, len(tr), cfg, rng, "nsp")


def train_lm(lm, vocab, corpus, cfg: TrainConfig, rng, name):
    seqs = [vocab.encode(u) for u in corpus]
    tr, dev = _split_dev(len(seqs), 0.1, rng)

    def loss_fn(idx):
        return net.lm_nll(lm, [seqs[tr[i]] for i in idx]).sum()

    def dev_score():
        with torch.no_grad():
            return -float(net.lm_nll(lm, [seqs[i] for i in dev]).sum()) / len(dev)

    return _fit(lm, loss_fn, dev_score, len(tr), cfg, rng, name)


def discriminator_accuracy(disc, vocab_src, utterances) -> float:
    seqs = [vocab_src.encode(u) for u in utterances]
    labels = np.array([u.kind == "canonical" for u in utterances])
    with torch.no_grad():
        pred = net.cnn_logits(disc, seqs).numpy() > 0
    return float(np.mean(pred == labels))


def train_discriminator(disc, vocab_src, X, Z, cfg: TrainConfig, rng):
    data = list(X) + list(Z)
    seqs = [vocab_src.encode(u) for u in data]
    labels = torch.tensor([1.0 if u.kind == "canonical" else 0.0 for u in data])
    tr, dev = _split_dev(len(data), 0.1, rng)
    # balance the two kinds: canonical examples are far fewer than natural ones
    n_can = float(labels[tr].sum())
    pos_weight = torch.tensor((len(tr) - n_can) / max(n_can, 1.0))

    def loss_fn(idx):
        ids = [tr[i] for i in idx]
        logits = net.cnn_logits(disc, [seqs[i] for i in ids])
        return torch.nn.functional.binary_cross_entropy_with_logits(
            logits, labels[ids], pos_weight=pos_weight, reduction="sum")

    return _fit(disc, loss_fn, lambda: discriminator_accuracy(disc, vocab_src, [data[i] for i in dev]),
                len(tr), cfg, rng, "dis")


def pretrain_auxiliaries(X, Z, pairs_zy, aux: zoo.AuxiliaryBundle, nsp: zoo.NaiveParser,
                         cfg: TrainConfig, sink: MetricsSink | None = None):
    """Fit LM_x, LM_z, P_dis and P_nsp, then freeze all of them."""
    for name, data in (("X", X), ("Z", Z), ("(z, y) pairs", pairs_zy)):
        if not data:
            raise ConfigurationError(f"empty corpus for auxiliary pre-training: {name}")
    seeds = sub_seeds(cfg.seed)
    torch.manual_seed(seeds["dropout"])
    rng = np.random.default_rng(seeds["batching"])
    v = nsp.vocabs
    t0 = time.perf_counter()
    summaries = {
        "lm_x": train_lm(aux.lm_x, v.x, X, cfg, rng, "lm_x"),
        "lm_z": train_lm(aux.lm_z, v.z, Z, cfg, rng, "lm_z"),
        "dis": train_discriminator(aux.dis, v.src, X, Z, cfg, rng),
        "nsp": train_nsp(nsp, pairs_zy, cfg, rng),
    }
    aux.freeze()
    nsp.freeze()
    summaries["dis"]["train_accuracy"] = discriminator_accuracy(aux.dis, v.src, list(X) + list(Z))
    aux.summaries = summaries
    if sink is not None:
        sink.write(PHASE_AUX, 0, wall_clock=time.perf_counter() - t0,
                   aux={k: {kk: vv for kk, vv in s.items() if kk != "history"} for k, s in summaries.items()})
    return aux, nsp


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _route_nll(model: zoo.ParaphraseModel, direction, sources, targets):
    route = model.route(direction)
    tgt_vocab = model.target_vocab(direction)
    srcs = model.encode_src(sources)
    tgts = [tgt_vocab.encode(t) for t in targets]
    return net.sequence_nll(route, srcs, tgts)


def dae_loss(model, batch_x, batch_z, spec: NoiseSpec, emb, pool_for_x, pool_for_z, rng):
    """Reconstruction NLL of x from N_x(x) through D_x.E plus z from N_z(z) through D_z.E."""
    v = model.vocabs
    noisy_x = [noise.corrupt(x, spec, v.x, pool_for_x, emb, rng) for x in batch_x]
    noisy_z = [noise.corrupt(z, spec, v.z, pool_for_z, emb, rng) for z in batch_z]
    lx = _route_nll(model, zoo.TO_NATURAL, noisy_x, batch_x).sum()
    lz = _route_nll(model, zoo.TO_CANONICAL, noisy_z, batch_z).sum()
    return lx + lz


def backtranslation_step(model: zoo.ParaphraseModel, batch_x, batch_z, max_len: int):
    """Returns (loss, skipped). Pseudo pairs come from a greedy eval-mode pass without gradient."""
    was = model.training
    model.eval()
    with torch.no_grad():
        z_hat = model.translate(batch_x, zoo.TO_CANONICAL, "greedy", max_len=max_len)
        x_hat = model.translate(batch_z, zoo.TO_NATURAL, "greedy", max_len=max_len)
    model.train(was)
    px = [(s, x) for s, x in zip(z_hat, batch_x) if s]
    pz = [(s, z) for s, z in zip(x_hat, batch_z) if s]
    skipped = (len(batch_x) - len(px)) + (len(batch_z) - len(pz))
    loss = torch.zeros((), dtype=torch.float32)
    if px:
        loss = loss + _route_nll(model, zoo.TO_NATURAL, [s for s, _ in px], [x for _, x in px]).sum()
    if pz:
        loss = loss + _route_nll(model, zoo.TO_CANONICAL, [s for s, _ in pz], [z for _, z in pz]).sum()
    return loss, skipped


def reinforce_surrogate(logp: torch.Tensor, adjusted, K: int) -> torch.Tensor:
    """-(1/K) sum_k R~_k log P(sample_k), summed over inputs; ``logp`` is flattened [B*K]."""
    adj = torch.as_tensor(np.asarray(adjusted, dtype=np.float64), dtype=logp.dtype)
    return -(adj * logp).sum() / K


def _drl_direction(model, ctx, inputs, direction, target_kind, K, generator, max_len):
    was = model.training
    model.eval()
    reps = [u for u in inputs for _ in range(K)]
    hyps = model.decode(reps, direction, "sample", max_len=max_len, generator=generator)
    model.train(was)
    vocab = model.target_vocab(direction)
    samples = [tuple(vocab.decode(h.tokens)) for h in hyps]
    bundles = reward.group_rewards(ctx, reps, samples, target_kind, K)
    keep = [i for i in range(len(inputs)) if any(samples[i * K:(i + 1) * K])]
    skipped = len(inputs) - len(keep)
    if not keep:
        return torch.zeros(()), bundles, skipped
    flat = [i * K + k for i in keep for k in range(K)]
    srcs = model.encode_src([reps[j] for j in flat])
    logp = net.score_emitted(model.route(direction), srcs, [hyps[j].emitted for j in flat])
    adjusted = np.concatenate([bundles[i].adjusted for i in keep])
    return reinforce_surrogate(logp, adjusted, K), bundles, skipped


def drl_step(model, batch_x, batch_z, ctx: reward.RewardContext, K: int, generator, max_len: int):
    """REINFORCE surrogate for both directions; returns (loss, bundles, skipped)."""
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    lc, bc, sc = _drl_direction(model, ctx, batch_x, zoo.TO_CANONICAL, reward.CANONICAL, K, generator, max_len)
    ln, bn, sn = _drl_direction(model, ctx, batch_z, zoo.TO_NATURAL, reward.NATURAL, K, generator, max_len)
    return lc + ln, {"canonical": bc, "natural": bn}, sc + sn


def supervised_loss(model, pairs):
    """(x -> z) through D_z.E plus (z -> x) through D_x.E on labeled pairs."""
    xs = [p.natural for p in pairs]
    zs = [p.canonical for p in pairs]
    return (_route_nll(model, zoo.TO_CANONICAL, xs, zs).sum()
            + _route_nll(model, zoo.TO_NATURAL, zs, xs).sum())


class SemiSupervisedMix:
    """Appends a labeled minibatch to every training step; fraction 0 is a strict no-op."""

    def __init__(self, pool, fraction: float, batch: int, seed: int):
        if not 0.0 <= fraction <= 1.0:
            raise ConfigurationError("semi_fraction must lie in [0, 1]")
        self.fraction = fraction
        self.batch = batch
        self.pairs = []
        if fraction == 0.0:
            return
        if not pool:
            raise ConfigurationError("semi_fraction > 0 requires a non-empty labeled pool")
        rng = np.random.default_rng(seed)
        n = math.ceil(fraction * len(pool))
        chosen = sorted(rng.choice(len(pool), size=n, replace=False).tolist())
        self.pairs = [pool[i] for i in chosen]
        self._rng = rng
        self._queue = []

    @property
    def active(self):
        return bool(self.pairs)

    def next_batch(self):
        out = []
        while len(out) < min(self.batch, len(self.pairs)):
            if not self._queue:
                self._queue = self._rng.permutation(len(self.pairs)).tolist()
            out.append(self.pairs[self._queue.pop()])
        return out

    def loss(self, model):
        if not self.active:
            return None
        return supervised_loss(model, self.next_batch())


def semi_supervised_mix(pool, fraction: float, cfg: TrainConfig) -> SemiSupervisedMix:
    return SemiSupervisedMix(pool, fraction, cfg.hp.batch, sub_seeds(cfg.seed)["semi"])


# ---------------------------------------------------------------------------
# Selection metric and tracking
# ---------------------------------------------------------------------------


def _translate_nonempty(model, utts, direction, max_len):
    out = [()] * len(utts)
    idx = [i for i, u in enumerate(utts) if len(u) > 0]
    if idx:
        res = model.translate([utts[i] for i in idx], direction, "greedy", max_len=max_len)
        for i, r in zip(idx, res):
            out[i] = r
    return out


def selection_components(model, dev_X, dev_Z, nsp, max_len: int):
    """Per-example BLEU(x, x^) and P_nsp agreement indicators for z vs z^."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            z_mid = _translate_nonempty(model, [x.tokens for x in dev_X], zoo.TO_CANONICAL, max_len)
            x_hat = _translate_nonempty(model, z_mid, zoo.TO_NATURAL, max_len)
            x_mid = _translate_nonempty(model, [z.tokens for z in dev_Z], zoo.TO_NATURAL, max_len)
            z_hat = _translate_nonempty(model, x_mid, zoo.TO_CANONICAL, max_len)
            p_gold = nsp.parse_tokens([z.tokens for z in dev_Z])
            p_hat = nsp.parse_tokens(z_hat)
    finally:
        model.train(was)
    bleus = np.array([bleu(h, x.tokens) for h, x in zip(x_hat, dev_X)])
    agree = np.array([1.0 if (a is not None and a == b) else 0.0 for a, b in zip(p_gold, p_hat)])
    return bleus, agree


def selection_metric(model, dev_X, dev_Z, nsp, lam: float = 4.0, max_len: int = 40) -> float:
    """lam * mean sentence-BLEU(x, x^) + mean 1{P_nsp(z) == P_nsp(z^)}."""
    if not dev_X or not dev_Z:
        raise ConfigurationError("selection metric needs non-empty dev sets")
    b, a = selection_components(model, dev_X, dev_Z, nsp, max_len)
    return float(lam * b.mean() + a.mean())


def greedy_accuracy(model, nsp, db, eval_pairs, max_len: int) -> float:
    """Cheap per-epoch tracking: greedy (not beam) decode, parse, execute, compare denotations."""
    if not eval_pairs:
        return float("nan")
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = _translate_nonempty(model, [g.natural.tokens for g in eval_pairs], zoo.TO_CANONICAL, max_len)
            res = zoo.parse_canonical_batch(nsp, z, db)
    finally:
        model.train(was)
    hits = [zoo.executable(r) and domain.denotations_match(r[1], domain.execute(g.lf, db))
            for r, g in zip(res, eval_pairs)]
    return float(np.mean(hits))


def dev_sets(X, Z, size: int, seed: int):
    rng = np.random.default_rng(seed)
    dx = [X[i] for i in sorted(rng.choice(len(X), size=min(size, len(X)), replace=False).tolist())]
    dz = [Z[i] for i in sorted(rng.choice(len(Z), size=min(size, len(Z)), replace=False).tolist())]
    return dx, dz


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


@dataclass
class PhaseContext:
    """Shared inputs of the DAE and cycle phases."""
    X: list
    Z: list
    nsp: zoo.NaiveParser
    emb: object
    db: object = None
    aux: zoo.AuxiliaryBundle | None = None
    eval_pairs: list = field(default_factory=list)
    semi_pool: list = field(default_factory=list)
    max_len: int = 0

    def __post_init__(self):
        if not self.max_len:
            self.max_len = max(len(u) for u in list(self.X) + list(self.Z)) + 4


def _epoch_end(model, pc: PhaseContext, cfg, dev_x, dev_z):
    sel = selection_metric(model, dev_x, dev_z, pc.nsp, cfg.selection_lambda, pc.max_len)
    acc = None
    if cfg.track_accuracy and pc.db is not None and pc.eval_pairs:
        acc = greedy_accuracy(model, pc.nsp, pc.db, pc.eval_pairs, pc.max_len)
    return sel, acc


def _abort(model, best_state, sink, phase, epoch, what):
    model.load_state_dict(best_state)
    if sink is not None:
        sink.write(phase, epoch, aborted=True, reason=what)
    raise TrainingAborted(f"{phase} epoch {epoch}: {what}; last good parameters restored")


def pretrain_dae(model: zoo.ParaphraseModel, pc: PhaseContext, cfg: TrainConfig,
                 sink: MetricsSink | None = None):
    """DAE pre-training; keeps the epoch with the best selection metric."""
    seeds = sub_seeds(cfg.seed)
    torch.manual_seed(seeds["dropout"] + 1)
    batch_rng = np.random.default_rng(seeds["batching"] + 1)
    noise_rng = np.random.default_rng(seeds["noise"])
    dev_x, dev_z = dev_sets(pc.X, pc.Z, cfg.dev_size, seeds["dev"])
    semi = semi_supervised_mix(pc.semi_pool, cfg.semi_fraction, cfg)
    params = list(model.parameters())
    opt = _optimizer(params, cfg.hp)
    best_sel, best_state, best_epoch = -math.inf, copy.deepcopy(model.state_dict()), 0
    summary = {"epochs": []}
    for epoch in range(1, cfg.epochs_pretrain + 1):
        t0 = time.perf_counter()
        model.train()
        tot_dae, tot_sup, n = 0.0, 0.0, 0
        for ix, iz in epoch_schedule(len(pc.X), len(pc.Z), cfg.hp.batch, batch_rng):
            bx, bz = [pc.X[i] for i in ix], [pc.Z[i] for i in iz]
            loss = dae_loss(model, bx, bz, cfg.noise, pc.emb, pc.Z, pc.X, noise_rng)
            tot_dae += float(loss.detach())
            sup = semi.loss(model)
            if sup is not None:
                tot_sup += float(sup.detach())
                loss = loss + sup
            if not _finite(loss):
                _abort(model, best_state, sink, PHASE_DAE, epoch, "non-finite DAE loss")
            _step(opt, params, loss, cfg.hp.grad_clip)
            n += len(bx) + len(bz)
        sel, acc = _epoch_end(model, pc, cfg, dev_x, dev_z)
        if sel > best_sel:
            best_sel, best_state, best_epoch = sel, copy.deepcopy(model.state_dict()), epoch
        losses = {"dae": tot_dae / n}
        if semi.active:
            losses["supervised"] = tot_sup / n
        rec = {"losses": losses, "selection": sel}
        if acc is not None:
            rec["accuracy"] = acc
        if sink is not None:
            sink.write(PHASE_DAE, epoch, wall_clock=time.perf_counter() - t0, **rec)
        summary["epochs"].append(rec)
    model.load_state_dict(best_state)
    summary.update(best_epoch=best_epoch, best_selection=best_sel)
    return summary


def _reward_stats(bundles):
    out = {}
    for kind, bs in bundles.items():
        if not bs:
            continue
        cat = {f: np.concatenate([getattr(b, f) for b in bs]) for f in ("fluency", "style", "relevance", "total")}
        out[kind] = {f: float(v.mean()) for f, v in cat.items()}
    return out


def cycle_learn(model: zoo.ParaphraseModel, pc: PhaseContext, cfg: TrainConfig,
                sink: MetricsSink | None = None):
    """Iterative BT / DRL (optionally DAE) training with one optimizer step per iteration."""
    tasks = cfg.enabled_cycle_tasks
    if not tasks:
        raise ConfigurationError("cycle learning needs at least one enabled task")
    if "DRL" in tasks and (pc.aux is None or not pc.aux.frozen or not pc.nsp.frozen):
        raise ConfigurationError("DRL requires frozen auxiliary models and naive parser")
    seeds = sub_seeds(cfg.seed)
    torch.manual_seed(seeds["dropout"] + 2)
    batch_rng = np.random.default_rng(seeds["batching"] + 2)
    noise_rng = np.random.default_rng(seeds["noise"] + 2)
    gen = torch.Generator().manual_seed(seeds["sampling"])
    dev_x, dev_z = dev_sets(pc.X, pc.Z, cfg.dev_size, seeds["dev"])
    semi = semi_supervised_mix(pc.semi_pool, cfg.semi_fraction, cfg)
    ctx = reward.RewardContext(model, pc.aux, pc.nsp, pc.db) if "DRL" in tasks else None
    params = list(model.parameters())
    opt = _optimizer(params, cfg.hp)
    model.eval()
    best_sel, _ = _epoch_end(model, pc, cfg, dev_x, dev_z)
    best_state, best_epoch = copy.deepcopy(model.state_dict()), 0
    summary = {"initial_selection": best_sel, "epochs": []}
    for epoch in range(1, cfg.epochs_cycle + 1):
        t0 = time.perf_counter()
        model.train()
        sums = {"dae": 0.0, "bt": 0.0, "drl": 0.0, "cycle": 0.0, "supervised": 0.0}
        skipped_bt = skipped_drl = n = 0
        all_bundles = {"canonical": [], "natural": []}
        for ix, iz in epoch_schedule(len(pc.X), len(pc.Z), cfg.hp.batch, batch_rng):
            bx, bz = [pc.X[i] for i in ix], [pc.Z[i] for i in iz]
            total = torch.zeros(())
            if "BT" in tasks:
                l_bt, sk = backtranslation_step(model, bx, bz, pc.max_len)
                skipped_bt += sk
                sums["bt"] += float(l_bt.detach())
                total = total + l_bt
            if "DRL" in tasks:
                l_drl, bundles, sk = drl_step(model, bx, bz, ctx, cfg.hp.K, gen, pc.max_len)
                skipped_drl += sk
                sums["drl"] += float(l_drl.detach())
                total = total + l_drl
                for k in all_bundles:
                    all_bundles[k].extend(bundles[k])
            if "DAE" in tasks:
                l_dae = dae_loss(model, bx, bz, cfg.noise, pc.emb, pc.Z, pc.X, noise_rng)
                sums["dae"] += float(l_dae.detach())
                total = total + l_dae
            sums["cycle"] += float(total.detach())
            sup = semi.loss(model)
            if sup is not None:
                sums["supervised"] += float(sup.detach())
                total = total + sup
            if not _finite(total):
                _abort(model, best_state, sink, PHASE_CYCLE, epoch, "non-finite cycle loss")
            if total.requires_grad:
                _step(opt, params, total, cfg.hp.grad_clip)
            n += len(bx) + len(bz)
        sel, acc = _epoch_end(model, pc, cfg, dev_x, dev_z)
        if sel > best_sel:
            best_sel, best_state, best_epoch = sel, copy.deepcopy(model.state_dict()), epoch
        losses = {"cycle": sums["cycle"] / n}
        for key, task in (("bt", "BT"), ("drl", "DRL"), ("dae", "DAE")):
            if task in tasks:
                losses[key] = sums[key] / n
        if semi.active:
            losses["supervised"] = sums["supervised"] / n
        rec = {"losses": losses, "selection": sel, "skipped": {"bt": skipped_bt, "drl": skipped_drl}}
        if "DRL" in tasks:
            rec["reward"] = _reward_stats(all_bundles)
        if acc is not None:
            rec["accuracy"] = acc
        if sink is not None:
            sink.write(PHASE_CYCLE, epoch, wall_clock=time.perf_counter() - t0, **rec)
        summary["epochs"].append(rec)
    model.load_state_dict(best_state)
    summary.update(best_epoch=best_epoch, best_selection=best_sel)
    return summary
