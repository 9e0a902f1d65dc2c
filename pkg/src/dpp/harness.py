"""Run orchestration: data generation, phase runners, checkpoints, manifests."""

from __future__ import annotations

import copy
import datetime as _dt
import json
import logging
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

import dpp
from dpp import domain, evalsuite, train, zoo
from dpp.config import Config, dump_toml
from dpp.errors import CheckpointError, ConfigurationError
from dpp.textstats import EmbeddingTable

log = logging.getLogger("dpp")

DECISIONS = {
    "grad_clip": "global norm 5.0",
    "attention": "additive, attn_dim = hidden unless set",
    "decoder_init": "s_0 = 0, no input feeding",
    "vocab_strategy": "separate natural / canonical decoder vocabularies, union encoder vocabulary",
    "selection_bleu": "sentence-level BLEU-4, mean over dev utterances",
    "selection_cadence": "once per epoch",
    "beam_tie_break": "earlier completion step, then hypothesis index",
    "epoch": "one pass over the larger corpus, smaller corpus cycled",
    "fluency_normalizer": "content tokens (end-of-sentence step not scored)",
}


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{dpp.__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return dpp.__version__


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, out: Path, command: str, cfg: Config):
        self.path = Path(out) / "manifest.json"
        self.data = {"command": command, "config_path": cfg.source, "config": cfg.to_dict(),
                     "seed": cfg.seed, "seeds": train.sub_seeds(cfg.seed), "version": version_string(),
                     "started": _now(), "finished": None, "status": "running", "output_dir": str(out),
                     "decisions": DECISIONS, "artifacts": []}
        self.flush()

    def add(self, *paths):
        for p in paths:
            self.data["artifacts"].append(str(p))

    def flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True, default=str) + "\n",
                             encoding="utf-8")

    def finish(self, status="ok", **extra):
        self.data.update(status=status, finished=_now(), **extra)
        missing = [a for a in self.data["artifacts"] if not Path(a).exists()]
        if status == "ok" and missing:
            raise RuntimeError(f"manifest names missing artifacts: {missing}")
        self.flush()


# ---------------------------------------------------------------------------
# World: data, vocabularies, embeddings
# ---------------------------------------------------------------------------


@dataclass
class World:
    corpora: domain.Corpora
    db: domain.Database
    vocabs: zoo.Vocabs
    emb: EmbeddingTable
    pairs: list


def load_labels(path) -> list:
    recs = domain.read_jsonl(path)
    gold = domain.gold_from_records(recs)
    if not gold:
        raise ConfigurationError(f"{path}: no labeled (utterance, canonical, lf) records")
    return gold


def build_world(cfg: Config) -> World:
    seeds = train.sub_seeds(cfg.seed)
    grammar = domain.default_grammar()
    grammar.validate()
    pairs = domain.enumerate_pairs(grammar, cfg.data.depth)
    corpora = domain.build_corpora(pairs, domain.default_rewrite_rules(), seeds["data"],
                                   cfg.data.paraphrases_per_canonical, cfg.data.eval_fraction)
    if cfg.data.labels_path:
        eval_texts = {g.natural.tokens for g in corpora.eval}
        labeled = load_labels(cfg.data.labels_path)
        corpora.semi_pool = [g for g in labeled if g.natural.tokens not in eval_texts]
    lf_seqs = [domain.lf_tokens(lf) for _, lf in pairs]
    vocabs = zoo.Vocabs.build(corpora.X, corpora.Z, lf_seqs)
    hp = cfg.train.hp
    if cfg.data.embeddings_path:
        emb = EmbeddingTable.load(cfg.data.embeddings_path, vocabs.src.content_tokens, hp.emb_dim, seeds["init"])
    else:
        emb = EmbeddingTable.random(vocabs.src.content_tokens, hp.emb_dim, seeds["init"])
    if not hp.max_decode_len:
        hp.max_decode_len = train.max_decode_len(hp, corpora.X, corpora.Z)
    return World(corpora, domain.default_database(), vocabs, emb, pairs)


def fresh_models(world: World, cfg: Config):
    return zoo.init_models(cfg.train.hp, world.vocabs, world.emb, train.sub_seeds(cfg.seed)["init"],
                           cfg.train.shared_encoder)


def phase_context(world: World, nsp, aux, cfg: Config) -> train.PhaseContext:
    c = world.corpora
    return train.PhaseContext(c.X, c.Z, nsp, world.emb, world.db, aux, c.eval, c.semi_pool,
                              cfg.train.hp.max_decode_len)


def save_data(world: World, out: Path) -> Path:
    d = Path(out) / "data"
    domain.save_corpora(world.corpora, d, world.db)
    return d


def _load(path, world: World, need=()):
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError(f"checkpoint directory not found: {path}")
    models = zoo.load_checkpoint(path, world.vocabs)
    for key in need:
        if key not in models:
            files = {"paraphrase": "E.bin/Dx.bin/Dz.bin", "nsp": "nsp.bin", "aux": "lmx.bin/lmz.bin/dis.bin"}
            raise CheckpointError(f"checkpoint {path} lacks {files[key]}")
    return models


def _save(models: dict, path: Path, world: World, cfg: Config, phase: str):
    zoo.save_checkpoint({**models, "vocabs": world.vocabs, "hp": cfg.train.hp}, path,
                        {"phase": phase, "seed": cfg.seed})
    return path


# ---------------------------------------------------------------------------
# Phase runners
# ---------------------------------------------------------------------------


def _setup_torch():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def run_gen_data(cfg: Config, out: Path) -> dict:
    world = build_world(cfg)
    d = save_data(world, out)
    c = world.corpora
    return {"data_dir": str(d), "pairs": len(world.pairs), "X": len(c.X), "Z": len(c.Z),
            "eval": len(c.eval), "semi_pool": len(c.semi_pool)}


def stage_aux(world, cfg, sink):
    para, nsp, aux = fresh_models(world, cfg)
    c = world.corpora
    train.pretrain_auxiliaries(c.X, c.Z, c.train_pairs, aux, nsp, cfg.train, sink)
    return para, nsp, aux


def stage_dae(world, cfg, para, nsp, aux, sink):
    return train.pretrain_dae(para, phase_context(world, nsp, aux, cfg), cfg.train, sink)


def stage_cycle(world, cfg, para, nsp, aux, sink):
    return train.cycle_learn(para, phase_context(world, nsp, aux, cfg), cfg.train, sink)


def stage_eval(world, cfg, para, nsp, out: Path | None, name="eval"):
    fp = evalsuite.config_fingerprint(cfg.to_dict())
    report = evalsuite.evaluate(para, nsp, world.db, world.corpora.eval, cfg.train.hp.beam, fingerprint=fp)
    if out is not None:
        report.write(out, name)
    return report


def run_pretrain_aux(cfg: Config, out: Path) -> dict:
    _setup_torch()
    world = build_world(cfg)
    sink = train.MetricsSink(out / "metrics.jsonl")
    para, nsp, aux = stage_aux(world, cfg, sink)
    ck = _save({"nsp": nsp, "aux": aux}, out / "checkpoints" / "aux", world, cfg, "aux")
    return {"checkpoint": str(ck), "aux": _aux_summary(aux)}


def _aux_summary(aux):
    return {k: {kk: vv for kk, vv in v.items() if kk != "history"} for k, v in aux.summaries.items()}


def run_pretrain_dae(cfg: Config, out: Path, checkpoint=None) -> dict:
    _setup_torch()
    world = build_world(cfg)
    sink = train.MetricsSink(out / "metrics.jsonl")
    para, _, _ = fresh_models(world, cfg)
    if checkpoint:
        models = _load(checkpoint, world, ("nsp", "aux"))
        nsp, aux = models["nsp"], models["aux"]
    else:
        _, nsp, aux = stage_aux(world, cfg, sink)
    summary = stage_dae(world, cfg, para, nsp, aux, sink)
    ck = _save({"paraphrase": para, "nsp": nsp, "aux": aux}, out / "checkpoints" / "dae", world, cfg, "dae")
    return {"checkpoint": str(ck), "best_selection": summary["best_selection"], "best_epoch": summary["best_epoch"]}


def run_cycle(cfg: Config, out: Path, checkpoint) -> dict:
    _setup_torch()
    if not checkpoint:
        raise ConfigurationError("cycle needs --checkpoint pointing at a DAE checkpoint")
    world = build_world(cfg)
    models = _load(checkpoint, world, ("paraphrase", "nsp", "aux"))
    para, nsp, aux = models["paraphrase"], models["nsp"], models["aux"]
    sink = train.MetricsSink(out / "metrics.jsonl")
    summary = stage_cycle(world, cfg, para, nsp, aux, sink)
    ck = _save({"paraphrase": para, "nsp": nsp, "aux": aux}, out / "checkpoints" / "final", world, cfg, "cycle")
    return {"checkpoint": str(ck), "best_selection": summary["best_selection"], "best_epoch": summary["best_epoch"]}


def run_train_all(cfg: Config, out: Path) -> dict:
    """aux -> DAE -> eval (DAE-only) -> cycle -> eval, with checkpoints after every phase."""
    _setup_torch()
    out = Path(out)
    manifest = RunManifest(out, "train-all", cfg)
    (out / "config.resolved.toml").write_text(dump_toml(cfg), encoding="utf-8")
    try:
        world = build_world(cfg)
        data_dir = save_data(world, out)
        sink = train.MetricsSink(out / "metrics.jsonl")
        para, nsp, aux = stage_aux(world, cfg, sink)
        ck_aux = _save({"nsp": nsp, "aux": aux}, out / "checkpoints" / "aux", world, cfg, "aux")
        dae = stage_dae(world, cfg, para, nsp, aux, sink)
        ck_dae = _save({"paraphrase": para, "nsp": nsp, "aux": aux}, out / "checkpoints" / "dae", world, cfg, "dae")
        rep_dae = stage_eval(world, cfg, para, nsp, out, "eval_dae")
        cyc = stage_cycle(world, cfg, para, nsp, aux, sink) if cfg.train.epochs_cycle > 0 else None
        ck_final = _save({"paraphrase": para, "nsp": nsp, "aux": aux}, out / "checkpoints" / "final", world, cfg,
                         "final")
        rep = stage_eval(world, cfg, para, nsp, out, "eval")
        from dpp import plotting
        figs = plotting.learning_curves(sink.records, out / "figures" / "learning_curves.png")
        result = {"aux": _aux_summary(aux), "dae_best_selection": dae["best_selection"],
                  "dae_best_epoch": dae["best_epoch"], "dae_accuracy": rep_dae.accuracy,
                  "cycle_best_selection": cyc["best_selection"] if cyc else None,
                  "cycle_best_epoch": cyc["best_epoch"] if cyc else None, "accuracy": rep.accuracy}
        (out / "summary.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        manifest.add(data_dir, out / "metrics.jsonl", ck_aux, ck_dae, ck_final, out / "eval.jsonl",
                     out / "eval_summary.txt", out / "eval_dae.jsonl", out / "summary.json", *figs)
        manifest.finish("ok", result=result)
        return result
    except BaseException as exc:
        manifest.finish("failed", error=f"{type(exc).__name__}: {exc}")
        raise


def run_eval(cfg: Config, out: Path, checkpoint) -> dict:
    _setup_torch()
    if not checkpoint:
        raise ConfigurationError("eval needs --checkpoint")
    world = build_world(cfg)
    models = _load(checkpoint, world, ("paraphrase", "nsp"))
    rep = stage_eval(world, cfg, models["paraphrase"], models["nsp"], out, "eval")
    return {"accuracy": rep.accuracy, "examples": len(rep.records), "report": str(Path(out) / "eval.jsonl")}


def run_dump_cases(cfg: Config, out: Path, checkpoint, n: int = 10) -> dict:
    if not checkpoint:
        raise ConfigurationError("dump-cases needs --checkpoint")
    world = build_world(cfg)
    models = _load(checkpoint, world, ("paraphrase", "nsp"))
    inputs = [g.natural for g in world.corpora.eval[:n]]
    path = Path(out) / "cases.txt"
    evalsuite.dump_cases(models["paraphrase"], models["nsp"], inputs, path, world.db)
    return {"cases": str(path), "n": len(inputs)}


def _pretrained_aux(world, cfg, cache: dict):
    """Auxiliaries depend only on data and seed; ablation rows share one copy."""
    if "aux" not in cache:
        _, nsp, aux = stage_aux(world, cfg, None)
        cache["aux"] = (nsp, aux)
    return cache["aux"]


def run_ablate(cfg: Config, out: Path, axis: str) -> dict:
    _setup_torch()
    out = Path(out)
    world = build_world(cfg)
    cache = {}
    nsp, aux = _pretrained_aux(world, cfg, cache)
    dae_cache = {}

    def dae_for(row_cfg):
        key = (evalsuite.config_fingerprint(row_cfg.noise.to_dict()), row_cfg.shared_encoder)
        if key not in dae_cache:
            c = Config(cfg.data, row_cfg, cfg.baseline_epochs, cfg.source)
            para, _, _ = fresh_models(world, c)
            summary = stage_dae(world, c, para, nsp, aux, None)
            dae_cache[key] = (copy.deepcopy(para.state_dict()), summary["best_selection"], c)
        return dae_cache[key]

    def runner(label, row_cfg):
        state, dae_sel, c = dae_for(row_cfg)
        para, _, _ = fresh_models(world, c)
        para.load_state_dict(state)
        sel = dae_sel
        if axis != "noise":
            sel = stage_cycle(world, c, para, nsp, aux, None)["best_selection"]
        rep = stage_eval(world, c, para, nsp, None)
        return rep.accuracy, sel

    rows = evalsuite.run_ablation(axis, cfg.train, runner)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"ablation_{axis}.csv"
    txt_path = out / f"ablation_{axis}.txt"
    csv_path.write_text(evalsuite.ablation_csv(rows), encoding="utf-8")
    titles = {"noise": "Noisy channels in DAE pre-training", "cycle": "Tasks in cycle learning",
              "shared_encoder": "Shared vs separate encoders"}
    txt_path.write_text(evalsuite.ablation_table(rows, titles[axis]), encoding="utf-8")
    from dpp import plotting
    fig = plotting.ablation_bars(rows, out / f"ablation_{axis}.png", titles[axis])
    return {"csv": str(csv_path), "table": str(txt_path), "figure": str(fig),
            "rows": [r.__dict__ for r in rows]}


def run_baseline(cfg: Config, out: Path, which: str = "wmd_two_stage", checkpoint=None) -> dict:
    _setup_torch()
    world = build_world(cfg)
    c = world.corpora
    hp = cfg.train.hp
    seed = train.sub_seeds(cfg.seed)["init"]
    if which.startswith("wmd"):
        if checkpoint:
            nsp = _load(checkpoint, world, ("nsp",))["nsp"]
        else:
            _, nsp, _ = stage_aux(world, cfg, None)
        mode = "one_stage" if which == "wmd_one_stage" else "two_stage"
        rep = evalsuite.wmd_samples_baseline(c.X, c.Z, c.train_pairs, world.emb, c.eval, nsp, world.db, hp,
                                             world.vocabs, mode, cfg.baseline_epochs, seed)
    elif which == "embed":
        rep = evalsuite.embed_baseline(c.train_pairs, c.eval, world.db, hp, world.vocabs, cfg.baseline_epochs, seed)
    elif which == "multitask_dae":
        rep = evalsuite.multitask_dae_baseline(c.train_pairs, c.X, c.eval, world.db, hp, world.vocabs,
                                               cfg.train.noise, world.emb, c.Z, cfg.baseline_epochs, seed)
    else:
        raise ConfigurationError(f"unknown baseline {which!r}")
    rep.write(out, f"baseline_{which}")
    return {"baseline": which, "accuracy": rep.accuracy}


# ---------------------------------------------------------------------------
# Directional study (the unsupervised / semi-supervised / baseline comparison)
# ---------------------------------------------------------------------------


def directional_study(cfg: Config, out: Path | None = None) -> dict:
    """Runs every configuration needed for the headline comparison under one seed:
    DAE (all noise), DAE (no noise), cycle learning, WmdSamples two-stage, and the
    fully labeled semi-supervised variant. Auxiliaries are trained once and shared.

    The semi-supervised arm starts from the same DAE checkpoint as the unsupervised
    cycle run, so the two differ only in the labeled mix during cycle learning.
    Secondary arms skip the per-epoch accuracy log, which only feeds the curves."""
    _setup_torch()
    world = build_world(cfg)
    sink = train.MetricsSink(out / "metrics.jsonl") if out else None
    t0 = time.perf_counter()
    nsp, aux = _pretrained_aux(world, cfg, {})
    res = {"aux": _aux_summary(aux)}
    timings = {"aux": time.perf_counter() - t0}

    para, _, _ = fresh_models(world, cfg)
    dae = stage_dae(world, cfg, para, nsp, aux, sink)
    res["dae_selection"] = dae["best_selection"]
    res["dae_accuracy"] = stage_eval(world, cfg, para, nsp, out, "eval_dae").accuracy
    dae_state = copy.deepcopy(para.state_dict())
    timings["dae"] = time.perf_counter() - t0 - sum(timings.values())
    cyc = stage_cycle(world, cfg, para, nsp, aux, sink)
    res["cycle_selection"] = cyc["best_selection"]
    res["cycle_accuracy"] = stage_eval(world, cfg, para, nsp, out, "eval").accuracy
    timings["cycle"] = time.perf_counter() - t0 - sum(timings.values())

    quiet = copy.deepcopy(cfg)
    quiet.train.noise.enabled = frozenset()
    quiet.train.track_accuracy = False
    para0, _, _ = fresh_models(world, quiet)
    res["dae_none_selection"] = stage_dae(world, quiet, para0, nsp, aux, None)["best_selection"]
    timings["dae_none"] = time.perf_counter() - t0 - sum(timings.values())

    c = world.corpora
    wmd = evalsuite.wmd_samples_baseline(c.X, c.Z, c.train_pairs, world.emb, c.eval, nsp, world.db,
                                         cfg.train.hp, world.vocabs, "two_stage", cfg.baseline_epochs,
                                         train.sub_seeds(cfg.seed)["init"])
    res["wmd_two_stage_accuracy"] = wmd.accuracy
    timings["wmd"] = time.perf_counter() - t0 - sum(timings.values())

    semi = copy.deepcopy(cfg)
    semi.train.semi_fraction = 1.0
    semi.train.track_accuracy = False
    para1, _, _ = fresh_models(world, semi)
    para1.load_state_dict(dae_state)
    stage_cycle(world, semi, para1, nsp, aux, None)
    res["semi_accuracy"] = stage_eval(world, semi, para1, nsp, None).accuracy
    timings["semi"] = time.perf_counter() - t0 - sum(timings.values())
    res["seconds"] = {k: round(v, 1) for k, v in timings.items()}
    if out is not None:
        (Path(out) / "study.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if sink is not None:
            from dpp import plotting
            plotting.learning_curves(sink.records, Path(out) / "figures" / "learning_curves.png")
    return res
