"""TOML run configuration.

Layout (every key optional; unspecified keys take the defaults shown by
``dpp show-config``)::

    seed = 0

    [data]
    depth = 3
    paraphrases_per_canonical = 8
    eval_fraction = 0.2

    [model]        # Hyperparams fields: emb_dim, hidden, dropout, lr, batch, beam, K, ...
    [noise]        # p_max, candidates, insert_fraction, ngram, enabled
    [train]        # epochs_pretrain, epochs_cycle, epochs_aux, semi_fraction, cycle_tasks, ...
    [baseline]     # epochs

Precedence: command-line flag > file value > default.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from dpp.errors import ConfigurationError
from dpp.net import Hyperparams
from dpp.noise import NoiseSpec
from dpp.train import TrainConfig


@dataclass
class DataConfig:
    depth: int = 3
    paraphrases_per_canonical: int = 8
    eval_fraction: float = 0.2
    labels_path: str = ""
    embeddings_path: str = ""

    def validate(self):
        if self.depth < 1:
            raise ConfigurationError("data.depth must be >= 1")
        if self.paraphrases_per_canonical < 1:
            raise ConfigurationError("data.paraphrases_per_canonical must be >= 1")
        if not 0 < self.eval_fraction < 1:
            raise ConfigurationError("data.eval_fraction must lie in (0, 1)")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline_epochs: int = 10
    source: str = ""

    @property
    def seed(self):
        return self.train.seed

    def to_dict(self):
        return {"seed": self.train.seed, "data": {f.name: getattr(self.data, f.name) for f in fields(self.data)},
                "train": self.train.to_dict(), "baseline": {"epochs": self.baseline_epochs}}


_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,)}


def _coerce(key_path, value, default):
    kind = type(default)
    if kind in (tuple, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{key_path}: expected a list, got {type(value).__name__}")
        return type(default)(value)
    if kind in (frozenset, set):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigurationError(f"{key_path}: expected a list of names")
        return frozenset(value)
    allowed = _TYPES.get(kind)
    if allowed is None:
        return value
    if isinstance(value, bool) and kind is not bool:
        raise ConfigurationError(f"{key_path}: expected {kind.__name__}, got bool")
    if not isinstance(value, allowed):
        raise ConfigurationError(f"{key_path}: expected {kind.__name__}, got {type(value).__name__}")
    return kind(value)


def _apply(obj, table: dict, section: str, aliases=None):
    aliases = aliases or {}
    names = {f.name for f in fields(obj)}
    for key, value in table.items():
        name = aliases.get(key, key)
        path = f"{section}.{key}" if section else key
        if name not in names or isinstance(getattr(obj, name), (Hyperparams, NoiseSpec)):
            raise ConfigurationError(f"{path}: unknown key")
        setattr(obj, name, _coerce(path, value, getattr(obj, name)))


def _validate_hp(hp: Hyperparams):
    checks = [("K", hp.K >= 1, ">= 1"), ("batch", hp.batch >= 1, ">= 1"), ("beam", hp.beam >= 1, ">= 1"),
              ("emb_dim", hp.emb_dim >= 1, ">= 1"), ("hidden", hp.hidden >= 1, ">= 1"),
              ("dropout", 0 <= hp.dropout < 1, "in [0, 1)"), ("lr", hp.lr > 0, "> 0"),
              ("init_range", hp.init_range > 0, "> 0"), ("max_decode_len", hp.max_decode_len >= 0, ">= 0"),
              ("attn_dim", hp.attn_dim >= 1, ">= 1"), ("grad_clip", hp.grad_clip >= 0, ">= 0")]
    for name, ok, rule in checks:
        if not ok:
            raise ConfigurationError(f"model.{name}: must be {rule} (got {getattr(hp, name)!r})")


def resolve(raw: dict, overrides: dict | None = None, source: str = "") -> Config:
    """Defaults, then the parsed file ``raw``, then ``overrides`` (flat keys such as ``seed``)."""
    raw = copy.deepcopy(raw)
    cfg_data = DataConfig()
    hp = Hyperparams()
    spec_kw = {}
    train_kw = {}
    unknown = set(raw) - {"seed", "data", "model", "noise", "train", "baseline"}
    if unknown:
        raise ConfigurationError(f"{sorted(unknown)[0]}: unknown key")
    for section in ("data", "model", "noise", "train", "baseline"):
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigurationError(f"{section}: expected a table")
    _apply(cfg_data, raw.get("data", {}), "data")
    attn_given = "attn_dim" in raw.get("model", {})
    _apply(hp, raw.get("model", {}), "model")
    if not attn_given:
        hp.attn_dim = hp.hidden
    _validate_hp(hp)
    defaults = NoiseSpec()
    for key, value in raw.get("noise", {}).items():
        if not hasattr(defaults, key):
            raise ConfigurationError(f"noise.{key}: unknown key")
        spec_kw[key] = _coerce(f"noise.{key}", value, getattr(defaults, key))
    try:
        spec = NoiseSpec(**spec_kw)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc)) from None
    tdef = TrainConfig()
    for key, value in raw.get("train", {}).items():
        name = {"cycle_tasks": "enabled_cycle_tasks", "lambda": "selection_lambda"}.get(key, key)
        if name in ("hp", "noise", "seed") or not hasattr(tdef, name):
            raise ConfigurationError(f"train.{key}: unknown key")
        train_kw[name] = _coerce(f"train.{key}", value, getattr(tdef, name))
    seed = raw.get("seed", 0)
    baseline_epochs = raw.get("baseline", {}).get("epochs", 10)
    for key in raw.get("baseline", {}):
        if key != "epochs":
            raise ConfigurationError(f"baseline.{key}: unknown key")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            seed = value
        elif key == "semi_fraction":
            train_kw["semi_fraction"] = float(value)
        elif key in ("labels_path", "embeddings_path"):
            setattr(cfg_data, key, str(value))
        else:
            raise ConfigurationError(f"{key}: unknown override")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigurationError("seed: expected int")
    if isinstance(baseline_epochs, bool) or not isinstance(baseline_epochs, int) or baseline_epochs < 0:
        raise ConfigurationError("baseline.epochs: expected a non-negative int")
    cfg_data.validate()
    tc = TrainConfig(hp=hp, noise=spec, seed=seed, **train_kw)
    return Config(cfg_data, tc, baseline_epochs, source)


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Read a TOML file (or nothing) and resolve it against the defaults."""
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    return resolve(raw, overrides, str(path or ""))


def dump_toml(cfg: Config) -> str:
    """Render a resolved configuration as TOML (round-trips through load_config)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple, frozenset, set)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    d = cfg.to_dict()
    t = dict(d["train"])
    hp, nz = t.pop("hp"), t.pop("noise")
    t.pop("seed")
    t["cycle_tasks"] = t.pop("enabled_cycle_tasks")
    t["lambda"] = t.pop("selection_lambda")
    out = [f"seed = {d['seed']}", ""]
    for name, table in (("data", d["data"]), ("model", hp), ("noise", nz), ("train", t),
                        ("baseline", d["baseline"])):
        out.append(f"[{name}]")
        out.extend(f"{k} = {fmt(v)}" for k, v in table.items())
        out.append("")
    return "\n".join(out)
