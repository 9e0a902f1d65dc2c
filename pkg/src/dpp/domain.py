"""Synthetic basketball domain: schema, logical forms, executor, grammar,
naturalizer and corpus construction.

The grammar enumerates (canonical utterance, logical form) pairs; the
naturalizer rewrites canonical utterances into unpaired natural-language
style utterances used as the unlabeled corpus.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from dpp.errors import ConfigurationError
from dpp.textstats import Utterance

# ---------------------------------------------------------------------------
# Database
# ---------------------------------------------------------------------------

NUMERIC = "number"


@dataclass(frozen=True)
class Entity:
    id: str
    type: str
    attributes: dict = field(default_factory=dict, hash=False, compare=True)


@dataclass
class Database:
    entities: list
    schema: dict  # attribute -> (domain type, range type)

    def __post_init__(self):
        ids = [e.id for e in self.entities]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("duplicate entity ids in database")
        self._by_id = {e.id: e for e in self.entities}
        for e in self.entities:
            for attr, value in e.attributes.items():
                if attr not in self.schema:
                    raise ConfigurationError(f"entity {e.id} carries attribute {attr!r} absent from the schema")
                dom, rng = self.schema[attr]
                if dom != e.type:
                    raise ConfigurationError(f"attribute {attr!r} is not defined for type {e.type}")
                if rng not in (NUMERIC, "string") and value not in self._by_id:
                    raise ConfigurationError(f"{e.id}.{attr} references unknown entity {value!r}")

    def get(self, entity_id):
        return self._by_id[entity_id]

    def of_type(self, type_):
        return [e for e in self.entities if e.type == type_]

    @property
    def types(self):
        return sorted({e.type for e in self.entities})


def default_database() -> Database:
    """Two teams and eighteen players; every (position, team) cell is non-empty."""
    schema = {
        "num_points": ("player", NUMERIC),
        "num_steals": ("player", NUMERIC),
        "position": ("player", "string"),
        "plays_for": ("player", "team"),
    }
    rows = [
        # name, team, position, points, steals
        ("kobe_bryant", "lakers", "guard", 28, 4),
        ("derek_fisher", "lakers", "guard", 9, 2),
        ("jordan_farmar", "lakers", "guard", 4, 0),
        ("lamar_odom", "lakers", "forward", 11, 1),
        ("ron_artest", "lakers", "forward", 12, 6),
        ("luke_walton", "lakers", "forward", 2, 3),
        ("pau_gasol", "lakers", "center", 17, 5),
        ("andrew_bynum", "lakers", "center", 15, 12),
        ("dj_mbenga", "lakers", "center", 3, 7),
        ("rajon_rondo", "celtics", "guard", 13, 11),
        ("ray_allen", "celtics", "guard", 16, 3),
        ("tony_allen", "celtics", "guard", 5, 8),
        ("paul_pierce", "celtics", "forward", 19, 10),
        ("kevin_garnett", "celtics", "forward", 14, 2),
        ("glen_davis", "celtics", "forward", 6, 1),
        ("kendrick_perkins", "celtics", "center", 10, 0),
        ("rasheed_wallace", "celtics", "center", 8, 4),
        ("shelden_williams", "celtics", "center", 1, 9),
    ]
    entities = [Entity("lakers", "team", {}), Entity("celtics", "team", {})]
    for name, team, pos, pts, stl in rows:
        entities.append(Entity(name, "player", {
            "num_points": pts, "num_steals": stl, "position": pos, "plays_for": team}))
    return Database(entities, schema)


# ---------------------------------------------------------------------------
# Logical forms
# ---------------------------------------------------------------------------

CMPS = ("=", ">=", "<=")


@dataclass(frozen=True)
class TypeFilter:
    type: str


@dataclass(frozen=True)
class Filter:
    set: Any
    attr: str
    cmp: str
    value: Any


@dataclass(frozen=True)
class Superlative:
    attr: str
    direction: str  # max | min
    set: Any


@dataclass(frozen=True)
class Count:
    set: Any


@dataclass(frozen=True)
class And:
    left: Any
    right: Any


LogicalForm = Any  # union of the node classes above


def serialize(lf) -> str:
    if isinstance(lf, TypeFilter):
        return f"(type {lf.type})"
    if isinstance(lf, Filter):
        return f"(filter {serialize(lf.set)} ({lf.cmp} {lf.attr} {lf.value}))"
    if isinstance(lf, Superlative):
        return f"(superlative {lf.attr} {lf.direction} {serialize(lf.set)})"
    if isinstance(lf, Count):
        return f"(count {serialize(lf.set)})"
    if isinstance(lf, And):
        return f"(and {serialize(lf.left)} {serialize(lf.right)})"
    raise TypeError(f"not a logical form node: {lf!r}")


def lf_tokens(lf) -> list:
    """Token sequence fed to the naive parser: parentheses split off."""
    return serialize(lf).replace("(", " ( ").replace(")", " ) ").split()


class ParseError(ValueError):
    pass


def _atom(tok):
    return int(tok) if re.fullmatch(r"-?\d+", tok) else tok


def parse_lf(text) -> LogicalForm:
    """Inverse of :func:`serialize`; accepts a string or a token list."""
    if isinstance(text, str):
        toks = text.replace("(", " ( ").replace(")", " ) ").split()
    else:
        toks = list(text)
    pos = 0

    def expect(tok):
        nonlocal pos
        if pos >= len(toks) or toks[pos] != tok:
            got = toks[pos] if pos < len(toks) else "<end>"
            raise ParseError(f"expected {tok!r} at {pos}, got {got!r}")
        pos += 1

    def word():
        nonlocal pos
        if pos >= len(toks) or toks[pos] in ("(", ")"):
            raise ParseError(f"expected atom at {pos}")
        pos += 1
        return toks[pos - 1]

    def node():
        nonlocal pos
        expect("(")
        head = word()
        if head == "type":
            out = TypeFilter(word())
        elif head == "filter":
            s = node()
            expect("(")
            cmp = word()
            if cmp not in CMPS:
                raise ParseError(f"unknown comparator {cmp!r}")
            attr = word()
            out = Filter(s, attr, cmp, _atom(word()))
            expect(")")
        elif head == "superlative":
            attr = word()
            direction = word()
            if direction not in ("max", "min"):
                raise ParseError(f"unknown superlative direction {direction!r}")
            out = Superlative(attr, direction, node())
        elif head == "count":
            out = Count(node())
        elif head == "and":
            out = And(node(), node())
        else:
            raise ParseError(f"unknown node kind {head!r}")
        expect(")")
        return out

    lf = node()
    if pos != len(toks):
        raise ParseError(f"trailing tokens after position {pos}")
    return lf


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExecutionError:
    """Execution failure as a value; feeds the 0/1 executability reward."""
    message: str
    node: str

    def __bool__(self):
        return False


def execute(lf, db: Database):
    """Denotation of ``lf``: frozenset of entity ids, an int, or an ExecutionError."""
    try:
        return _exec(lf, db)
    except _Fail as exc:
        return ExecutionError(exc.args[0], serialize(exc.args[1]))


class _Fail(Exception):
    pass


def _exec_set(node, db, ctx):
    val = _exec(node, db)
    if not isinstance(val, frozenset):
        raise _Fail(f"{ctx} over non-set", node)
    return val


def _exec(lf, db):
    if isinstance(lf, TypeFilter):
        if lf.type not in db.types:
            raise _Fail(f"unknown type {lf.type}", lf)
        return frozenset(e.id for e in db.of_type(lf.type))
    if isinstance(lf, Filter):
        members = _exec_set(lf.set, db, "filter")
        if lf.attr not in db.schema:
            raise _Fail(f"unknown attribute {lf.attr}", lf)
        dom, rng = db.schema[lf.attr]
        if lf.cmp != "=" and rng != NUMERIC:
            raise _Fail(f"comparison {lf.cmp} on non-numeric attribute {lf.attr}", lf)
        if rng == NUMERIC and not isinstance(lf.value, int):
            raise _Fail(f"non-numeric value for {lf.attr}", lf)
        keep = []
        for eid in members:
            ent = db.get(eid)
            if ent.type != dom:
                raise _Fail(f"attribute {lf.attr} undefined for type {ent.type}", lf)
            v = ent.attributes[lf.attr]
            if (lf.cmp == "=" and v == lf.value) or (lf.cmp == ">=" and v >= lf.value) \
                    or (lf.cmp == "<=" and v <= lf.value):
                keep.append(eid)
        return frozenset(keep)
    if isinstance(lf, Superlative):
        members = _exec_set(lf.set, db, "superlative")
        if lf.attr not in db.schema or db.schema[lf.attr][1] != NUMERIC:
            raise _Fail(f"superlative on non-numeric attribute {lf.attr}", lf)
        if not members:
            raise _Fail("superlative over empty set", lf)
        dom = db.schema[lf.attr][0]
        if any(db.get(e).type != dom for e in members):
            raise _Fail(f"attribute {lf.attr} undefined for some members", lf)
        values = {e: db.get(e).attributes[lf.attr] for e in members}
        best = max(values.values()) if lf.direction == "max" else min(values.values())
        return frozenset(e for e, v in values.items() if v == best)
    if isinstance(lf, Count):
        return len(_exec_set(lf.set, db, "count"))
    if isinstance(lf, And):
        return _exec_set(lf.left, db, "and") & _exec_set(lf.right, db, "and")
    raise _Fail("unknown node", lf)


def denotations_match(pred, gold) -> bool:
    """Set equality for entity sets, exact equality for integers; errors never match."""
    if isinstance(pred, ExecutionError) or isinstance(gold, ExecutionError) or pred is None:
        return False
    if isinstance(pred, frozenset) != isinstance(gold, frozenset):
        return False
    return pred == gold


def denotation_to_json(den):
    if isinstance(den, ExecutionError):
        return {"error": den.message}
    if isinstance(den, frozenset):
        return sorted(den)
    return den


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrammarRule:
    """``rhs`` items: ``$X`` nonterminal, ``@cat`` lexicon slot, anything else a terminal.

    ``action`` receives the semantic values of the nonterminals and lexicon
    slots, in order, and returns the semantic value of the left-hand side.
    """
    lhs: str
    rhs: tuple
    action: Callable


@dataclass
class Grammar:
    rules: list
    lexicon: dict = field(default_factory=dict)  # category -> [(words tuple, value)]
    start: str = "$ROOT"

    def rules_for(self, symbol):
        return [r for r in self.rules if r.lhs == symbol]

    def validate(self):
        defined = {r.lhs for r in self.rules}
        if self.start not in defined:
            raise ConfigurationError(f"start symbol {self.start} has no rules")
        for r in self.rules:
            for item in r.rhs:
                if item.startswith("$") and item not in defined:
                    raise ConfigurationError(f"unreachable nonterminal {item} (no rules expand it)")
                if item.startswith("@") and item[1:] not in self.lexicon:
                    raise ConfigurationError(f"unknown lexicon category {item}")


def enumerate_pairs(grammar: Grammar, depth_bound: int):
    """All distinct (canonical utterance, logical form) derivations up to ``depth_bound``.

    Depth counts nested rule applications; lexicon slots do not add depth.
    Returned in lexicographic order of the serialized logical form.
    """
    grammar.validate()
    memo = {}

    def derive(symbol, depth):
        if depth < 1:
            return []
        key = (symbol, depth)
        if key in memo:
            return memo[key]
        out = []
        for rule in grammar.rules_for(symbol):
            options = []
            for item in rule.rhs:
                if item.startswith("$"):
                    options.append([(toks, val, True) for toks, val in derive(item, depth - 1)])
                elif item.startswith("@"):
                    options.append([(words, val, True) for words, val in grammar.lexicon[item[1:]]])
                else:
                    options.append([((item,), None, False)])
            for combo in itertools.product(*options):
                toks = tuple(t for part in combo for t in part[0])
                args = [part[1] for part in combo if part[2]]
                val = rule.action(*args)
                if val is not None:
                    out.append((toks, val))
        memo[key] = out
        return out

    by_utt = {}
    for toks, lf in derive(grammar.start, depth_bound):
        prev = by_utt.get(toks)
        if prev is not None and prev != lf:
            raise ConfigurationError(
                f"ambiguous grammar: {' '.join(toks)!r} derives {serialize(prev)} and {serialize(lf)}")
        by_utt[toks] = lf
    pairs = [(Utterance(toks, "canonical"), lf) for toks, lf in by_utt.items()]
    pairs.sort(key=lambda p: (serialize(p[1]), p[0].tokens))
    return pairs


def default_grammar() -> Grammar:
    player = TypeFilter("player")
    lexicon = {
        "type": [(("player",), "player")],
        "numattr": [(("number", "of", "points"), "num_points"),
                    (("number", "of", "steals"), "num_steals")],
        "num": [(("3",), 3), (("5",), 5), (("10",), 10)],
        "position": [(("guard",), "guard"), (("forward",), "forward"), (("center",), "center")],
        "team": [(("lakers",), "lakers"), (("celtics",), "celtics")],
    }
    rules = [
        GrammarRule("$ROOT", ("$PSET",), lambda s: s),
        GrammarRule("$ROOT", ("number", "of", "$PSET"), Count),
        GrammarRule("$ROOT", ("$TSET",), lambda s: s),
        GrammarRule("$ROOT", ("number", "of", "$TSET"), Count),
        GrammarRule("$TSET", ("team",), lambda: TypeFilter("team")),
        GrammarRule("$PSET", ("@type",), TypeFilter),
        GrammarRule("$PSET", ("player", "whose", "@numattr", "is", "at", "least", "@num"),
                    lambda a, n: Filter(player, a, ">=", n)),
        GrammarRule("$PSET", ("player", "whose", "@numattr", "is", "at", "most", "@num"),
                    lambda a, n: Filter(player, a, "<=", n)),
        GrammarRule("$PSET", ("player", "whose", "position", "is", "@position"),
                    lambda p: Filter(player, "position", "=", p)),
        GrammarRule("$PSET", ("player", "whose", "team", "is", "@team"),
                    lambda t: Filter(player, "plays_for", "=", t)),
        GrammarRule("$PSET", ("player", "whose", "position", "is", "@position", "and", "whose",
                              "team", "is", "@team"),
                    lambda p, t: And(Filter(player, "position", "=", p),
                                     Filter(player, "plays_for", "=", t))),
        GrammarRule("$PSET", ("$PSET", "that", "has", "the", "largest", "@numattr"),
                    lambda s, a: Superlative(a, "max", s)),
        GrammarRule("$PSET", ("$PSET", "that", "has", "the", "smallest", "@numattr"),
                    lambda s, a: Superlative(a, "min", s)),
    ]
    return Grammar(rules, lexicon)


# ---------------------------------------------------------------------------
# Naturalizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewriteRule:
    pattern: str
    alternatives: tuple

    def matches(self, text):
        return re.search(self.pattern, text) is not None

    def apply(self, text, alternative):
        return re.sub(self.pattern, alternative, text, count=1)


# the head noun sits at the start, possibly behind a question/command prefix
_HEAD = r"(^|^number of |how many |count the |total number of |show me |list |find |what are )"


def default_rewrite_rules() -> list:
    R = RewriteRule
    return [
        R(r"^number of (.+)$", (r"how many \1", r"how many \1 are there", r"count the \1",
                                r"total number of \1")),
        R(_HEAD + r"player\b", (r"\1players", r"\1all players", r"\1every player")),
        R(_HEAD + r"team\b", (r"\1teams", r"\1all teams")),
        R(r"\bwhose number of (steals|points) is at least (\d+)",
          (r"with at least \2 \1", r"who has gotten \2 or more \1", r"with \2 or more \1",
           r"having \2 \1 or more")),
        R(r"\bwhose number of (steals|points) is at most (\d+)",
          (r"with at most \2 \1", r"with \2 or fewer \1", r"who has gotten \2 or less \1",
           r"having no more than \2 \1")),
        R(r"\bwhose position is (\w+)", (r"who plays \1", r"playing \1", r"who is a \1",
                                          r"at the \1 position")),
        R(r"\bwhose team is (\w+)", (r"on the \1", r"who plays for \1", r"from the \1",
                                      r"on team \1")),
        R(r"\bthat has the largest number of (\w+)",
          (r"with the most \1", r"who has the most \1", r"with the highest number of \1",
           r"leading in \1")),
        R(r"\bthat has the smallest number of (\w+)",
          (r"with the fewest \1", r"who has the least \1", r"with the lowest number of \1")),
        R(r"^(?!number of|how many|count the|total number of)(.+)$", (r"show me \1", r"list \1", r"find \1", r"what are \1")),
        R(r"\bwhose position is (\w+) and whose team is (\w+)",
          (r"whose team is \2 and whose position is \1",)),
        R(r"\bwhose (position|team) is\b", (r"whose \1",)),
    ]


def naturalize(canonical: Utterance, rules: Sequence[RewriteRule], rng: np.random.Generator) -> Utterance:
    """Rewrite a canonical utterance with 1-3 randomly chosen matching rules."""
    text = " ".join(canonical.tokens)
    if not rules:
        return Utterance(canonical.tokens, "natural")
    n_apply = int(rng.integers(1, 4))
    used = set()
    for _ in range(n_apply):
        live = [i for i, r in enumerate(rules) if i not in used and r.matches(text)]
        if not live:
            break
        idx = live[int(rng.integers(len(live)))]
        rule = rules[idx]
        alt = rule.alternatives[int(rng.integers(len(rule.alternatives)))]
        text = rule.apply(text, alt)
        used.add(idx)
    return Utterance(tuple(text.split()), "natural")


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoldPair:
    natural: Utterance
    canonical: Utterance
    lf: Any


@dataclass
class Corpora:
    X: list
    Z: list
    eval: list
    semi_pool: list
    train_pairs: list  # (canonical, lf) pairs of the train split; grammar-generated, unlabeled wrt X
    eval_pairs_zy: list


def split_count(n: int, eval_fraction: float) -> int:
    if not 0 < eval_fraction < 1:
        raise ConfigurationError("eval_fraction must lie strictly between 0 and 1")
    k = math.floor(eval_fraction * n)
    if k < 1:
        raise ConfigurationError(f"eval_fraction={eval_fraction} leaves zero eval pairs out of {n}")
    if n - k < 1:
        raise ConfigurationError(f"eval_fraction={eval_fraction} leaves zero training pairs")
    return k


def _paraphrases(canonical, rules, rng, n):
    seen, out = set(), []
    for _ in range(4 * n):
        u = naturalize(canonical, rules, rng)
        if u.tokens not in seen:
            seen.add(u.tokens)
            out.append(u)
        if len(out) == n:
            break
    return out


def build_corpora(pairs, rules, seed: int, paraphrases_per_canonical: int = 8,
                  eval_fraction: float = 0.2) -> Corpora:
    """Split by logical form, naturalize, and discard the X/Z alignment."""
    n_eval = split_count(len(pairs), eval_fraction)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    eval_idx = set(order[:n_eval].tolist())
    train = [p for i, p in enumerate(pairs) if i not in eval_idx]
    held = [p for i, p in enumerate(pairs) if i in eval_idx]

    eval_gold = []
    for z, lf in held:
        for x in _paraphrases(z, rules, rng, paraphrases_per_canonical):
            eval_gold.append(GoldPair(x, z, lf))
    eval_texts = {g.natural.tokens for g in eval_gold} | {g.canonical.tokens for g in eval_gold}

    semi = []
    for z, lf in train:
        for x in _paraphrases(z, rules, rng, paraphrases_per_canonical):
            if x.tokens not in eval_texts:
                semi.append(GoldPair(x, z, lf))
    X = [g.natural for g in semi]
    Z = [z for z, _ in train if z.tokens not in eval_texts]
    X = [X[i] for i in rng.permutation(len(X))]
    Z = [Z[i] for i in rng.permutation(len(Z))]
    return Corpora(X, Z, eval_gold, semi, list(train), list(held))


# ---------------------------------------------------------------------------
# JSONL emission
# ---------------------------------------------------------------------------


def write_jsonl(path, records: Iterable[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def utterance_record(u: Utterance) -> dict:
    return {"kind": u.kind, "tokens": " ".join(u.tokens)}


def pair_record(gold: GoldPair, db: Database | None = None) -> dict:
    rec = {"kind": "pair", "tokens": " ".join(gold.natural.tokens),
           "canonical": " ".join(gold.canonical.tokens), "lf": serialize(gold.lf)}
    if db is not None:
        rec["denotation"] = denotation_to_json(execute(gold.lf, db))
    return rec


def zy_record(z: Utterance, lf, db: Database | None = None) -> dict:
    rec = {"kind": "pair", "tokens": " ".join(z.tokens), "lf": serialize(lf)}
    if db is not None:
        rec["denotation"] = denotation_to_json(execute(lf, db))
    return rec


def utterances_from_records(records, kind) -> list:
    return [Utterance.from_text(r["tokens"], kind) for r in records if r["kind"] in (kind, "pair")]


def gold_from_records(records) -> list:
    out = []
    for r in records:
        if r["kind"] != "pair" or "canonical" not in r:
            continue
        out.append(GoldPair(Utterance.from_text(r["tokens"], "natural"),
                            Utterance.from_text(r["canonical"], "canonical"), parse_lf(r["lf"])))
    return out


def save_corpora(corpora: Corpora, directory, db: Database | None = None):
    d = Path(directory)
    write_jsonl(d / "X.jsonl", (utterance_record(u) for u in corpora.X))
    write_jsonl(d / "Z.jsonl", (utterance_record(u) for u in corpora.Z))
    write_jsonl(d / "eval.jsonl", (pair_record(g, db) for g in corpora.eval))
    write_jsonl(d / "semi.jsonl", (pair_record(g, db) for g in corpora.semi_pool))
    write_jsonl(d / "zy_train.jsonl", (zy_record(z, lf, db) for z, lf in corpora.train_pairs))


def load_corpora(directory) -> Corpora:
    d = Path(directory)
    X = utterances_from_records(read_jsonl(d / "X.jsonl"), "natural")
    Z = utterances_from_records(read_jsonl(d / "Z.jsonl"), "canonical")
    ev = gold_from_records(read_jsonl(d / "eval.jsonl"))
    semi = gold_from_records(read_jsonl(d / "semi.jsonl")) if (d / "semi.jsonl").exists() else []
    zy = [(Utterance.from_text(r["tokens"], "canonical"), parse_lf(r["lf"]))
          for r in read_jsonl(d / "zy_train.jsonl")]
    held = sorted({(g.canonical.tokens, serialize(g.lf)) for g in ev})
    held_pairs = [(Utterance(t, "canonical"), parse_lf(s)) for t, s in held]
    return Corpora(X, Z, ev, semi, zy, held_pairs)
