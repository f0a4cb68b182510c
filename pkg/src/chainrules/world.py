"""
Synthetic compositional worlds with a known rule set.

The default world is a forest of genealogies.  Its primitive facts (parents,
children, spouses) are saturated with kinship rules to derive siblings,
grandparents, uncles and aunts.  Test queries are long relation paths over
fresh entities whose single derivable head is the gold label.
"""

import logging
import os

from collections import defaultdict
from dataclasses import dataclass
from typing import (
    DefaultDict,
    Dict,
    FrozenSet,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import networkx as nx
import numpy as np

from chainrules import kg as kg_store
from chainrules.kg import Kg, NameTriple, RelationVocabulary
from chainrules.miner import Rule, write_rules
from chainrules.reasoner import InductiveQuery


_LOGGER = logging.getLogger(__name__)

Fact = Tuple[int, str, int]


class WorldError(RuntimeError):
    pass


class GroundRule(NamedTuple):
    head: str
    body: Tuple[str, ...]

    def __str__(self) -> str:
        return "%s <- %s" % (self.head, " ^ ".join(self.body))


PRIMITIVES = (
    "hasMother",
    "hasFather",
    "hasSon",
    "hasDaughter",
    "hasHusband",
    "hasWife",
)
DERIVED = (
    "hasBrother",
    "hasSister",
    "hasGrandma",
    "hasGrandpa",
    "hasUncle",
    "hasAunt",
)
FAMILY_RELATIONS = PRIMITIVES + DERIVED


def _r(head: str, *body: str) -> GroundRule:
    return GroundRule(head, tuple(body))


# Read "x hasMother y" as "y is the mother of x".  Every rule holds in a
# genealogy of monogamous couples whose children share both parents, once
# self-loops are excluded.
FAMILY_RULES = (
    _r("hasGrandma", "hasMother", "hasMother"),
    _r("hasGrandma", "hasFather", "hasMother"),
    _r("hasGrandpa", "hasMother", "hasFather"),
    _r("hasGrandpa", "hasFather", "hasFather"),
    _r("hasFather", "hasMother", "hasHusband"),
    _r("hasMother", "hasFather", "hasWife"),
    _r("hasBrother", "hasMother", "hasSon"),
    _r("hasBrother", "hasFather", "hasSon"),
    _r("hasSister", "hasMother", "hasDaughter"),
    _r("hasSister", "hasFather", "hasDaughter"),
    _r("hasBrother", "hasBrother", "hasBrother"),
    _r("hasBrother", "hasSister", "hasBrother"),
    _r("hasSister", "hasSister", "hasSister"),
    _r("hasSister", "hasBrother", "hasSister"),
    _r("hasMother", "hasBrother", "hasMother"),
    _r("hasMother", "hasSister", "hasMother"),
    _r("hasFather", "hasBrother", "hasFather"),
    _r("hasFather", "hasSister", "hasFather"),
    _r("hasUncle", "hasMother", "hasBrother"),
    _r("hasUncle", "hasFather", "hasBrother"),
    _r("hasAunt", "hasMother", "hasSister"),
    _r("hasAunt", "hasFather", "hasSister"),
    _r("hasSon", "hasHusband", "hasSon"),
    _r("hasSon", "hasWife", "hasSon"),
    _r("hasDaughter", "hasHusband", "hasDaughter"),
    _r("hasDaughter", "hasWife", "hasDaughter"),
    _r("hasSon", "hasSon", "hasBrother"),
    _r("hasSon", "hasDaughter", "hasBrother"),
    _r("hasDaughter", "hasSon", "hasSister"),
    _r("hasDaughter", "hasDaughter", "hasSister"),
    _r("hasGrandma", "hasBrother", "hasGrandma"),
    _r("hasGrandma", "hasSister", "hasGrandma"),
    _r("hasGrandpa", "hasBrother", "hasGrandpa"),
    _r("hasGrandpa", "hasSister", "hasGrandpa"),
    _r("hasUncle", "hasBrother", "hasUncle"),
    _r("hasUncle", "hasSister", "hasUncle"),
    _r("hasAunt", "hasBrother", "hasAunt"),
    _r("hasAunt", "hasSister", "hasAunt"),
    _r("hasUncle", "hasMother", "hasMother", "hasSon"),
    _r("hasUncle", "hasMother", "hasFather", "hasSon"),
    _r("hasAunt", "hasFather", "hasMother", "hasDaughter"),
    _r("hasAunt", "hasFather", "hasFather", "hasDaughter"),
    _r("hasGrandpa", "hasMother", "hasMother", "hasHusband"),
    _r("hasGrandma", "hasFather", "hasFather", "hasWife"),
)

BASE_GRAPHS = ("family", "random")


@dataclass(frozen=True)
class WorldSpec:
    relations: Tuple[str, ...] = FAMILY_RELATIONS
    rules: Tuple[GroundRule, ...] = FAMILY_RULES
    entities: int = 3000
    # "family" builds genealogies over FAMILY_RELATIONS; "random" draws
    # avg_degree random edges per entity over the relations no rule derives.
    base_graph: str = "family"
    avg_degree: float = 2.0
    founders: int = 20
    max_children: int = 4
    marriage_rate: float = 0.8
    test_hops: Tuple[int, int] = (5, 10)
    queries_per_hop: int = 100
    distractor_rate: float = 0.1
    kgc_holdout: float = 0.05
    max_rounds: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        known = set(self.relations)
        for rule in self.rules:
            if not 2 <= len(rule.body) <= 3:
                raise WorldError(f"rule {rule} must have a body of length 2 or 3")
            unknown = ({rule.head} | set(rule.body)) - known
            if unknown:
                raise WorldError(f"rule {rule} uses unknown relations {sorted(unknown)}")
        if self.base_graph not in BASE_GRAPHS:
            raise WorldError(f"base_graph must be one of {BASE_GRAPHS}")
        if self.base_graph == "family" and not set(PRIMITIVES) <= known:
            raise WorldError("family base graph needs the primitive kinship relations")
        if self.entities < 2:
            raise WorldError("a world needs at least two entities")
        lo, hi = self.test_hops
        if not 2 <= lo <= hi:
            raise WorldError("test_hops must satisfy 2 <= low <= high")
        for name in ("distractor_rate", "kgc_holdout", "marriage_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise WorldError(f"{name} must be in [0, 1]")
        if self.queries_per_hop < 0 or self.max_rounds < 1:
            raise WorldError("queries_per_hop and max_rounds must not be negative")

    def primitives(self) -> Tuple[str, ...]:
        heads = {r.head for r in self.rules}
        if self.base_graph == "family":
            return PRIMITIVES
        return tuple(r for r in self.relations if r not in heads)


class World(NamedTuple):
    train: Kg
    test_triples: List[NameTriple]
    queries: List[Tuple[Tuple[str, ...], str]]
    rules: Tuple[GroundRule, ...]
    query_entities: FrozenSet[str]


def _rule_cycle(rules: Sequence[GroundRule]) -> str:
    graph = nx.DiGraph()
    for rule in rules:
        for rel in rule.body:
            graph.add_edge(rel, rule.head)
    try:
        edges = nx.find_cycle(graph)
    except nx.NetworkXNoCycle:
        return ", ".join(str(r) for r in rules)
    return " -> ".join([edges[0][0]] + [v for _, v in edges])


def saturate(
    facts: Set[Fact],
    rules: Sequence[GroundRule],
    max_rounds: int = 64,
    allow_self_loops: bool = False,
) -> Set[Fact]:
    """Apply ``rules`` until nothing new is derived."""
    known = set(facts)
    index: DefaultDict[str, DefaultDict[int, Set[int]]] = defaultdict(
        lambda: defaultdict(set)
    )
    for h, r, t in known:
        index[r][h].add(t)
    for _ in range(max_rounds):
        new: Set[Fact] = set()
        fired: List[GroundRule] = []
        for rule in rules:
            produced = False
            for x, first in list(index[rule.body[0]].items()):
                frontier = set(first)
                for rel in rule.body[1:]:
                    step: Set[int] = set()
                    for z in frontier:
                        step.update(index[rel].get(z, ()))
                    frontier = step
                for y in frontier:
                    if x == y and not allow_self_loops:
                        continue
                    f = (x, rule.head, y)
                    if f not in known and f not in new:
                        new.add(f)
                        produced = True
            if produced:
                fired.append(rule)
        if not new:
            return known
        for f in new:
            known.add(f)
            index[f[1]][f[0]].add(f[2])
    raise WorldError(
        "saturation did not converge in %d rounds; rule cycle: %s"
        % (max_rounds, _rule_cycle(fired))
    )


def _family_forest(spec: WorldSpec, rng: np.random.Generator) -> Set[Fact]:
    facts: Set[Fact] = set()
    female: List[bool] = []
    pending: List[Tuple[int, int]] = []

    def person(is_female: bool) -> int:
        female.append(is_female)
        return len(female) - 1

    def marry(wife: int, husband: int) -> None:
        facts.add((wife, "hasHusband", husband))
        facts.add((husband, "hasWife", wife))
        pending.append((wife, husband))

    for _ in range(min(spec.founders, spec.entities // 2)):
        marry(person(True), person(False))
    while len(female) < spec.entities:
        if not pending:
            if spec.entities - len(female) < 2:
                break
            marry(person(True), person(False))
        wife, husband = pending.pop(0)
        for _ in range(int(rng.integers(1, spec.max_children + 1))):
            if len(female) >= spec.entities:
                break
            child = person(bool(rng.random() < 0.5))
            facts.add((child, "hasMother", wife))
            facts.add((child, "hasFather", husband))
            kin = "hasDaughter" if female[child] else "hasSon"
            facts.add((wife, kin, child))
            facts.add((husband, kin, child))
            if len(female) < spec.entities and rng.random() < spec.marriage_rate:
                spouse = person(not female[child])
                if female[child]:
                    marry(child, spouse)
                else:
                    marry(spouse, child)
    return facts


def _random_graph(spec: WorldSpec, rng: np.random.Generator) -> Set[Fact]:
    primitives = spec.primitives()
    if not primitives:
        raise WorldError("every relation is derived; nothing to draw a base graph from")
    facts: Set[Fact] = set()
    for _ in range(int(spec.entities * spec.avg_degree)):
        a, b = (int(x) for x in rng.choice(spec.entities, size=2, replace=False))
        facts.add((a, primitives[int(rng.integers(len(primitives)))], b))
    return facts


def derived_heads(body: Sequence[str], rules: Sequence[GroundRule], max_rounds: int = 64) -> Set[str]:
    """Relations saturation derives between the ends of the path ``body``."""
    chain = {(i, rel, i + 1) for i, rel in enumerate(body)}
    closure = saturate(chain, rules, max_rounds)
    return {r for a, r, b in closure if a == 0 and b == len(body)}


def _expand(
    head: str,
    by_head: Dict[str, List[GroundRule]],
    hops: int,
    rng: np.random.Generator,
) -> Optional[List[str]]:
    body = [head]
    while len(body) < hops:
        options = [
            (i, rule)
            for i, rel in enumerate(body)
            for rule in by_head.get(rel, [])
            if len(body) + len(rule.body) - 1 <= hops
        ]
        if not options:
            return None
        i, rule = options[int(rng.integers(len(options)))]
        body[i : i + 1] = list(rule.body)
    return body


def _queries(
    spec: WorldSpec, rng: np.random.Generator
) -> List[Tuple[Tuple[str, ...], str]]:
    by_head: Dict[str, List[GroundRule]] = defaultdict(list)
    for rule in spec.rules:
        by_head[rule.head].append(rule)
    heads = [r for r in spec.relations if r in by_head]
    queries: List[Tuple[Tuple[str, ...], str]] = []
    if not heads or not spec.queries_per_hop:
        return queries
    lo, hi = spec.test_hops
    for hops in range(lo, hi + 1):
        made = 0
        attempts = 0
        while made < spec.queries_per_hop:
            attempts += 1
            if attempts > 200 * spec.queries_per_hop:
                raise WorldError(f"rules cannot build enough {hops}-hop queries")
            head = heads[int(rng.integers(len(heads)))]
            body = _expand(head, by_head, hops, rng)
            if body is None or derived_heads(body, spec.rules, spec.max_rounds) != {head}:
                continue
            queries.append((tuple(body), head))
            made += 1
    return queries


def generate(spec: WorldSpec) -> World:
    base_seq, noise_seq, holdout_seq, query_seq = np.random.SeedSequence(
        spec.seed
    ).spawn(4)
    if spec.base_graph == "family":
        base = _family_forest(spec, np.random.default_rng(base_seq))
    else:
        base = _random_graph(spec, np.random.default_rng(base_seq))
    closure = saturate(base, spec.rules, spec.max_rounds)
    derived = sorted(closure - base, key=lambda f: (f[0], f[1], f[2]))
    _LOGGER.info("Base graph %d facts, %d derived", len(base), len(derived))

    rng = np.random.default_rng(holdout_seq)
    n_holdout = int(round(spec.kgc_holdout * len(derived)))
    held = {derived[int(i)] for i in rng.choice(len(derived), n_holdout, replace=False)}

    rng = np.random.default_rng(noise_seq)
    primitives = spec.primitives()
    population = 1 + max(max(h, t) for h, _, t in closure) if closure else spec.entities
    noise: Set[Fact] = set()
    for _ in range(int(round(spec.distractor_rate * len(base)))):
        a, b = (int(x) for x in rng.choice(population, size=2, replace=False))
        f = (a, primitives[int(rng.integers(len(primitives)))], b)
        if f not in closure:
            noise.add(f)

    order = {r: i for i, r in enumerate(spec.relations)}
    train_facts = sorted((closure - held) | noise, key=lambda f: (f[0], order[f[1]], f[2]))
    relations = RelationVocabulary(True)
    for r in spec.relations:
        relations.add(r)

    def name(e: int) -> str:
        return "e%d" % e

    train = kg_store.from_name_triples(
        [(name(h), r, name(t)) for h, r, t in train_facts],
        add_inverses=True,
        relations=relations,
    )
    test_triples = [
        (name(h), r, name(t))
        for h, r, t in sorted(held, key=lambda f: (f[0], order[f[1]], f[2]))
    ]
    queries = _queries(spec, np.random.default_rng(query_seq))
    query_entities = frozenset(
        "q%d_%d" % (n, i) for n, (body, _) in enumerate(queries) for i in range(len(body) + 1)
    )
    _LOGGER.info(
        "Generated world: %s, %d held-out facts, %d queries",
        train,
        len(test_triples),
        len(queries),
    )
    return World(train, test_triples, queries, spec.rules, query_entities)


def inductive_queries(world: World) -> List[InductiveQuery]:
    rel = world.train.relations
    return [
        InductiveQuery(tuple(rel.id(b) for b in body), rel.id(gold))
        for body, gold in world.queries
    ]


def gold_rules(world: World) -> List[Rule]:
    rel = world.train.relations
    return [
        Rule(rel.id(r.head), tuple(rel.id(b) for b in r.body), 1.0)
        for r in world.rules
    ]


def write_queries(queries: Sequence[Tuple[Tuple[str, ...], str]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for body, gold in queries:
            f.write("%s\t%s\n" % (",".join(body), gold))


def write_world(world: World, directory: str, provenance: Optional[str] = None) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "train.txt"), "w", encoding="utf-8") as f:
        for h, r, t in world.train.name_triples():
            f.write(f"{h}\t{r}\t{t}\n")
    with open(os.path.join(directory, "test.txt"), "w", encoding="utf-8") as f:
        for h, r, t in world.test_triples:
            f.write(f"{h}\t{r}\t{t}\n")
    write_rules(
        gold_rules(world),
        world.train.relations,
        os.path.join(directory, "rules.txt"),
        provenance,
    )
    write_queries(world.queries, os.path.join(directory, "queries.txt"))
    _LOGGER.info("Wrote world to %s", directory)
