"""
Rule application: forward chaining for knowledge graph completion with
filtered ranking, and direct relation classification of long paths.
"""

import csv
import logging

from collections import defaultdict
from concurrent import futures
from dataclasses import dataclass
from typing import (
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from chainrules import model
from chainrules.kg import Kg, RelationVocabulary, Splits, Triple
from chainrules.miner import MinerConfig, Rule, mine
from chainrules.model import ModelConfig, checkpoint
from chainrules.model.layers import Params


_LOGGER = logging.getLogger(__name__)

AGGREGATIONS = ("additive", "max", "noisy_or")
TIE_POLICIES = ("mean", "optimistic", "pessimistic")

Rules = Union[Sequence[Rule], Mapping[int, Sequence[Rule]]]


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    aggregation: str = "additive"
    # Upper bound on visited (entity, step) states per rule grounding search.
    frontier_cap: int = 10**6
    tie_policy: str = "mean"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.tie_policy not in TIE_POLICIES:
            raise ValueError(f"tie_policy must be one of {TIE_POLICIES}")
        if self.frontier_cap < 1:
            raise ValueError("frontier_cap must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


def by_head(rules: Rules) -> Dict[int, List[Rule]]:
    if isinstance(rules, Mapping):
        return {h: list(rs) for h, rs in rules.items()}
    grouped: Dict[int, List[Rule]] = defaultdict(list)
    for r in rules:
        grouped[r.head].append(r)
    return dict(grouped)


def groundings(
    kg: Kg,
    start: int,
    body: Sequence[int],
    frontier_cap: int = 10**6,
) -> Dict[int, int]:
    """Number of distinct body paths from ``start`` ending at each entity."""
    frontier: Dict[int, int] = {start: 1}
    visited = 0
    for rel in body:
        nxt: Dict[int, int] = defaultdict(int)
        for entity, count in frontier.items():
            for tail in kg.successors(entity, rel):
                nxt[tail] += count
        budget = frontier_cap - visited
        if len(nxt) > budget:
            _LOGGER.warning(
                "Frontier cap %d hit grounding %s from entity %d",
                frontier_cap,
                body,
                start,
            )
            nxt = defaultdict(int, {e: nxt[e] for e in sorted(nxt)[:budget]})
        visited += len(nxt)
        frontier = nxt
        if not frontier:
            break
    return dict(frontier)


def chain(
    kg: Kg,
    rules: Rules,
    head: int,
    relation: int,
    cfg: ChainConfig = ChainConfig(),
) -> np.ndarray:
    """Scores of every entity as the answer to ``(head, relation, ?)``.
    Entities no rule reaches score 0."""
    scores = np.zeros(kg.num_entities)
    applicable = by_head(rules).get(relation, [])
    # Probability, per entity, that no grounding fires.
    failure = np.ones(kg.num_entities)
    for rule in applicable:
        for tail, count in groundings(kg, head, rule.body, cfg.frontier_cap).items():
            if cfg.aggregation == "additive":
                scores[tail] += rule.score * count
            elif cfg.aggregation == "max":
                scores[tail] = max(scores[tail], rule.score)
            else:
                failure[tail] *= (1.0 - rule.score) ** count
    if cfg.aggregation == "noisy_or":
        scores = 1.0 - failure
    return scores


def rank_of(
    scores: np.ndarray,
    gold: int,
    exclude: Iterable[int] = (),
    tie_policy: str = "mean",
) -> float:
    """Rank of ``gold`` among all entities except ``exclude``.  Ties with
    gold occupy a block; the mean policy takes the block's mean position."""
    mask = np.ones(len(scores), dtype=bool)
    mask[list(exclude)] = False
    mask[gold] = False
    g = scores[gold]
    others = scores[mask]
    higher = int((others > g).sum())
    ties = int((others == g).sum())
    if tie_policy == "optimistic":
        return float(higher + 1)
    if tie_policy == "pessimistic":
        return float(higher + ties + 1)
    return higher + 1 + ties / 2.0


class QueryResult(NamedTuple):
    direction: str
    head: int
    relation: int
    gold: int
    raw_rank: float
    rank: float


class RankingReport(NamedTuple):
    results: List[QueryResult]
    mrr: float
    hits1: float
    hits10: float
    metadata: Dict[str, str]

    def summary(self) -> str:
        return "MRR=%.4f Hits@1=%.4f Hits@10=%.4f" % (self.mrr, self.hits1, self.hits10)


def _query(
    kg_train: Kg,
    filter_kg: Kg,
    rules: Dict[int, List[Rule]],
    direction: str,
    head: int,
    relation: int,
    gold: int,
    cfg: ChainConfig,
) -> QueryResult:
    scores = chain(kg_train, rules, head, relation, cfg)
    known = filter_kg.successors(head, relation)
    return QueryResult(
        direction,
        head,
        relation,
        gold,
        rank_of(scores, gold, (), cfg.tie_policy),
        rank_of(scores, gold, known, cfg.tie_policy),
    )


def evaluate_kgc(
    kg_train: Kg,
    filter_kg: Kg,
    rules: Rules,
    test: Sequence[Triple],
    cfg: ChainConfig = ChainConfig(),
) -> RankingReport:
    """Rank the gold tail of ``(h, r, ?)`` and the gold head through
    ``(t, r_inv, ?)`` for every test triple, in the filtered setting."""
    if not test:
        raise EvaluationError("test set is empty")
    if not kg_train.has_inverses:
        raise EvaluationError("head queries need an inverse-augmented graph")
    grouped = by_head(rules)
    queries: List[Tuple[str, int, int, int]] = []
    for h, r, t in test:
        queries.append(("tail", h, r, t))
        queries.append(("head", t, kg_train.inverse(r), h))

    def run(q: Tuple[str, int, int, int]) -> QueryResult:
        return _query(kg_train, filter_kg, grouped, *q, cfg)

    if cfg.threads == 1:
        results = [run(q) for q in queries]
    else:
        with futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, queries))
    ranks = np.array([q.rank for q in results])
    report = RankingReport(
        results,
        float(np.mean(1.0 / ranks)),
        float(np.mean(ranks <= 1)),
        float(np.mean(ranks <= 10)),
        {
            "tie_policy": cfg.tie_policy,
            "aggregation": cfg.aggregation,
            "filter": "train+valid+test including inverse triples",
            "unreached": "entities no rule reaches tie at score 0",
        },
    )
    _LOGGER.info("Evaluated %d queries: %s", len(results), report.summary())
    return report


def select_checkpoint(
    paths: Sequence[str],
    splits: Splits,
    miner_cfg: MinerConfig = MinerConfig(),
    cfg: ChainConfig = ChainConfig(),
) -> Tuple[str, RankingReport]:
    """Mine every checkpoint and keep the one whose rules rank the validation
    split best by filtered MRR.  Ties go to the earlier path."""
    if splits.valid is None:
        raise EvaluationError("checkpoint selection needs a validation split")
    if not paths:
        raise EvaluationError("no checkpoints to select from")
    valid = splits.valid.base_triples()
    best: Optional[Tuple[str, RankingReport]] = None
    for path in paths:
        ckpt = checkpoint.load(path, splits.train.relations)
        rules = mine(ckpt.params, ckpt.config, splits.train, miner_cfg)
        report = evaluate_kgc(splits.train, splits.everything, rules, valid, cfg)
        _LOGGER.info("Validation of %s: %s", path, report.summary())
        if best is None or report.mrr > best[1].mrr:
            best = (path, report)
    assert best is not None
    return best


def write_report(report: RankingReport, kg: Kg, path: str, provenance: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        for k in sorted(report.metadata):
            f.write(f"# {k}: {report.metadata[k]}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["direction", "head", "relation", "gold", "raw_rank", "rank"])
        for q in report.results:
            writer.writerow(
                [
                    q.direction,
                    kg.entities.name(q.head),
                    kg.relations.name(q.relation),
                    kg.entities.name(q.gold),
                    q.raw_rank,
                    q.rank,
                ]
            )
        f.write(f"# {report.summary()}\n")


def read_rules(path: str, relations: RelationVocabulary) -> List[Rule]:
    rules: List[Rule] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            try:
                score, head, body = line.split("\t")
                rules.append(
                    Rule(
                        relations.id(head),
                        tuple(relations.id(b) for b in body.split(",")),
                        float(score),
                    )
                )
            except (ValueError, KeyError) as e:
                raise EvaluationError(f"{path}:{lineno}: bad rule line") from e
    return rules


def classify_relation(params: Params, cfg: ModelConfig, body: Sequence[int]) -> int:
    """The most probable non-null head of ``body``."""
    theta = model.forward(params, cfg, body).theta
    return int(np.argmax(theta[1:]))


class InductiveQuery(NamedTuple):
    body: Tuple[int, ...]
    gold: int


class InductiveReport(NamedTuple):
    accuracy: float
    by_hops: Dict[int, float]
    count: int

    def summary(self) -> str:
        hops = " ".join("%d:%.4f" % (h, a) for h, a in sorted(self.by_hops.items()))
        return "Accuracy=%.4f n=%d hops %s" % (self.accuracy, self.count, hops)


def evaluate_inductive(
    params: Params,
    cfg: ModelConfig,
    queries: Sequence[InductiveQuery],
) -> InductiveReport:
    if not queries:
        raise EvaluationError("no queries")
    theta = model.score_bodies(params, cfg, [q.body for q in queries])
    predicted = np.argmax(theta[:, 1:], axis=1)
    gold = np.array([q.gold for q in queries])
    correct = predicted == gold
    hops = np.array([len(q.body) for q in queries])
    by_hops = {int(h): float(correct[hops == h].mean()) for h in np.unique(hops)}
    report = InductiveReport(float(correct.mean()), by_hops, len(queries))
    _LOGGER.info("%s", report.summary())
    return report


def read_queries(path: str, relations: RelationVocabulary) -> List[InductiveQuery]:
    queries: List[InductiveQuery] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            try:
                body, gold = line.split("\t")
                queries.append(
                    InductiveQuery(
                        tuple(relations.id(b) for b in body.split(",")),
                        relations.id(gold),
                    )
                )
            except (ValueError, KeyError) as e:
                raise EvaluationError(f"{path}:{lineno}: bad query line") from e
    return queries
