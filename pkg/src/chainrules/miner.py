import itertools
import logging

from concurrent import futures
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from chainrules import model
from chainrules.kg import Kg, RelationVocabulary
from chainrules.model import ModelConfig
from chainrules.model.layers import Params
from chainrules.sampler import PathSample, SamplerConfig, sample_paths


_LOGGER = logging.getLogger(__name__)

SOURCES = ("enumerate", "sampled")

Body = Tuple[int, ...]


class Rule(NamedTuple):
    head: int
    body: Body
    score: float


@dataclass(frozen=True)
class MinerConfig:
    max_length: int = 3
    top_k: int = 10
    candidate_source: str = "enumerate"
    # Full enumeration only while |R| ** max_length stays within the cap.
    enumeration_cap: int = 1_000_000
    harvest_samples: int = 100_000
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.max_length < 2:
            raise ValueError("max_length must be at least 2")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.candidate_source not in SOURCES:
            raise ValueError(f"candidate_source must be one of {SOURCES}")
        if self.threads < 1:
            raise ValueError("threads must be positive")


def score_rule(
    params: Params,
    cfg: ModelConfig,
    body: Sequence[int],
    max_length: int = 3,
) -> np.ndarray:
    """Distribution over heads (slot 0 null) for one body; the score of the
    rule ``r <- body`` is entry ``r + 1``."""
    if not 2 <= len(body) <= max_length:
        raise ValueError(f"body length {len(body)} outside [2, {max_length}]")
    return model.forward(params, cfg, body).theta


def candidates(
    num_relations: int,
    cfg: MinerConfig,
    samples: Optional[Sequence[PathSample]] = None,
) -> List[Body]:
    """Candidate bodies in lexicographic order."""
    if (
        cfg.candidate_source == "enumerate"
        and num_relations**cfg.max_length <= cfg.enumeration_cap
    ):
        bodies = [
            body
            for length in range(2, cfg.max_length + 1)
            for body in itertools.product(range(num_relations), repeat=length)
        ]
        return sorted(bodies)
    if samples is None:
        return []
    return sorted({s.body for s in samples if 2 <= len(s.body) <= cfg.max_length})


def _score_all(
    params: Params,
    model_cfg: ModelConfig,
    bodies: Sequence[Body],
    threads: int,
) -> np.ndarray:
    if threads == 1 or len(bodies) < threads:
        return model.score_bodies(params, model_cfg, bodies)
    bounds = np.linspace(0, len(bodies), threads + 1).astype(int)
    shards = [bodies[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with futures.ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(lambda part: model.score_bodies(params, model_cfg, part), shards)
        )
    return np.concatenate(parts, axis=0)


def top_rules(
    bodies: Sequence[Body],
    scores: np.ndarray,
    top_k: int,
) -> Dict[int, List[Rule]]:
    """Per head, the ``top_k`` highest-scoring rules.  ``bodies`` must be in
    lexicographic order so that the stable sort breaks ties by body."""
    rules: Dict[int, List[Rule]] = {}
    for head in range(scores.shape[1] - 1):
        column = scores[:, head + 1]
        order = np.argsort(-column, kind="stable")[:top_k]
        rules[head] = [Rule(head, bodies[i], float(column[i])) for i in order]
    return rules


def mine(
    params: Params,
    model_cfg: ModelConfig,
    kg: Kg,
    cfg: MinerConfig,
    samples: Optional[Sequence[PathSample]] = None,
) -> Dict[int, List[Rule]]:
    """Score candidate bodies once and keep the best rules of every head.
    The null head never yields rules."""
    num_relations = model.num_heads(params)
    enumerating = (
        cfg.candidate_source == "enumerate"
        and num_relations**cfg.max_length <= cfg.enumeration_cap
    )
    if not enumerating and samples is None:
        samples = sample_paths(
            kg,
            SamplerConfig(
                n_max=cfg.max_length,
                count=cfg.harvest_samples,
                seed=cfg.seed,
                threads=cfg.threads,
            ),
        )
    bodies = candidates(num_relations, cfg, samples)
    if not bodies:
        _LOGGER.warning("No candidate rule bodies; no rules mined")
        return {}
    _LOGGER.info(
        "Scoring %d candidate bodies (%s)",
        len(bodies),
        "enumerated" if enumerating else "harvested",
    )
    scores = _score_all(params, model_cfg, bodies, cfg.threads)
    return top_rules(bodies, scores, cfg.top_k)


def flatten(rules: Dict[int, List[Rule]]) -> List[Rule]:
    return [r for head in sorted(rules) for r in rules[head]]


def write_rules(
    rules: Sequence[Rule],
    relations: RelationVocabulary,
    path: str,
    provenance: Optional[str] = None,
) -> None:
    """One rule per line, ``score<TAB>head<TAB>b1,...,bk``, sorted by head
    then descending score."""
    ordered = sorted(rules, key=lambda r: (r.head, -r.score, r.body))
    with open(path, "w", encoding="utf-8") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        for r in ordered:
            body = ",".join(relations.name(b) for b in r.body)
            f.write(f"{r.score!r}\t{relations.name(r.head)}\t{body}\n")
    _LOGGER.info("Wrote %d rules to %s", len(ordered), path)
