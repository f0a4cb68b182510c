"""
Random-walk path sampling with closed/open labelling.

A walk starts at a uniformly chosen entity with outgoing edges and takes up
to ``n_max`` steps drawn from ``step_distribution``.  After every step from
the second on, the relations directly connecting the walk's source to the
current entity are looked up; each one yields a closed sample whose body
is the walk so far.  When nothing connects them the prefix is an open sample
labelled with the null head, accepted only while the running open fraction
stays within ``open_ratio``.
"""

import logging

from concurrent import futures
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from chainrules.kg import Kg


_LOGGER = logging.getLogger(__name__)

NULL_TOKEN = "NULL"


class SamplingError(RuntimeError):
    pass


class PathSample(NamedTuple):
    body: Tuple[int, ...]
    head: int
    # Endpoints of the grounding, for auditing.  -1 when read from a dump.
    source: int
    target: int


@dataclass(frozen=True)
class SamplerConfig:
    n_max: int = 3
    open_ratio: float = 0.1
    count: int = 10000
    seed: int = 0
    no_backtrack: bool = True
    threads: int = 1
    max_walks_factor: int = 100

    def __post_init__(self) -> None:
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if not 0.0 <= self.open_ratio < 1.0:
            raise ValueError("open_ratio must be in [0, 1)")
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.max_walks_factor < 1:
            raise ValueError("max_walks_factor must be positive")


def step_distribution(kg: Kg, current: int) -> np.ndarray:
    """Transition probabilities over the edge slots of ``kg.out_adj[current]``."""
    degree = kg.degree(current)
    if degree == 0:
        return np.zeros(0)
    return np.full(degree, 1.0 / degree)


def _next_edge(
    kg: Kg,
    current: int,
    previous: Optional[Tuple[int, int]],
    no_backtrack: bool,
    rng: np.random.Generator,
) -> Optional[Tuple[int, int]]:
    """Draw an edge out of ``current`` from ``step_distribution``, with the
    edge straight back to where the walk came from masked out."""
    edges = kg.out_adj[current]
    p = step_distribution(kg, current)
    if no_backtrack and previous is not None and kg.has_inverses:
        rel, origin = previous
        back = (kg.inverse(rel), origin)
        p = np.array([0.0 if e == back else w for e, w in zip(edges, p)])
    total = p.sum()
    if total <= 0:
        return None
    return edges[int(rng.choice(len(edges), p=p / total))]


def _sample_shard(
    kg: Kg,
    cfg: SamplerConfig,
    count: int,
    rng: np.random.Generator,
) -> List[PathSample]:
    sources = [e for e in range(kg.num_entities) if kg.degree(e)]
    if not sources:
        raise SamplingError("knowledge graph has no edges")
    samples: List[PathSample] = []
    n_open = 0
    max_walks = cfg.max_walks_factor * count
    walks = 0
    while len(samples) < count:
        if walks >= max_walks:
            raise SamplingError(
                "only %d of %d paths sampled after %d walks; the graph has "
                "too few paths of length 2 or more" % (len(samples), count, walks)
            )
        walks += 1
        x0 = sources[int(rng.integers(len(sources)))]
        x = x0
        body: List[int] = []
        previous: Optional[Tuple[int, int]] = None
        for _ in range(cfg.n_max):
            edge = _next_edge(kg, x, previous, cfg.no_backtrack, rng)
            if edge is None:
                break
            rel, nxt = edge
            body.append(rel)
            previous = (rel, x)
            x = nxt
            if len(body) < 2:
                continue
            heads = kg.relations_between(x0, x)
            if heads:
                for head in sorted(heads):
                    samples.append(PathSample(tuple(body), head, x0, x))
                    if len(samples) >= count:
                        break
            elif n_open + 1 <= cfg.open_ratio * (len(samples) + 1):
                samples.append(PathSample(tuple(body), kg.null_id, x0, x))
                n_open += 1
            if len(samples) >= count:
                break
    _LOGGER.debug(
        "Shard sampled %d paths (%d open) in %d walks", len(samples), n_open, walks
    )
    return samples


def sample_paths(kg: Kg, cfg: SamplerConfig) -> List[PathSample]:
    if not len(kg):
        raise SamplingError("knowledge graph is empty")
    if cfg.threads == 1:
        samples = _sample_shard(kg, cfg, cfg.count, np.random.default_rng(cfg.seed))
    else:
        counts = [cfg.count // cfg.threads] * cfg.threads
        for i in range(cfg.count % cfg.threads):
            counts[i] += 1
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.threads)
        with futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            shards = list(
                pool.map(
                    lambda a: _sample_shard(kg, cfg, a[0], np.random.default_rng(a[1])),
                    [(c, s) for c, s in zip(counts, seeds) if c],
                )
            )
        samples = [s for shard in shards for s in shard]
    n_open = sum(1 for s in samples if s.head == kg.null_id)
    _LOGGER.info(
        "Sampled %d paths, %.3f open, max length %d",
        len(samples),
        n_open / len(samples),
        cfg.n_max,
    )
    return samples


def write_samples(
    samples: Sequence[PathSample],
    kg: Kg,
    path: str,
    provenance: Optional[str] = None,
) -> None:
    if NULL_TOKEN in kg.relations:
        # The dump could not tell it from the null head.
        raise SamplingError(f"a relation is named {NULL_TOKEN}; cannot dump samples")
    with open(path, "w", encoding="utf-8") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        for s in samples:
            body = ",".join(kg.relations.name(r) for r in s.body)
            f.write(f"{kg.relation_name(s.head)}\t{body}\n")


def read_samples(path: str, kg: Kg) -> List[PathSample]:
    samples: List[PathSample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            try:
                head_name, body_names = line.split("\t")
                head = (
                    kg.null_id
                    if head_name == NULL_TOKEN
                    else kg.relations.id(head_name)
                )
                body = tuple(kg.relations.id(n) for n in body_names.split(","))
            except (ValueError, KeyError) as e:
                raise SamplingError(f"{path}:{lineno}: bad sample line") from e
            if len(body) < 2:
                raise SamplingError(f"{path}:{lineno}: body shorter than 2")
            samples.append(PathSample(body, head, -1, -1))
    return samples
