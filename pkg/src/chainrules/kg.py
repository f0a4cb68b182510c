"""
Indexed, immutable triple store with inverse-augmented relation vocabulary.

Relation ids are interleaved when inverses are enabled: every base relation
gets an even id and its inverse the next odd id, so ``inverse(r) == r ^ 1``
and a vocabulary extended by a later split stays dense.  The null head label
is not a graph relation; it is the reserved id ``num_relations``.
"""

import logging
import os
import zipfile

from typing import (
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import numpy as np

from chainrules.artifacts import write_npz


_LOGGER = logging.getLogger(__name__)

INVERSE_SUFFIX = "_inv"
SNAPSHOT_VERSION = 1
_SNAPSHOT_MEMBERS = ("version", "entities", "relations", "with_inverses", "triples")

NameTriple = Tuple[str, str, str]


class KgError(ValueError):
    pass


class ParseError(KgError):
    def __init__(self, path: str, line: int, message: str) -> None:
        KgError.__init__(self, f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class Vocabulary(object):
    """Append-only bijection between names and dense integer ids."""

    def __init__(self, names: Iterable[str] = ()) -> None:
        self.names: List[str] = []
        self._index: Dict[str, int] = {}
        for n in names:
            self.add(n)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def id(self, name: str) -> int:
        return self._index[name]

    def name(self, i: int) -> str:
        return self.names[i]

    def add(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            self._index[name] = len(self.names)
            self.names.append(name)
            return self._index[name]

    def copy(self) -> "Vocabulary":
        return Vocabulary(self.names)


class RelationVocabulary(Vocabulary):
    def __init__(self, with_inverses: bool, names: Iterable[str] = ()) -> None:
        self.with_inverses = with_inverses
        Vocabulary.__init__(self)
        # Names come from a snapshot or checkpoint and already contain the
        # synthesized inverses, so they are appended verbatim.
        for n in names:
            Vocabulary.add(self, n)
        if with_inverses and len(self.names) % 2:
            raise KgError("inverse-augmented vocabulary has an odd size")

    def add(self, name: str) -> int:
        if name in self._index:
            r = self._index[name]
            if self.is_inverse(r):
                raise KgError(
                    f"relation {name!r} collides with a synthesized inverse"
                )
            return r
        if not self.with_inverses:
            return Vocabulary.add(self, name)
        inverse_name = name + INVERSE_SUFFIX
        if inverse_name in self._index:
            raise KgError(
                f"inverse {inverse_name!r} of relation {name!r} collides "
                "with an existing relation"
            )
        r = Vocabulary.add(self, name)
        Vocabulary.add(self, inverse_name)
        return r

    def is_inverse(self, r: int) -> bool:
        return self.with_inverses and r % 2 == 1

    def inverse(self, r: int) -> int:
        if not self.with_inverses:
            raise KgError("knowledge graph was loaded without inverses")
        return r ^ 1

    def copy(self) -> "RelationVocabulary":
        return RelationVocabulary(self.with_inverses, self.names)


class Kg(object):
    """Immutable indexed knowledge graph.

    ``out_adj[e]`` lists the outgoing ``(relation, neighbor)`` edge slots of
    ``e`` in insertion order; its length is the out-degree used by the
    sampler.  ``pair_index`` maps ``(head, tail)`` to the exact set of
    relations connecting them.
    """

    def __init__(
        self,
        entities: Vocabulary,
        relations: RelationVocabulary,
        triples: Iterable[Triple],
    ) -> None:
        self.entities = entities
        self.relations = relations
        unique: Dict[Triple, None] = dict.fromkeys(Triple(*t) for t in triples)
        self.triples: Tuple[Triple, ...] = tuple(unique)
        adj: List[List[Tuple[int, int]]] = [[] for _ in range(len(entities))]
        pairs: Dict[Tuple[int, int], Set[int]] = {}
        succ: Dict[Tuple[int, int], List[int]] = {}
        for h, r, t in self.triples:
            adj[h].append((r, t))
            pairs.setdefault((h, t), set()).add(r)
            succ.setdefault((h, r), []).append(t)
        self.out_adj: Tuple[Tuple[Tuple[int, int], ...], ...] = tuple(
            tuple(a) for a in adj
        )
        self.pair_index: Dict[Tuple[int, int], FrozenSet[int]] = {
            k: frozenset(v) for k, v in pairs.items()
        }
        self._succ: Dict[Tuple[int, int], Tuple[int, ...]] = {
            k: tuple(v) for k, v in succ.items()
        }
        self._set = frozenset(self.triples)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: object) -> bool:
        return triple in self._set

    def __repr__(self) -> str:
        return "<Kg %d entities, %d relations, %d triples>" % (
            self.num_entities,
            self.num_relations,
            len(self.triples),
        )

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def null_id(self) -> int:
        return len(self.relations)

    @property
    def has_inverses(self) -> bool:
        return self.relations.with_inverses

    def inverse(self, r: int) -> int:
        return self.relations.inverse(r)

    def relation_name(self, r: int) -> str:
        if r == self.null_id:
            return "NULL"
        return self.relations.name(r)

    def relations_between(self, a: int, b: int) -> FrozenSet[int]:
        return self.pair_index.get((a, b), frozenset())

    def successors(self, entity: int, relation: int) -> Tuple[int, ...]:
        return self._succ.get((entity, relation), ())

    def degree(self, entity: int) -> int:
        return len(self.out_adj[entity])

    def base_triples(self) -> List[Triple]:
        return [t for t in self.triples if not self.relations.is_inverse(t.rel)]

    def name_triples(self, base_only: bool = True) -> List[NameTriple]:
        ts = self.base_triples() if base_only else list(self.triples)
        e, r = self.entities, self.relations
        return [(e.name(h), r.name(rel), e.name(t)) for h, rel, t in ts]

    def triple_array(self) -> np.ndarray:
        if not self.triples:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(self.triples, dtype=np.int64)


def relations_between(kg: Kg, a: int, b: int) -> FrozenSet[int]:
    return kg.relations_between(a, b)


def _augment(relations: RelationVocabulary, base: Iterable[Triple]) -> List[Triple]:
    out: List[Triple] = []
    for t in base:
        out.append(t)
        if relations.with_inverses:
            out.append(Triple(t.tail, relations.inverse(t.rel), t.head))
    return out


def read_tsv(path: str) -> List[NameTriple]:
    rows: List[NameTriple] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(
                    path,
                    lineno,
                    f"expected 3 tab-separated fields, found {len(fields)}",
                )
            h, r, t = fields
            rows.append((h, r, t))
    return rows


def from_name_triples(
    rows: Iterable[NameTriple],
    add_inverses: bool = True,
    entities: Optional[Vocabulary] = None,
    relations: Optional[RelationVocabulary] = None,
) -> Kg:
    """Index name triples.  Given vocabularies are copied, never mutated."""
    ents = entities.copy() if entities is not None else Vocabulary()
    rels = (
        relations.copy()
        if relations is not None
        else RelationVocabulary(add_inverses)
    )
    if rels.with_inverses != add_inverses:
        raise KgError("relation vocabulary disagrees on inverse augmentation")
    base: List[Triple] = []
    for h, r, t in rows:
        hid = ents.add(h)
        rid = rels.add(r)
        tid = ents.add(t)
        base.append(Triple(hid, rid, tid))
    return Kg(ents, rels, _augment(rels, base))


def load_tsv(
    path: str,
    add_inverses: bool = True,
    entities: Optional[Vocabulary] = None,
    relations: Optional[RelationVocabulary] = None,
) -> Kg:
    rows = read_tsv(path)
    if not rows:
        raise KgError(f"{path}: no triples")
    kg = from_name_triples(rows, add_inverses, entities, relations)
    _LOGGER.info("Loaded %s from %s", kg, path)
    return kg


def remove_fraction(kg: Kg, fraction: float, seed: int) -> Kg:
    if not 0.0 <= fraction <= 1.0:
        raise KgError(f"fraction {fraction} outside [0, 1]")
    base = kg.base_triples()
    n_remove = int(round(fraction * len(base)))
    rng = np.random.default_rng(seed)
    drop = set(rng.choice(len(base), size=n_remove, replace=False).tolist())
    kept = [t for i, t in enumerate(base) if i not in drop]
    _LOGGER.debug("Removed %d of %d base triples", n_remove, len(base))
    return Kg(kg.entities, kg.relations, _augment(kg.relations, kept))


class Splits(NamedTuple):
    train: Kg
    valid: Optional[Kg]
    test: Kg
    everything: Kg


def load_splits(directory: str, add_inverses: bool = True) -> Splits:
    """Load train/valid/test over one vocabulary shared by all splits."""

    def path(name: str) -> str:
        return os.path.join(directory, name)

    train_rows = read_tsv(path("train.txt"))
    if not train_rows:
        raise KgError(f"{path('train.txt')}: no triples")
    valid_rows: Optional[List[NameTriple]] = None
    if os.path.exists(path("valid.txt")):
        valid_rows = read_tsv(path("valid.txt"))
    test_rows = read_tsv(path("test.txt"))

    everything_rows = train_rows + (valid_rows or []) + test_rows
    everything = from_name_triples(everything_rows, add_inverses)
    ents, rels = everything.entities, everything.relations

    def build(rows: Sequence[NameTriple]) -> Kg:
        return from_name_triples(rows, add_inverses, ents, rels)

    splits = Splits(
        train=build(train_rows),
        valid=build(valid_rows) if valid_rows is not None else None,
        test=build(test_rows),
        everything=everything,
    )
    _LOGGER.info(
        "Loaded splits from %s: train %s, test %s",
        directory,
        splits.train,
        splits.test,
    )
    return splits


def save_snapshot(kg: Kg, path: str) -> None:
    write_npz(
        path,
        {
            "version": np.array(SNAPSHOT_VERSION),
            "entities": np.array(kg.entities.names, dtype=str),
            "relations": np.array(kg.relations.names, dtype=str),
            "with_inverses": np.array(kg.has_inverses),
            "triples": kg.triple_array(),
        },
    )


def load_snapshot(path: str) -> Kg:
    try:
        with np.load(path, allow_pickle=False) as data:
            missing = [m for m in _SNAPSHOT_MEMBERS if m not in data.files]
            if missing:
                raise KgError(
                    f"{path}: not a graph snapshot (missing {', '.join(missing)})"
                )
            version = int(data["version"])
            if version != SNAPSHOT_VERSION:
                raise KgError(f"{path}: unsupported snapshot version {version}")
            entities = Vocabulary(str(n) for n in data["entities"])
            relations = RelationVocabulary(
                bool(data["with_inverses"]),
                (str(n) for n in data["relations"]),
            )
            triples = [Triple(*map(int, row)) for row in data["triples"]]
    except KgError:
        raise
    except (OSError, ValueError, TypeError, zipfile.BadZipFile) as e:
        raise KgError(f"{path}: not a graph snapshot ({e})") from e
    return Kg(entities, relations, triples)


def load(path: str, add_inverses: bool = True) -> Kg:
    """Load a snapshot or a TSV file, by extension."""
    if path.endswith(".npz"):
        return load_snapshot(path)
    return load_tsv(path, add_inverses)
