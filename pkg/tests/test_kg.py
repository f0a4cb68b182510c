import os
from pathlib import Path

import numpy as np
import pytest

from chainrules import kg as kg_store
from chainrules.kg import Kg, KgError, ParseError, Triple

from conftest import random_rows


def write(path: str, lines: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(lines)
    return path


def test_single_line_gets_inverse(tmp_path: Path) -> None:
    p = write(os.path.join(tmp_path, "t.txt"), "a\tr\tb\n")
    kg = kg_store.load_tsv(p, add_inverses=True)
    assert kg.num_entities == 2
    assert kg.num_relations == 2
    assert len(kg) == 2
    r = kg.relations.id("r")
    assert kg.relations.name(kg.inverse(r)) == "r_inv"
    assert Triple(1, kg.inverse(r), 0) in kg


def test_duplicates_stored_once(tmp_path: Path) -> None:
    p = write(os.path.join(tmp_path, "t.txt"), "a\tr\tb\na\tr\tb\n")
    assert len(kg_store.load_tsv(p, add_inverses=False)) == 1
    assert len(kg_store.load_tsv(p, add_inverses=True)) == 2


def test_parse_error_has_line(tmp_path: Path) -> None:
    p = write(os.path.join(tmp_path, "t.txt"), "a\tr\tb\n\na\tr\n")
    with pytest.raises(ParseError) as e:
        kg_store.load_tsv(p)
    assert e.value.line == 3


def test_empty_file(tmp_path: Path) -> None:
    p = write(os.path.join(tmp_path, "t.txt"), "")
    with pytest.raises(KgError):
        kg_store.load_tsv(p)


def test_inverse_collision() -> None:
    with pytest.raises(KgError):
        kg_store.from_name_triples([("a", "r", "b"), ("a", "r_inv", "b")])


def test_inverse_is_involution(small_kg: Kg) -> None:
    for r in range(small_kg.num_relations):
        assert small_kg.inverse(small_kg.inverse(r)) == r
        assert small_kg.inverse(r) != r
    assert small_kg.null_id == small_kg.num_relations
    assert small_kg.relation_name(small_kg.null_id) == "NULL"
    for h, r, t in small_kg.triples:
        assert Triple(t, small_kg.inverse(r), h) in small_kg


def test_relations_between_matches_scan() -> None:
    for seed in range(100):
        kg = kg_store.from_name_triples(random_rows(seed, 12, 4, 50))
        for a in range(kg.num_entities):
            for b in range(kg.num_entities):
                scan = {r for h, r, t in kg.triples if h == a and t == b}
                assert kg_store.relations_between(kg, a, b) == scan


def test_relations_between_no_self_loop(chain_kg: Kg) -> None:
    a = chain_kg.entities.id("a")
    c = chain_kg.entities.id("c")
    assert kg_store.relations_between(chain_kg, a, a) == frozenset()
    assert kg_store.relations_between(chain_kg, a, c) == {chain_kg.relations.id("s")}


def test_out_adj_is_degree(small_kg: Kg) -> None:
    for e in range(small_kg.num_entities):
        out = [(r, t) for h, r, t in small_kg.triples if h == e]
        assert list(small_kg.out_adj[e]) == out
        assert small_kg.degree(e) == len(out)


def test_remove_fraction() -> None:
    rows = [("e%d" % i, "r", "e%d" % (i + 1)) for i in range(100)]
    kg = kg_store.from_name_triples(rows)
    assert len(kg_store.remove_fraction(kg, 0.33, 0).base_triples()) == 67
    assert kg_store.remove_fraction(kg, 0.0, 0).triples == kg.triples
    assert len(kg_store.remove_fraction(kg, 1.0, 0)) == 0
    once = kg_store.remove_fraction(kg, 0.5, 9)
    again = kg_store.remove_fraction(kg, 0.5, 9)
    assert once.triples == again.triples
    # Inverses leave together with their base triple.
    assert len(once) == 2 * len(once.base_triples())
    with pytest.raises(KgError):
        kg_store.remove_fraction(kg, 1.5, 0)


def test_splits_share_vocabulary(tmp_path: Path) -> None:
    write(os.path.join(tmp_path, "train.txt"), "a\tp\tb\nb\tq\tc\n")
    write(os.path.join(tmp_path, "test.txt"), "a\ts\td\n")
    splits = kg_store.load_splits(str(tmp_path))
    assert splits.valid is None
    assert splits.train.relations.names == splits.test.relations.names
    assert splits.train.num_entities == 4
    d = splits.everything.entities.id("d")
    a = splits.everything.entities.id("a")
    s = splits.everything.relations.id("s")
    assert d in splits.everything.successors(a, s)
    assert Triple(a, s, d) not in splits.train


def test_snapshot(tmp_path: Path, small_kg: Kg) -> None:
    path = os.path.join(tmp_path, "kg.npz")
    kg_store.save_snapshot(small_kg, path)
    loaded = kg_store.load(path)
    assert loaded.triples == small_kg.triples
    assert loaded.entities.names == small_kg.entities.names
    assert loaded.relations.names == small_kg.relations.names
    first = open(path, "rb").read()
    kg_store.save_snapshot(small_kg, path)
    assert open(path, "rb").read() == first


def test_snapshot_version(tmp_path: Path) -> None:
    path = os.path.join(tmp_path, "kg.npz")
    np.savez(path, version=np.array(99))
    with pytest.raises(KgError):
        kg_store.load_snapshot(path)


def test_snapshot_rejects_other_archives(tmp_path: Path, small_kg: Kg) -> None:
    path = os.path.join(tmp_path, "other.npz")
    np.savez(path, version=np.array(1), config=np.array("{}"))
    with pytest.raises(KgError, match="missing entities"):
        kg_store.load_snapshot(path)
    kg_store.save_snapshot(small_kg, path)
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data[: len(data) // 2])
    with pytest.raises(KgError):
        kg_store.load(path)
