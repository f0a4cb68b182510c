import sys
from os.path import dirname as d
from os.path import abspath, join
from typing import List

import pytest

root_dir = d(d(abspath(__file__)))
sys.path.append(join(root_dir, "src"))

from chainrules import kg as kg_store  # noqa: E402
from chainrules.kg import Kg, NameTriple  # noqa: E402


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run training-scale acceptance tests",
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: List[pytest.Item]
) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_rows(
    seed: int,
    entities: int,
    relations: int,
    triples: int,
) -> List[NameTriple]:
    import numpy as np

    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(triples):
        h, t = rng.integers(entities, size=2)
        r = rng.integers(relations)
        rows.append(("e%d" % h, "r%d" % r, "e%d" % t))
    return rows


@pytest.fixture
def chain_kg() -> Kg:
    """a -p-> b -q-> c, closed by a -s-> c."""
    return kg_store.from_name_triples(
        [("a", "p", "b"), ("b", "q", "c"), ("a", "s", "c")]
    )


@pytest.fixture
def small_kg() -> Kg:
    return kg_store.from_name_triples(random_rows(7, 30, 3, 120))
