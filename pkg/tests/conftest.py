import numpy as np
import pytest
from hypothesis import strategies as st

from fdia_imaging.grid_case import Branch, Bus, BusType, Generator, GridCase, build_dc_model, bundled_case57

TWO_BUS = """function mpc = case2
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0     0   0   0   1   1   0   230   1   1.1   0.9;
    2   1   100   0   0   0   1   1   0   230   1   1.1   0.9;
];
mpc.gen = [
    1   0   0   0   0   1   100   1   250   0;
];
mpc.branch = [
    1   2   0   0.5   0   0   0   0   0   0   1   -360   360;
];
"""

PAPER_TARGETS = [2, 6, 10, 14, 19, 25, 31, 35, 38, 43, 47, 51, 57]


@pytest.fixture(scope="session")
def case57():
    return bundled_case57()


@pytest.fixture(scope="session")
def model57(case57):
    return build_dc_model(case57, 0.02)


@st.composite
def grid_cases(draw, min_buses=2, max_buses=12):
    """Random connected cases: a spanning tree plus optional extra branches."""
    n = draw(st.integers(min_buses, max_buses))
    ids = draw(st.lists(st.integers(1, 999), min_size=n, max_size=n, unique=True))
    slack = draw(st.integers(0, n - 1))
    loads = draw(st.lists(st.floats(0, 300, allow_nan=False), min_size=n, max_size=n))
    x = st.floats(0.01, 1.0, allow_nan=False)
    branches = []
    for k in range(1, n):
        parent = draw(st.integers(0, k - 1))
        branches.append(Branch(ids[parent], ids[k], draw(x), True))
    for _ in range(draw(st.integers(0, n))):
        a, b = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        if a != b:
            branches.append(Branch(ids[a], ids[b], draw(x), draw(st.booleans())))
    buses = [Bus(ids[i], BusType.SLACK if i == slack else BusType.PQ, loads[i], 230.0) for i in range(n)]
    gens = [Generator(ids[slack], draw(st.floats(1, 1000)))]
    return GridCase(100.0, buses, branches, gens)


def random_state(rng, n):
    return rng.uniform(-0.5, 0.5, size=n)
