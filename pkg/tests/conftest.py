import numpy as np
import pytest

from cptr.discretization import ReservoirModel, Scaling, SourceTerm, State
from cptr.grid import StructuredGrid
from cptr.props import PropertyConfig


def make_model(nx=4, ny=4, nz=1, L=(50.0, 50.0, 1.0), perm=3e-13, sources=True, gravity=0.0,
               dt=864000.0, props=None, scaling=True, ordering="field-wise", seed=0):
    g = StructuredGrid(nx, ny, nz, *L)
    props = props or PropertyConfig()
    rng = np.random.default_rng(seed)
    n = g.n_cells
    src = []
    if sources:
        Lx, Ly, Lz = L
        src = [
            SourceTerm.in_box(g, (0, 0, 0), (Lx / nx, Ly / ny, Lz), "injector_const_rate", rate=3e-7),
            SourceTerm.in_box(g, (Lx - Lx / nx, Ly - Ly / ny, 0), (Lx, Ly, Lz),
                              "producer_const_rate", rate=3e-7),
            SourceTerm.in_box(g, (Lx - Lx / nx, 0, 0), (Lx, Ly / ny, Lz), "producer_bhp",
                              well_index=1e-9, p_bhp=4.0e7),
            SourceTerm.in_box(g, (0, Ly - Ly / ny, 0), (Lx / nx, Ly, Lz), "heater", U=10.0),
        ]
    perm_arr = perm * np.exp(rng.uniform(-1, 1, n)) if perm else np.zeros(n)
    return ReservoirModel(g, 0.2, perm_arr, perm_arr, perm_arr, props, src, dt=dt,
                          gravity=gravity, scaling=Scaling.from_initial(props, 288.706, 0.9, scaling),
                          ordering=ordering)


def random_states(n, seed=0):
    rng = np.random.default_rng(seed)
    prev = State(4.1e7 + rng.uniform(0, 2e5, n), 300 + rng.uniform(0, 10, n), rng.uniform(0.3, 0.8, n))
    cur = State(prev.p + rng.uniform(-1e5, 1e5, n), prev.T + rng.uniform(-2, 2, n),
                prev.S_o + rng.uniform(-0.05, 0.05, n))
    return cur, prev


@pytest.fixture
def model():
    return make_model()


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def emit(line):
        print(line)
        ACCEPTANCE_LINES.append(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
