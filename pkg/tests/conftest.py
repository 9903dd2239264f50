import numpy as np
import pytest

from roadsage.graph import RoadEdge, RoadGraph, RoadNode


def straight_edge(eid, u, v, pu, pv, **attrs):
    return RoadEdge.from_geometry(eid, u, v, [pu, pv], **attrs)


def random_graph(rng: np.random.Generator, n_nodes: int, n_edges: int, self_loops: bool = True) -> RoadGraph:
    """Random directed multigraph on a jittered grid, straight-line geometries."""
    nodes = [RoadNode(f"n{i}", float(100 * i + rng.uniform(-20, 20)), float(rng.uniform(-500, 500))) for i in range(n_nodes)]
    edges = []
    for k in range(n_edges):
        u, v = (int(x) for x in rng.integers(n_nodes, size=2))
        a, b = nodes[u], nodes[v]
        if u == v:
            if not self_loops:
                continue
            geom = [(a.x, a.y), (a.x + 30.0, a.y), (a.x + 30.0, a.y + 30.0), (a.x, a.y)]
        else:
            geom = [(a.x, a.y), (b.x, b.y)]
        edges.append(
            RoadEdge.from_geometry(
                f"e{k:03d}", a.id, b.id, geom, travel_time_s=float(rng.uniform(1, 60)), throughput_vpd=float(rng.uniform(0, 1e4))
            )
        )
    return RoadGraph(nodes, edges)


def graph_from_pairs(pairs, spacing=100.0, **attrs) -> RoadGraph:
    """Graph over named nodes laid out on a line; ``pairs`` are (edge id, u, v)."""
    names = sorted({n for _, u, v in pairs for n in (u, v)})
    pos = {n: (spacing * i, 10.0 * (i % 2)) for i, n in enumerate(names)}
    nodes = [RoadNode(n, *pos[n]) for n in names]
    edges = [RoadEdge.from_geometry(eid, u, v, [pos[u], pos[v]], **attrs) for eid, u, v in pairs]
    return RoadGraph(nodes, edges)


@pytest.fixture(scope="session")
def small_city():
    from roadsage.synth import SynthConfig, generate_synthetic

    return generate_synthetic(SynthConfig(grid_rows=5, grid_cols=5, arterial_every=2, seed=11))


# acceptance reporting: one PASS/FAIL line per criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    seen = []

    def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}" + (f": {detail}" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        seen.append(line)
        return ok

    yield report
    if not seen:
        ACCEPTANCE_LINES.append(f"FAIL {request.node.name}: raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
