import numpy as np
import pytest

from gnnmerge.graph import from_edges, generate_sbm


def naive_matmul(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def gauss_solve(a, b):
    """Gaussian elimination with partial pivoting, column by column."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    for c in range(n):
        piv = c + int(np.argmax(np.abs(a[c:, c])))
        a[[c, piv]] = a[[piv, c]]
        b[[c, piv]] = b[[piv, c]]
        for r in range(c + 1, n):
            f = a[r, c] / a[c, c]
            a[r, c:] -= f * a[c, c:]
            b[r] -= f * b[c]
    x = np.zeros_like(b)
    for r in range(n - 1, -1, -1):
        x[r] = (b[r] - a[r, r + 1 :] @ x[r + 1 :]) / a[r, r]
    return x


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def dense_adjacency(graph):
    a = np.zeros((graph.num_nodes, graph.num_nodes))
    for v in range(graph.num_nodes):
        a[v, graph.neighbors(v)] = 1.0
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph():
    """Six nodes: a triangle, a tail, and one isolated node."""
    feats = np.random.default_rng(3).standard_normal((6, 4))
    return from_edges(6, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)], feats, labels=[0, 1, 0, 1, 0, 1])


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm(4, 20, 0.3, 0.05, 8, 0.5, seed=11)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one verdict line per acceptance criterion, echoed at session end."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
