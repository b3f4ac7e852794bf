"""Shared oracles and fixtures.

Oracles here are deliberately independent of the package internals: dense
matrix arithmetic, direct summation, and central finite differences. Tests
compare the package's sparse/taped paths against these.
"""

import os

import numpy as np
import pytest

from gdcn.synthetic import make_synthetic_files


def finite_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b, floor: float = 1e-4) -> float:
    # floor: magnitude below which the comparison is effectively absolute;
    # central differences at h=1e-5 carry ~1e-10 absolute noise.
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def dense_normalize(a_dense: np.ndarray, renorm_trick: bool = False) -> np.ndarray:
    """Dense oracle for the normalizing operator."""
    a = np.asarray(a_dense, dtype=np.float64)
    n = a.shape[0]
    if renorm_trick:
        a_hat = a + np.eye(n)
        d = a_hat.sum(axis=1)
        d_is = np.diag(1.0 / np.sqrt(d))
        return d_is @ a_hat @ d_is
    d = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(d > 0, 1.0 / np.sqrt(d), 0.0)
    return np.eye(n) + np.diag(inv) @ a @ np.diag(inv)


def random_edges(rng: np.random.Generator, n: int, p: float = 0.5):
    """Random undirected edge list on n nodes."""
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j))
    return edges


@pytest.fixture(scope="session")
def synthetic_files(tmp_path_factory):
    """Content/cites files for a separable 3-cluster graph."""
    directory = tmp_path_factory.mktemp("synth")
    content, cites = make_synthetic_files(str(directory), n_per_cluster=10,
                                          n_clusters=3, seed=7)
    return content, cites


def cora_dir():
    """Directory holding cora.content / cora.cites, if supplied."""
    for candidate in (os.environ.get("GDCN_DATA_DIR"),
                      os.path.join(os.path.dirname(__file__), "..", "data", "cora")):
        if not candidate:
            continue
        content = os.path.join(candidate, "cora.content")
        cites = os.path.join(candidate, "cora.cites")
        if os.path.exists(content) and os.path.exists(cites):
            return candidate
    return None


requires_cora = pytest.mark.skipif(
    cora_dir() is None,
    reason="Cora content/cites files not available (place them in data/cora/ "
           "or set GDCN_DATA_DIR); they cannot be fetched in this environment",
)
