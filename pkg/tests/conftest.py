import numpy as np
import pytest

import hamgnn.autodiff as ad
from hamgnn.energy import EnergyParams
from hamgnn.graph import build_graph


def random_graph(rng, n, edge_prob=0.3, ensure_edge=True):
    """Random undirected graph; with ensure_edge at least one edge exists."""
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < edge_prob:
                edges.append((u, v))
    if ensure_edge and not edges and n >= 2:
        edges.append((0, 1))
    return build_graph(n, edges)


def random_energy_params(rng, r, hidden=None, readout=None, scale=1.0, eps=1e-12):
    h = hidden or r
    h_out = readout or r
    return EnergyParams(
        w1=ad.parameter(rng.normal(0.0, scale, size=(2 * r, h))),
        w2=ad.parameter(rng.normal(0.0, scale, size=(h, h_out))),
        eps=eps,
    )


def central_difference(f, x, h=1e-5):
    """Entrywise central finite differences of scalar f at matrix x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(got, want, floor=1e-10):
    got = np.asarray(got)
    want = np.asarray(want)
    return float(np.max(np.abs(got - want) / (np.abs(want) + floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
