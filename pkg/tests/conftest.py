import numpy as np
import pytest

from spectral_adapt.graph import build_undirected


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < p
    return build_undirected(np.stack([iu[hit], ju[hit]], axis=1), n)


def connected_random_graph(n, p, seed):
    """Random graph with a spanning path added, so it is always connected."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < p
    path = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    edges = np.vstack([np.stack([iu[hit], ju[hit]], axis=1), path])
    return build_undirected(edges, n)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SPECTRAL_ADAPT_CACHE", str(tmp_path / "cache"))
