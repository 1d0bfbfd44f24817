import numpy as np
import pytest
from hypothesis import settings

from getscal.graph import build_graph

# fixed example generation so a green run stays green on rerun
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")


def random_graph(n=6, f=3, k=2, p=0.5, seed=0, name="rand"):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    labels = np.arange(n) % k
    return build_graph(edges, n, rng.standard_normal((n, f)), labels, k, name=name)


@pytest.fixture
def small_graph():
    return random_graph()
