import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from routechoice.mdp import synth_grid_network  # noqa: E402
from routechoice.network import FeatureBank, FeatureConfig, build_action_table  # noqa: E402


class Small:
    """A 4x4 grid with its action table and a feature bank."""

    def __init__(self, rows=4, cols=4, seed=0, use_context=True):
        self.network = synth_grid_network(rows, cols, 100.0, seed=seed)
        self.actions = build_action_table(self.network)
        self.bank = FeatureBank(self.network, self.actions, FeatureConfig(use_context=use_context))

    def sample_states(self, rng, n):
        """Random (link, dest, valid action) triples with link != dest."""
        L = self.network.n_links
        links, dests, acts = [], [], []
        while len(links) < n:
            s, d = rng.integers(L, size=2)
            if s == d:
                continue
            m = self.bank.masks(np.array([s]), np.array([d]))[0]
            if not m.any():
                continue
            links.append(s)
            dests.append(d)
            acts.append(rng.choice(np.flatnonzero(m)))
        return np.array(links), np.array(dests), np.array(acts)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture(scope="session")
def small_noctx():
    return Small(use_context=False)


def numeric_grad(params, loss_fn, h=1e-4):
    """Central finite differences of ``loss_fn()`` over every entry of ``params.flat``."""
    out = np.zeros(params.size)
    flat = params.flat
    for i in range(params.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def grad_errors(params, analytic, loss_fn, h=1e-4):
    """Relative error per named array between ``analytic`` and finite differences."""
    num = numeric_grad(params, loss_fn, h)
    out = {}
    for name, (a, b, _) in params.offsets.items():
        out[name] = rel_err(analytic.flat[a:b], num[a:b])
    return out
