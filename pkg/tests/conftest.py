import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mde.data import NegativeSampler, generate_synthetic, split_dataset  # noqa: E402
from mde.graph import build_graphs  # noqa: E402
from mde.model import init_params  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small():
    """50 x 100 clustered synthetic data, split and with graphs built."""
    ds, fv, ft = generate_synthetic(50, 100, 32, 16, 5, seed=0)
    ds = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    feats = {"visual": fv, "textual": ft}
    return ds, feats, build_graphs(ds, feats, k_item=10, k_user=40)


def make_tiny(seed=0, users=5, items=8, d=4, k_item=3, k_user=2):
    """Tiny instance with random (non-zero) preference logits and biases."""
    rng = np.random.default_rng(seed)
    ds, fv, ft = generate_synthetic(users, items, 6, 5, 2, seed=seed)
    ds = split_dataset(ds, (0.8, 0.1, 0.1), seed=seed)
    feats = {"visual": fv, "textual": ft}
    graphs = build_graphs(ds, feats, k_item=k_item, k_user=k_user)
    params = init_params(users, items, {"visual": 6, "textual": 5}, d, seed=seed, tradeoff_logits=True)
    for k in params:
        if k.startswith(("pref_logits", "proj_bias", "tradeoff_logits")):
            params[k] = rng.normal(size=params[k].shape)
    u, i = ds.pairs("train")
    batch = NegativeSampler(ds).sample(u, i, rng)
    return ds, feats, graphs, params, batch


@pytest.fixture
def tiny():
    return make_tiny()
