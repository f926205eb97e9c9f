import time

import pytest

from casdis import data as dt
from casdis import evaluation as ev
from casdis import training as tr


@pytest.fixture(scope="session")
def two_community_small():
    """Small two-community dataset for fast checks."""
    spec = dt.SyntheticSpec(
        communities=2,
        nodes_per_community=20,
        cross_community_prob=0.1,
        cascades=40,
        length_range=(4, 10),
        seed=101,
    )
    cascades, labels = dt.generate_synthetic(spec)
    parsed = dt.parse_cascades(" ".join(c) + "\n" for c in cascades)
    return parsed, labels


@pytest.fixture(scope="session")
def two_community_run():
    """The scaled-down learning experiment: 2x20 nodes, 500 cascades,
    cross-community probability 0.1, K=2, D=32, at most 50 epochs.

    Shared by the training sanity checks and the acceptance suite.
    """
    spec = dt.SyntheticSpec(
        communities=2,
        nodes_per_community=20,
        cross_community_prob=0.1,
        cascades=500,
        length_range=(12, 36),
        seed=2024,
    )
    cascades, _labels = dt.generate_synthetic(spec)
    parsed = dt.parse_cascades(" ".join(c) + "\n" for c in cascades)
    split = dt.split_dataset(parsed.cascades, seed=0)

    config = tr.TrainConfig(
        lr_init=0.01,
        batch_size=16,
        max_epochs=50,
        patience=8,
        dropout_rate=1e-4,
        gumbel_enabled=True,
        seed=7,
        k=2,
        d=32,
    )
    start = time.perf_counter()
    result = tr.train(config, split, parsed.vocabulary.size)
    elapsed = time.perf_counter() - start
    report = ev.evaluate(result.params, split.test)
    return {
        "num_nodes": parsed.vocabulary.size,
        "split": split,
        "config": config,
        "result": result,
        "report": report,
        "seconds": elapsed,
    }
