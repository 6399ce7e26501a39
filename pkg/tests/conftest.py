"""Shared fixtures: a small synthetic benchmark and a source-trained detector."""

import numpy as np
import pytest

# The GEMMs here are small enough that BLAS threading only adds overhead;
# one thread also matches the single-core timing budget of the acceptance
# suite.  The limiter object must stay alive for the limit to hold.
try:
    from threadpoolctl import threadpool_limits

    _limiter = threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    _limiter = None

from vtdetect.adaptation import SourceSchedule, train_source
from vtdetect.data import SynthConfig, generate_synthetic, make_shift_pair
from vtdetect.detector import ArchConfig


@pytest.fixture(scope="session")
def small_benchmark():
    """Reduced source/target datasets sharing the default domain shift."""
    base = SynthConfig(seed=100)
    src_cfg, tgt_cfg = make_shift_pair(base)
    source = generate_synthetic(src_cfg, 16, id_prefix="src")
    target_train = generate_synthetic(
        SynthConfig(**{**tgt_cfg.__dict__, "seed": 101}), 16, id_prefix="tt"
    )
    target_test = generate_synthetic(
        SynthConfig(**{**tgt_cfg.__dict__, "seed": 102}), 8, id_prefix="te"
    )
    return source, target_train, target_test


@pytest.fixture(scope="session")
def trained_source_params(small_benchmark):
    """A detector trained on the small source split; shared read-only.

    The reduced split has fewer images than the default benchmark, so it
    gets proportionally more epochs to reach confident supervision heads.
    """
    source, _, _ = small_benchmark
    schedule = SourceSchedule(phases=((20, 3e-2), (4, 3e-3)))
    return train_source(source, ArchConfig(), schedule, seed=7)
