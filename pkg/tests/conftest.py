"""Shared helpers for the test suite."""

import numpy as np
import pytest

from plastinet.params import ParamStore


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def init_store(model, seed=0) -> ParamStore:
    """Fresh parameter store initialized from a fixed stream."""
    store = ParamStore()
    model.init_params(store, np.random.default_rng(seed))
    return store


def set_param(store: ParamStore, pid: str, value) -> None:
    arr = store.entries[pid]
    arr[...] = np.asarray(value, dtype=np.float64).reshape(arr.shape)
