import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetdiff import _kernels as K

needs_numba = pytest.mark.skipif(K.BACKEND != "numba", reason="numba backend not active")


def coo(seed, n_rows=7, n_cols=5, nnz=30, k=4):
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, n_rows, nnz).astype(np.int64)
    cols = rng.integers(0, n_cols, nnz).astype(np.int64)
    return rows, cols, rng.normal(size=nnz), rng.normal(size=(n_cols, k)), rng.normal(size=(n_rows, k))


def segments(seed, n_seg=6):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, 6, n_seg)
    offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    return rng.normal(size=offsets[-1]) * 5, rng.normal(size=offsets[-1]), offsets


@needs_numba
@given(st.integers(0, 10_000))
def test_scatter_backends_agree_bitwise(seed):
    rows, cols, vals, x, _ = coo(seed)
    assert K.coo_scatter(rows, cols, vals, x, 7).tobytes() == K.np_coo_scatter(rows, cols, vals, x, 7).tobytes()


@needs_numba
@given(st.integers(0, 10_000))
def test_entry_dot_backends_agree(seed):
    rows, cols, _, x, g = coo(seed)
    np.testing.assert_allclose(K.coo_entry_dot(rows, cols, g, x), K.np_coo_entry_dot(rows, cols, g, x), rtol=1e-13, atol=1e-14)


@needs_numba
@given(st.integers(0, 10_000))
def test_softmax_backends_agree(seed):
    s, g, off = segments(seed)
    y = K.segment_softmax(s, off)
    np.testing.assert_allclose(y, K.np_segment_softmax(s, off), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(K.segment_softmax_grad(y, g, off), K.np_segment_softmax_grad(y, g, off), rtol=1e-12, atol=1e-14)


def test_scatter_matches_dense_product():
    rows, cols, vals, x, _ = coo(0)
    dense = np.zeros((7, 5))
    np.add.at(dense, (rows, cols), vals)
    for fn in (K.coo_scatter, K.np_coo_scatter):
        np.testing.assert_allclose(fn(rows, cols, vals, x, 7), dense @ x, atol=1e-13)


def test_softmax_segments_sum_to_one():
    s, _, off = segments(1)
    for fn in (K.segment_softmax, K.np_segment_softmax):
        y = fn(s, off)
        np.testing.assert_allclose(np.add.reduceat(y, off[:-1]), 1.0, atol=1e-15)


def test_empty_inputs():
    e = np.zeros(0, dtype=np.int64)
    x = np.ones((3, 2))
    for fn in (K.coo_scatter, K.np_coo_scatter):
        assert fn(e, e, np.zeros(0), x, 4).tolist() == [[0.0, 0.0]] * 4
    for fn in (K.coo_entry_dot, K.np_coo_entry_dot):
        assert fn(e, e, x, x).shape == (0,)


def test_non_contiguous_input_accepted():
    rows, cols, vals, x, _ = coo(2, k=6)
    view = x[:, ::2]
    np.testing.assert_allclose(K.coo_scatter(rows, cols, vals, view, 7), K.np_coo_scatter(rows, cols, vals, view, 7), atol=1e-14)


SNIPPET = """
import json
from hetdiff import _kernels
from hetdiff.graph import HeteroGraph
from hetdiff.training import TrainConfig, train
g = HeteroGraph(4, 3, [(0, 0), (0, 1), (1, 1), (2, 2), (3, 0), (3, 2)])
res = train(TrainConfig(dim=4, T=5, tau=2, batch_size=3, epochs=3, seed=1), g)
print(json.dumps({"backend": _kernels.BACKEND, "loss": [r.l_total for r in res.history]}))
"""


def run_backend(disable: bool) -> dict:
    env = dict(os.environ)
    env.pop("HETDIFF_DISABLE_NUMBA", None)
    if disable:
        env["HETDIFF_DISABLE_NUMBA"] = "1"
    proc = subprocess.run([sys.executable, "-c", SNIPPET], capture_output=True, text=True, env=env, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def test_env_flag_selects_numpy_and_training_agrees():
    fallback = run_backend(True)
    assert fallback["backend"] == "numpy"
    default = run_backend(False)
    if default["backend"] != "numba":
        pytest.skip("numba not installed")
    np.testing.assert_allclose(default["loss"], fallback["loss"], rtol=1e-10)
