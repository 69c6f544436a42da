import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimlottery import _kernels_py as py
from trimlottery import kernels

ck = pytest.importorskip("trimlottery._ckernels")

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3),
                   st.integers(0, 12), st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31))


@settings(max_examples=60, deadline=None)
@given(shapes)
def test_im2col_col2im_agree(case):
    b, c, k, stride, dil, extra, dtype, seed = case
    lp = dil * (k - 1) + 1 + extra
    l_out = (lp - dil * (k - 1) - 1) // stride + 1
    rng = np.random.default_rng(seed)
    xp = rng.standard_normal((b, c, lp)).astype(dtype)
    a, e = ck.im2col(xp, k, stride, dil, l_out), py.im2col(xp, k, stride, dil, l_out)
    assert a.dtype == e.dtype == dtype
    np.testing.assert_array_equal(a, e)
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_allclose(ck.col2im(cols, c, lp, k, stride, dil), py.col2im(cols, c, lp, k, stride, dil),
                               rtol=1e-6, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 20),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31), st.booleans())
def test_maxpool_agree(b, c, window, length, dtype, seed, ties):
    length = max(length, window)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, length))
    if ties:
        x = np.round(x)  # ties resolve to the first maximum in both backends
    x = x.astype(dtype)
    (oa, ia), (oe, ie) = ck.maxpool_forward(x, window), py.maxpool_forward(x, window)
    np.testing.assert_array_equal(oa, oe)
    np.testing.assert_array_equal(ia, ie)
    g = rng.standard_normal(oa.shape).astype(dtype)
    np.testing.assert_array_equal(ck.maxpool_backward(g, ia, window, length),
                                  py.maxpool_backward(g, ie, window, length))


def test_compiled_backend_selected():
    assert kernels.BACKEND == "cython"


def test_env_forces_fallback():
    code = "from trimlottery import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"TRIMLOTTERY_PURE_PYTHON": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
