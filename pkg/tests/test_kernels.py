import os
import subprocess
import sys

import numpy as np
import pytest

from tokenunet import _kernels_py, kernels

try:
    from tokenunet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


@pytest.mark.parametrize("n,stride,want", [(8, 1, 8), (8, 2, 4), (7, 2, 4), (1, 2, 1)])
def test_out_extent(n, stride, want):
    assert _kernels_py.out_extent(n, stride) == want


def test_im2col_column_is_padded_patch(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    cols = _kernels_py.im2col3d(x, 1)
    assert cols.shape == (2 * 27, 60)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    # voxel (1, 2, 3) -> column index 1*20 + 2*5 + 3
    assert np.array_equal(cols[:, 33], xp[:, 1:4, 2:5, 3:6].reshape(-1))


@pytest.mark.parametrize("stride", [1, 2])
def test_col2im_is_adjoint_of_im2col(rng, stride):
    shape = (3, 5, 4, 6)
    x = rng.standard_normal(shape)
    cols = _kernels_py.im2col3d(x, stride)
    c = rng.standard_normal(cols.shape)
    lhs = (cols * c).sum()
    rhs = (x * _kernels_py.col2im3d(c, shape, stride)).sum()
    assert np.isclose(lhs, rhs)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 4, 4, 4), (3, 5, 7, 6), (4, 16, 8, 8)])
def test_compiled_kernels_match_numpy(rng, dtype, stride, shape):
    x = rng.standard_normal(shape).astype(dtype)
    a = _ckernels.im2col3d(x, stride)
    b = _kernels_py.im2col3d(x, stride)
    assert a.dtype == b.dtype == dtype
    assert np.array_equal(a, b)
    c = rng.standard_normal(b.shape).astype(dtype)
    ga, gb = _ckernels.col2im3d(c, shape, stride), _kernels_py.col2im3d(c, shape, stride)
    assert ga.dtype == dtype
    assert np.allclose(ga, gb, rtol=1e-6, atol=1e-6)


@needs_ext
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_env_var_forces_numpy_fallback():
    env = dict(os.environ, TOKENUNET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import tokenunet; print(tokenunet.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_fallback_forward_backward_match(tmp_path):
    # the same conv forward/backward under both backends, compared in a child process
    script = (
        "import numpy as np\n"
        "from tokenunet.autodiff import Tensor, conv3d, precision\n"
        "rng = np.random.default_rng(0)\n"
        "with precision('f64'):\n"
        "    x = Tensor(rng.standard_normal((3, 6, 6, 6)), requires_grad=True)\n"
        "    w = Tensor(rng.standard_normal((4, 3, 3, 3, 3)), requires_grad=True)\n"
        "    y = conv3d(x, w, stride=2)\n"
        "    (y * y).sum().backward()\n"
        "np.savez(OUT, y=y.data, gx=x.grad, gw=w.grad)\n"
    )
    res = {}
    for flag in ("0", "1"):
        path = tmp_path / f"r{flag}.npz"
        env = dict(os.environ, TOKENUNET_PURE_PYTHON=flag)
        subprocess.run([sys.executable, "-c", f"OUT = {str(path)!r}\n" + script], env=env, check=True)
        res[flag] = np.load(path)
    for k in ("y", "gx", "gw"):
        assert np.allclose(res["0"][k], res["1"][k], rtol=1e-10, atol=1e-10)
