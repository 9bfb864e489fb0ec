import numpy as np
import pytest

from app.core import ops
from app.core.gradcheck import finite_diff_check
from app.core.tensor import Tensor
from app.models.config import TccConfig
from app.services import tcc
from app.services.gradcheck_suite import CASES, DEFAULT_SIZES, random_block, run_gradcheck

pytestmark = pytest.mark.gradcheck


def test_linear_function_is_exact(rng):
    coeffs = np.array([1.0, -2.0, 0.5, 3.0])
    error = finite_diff_check(lambda x: ops.sum(ops.mul(x, coeffs)), Tensor(rng.standard_normal(4)))
    assert error <= 1e-9


def test_softmax_sum_is_constant():
    error = finite_diff_check(lambda x: ops.sum(ops.softmax(x)), Tensor(np.random.default_rng(3).standard_normal(6)))
    assert error <= 1e-9


def test_conv_sum(rng):
    weight = rng.standard_normal((2, 3, 3, 3))
    error = finite_diff_check(
        lambda x: ops.sum(ops.conv2d(x, weight, np.zeros(2), padding=1)),
        Tensor(rng.standard_normal((1, 3, 4, 4))),
    )
    assert error < 1e-6


def test_detects_a_wrong_gradient():
    def fn(x):
        # forward is x², backward claims 3x²
        return ops._emit("bad", x.data ** 2, (x,), lambda g: (3 * g * x.data ** 2,))

    assert finite_diff_check(lambda x: ops.sum(fn(x)), Tensor(np.array([1.5, -0.7]))) > 0.1


def test_full_tcc_block_gradient(rng):
    cfg = TccConfig(n_keys=4, base_channels=8, stack_depth=2)
    block = random_block(rng, 16, 0, cfg)
    error = finite_diff_check(
        lambda x: ops.sum(tcc.tcc_refine(x, 0, cfg, block)),
        Tensor(rng.standard_normal((1, 16, 8, 8))),
    )
    assert error < 1e-4


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_case_passes_at_three_shapes(name):
    rows = run_gradcheck(seed=0, names=[name])
    assert len(rows) == len(DEFAULT_SIZES)
    for row in rows:
        assert row.passed, f"{row.name} at {row.shape}: {row.max_rel_error:.3e}"
