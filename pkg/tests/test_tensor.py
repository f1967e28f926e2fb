import math

import pytest
import numpy as np

from numpy.testing import assert_allclose

from crowdcount import tensor as T
from crowdcount.errors import ContractError, NumericAbort, ShapeError
from crowdcount.gradcheck import PRIMITIVES, check_primitive
from crowdcount.tensor import Module, Parameter, Tensor


class TestUnfold:
    def test_disjoint_tiling(self, rng):
        x = rng.normal(size=(1, 8, 8))
        rows = T.unfold(Tensor(x), 2, 2, 0).data
        assert rows.shape == (16, 4)
        for j in range(16):
            r, c = divmod(j, 4)
            assert np.array_equal(rows[j], x[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2].ravel())

    def test_overlapping_window_count(self):
        # Brute force: every top-left corner of a 7x7 window inside the padded 70x70 image, stride 4
        starts = [i for i in range(0, 64 + 2 * 3 - 7 + 1) if i % 4 == 0]
        rows = T.unfold(Tensor(np.ones((3, 64, 64))), 7, 4, 3)
        assert rows.shape == (len(starts) ** 2, 3 * 49)
        assert rows.shape[0] == 256

    def test_zeros_stay_zero(self):
        rows = T.unfold(Tensor(np.zeros((2, 7, 7))), 3, 2, 1)
        assert rows.shape == (16, 18)
        assert not rows.data.any()

    def test_window_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.unfold(Tensor(np.zeros((1, 4, 4))), 7, 2, 1)

    def test_fold_conserves_mass_for_tilings(self, rng):
        x = rng.uniform(size=(3, 12, 12))
        back = T.fold(T.unfold(Tensor(x), 3, 3, 0), x.shape, 3, 3, 0)
        assert back.data.sum() == pytest.approx(x.sum(), rel=1e-12)
        assert_allclose(back.data, x)


class TestSoftmaxRows:
    @pytest.mark.parametrize("row, expected", [
        ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
        ([1000.0, 0.0], [1.0, 0.0]),
        ([math.log(1), math.log(2), math.log(3)], [1 / 6, 2 / 6, 3 / 6]),
    ])
    def test_hand_cases(self, row, expected):
        out = T.softmax_rows(Tensor([row])).data[0]
        assert_allclose(out, expected, atol=1e-12)

    def test_rows_sum_to_one_and_ignore_shifts(self, rng):
        x = rng.normal(scale=5.0, size=(6, 7))
        out = T.softmax_rows(Tensor(x)).data
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)
        shifted = T.softmax_rows(Tensor(x + rng.normal(size=(6, 1)) * 10)).data
        assert_allclose(shifted, out, atol=1e-12)

    def test_needs_a_matrix(self):
        with pytest.raises(ShapeError):
            T.softmax_rows(Tensor(np.zeros(3)))


class TestBackward:
    def test_linear_map_gradient(self, rng):
        w = Parameter(rng.normal(size=(2, 3)))
        x = rng.normal(size=(3, 1))
        T.tensor_sum(T.matmul(w, Tensor(x))).backward()
        assert_allclose(w.grad, np.tile(x.T, (2, 1)))

    def test_sigmoid_slope_at_zero(self):
        w = Parameter(0.0)
        T.sigmoid(w).backward()
        assert float(w.grad) == pytest.approx(0.25)

    def test_non_scalar_loss(self):
        w = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_gradients_accumulate(self, rng):
        w = Parameter(rng.normal(size=4))
        for _ in range(2):
            T.tensor_sum(w * w).backward()
        assert_allclose(w.grad, 4.0 * w.data)

    def test_no_grad_builds_no_graph(self):
        w = Parameter(np.ones(3))
        with T.no_grad():
            out = w * 3.0
        assert not out.requires_grad
        assert T.is_grad_enabled()

    def test_bit_deterministic(self, rng):
        x = rng.normal(size=(2, 6, 6))
        weight = rng.normal(size=(3, 2, 3, 3))

        def run():
            w = Parameter(weight.copy())
            out = T.conv2d(Tensor(x), w, None, stride=1, padding=1)
            T.tensor_sum(T.gelu(out)).backward()
            return out.data, w.grad

        (out_a, grad_a), (out_b, grad_b) = run(), run()
        assert np.array_equal(out_a, out_b)
        assert np.array_equal(grad_a, grad_b)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name, seed):
    fn, make_inputs = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    assert check_primitive(fn, make_inputs(rng), rng) < 1e-4


class TestNumericAbort:
    def test_overflow_is_reported(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NumericAbort, match="exp"):
                T.exp(Tensor([1000.0]))

    def test_log_of_zero(self):
        with pytest.raises(NumericAbort):
            T.log(Tensor([0.0, 1.0]))


def test_item_needs_one_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_module_names_follow_attribute_paths():
    class Inner(Module):
        def __init__(self):
            self.weight = Parameter(np.zeros(2))

    class Outer(Module):
        def __init__(self):
            self.blocks = [Inner(), Inner()]
            self.heads = {"a": Inner()}
            self.scale = Parameter(1.0)

    names = [name for name, _ in Outer().assign_names().named_parameters()]
    assert names == ["blocks.0.weight", "blocks.1.weight", "heads.a.weight", "scale"]


def test_conv_transpose_inverts_stride_two_shape(rng):
    x = Tensor(rng.normal(size=(4, 5, 6)))
    out = T.conv_transpose2d(x, Tensor(rng.normal(size=(4, 2, 4, 4))), None, stride=2, padding=1)
    assert out.shape == (2, 10, 12)


def test_avg_pool_needs_a_tiling():
    assert T.avg_pool2d(Tensor(np.ones((1, 4, 4))), 2).shape == (1, 2, 2)
    with pytest.raises(ShapeError):
        T.avg_pool2d(Tensor(np.ones((1, 5, 4))), 2)
