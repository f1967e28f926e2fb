import pytest
import numpy as np

from numpy.testing import assert_allclose

from crowdcount.errors import ContractError
from crowdcount.optim import Adam, AdamState, adam_step
from crowdcount.tensor import Parameter


def named(value, name="w"):
    return Parameter(np.asarray(value, dtype=np.float64), name=name)


class TestAdam:
    def test_zero_gradient_changes_nothing(self):
        w = named([1.0, -2.0, 3.0])
        w.grad = np.zeros(3)
        Adam([w], AdamState(lr=0.1, weight_decay=0.0)).step()
        assert np.array_equal(w.data, [1.0, -2.0, 3.0])

    @pytest.mark.parametrize("grad", [[0.5, -3.0], [1e-3, 7.0]])
    def test_one_step_without_momentum(self, grad):
        lr, eps = 0.01, 1e-8
        w = named([1.0, 1.0])
        w.grad = np.array(grad)
        adam_step([w], AdamState(lr=lr, beta1=0.0, beta2=0.0, eps=eps, weight_decay=0.0))
        g = np.array(grad)
        assert_allclose(w.data, 1.0 - lr * g / (np.abs(g) + eps), rtol=1e-12)

    def test_minimises_a_quadratic(self):
        w = named([3.0, -2.0])
        opt = Adam([w], AdamState(lr=0.05, weight_decay=0.0))
        for _ in range(400):
            w.grad = 2.0 * w.data
            opt.step()
        assert np.all(np.abs(w.data) < 0.25)
        assert opt.state.step == 400

    def test_decoupled_weight_decay_shrinks_weights(self):
        w = named([2.0])
        w.grad = np.zeros(1)
        Adam([w], AdamState(lr=0.1, weight_decay=0.5)).step()
        assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_step_zeroes_gradients(self):
        w = named([1.0])
        w.grad = np.ones(1)
        Adam([w]).step()
        assert w.grad is None

    def test_missing_gradient(self):
        a, b = named([1.0], "a"), named([1.0], "b")
        a.grad = np.ones(1)
        with pytest.raises(ContractError, match="b"):
            Adam([a, b]).step()

    @pytest.mark.parametrize("names", [("w", "w"), ("w", "")])
    def test_parameter_names_must_be_unique(self, names):
        with pytest.raises(ContractError):
            Adam([named([1.0], n) for n in names])

    def test_resumes_from_existing_moments(self):
        w = named([1.0])
        state = AdamState(lr=0.1, m={"w": np.array([0.3])}, v={"w": np.array([0.2])}, step=5)
        Adam([w], state)
        assert state.m["w"][0] == 0.3
        assert state.v["w"][0] == 0.2


def test_default_learning_rate():
    assert AdamState().lr == 1e-5
