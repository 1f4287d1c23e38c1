import numpy as np
import pytest

from mrae.optim import SGDMomentum, sgd_momentum_step
from mrae.tensor import (
    GraphError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    load_tensor,
    mul,
    relu,
    save_tensor,
    stack,
    tsum,
)


def test_grad_of_weighted_sum_is_input():
    x = np.arange(6.0).reshape(2, 3)
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    tsum(mul(w, Tensor(x))).backward()
    np.testing.assert_array_equal(w.grad, x)


def test_zero_scaled_loss_has_zero_grad():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    tsum(mul(Tensor(0.0), relu(w) * w)).backward()
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_grad_accumulates_over_shared_use():
    w = Tensor(np.array([2.0]), requires_grad=True)
    (tsum(w * w) + tsum(w)).backward()
    assert w.grad[0] == pytest.approx(5.0)


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (w * w).backward()


def test_second_backward_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(w * w)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    big = Tensor(np.array([1e200]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        big * big


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_stack_and_getitem_grads():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    s = stack([a, b])
    tsum(s[1] * s[0]).backward()
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_tensor_dump_round_trip(tmp_path):
    x = np.random.default_rng(3).standard_normal((2, 3, 4))
    path = tmp_path / "x.bin"
    save_tensor(path, Tensor(x))
    back = load_tensor(path)
    assert back.shape == x.shape
    np.testing.assert_array_equal(back.data, x)
    raw = path.read_bytes()
    assert int.from_bytes(raw[:8], "little") == 3
    assert len(raw) == 8 * (1 + 3) + 8 * x.size


# -- optimizer ---------------------------------------------------------------------


def _param(value):
    return Parameter(np.array([value], dtype=float), "p")


def test_sgd_plain_step():
    p = _param(0.0)
    sgd_momentum_step({"p": p}, {"p": np.array([1.0])}, lr=0.1, momentum=0.0, state={})
    assert p.data[0] == pytest.approx(-0.1)


def test_sgd_zero_grad_leaves_params():
    p = _param(1.5)
    sgd_momentum_step({"p": p}, {"p": np.zeros(1)}, lr=0.1, momentum=0.9, state={})
    assert p.data[0] == 1.5


def test_sgd_momentum_unrolled():
    g = 0.7
    p = _param(0.0)
    state = {}
    for _ in range(2):
        sgd_momentum_step({"p": p}, {"p": np.array([g])}, lr=1.0, momentum=0.9, state=state)
    assert p.data[0] == pytest.approx(-2.9 * g, rel=1e-12)


def test_sgd_rejects_bad_hyperparameters():
    p = _param(0.0)
    with pytest.raises(ValueError):
        sgd_momentum_step({"p": p}, {"p": np.ones(1)}, lr=-1.0, momentum=0.0, state={})
    with pytest.raises(ValueError):
        sgd_momentum_step({"p": p}, {"p": np.ones(1)}, lr=0.1, momentum=1.0, state={})
    with pytest.raises(ShapeError):
        sgd_momentum_step({"p": p}, {"p": np.ones(2)}, lr=0.1, momentum=0.0, state={})


def test_sgd_class_uses_accumulated_grads():
    p = _param(1.0)
    p.requires_grad = True
    opt = SGDMomentum([p], lr=0.5, momentum=0.0)
    tsum(p * p).backward()
    opt.step()
    assert p.data[0] == pytest.approx(0.0)
    opt.zero_grad()
    assert p.grad is None
