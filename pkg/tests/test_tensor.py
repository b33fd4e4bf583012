import threading

import numpy as np
import pytest
from conftest import weighted_grad_error

from rwsaunet import tensor as tn
from rwsaunet.tensor import Module, Parameter, ShapeError, Tensor


@pytest.mark.parametrize("name,fn", [
    ("add", lambda a, b: a + b),
    ("sub", lambda a, b: a - b),
    ("mul", lambda a, b: a * b),
    ("div", lambda a, b: a / (b * b + 1.0)),
    ("matmul", lambda a, b: tn.matmul(a, b.transpose(1, 0))),
    ("exp_log", lambda a, b: tn.log(tn.exp(a) + tn.exp(b))),
    ("sqrt", lambda a, b: tn.sqrt(a * a + 1.0) * b),
    ("sigmoid_silu", lambda a, b: tn.sigmoid(a) + tn.silu(b)),
    ("softplus", lambda a, b: tn.softplus(a * 3.0) * b),
    ("trig", lambda a, b: tn.sin(a) * tn.cos(b)),
    ("atan2", lambda a, b: tn.atan2(a, b + 3.0)),
    ("power", lambda a, b: (a * a + 0.5) ** 0.3 + b),
    ("softmax", lambda a, b: tn.softmax(a, -1) * b),
    ("concat_split", lambda a, b: tn.concat(tn.split(a, [1, 3], axis=1)[::-1] + [b], axis=1)),
    ("flip_pad", lambda a, b: tn.pad(tn.flip(a, 1), ((1, 0), (0, 2))) * 2.0),
    ("reduce", lambda a, b: a.mean(axis=0, keepdims=True) * b + b.sum(axis=1, keepdims=True) * a),
])
def test_primitive_gradients(name, fn, f64, rng):
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(3, 4)))
    assert weighted_grad_error(lambda: fn(a, b), [a, b]) < 1e-5, name


def test_layer_norm_gradient(f64, rng):
    x = Parameter(rng.normal(size=(2, 5, 6)))
    g = Parameter(rng.normal(size=6))
    b = Parameter(rng.normal(size=6))
    assert weighted_grad_error(lambda: tn.layer_norm(x, g, b), [x, g, b]) < 1e-5


def test_wrap_distance_values():
    d = tn.wrap_distance(Tensor(np.array([np.pi - 0.1 - (-np.pi + 0.1), 0.3, -2 * np.pi + 0.2])))
    np.testing.assert_allclose(d.data, [0.2, 0.3, 0.2], atol=1e-6)


def test_atan2_origin_is_zero_with_zero_gradient(f64):
    y = Parameter(np.zeros(1))
    x = Parameter(np.zeros(1))
    out = tn.atan2(y, x)
    assert out.data[0] == 0.0
    tn.backward(out.sum())
    assert y.grad[0] == 0.0 and x.grad[0] == 0.0


def test_broadcasting_is_narrow():
    a = Tensor(np.ones((2, 3)))
    assert (a + Tensor(np.ones(3))).shape == (2, 3)
    assert (a * 2.0).shape == (2, 3)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((2, 1, 3)))
    with pytest.raises(ShapeError):
        a + Tensor(np.ones(2))


def test_reshape_checks_element_count():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).reshape((4, 2))


def test_non_finite_values_are_rejected():
    with pytest.raises(tn.NonFiniteError):
        tn.log(Tensor(np.array([-1.0])))


def test_backward_requires_scalar():
    p = Parameter(np.ones(3))
    with pytest.raises(ShapeError):
        tn.backward(p * 2.0)


def test_gradients_accumulate_over_reuse(f64):
    p = Parameter(np.array([2.0]))
    tn.backward((p * p + p * 3.0).sum())
    np.testing.assert_allclose(p.grad, [7.0])


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with tn.no_grad():
        y = p * 2.0
    assert not y.requires_grad and y.parents == ()
    assert tn.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []
    with tn.no_grad():
        t = threading.Thread(target=lambda: seen.append(tn.grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


def test_precision_context():
    with tn.precision(np.float64):
        assert Parameter([1.0]).dtype == np.float64
    assert Parameter([1.0]).dtype == np.float32


class _Pair(Module):
    def __init__(self):
        super().__init__()
        self.a = Parameter(np.ones(2))
        self.b = Parameter(np.full(2, 2.0))


class _Root(Module):
    def __init__(self):
        super().__init__()
        self.left = _Pair()
        self.right = _Pair()


def test_tie_shares_storage_and_gradient(f64):
    root = _Root()
    handle = tn.tie(root.left.a, root, "right.a")
    assert root.right.a is root.left.a
    assert handle.aliases == ["right.a"]
    sites = [n for n, _ in root.named_parameter_sites()]
    uniq = [n for n, _ in root.named_parameters()]
    assert len(sites) == 4 and len(uniq) == 3
    assert root.num_parameters() == 6
    loss = (root.left.a * root.left.b).sum() + (root.right.a * 3.0).sum()
    tn.backward(loss)
    np.testing.assert_allclose(root.left.a.grad, [2.0 + 3.0, 2.0 + 3.0])


def test_tie_rejects_shape_mismatch():
    root = _Root()
    root.right.a = Parameter(np.ones(3))
    with pytest.raises(ShapeError):
        tn.tie(root.left.a, root, "right.a")


def test_registration_order_is_assignment_order():
    names = [n for n, _ in _Root().named_parameters()]
    assert names == ["left.a", "left.b", "right.a", "right.b"]


def test_graph_is_freed_after_backward():
    p = Parameter(np.ones(2))
    y = (p * 2.0).sum()
    tn.backward(y)
    assert y.parents == ()
