import numpy as np
import pytest

from bridgenet import tensor as T
from bridgenet.gradcheck import check_tfr
from bridgenet.tensor import Rng, ShapeError, Tensor
from bridgenet.tfr import TFR_DEPTHS, TfrConfig, TfrLayer, TfrStack, tfr_forward, tfr_layer_forward


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def inputs(cb=6, cp=4, hw=8, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(1, cb, hw, hw))), Tensor(rng.normal(size=(1, cp, hw, hw)))


def test_named_depths():
    assert TFR_DEPTHS == {"base": 2, "large": 4, "huge": 6}
    assert TfrConfig.named("large", 8, 8).depth == 4
    with pytest.raises(ValueError):
        TfrConfig(0, 8, 8)


def test_zero_layer_is_identity_and_shape():
    layer = TfrLayer(6, 4, Rng(0))
    b, x = inputs()
    assert tfr_layer_forward(layer, b, x).shape == (1, 4, 8, 8)
    layer.zero_()
    assert np.array_equal(tfr_layer_forward(layer, b, x).data, x.data)


def test_spatial_mismatch():
    layer = TfrLayer(6, 4, Rng(0))
    b, _ = inputs()
    with pytest.raises(ShapeError):
        tfr_layer_forward(layer, b, Tensor(np.zeros((1, 4, 4, 4))))


def test_gradient_reaches_bridge_and_task_feature():
    layer = TfrLayer(6, 4, Rng(1))
    b, x = inputs()
    b.requires_grad = x.requires_grad = True
    T.tsum(tfr_layer_forward(layer, b, x)).backward()
    assert np.abs(b.grad).max() > 0 and np.abs(x.grad).max() > 0


def test_stack_composition():
    stack = TfrStack(TfrConfig(2, 6, 4), Rng(2))
    b, x = inputs()
    manual = tfr_layer_forward(stack.layers[1], b, tfr_layer_forward(stack.layers[0], b, x))
    assert tfr_forward(stack, b, x).data.tobytes() == manual.data.tobytes()
    one = TfrStack(TfrConfig(1, 6, 4), Rng(3))
    assert np.array_equal(tfr_forward(one, b, x).data, tfr_layer_forward(one.layers[0], b, x).data)


def test_empty_stack_rejected():
    stack = TfrStack(TfrConfig(1, 6, 4), Rng(0))
    stack.layers = []
    b, x = inputs()
    with pytest.raises(ValueError):
        tfr_forward(stack, b, x)


def test_parameter_count_linear_in_depth():
    counts = [TfrStack(TfrConfig(m, 6, 4), Rng(0)).num_parameters() for m in (1, 2, 3, 4, 6)]
    per = counts[0]
    assert counts == [per * m for m in (1, 2, 3, 4, 6)]


def test_bridge_reinjected_at_every_layer():
    stack = TfrStack(TfrConfig(3, 6, 4), Rng(4))
    b, x = inputs()
    with_bridge = tfr_forward(stack, b, x, return_all=True)
    without = tfr_forward(stack, Tensor(np.zeros_like(b.data)), x, return_all=True)
    for a, c in zip(with_bridge, without):
        assert np.abs(a.data - c.data).max() > 1e-8


def test_gradient_check():
    assert check_tfr(Rng(7)).passed
