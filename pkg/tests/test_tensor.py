import numpy as np
import pytest

from conftest import check_gradients
from errors import DomainError, ShapeError
from tensor import Tensor, backward, concat, no_grad, pad, pointwise, resample, softmax


def _rand(*shape, seed=0, low=-1.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, shape)


class TestPointwiseForward:
    def test_leaky_relu_slope(self):
        out = pointwise(Tensor([-1.0, 0.0, 2.0]), "leaky_relu", 0.2)
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 2.0])

    def test_softplus_at_zero(self):
        np.testing.assert_allclose(pointwise(Tensor([0.0]), "softplus").data, [np.log(2.0)])

    def test_softplus_is_stable_for_large_inputs(self):
        out = pointwise(Tensor([800.0, -800.0]), "softplus").data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[0], 800.0)

    def test_clamp_min(self):
        np.testing.assert_allclose(pointwise(Tensor([0.05, 0.3]), "clamp_min", 0.11).data, [0.11, 0.3])

    def test_log_of_non_positive_is_domain_error(self):
        with pytest.raises(DomainError):
            pointwise(Tensor([1.0, 0.0]), "log")

    def test_division_by_zero_is_domain_error(self):
        with pytest.raises(DomainError):
            pointwise(Tensor([1.0]), "div", Tensor([0.0]))

    def test_incompatible_shapes_raise_shape_error(self):
        with pytest.raises(ShapeError):
            pointwise(Tensor(np.ones((2, 3))), "add", Tensor(np.ones((3, 2))))

    def test_unknown_fn(self):
        with pytest.raises(ValueError):
            pointwise(Tensor([1.0]), "cube")


class TestPointwiseGradients:
    @pytest.mark.parametrize("fn", ["exp", "softplus"])
    def test_unary(self, fn):
        check_gradients(lambda t: pointwise(t, fn), _rand(3, 4))

    def test_log(self):
        check_gradients(lambda t: pointwise(t, "log"), _rand(3, 4, low=0.5, high=2.0))

    def test_leaky_relu_away_from_kink(self):
        x = _rand(3, 4)
        x[np.abs(x) < 0.05] = 0.3
        check_gradients(lambda t: pointwise(t, "leaky_relu", 0.2), x)

    def test_clamp_min_away_from_kink(self):
        x = _rand(3, 4)
        x[np.abs(x - 0.11) < 0.05] = 0.5
        check_gradients(lambda t: pointwise(t, "clamp_min", 0.11), x)

    @pytest.mark.parametrize("fn", ["add", "sub", "mul"])
    def test_binary_with_broadcast(self, fn):
        check_gradients(lambda a, b: pointwise(a, fn, b), _rand(2, 3, 4), _rand(3, 1, seed=1))

    def test_div(self):
        check_gradients(lambda a, b: pointwise(a, "div", b), _rand(2, 3), _rand(2, 3, seed=1, low=0.5, high=2.0))

    def test_tanh_sigmoid_ndtr(self):
        check_gradients(lambda t: t.tanh() + t.sigmoid() * t.ndtr(), _rand(5))

    def test_softmax(self):
        check_gradients(lambda t: softmax(t, axis=1), _rand(1, 3, 2, 2))

    def test_concat_and_getitem(self):
        check_gradients(lambda a, b: concat([a, b])[:, 1:4], _rand(1, 2, 3, 3), _rand(1, 3, 3, 3, seed=1))

    def test_reshape_transpose_sum(self):
        check_gradients(lambda t: t.transpose(1, 0, 2).reshape(4, -1).sum(axis=1), _rand(3, 4, 2))


class TestResample:
    def test_space_to_depth_roundtrip(self):
        x = Tensor(_rand(1, 3, 8, 8))
        back = resample(resample(x, "space_to_depth", 2), "depth_to_space", 2)
        np.testing.assert_array_equal(back.data, x.data)

    def test_space_to_depth_shape(self):
        assert resample(Tensor(np.zeros((1, 3, 8, 16))), "space_to_depth", 4).shape == (1, 48, 2, 4)

    def test_nearest_down_takes_top_left(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(resample(Tensor(x), "nearest_down", 2).data[0, 0], [[0, 2], [8, 10]])

    def test_bilinear_up_of_constant_is_constant(self):
        out = resample(Tensor(np.full((1, 2, 3, 3), 0.7)), "bilinear_up", 4)
        assert out.shape == (1, 2, 12, 12)
        np.testing.assert_allclose(out.data, 0.7)

    def test_bilinear_up_mass_preserves_sum(self):
        x = _rand(1, 1, 3, 5, low=0.0, high=4.0)
        out = resample(Tensor(x), "bilinear_up_mass", 4)
        np.testing.assert_allclose(out.data.sum(), x.sum(), rtol=1e-12)

    def test_indivisible_extent_is_shape_error(self):
        with pytest.raises(ShapeError, match="width"):
            resample(Tensor(np.zeros((1, 1, 8, 6))), "space_to_depth", 4)

    @pytest.mark.parametrize("mode", ["space_to_depth", "nearest_down", "bilinear_up", "bilinear_up_mass"])
    def test_gradients(self, mode):
        check_gradients(lambda t: resample(t, mode, 2), _rand(1, 2, 4, 4))

    @pytest.mark.parametrize("mode", ["reflect", "zeros"])
    def test_pad_gradients(self, mode):
        check_gradients(lambda t: pad(t, 1, mode), _rand(1, 1, 3, 4))

    def test_reflect_pad_values(self):
        x = Tensor(np.arange(3.0).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(pad(x, 1, "reflect").data[0, 0, 1], [1, 0, 1, 2, 1])


class TestBackward:
    def test_non_scalar_loss(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(t * 2.0)

    def test_shared_subexpression_accumulates(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        y = t * t
        backward((y + y).sum())
        np.testing.assert_allclose(t.grad, [8.0])

    def test_no_grad_records_nothing(self):
        t = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = (t * 3.0).sum()
        assert out.creator is None and not out.requires_grad

    def test_leaf_gradients_accumulate_across_calls(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((t * 3.0).sum())
        backward((t * 3.0).sum())
        np.testing.assert_allclose(t.grad, [6.0, 6.0])
