import numpy as np
import pytest

from hazlab import layers, tensor as T
from hazlab.errors import ContractError
from hazlab.layers import batchnorm_eval, batchnorm_train, make_bn_state, se_gate
from hazlab.tensor import Tensor


def _state(c, **kw):
    return make_bn_state(c, **kw)


def test_constant_input_normalizes_to_zero():
    s = _state(2)
    x = Tensor(np.stack([np.full((2, 4, 4), 3.0), np.full((2, 4, 4), -1.0)], axis=1))
    y, _ = batchnorm_train(x, s)
    assert np.allclose(y.data, 0.0)


def test_affine_readout_on_standardized_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3, 6, 6))
    mu, var = layers.batch_moments(x)
    x = (x - mu[None, :, None, None]) / np.sqrt(var)[None, :, None, None]
    s = _state(3, eps=1e-12)
    s.gamma.data[:] = 2.0
    s.beta.data[:] = 3.0
    y, _ = batchnorm_train(Tensor(x), s)
    assert np.allclose(y.data, 2.0 * x + 3.0, rtol=1e-9)


def test_output_moments_when_identity_affine():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3, 5, 5))
    s = _state(3)
    y, _ = batchnorm_train(Tensor(x), s)
    mu, var = layers.batch_moments(y.data)
    _, vin = layers.batch_moments(x)
    assert np.all(np.abs(mu) < 1e-10)
    assert np.allclose(var, vin / (vin + s.eps), atol=1e-10)


def test_exponential_running_update_exact():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 2, 3, 3))
    s = _state(2)
    r_mean = rng.normal(size=2)
    r_var = rng.random(2) + 0.5
    s = s.with_stats(r_mean, r_var)
    _, s2 = batchnorm_train(Tensor(x), s)
    mu, var = layers.batch_moments(x)
    assert np.array_equal(s2.running_mean, 0.9 * r_mean + 0.1 * mu)
    assert np.array_equal(s2.running_var, 0.9 * r_var + 0.1 * var)
    # input state untouched
    assert np.array_equal(s.running_mean, r_mean)


def test_min_batch_size_contract():
    s = _state(1)
    with pytest.raises(ContractError):
        batchnorm_train(Tensor(np.zeros((1, 1, 1, 1))), s)


def test_eval_identity_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 4, 4))
    s = _state(2)
    y = batchnorm_eval(Tensor(x), s)
    assert np.allclose(y.data, x / np.sqrt(1.0 + s.eps))


def test_eval_has_no_cross_sample_coupling():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3, 4, 4))
    s = _state(3).with_stats(rng.normal(size=3), rng.random(3) + 0.1)
    batch = batchnorm_eval(Tensor(x), s)
    single = batchnorm_eval(Tensor(x[1:2]), s)
    assert np.array_equal(batch.data[1:2], single.data)


def test_train_eval_equivalence_with_batch_moments():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 5, 5))
    s = _state(3)
    s.gamma.data[:] = rng.normal(size=3)
    s.beta.data[:] = rng.normal(size=3)
    y_train, _ = batchnorm_train(Tensor(x), s)
    mu, var = layers.batch_moments(x)
    y_eval = batchnorm_eval(Tensor(x), s.with_stats(mu, var))
    assert np.max(np.abs(y_train.data - y_eval.data)) < 1e-12


def test_channel_mismatch_raises():
    with pytest.raises(ContractError):
        batchnorm_eval(Tensor(np.zeros((1, 3, 2, 2))), _state(2))


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    s = _state(2)
    s.gamma.data[:] = rng.normal(size=2) + 1.5
    s.beta.data[:] = rng.normal(size=2)
    # random readout weights: a plain sum of squares is nearly invariant under
    # normalization, leaving gradients too small for finite differences
    r = Tensor(rng.normal(size=(3, 2, 4, 4)))

    def f(x_, gamma, beta):
        st = layers.BatchNormState(2, gamma, beta, s.running_mean, s.running_var)
        y, _ = batchnorm_train(x_, st)
        return (r * y + (r * y) ** 2.0).sum()

    err = T.grad_check(f, [x, Tensor(s.gamma.data.copy()), Tensor(s.beta.data.copy())])
    assert err < 1e-5


def test_batchnorm_eval_gradcheck():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 2, 3, 3)))
    stats_mean = rng.normal(size=2)
    stats_var = rng.random(2) + 0.3

    def f(x_, gamma, beta):
        st = layers.BatchNormState(2, gamma, beta, stats_mean, stats_var)
        y = batchnorm_eval(x_, st)
        return (y * y).sum()

    err = T.grad_check(f, [x, Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2))])
    assert err < 1e-6


class TestSeGate:
    def _weights(self, c, r, rng=None, zero=False):
        cr = c // r
        if zero:
            w1 = np.zeros((cr, c, 1, 1))
            w2 = np.zeros((c, cr, 1, 1))
        else:
            w1 = rng.normal(size=(cr, c, 1, 1))
            w2 = rng.normal(size=(c, cr, 1, 1))
        return Tensor(w1), Tensor(np.zeros(cr)), Tensor(w2), Tensor(np.zeros(c))

    def test_zero_weights_halve_input(self):
        x = Tensor(np.random.default_rng(8).normal(size=(2, 4, 3, 3)))
        w1, b1, w2, b2 = self._weights(4, 4, zero=True)
        out = se_gate(x, w1, b1, w2, b2, reduction=4)
        assert np.allclose(out.data, 0.5 * x.data)

    def test_saturated_gate_is_identity(self):
        x = Tensor(np.random.default_rng(9).normal(size=(1, 4, 3, 3)))
        w1, b1, w2, _ = self._weights(4, 4, zero=True)
        b2 = Tensor(np.full(4, 50.0))
        out = se_gate(x, w1, b1, w2, b2, reduction=4)
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_output_bounded_by_input(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        out = se_gate(x, *self._weights(4, 2, rng=rng), reduction=2)
        assert np.all(np.abs(out.data) <= np.abs(x.data) + 1e-15)

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)))
        w1, b1, w2, b2 = self._weights(4, 4, rng=rng)

        def f(x_, w1_, w2_):
            return (se_gate(x_, w1_, b1, w2_, b2, reduction=4) ** 2.0).sum()

        assert T.grad_check(f, [x, w1, w2]) < 1e-5

    def test_bad_reduction_raises(self):
        x = Tensor(np.zeros((1, 4, 2, 2)))
        with pytest.raises(ContractError):
            se_gate(x, Tensor(np.zeros((1, 4, 1, 1))), Tensor(np.zeros(1)),
                    Tensor(np.zeros((4, 1, 1, 1))), Tensor(np.zeros(4)), reduction=3)
