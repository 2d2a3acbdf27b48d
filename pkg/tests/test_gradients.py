"""Finite-difference checks for every parameterized kernel.

All checks run in float64 with central differences at h=1e-4.  Seeds
are fixed so no sampled point sits near a ReLU kink or a pooling tie.
"""

import numpy as np

import oracles
from cloudpyr import kernels
from cloudpyr.kernels import BatchNormState, ConvSpec

H = 1e-4
KERNEL_TOL = 1e-5


def scalar_sum(x):
    # deterministic weights so the reduced loss exercises every element
    w = np.linspace(0.5, 1.5, x.size).reshape(x.shape)
    return float((x * w).sum())


def scalar_sum_grad(x):
    return np.linspace(0.5, 1.5, x.size).reshape(x.shape)


class TestConvGradients:
    def setup_method(self):
        rng = np.random.default_rng(101)
        self.x = rng.standard_normal((1, 2, 5, 5))
        self.spec = ConvSpec(
            kernel=rng.standard_normal((3, 2, 3, 3)),
            bias=rng.standard_normal(3),
            padding=1,
        )
        self.rng = rng

    def _loss_from_out(self, out):
        return scalar_sum(out)

    def test_grad_input(self):
        up = scalar_sum_grad(kernels.conv2d(self.x, self.spec))
        gi, _, _ = kernels.conv2d_backward(self.x, self.spec, up)
        worst = oracles.check_grad(
            lambda x: scalar_sum(kernels.conv2d(x, self.spec)),
            self.x.copy(), gi, self.rng, n_checks=10, tol=1e-6,
        )
        assert worst <= 1e-6

    def test_grad_kernel(self):
        up = scalar_sum_grad(kernels.conv2d(self.x, self.spec))
        _, gk, _ = kernels.conv2d_backward(self.x, self.spec, up)

        def loss_of_kernel(k):
            spec = ConvSpec(kernel=k, bias=self.spec.bias, padding=1)
            return scalar_sum(kernels.conv2d(self.x, spec))

        oracles.check_grad(loss_of_kernel, self.spec.kernel.copy(), gk,
                           self.rng, n_checks=10, tol=1e-6)

    def test_grad_bias(self):
        up = scalar_sum_grad(kernels.conv2d(self.x, self.spec))
        _, _, gb = kernels.conv2d_backward(self.x, self.spec, up)

        def loss_of_bias(b):
            spec = ConvSpec(kernel=self.spec.kernel, bias=b, padding=1)
            return scalar_sum(kernels.conv2d(self.x, spec))

        oracles.check_grad(loss_of_bias, self.spec.bias.copy(), gb,
                           self.rng, n_checks=3, tol=1e-6)

    def test_strided_grad_input(self):
        rng = np.random.default_rng(102)
        x = rng.standard_normal((2, 2, 8, 8))
        spec = ConvSpec(
            kernel=rng.standard_normal((3, 2, 3, 3)),
            bias=rng.standard_normal(3),
            stride=2, padding=1,
        )
        up = scalar_sum_grad(kernels.conv2d(x, spec))
        gi, gk, gb = kernels.conv2d_backward(x, spec, up)
        oracles.check_grad(lambda v: scalar_sum(kernels.conv2d(v, spec)),
                           x.copy(), gi, rng, n_checks=10, tol=KERNEL_TOL)

        def loss_of_kernel(k):
            s = ConvSpec(kernel=k, bias=spec.bias, stride=2, padding=1)
            return scalar_sum(kernels.conv2d(x, s))

        oracles.check_grad(loss_of_kernel, spec.kernel.copy(), gk, rng,
                           n_checks=10, tol=KERNEL_TOL)


class TestBatchNormGradients:
    def setup_method(self):
        rng = np.random.default_rng(111)
        self.x = rng.standard_normal((2, 3, 4, 4)) * 2.0 + 0.5
        self.gamma = rng.standard_normal(3) + 1.5
        self.beta = rng.standard_normal(3)
        self.rng = rng

    def _state(self, gamma=None, beta=None, mode="training"):
        st = BatchNormState.identity(3, dtype=np.float64, mode=mode)
        st.gamma = self.gamma.copy() if gamma is None else gamma
        st.beta = self.beta.copy() if beta is None else beta
        return st

    def test_grad_input_training(self):
        st = self._state()
        up = scalar_sum_grad(self.x)
        gi, _, _ = kernels.batchnorm_backward(self.x, st, up)

        def loss(x):
            return scalar_sum(kernels.batchnorm(x, self._state()))

        oracles.check_grad(loss, self.x.copy(), gi, self.rng,
                           n_checks=10, tol=KERNEL_TOL)

    def test_grad_gamma_beta(self):
        st = self._state()
        up = scalar_sum_grad(self.x)
        _, gg, gb = kernels.batchnorm_backward(self.x, st, up)

        def loss_gamma(g):
            return scalar_sum(kernels.batchnorm(self.x, self._state(gamma=g)))

        def loss_beta(b):
            return scalar_sum(kernels.batchnorm(self.x, self._state(beta=b)))

        oracles.check_grad(loss_gamma, self.gamma.copy(), gg, self.rng,
                           n_checks=3, tol=KERNEL_TOL)
        oracles.check_grad(loss_beta, self.beta.copy(), gb, self.rng,
                           n_checks=3, tol=KERNEL_TOL)

    def test_grad_input_inference(self):
        st = self._state(mode="inference")
        st.running_mean = self.rng.standard_normal(3)
        st.running_var = np.abs(self.rng.standard_normal(3)) + 0.5
        up = scalar_sum_grad(self.x)
        gi, _, _ = kernels.batchnorm_backward(self.x, st, up)
        want = up * (st.gamma / np.sqrt(st.running_var + st.epsilon))[None, :, None, None]
        assert np.max(np.abs(gi - want)) < 1e-12


class TestReLUGradient:
    def test_away_from_kink(self):
        rng = np.random.default_rng(121)
        x = rng.standard_normal((1, 2, 6, 6))
        x[np.abs(x) < 1e-3] = 0.5  # keep every element off the kink
        up = scalar_sum_grad(x)
        g = kernels.relu_backward(x, up)
        oracles.check_grad(lambda v: scalar_sum(kernels.relu(v)),
                           x.copy(), g, rng, n_checks=10, tol=1e-6)


class TestPoolUpsampleGradients:
    def test_maxpool_fd(self):
        rng = np.random.default_rng(131)
        x = rng.standard_normal((1, 2, 6, 6))
        up = scalar_sum_grad(kernels.maxpool2(x))
        g = kernels.maxpool2_backward(x, up)
        oracles.check_grad(lambda v: scalar_sum(kernels.maxpool2(v)),
                           x.copy(), g, rng, n_checks=10, tol=1e-6)

    def test_upsample_fd(self):
        rng = np.random.default_rng(132)
        x = rng.standard_normal((1, 2, 4, 4))
        up = scalar_sum_grad(kernels.upsample2_nearest(x))
        g = kernels.upsample2_backward(up)
        oracles.check_grad(lambda v: scalar_sum(kernels.upsample2_nearest(v)),
                           x.copy(), g, rng, n_checks=10, tol=1e-6)
