"""Tests for ZOH discretization and the scan kernels.

Oracles live here, written independently of the library paths they check:
a truncated-series matrix exponential for the discretization, and a naive
per-step python loop for the scans.
"""

import numpy as np
import pytest

from denviscom import ssm
from denviscom import tensor as T


def series_expm_diag(z, terms=40):
    """Truncated-series exponential for diagonal entries: sum z^k / k!."""
    out = np.zeros_like(np.asarray(z, dtype=np.float64))
    term = np.ones_like(out)
    for k in range(1, terms + 1):
        out += term
        term = term * z / k
    return out


def series_bbar_diag(z, delta, b, terms=40):
    """Bbar = (za)^{-1} (e^{za} - 1) delta b via the series sum z^k/(k+1)!."""
    z = np.asarray(z, dtype=np.float64)
    acc = np.zeros_like(z)
    term = np.ones_like(z)
    for k in range(terms):
        acc += term
        term = term * z / (k + 2)
    return acc * delta * b


def loop_scan(a_bar, b_bar, c, x):
    """Naive per-step scalar-loop recurrence, h0 = 0."""
    a_bar, b_bar, c, x = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (a_bar, b_bar, c, x))
    channels, length = x.shape
    n = a_bar.shape[1]
    y = np.zeros((channels, length))
    for ch in range(channels):
        h = np.zeros(n)
        for t in range(length):
            h = a_bar[ch] * h + b_bar[ch] * x[ch, t]
            y[ch, t] = float(np.dot(c[ch % c.shape[0]], h))
    return y


class TestZohDiscretize:
    def test_zero_a_limit(self):
        a_bar, b_bar = ssm.zoh_discretize(np.array(0.0), np.array(2.0), np.array(0.5))
        assert a_bar == pytest.approx(1.0)
        assert b_bar == pytest.approx(1.0)

    def test_scalar_closed_form(self):
        # A=-1, delta=ln2, B=1: Abar = 0.5, Bbar = (-1/ln2)(0.5-1)*ln2 = 0.5
        a_bar, b_bar = ssm.zoh_discretize(np.array(-1.0), np.array(1.0), np.array(np.log(2.0)))
        assert a_bar == pytest.approx(0.5, abs=1e-12)
        assert b_bar == pytest.approx(0.5, abs=1e-12)

    def test_series_oracle_random_diagonals(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a = -rng.uniform(0.01, 3.0, size=(3, 8))
            b = rng.normal(size=(3, 8))
            delta = rng.uniform(1e-3, 1.0, size=(3, 1))
            a_bar, b_bar = ssm.zoh_discretize(a, b, delta)
            z = delta * a
            np.testing.assert_allclose(a_bar, series_expm_diag(z), rtol=1e-10)
            np.testing.assert_allclose(b_bar, series_bbar_diag(z, delta, b), rtol=1e-10, atol=1e-14)

    def test_limit_cases_below_threshold(self):
        # |delta * a| below 1e-8 must agree with the series oracle too
        a = np.array([-1e-6, -1e-9, 0.0, 1e-7])
        b = np.array([1.0, -2.0, 3.0, 0.5])
        delta = np.array(1e-2)
        a_bar, b_bar = ssm.zoh_discretize(a, b, delta)
        z = delta * a
        np.testing.assert_allclose(a_bar, series_expm_diag(z), rtol=1e-12)
        np.testing.assert_allclose(b_bar, series_bbar_diag(z, delta, b), rtol=1e-12)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(T.ContractError):
            ssm.zoh_discretize(np.array(-1.0), np.array(1.0), np.array(0.0))

    def test_stability_invariant(self):
        # A <= 0 implies 0 < Abar <= 1
        rng = np.random.default_rng(12)
        a = -rng.uniform(0.0, 5.0, size=64)
        a_bar, _ = ssm.zoh_discretize(a, np.ones(64), rng.uniform(1e-3, 2.0, size=64))
        assert (a_bar > 0).all() and (a_bar <= 1.0).all()

    def test_tensor_mode_differentiable(self):
        rng = np.random.default_rng(13)
        b = T.Tensor(rng.normal(size=4))
        delta = T.Tensor(rng.uniform(0.1, 1.0, size=4))

        def f(a):
            a_bar, b_bar = ssm.zoh_discretize(a, b, delta)
            return T.tensor_sum(T.add(a_bar, b_bar))

        assert T.grad_check(f, T.Tensor(-rng.uniform(0.1, 2.0, size=4))).passed


class TestScanRecurrence:
    def test_zero_input(self):
        y = ssm.scan_recurrence(0.5, 0.5, 2.0, np.zeros(6))
        np.testing.assert_array_equal(y.numpy(), np.zeros(6))

    def test_impulse_hand_recurrence(self):
        y = ssm.scan_recurrence(0.5, 0.5, 2.0, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.numpy(), [1.0, 0.5, 0.25], atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(21)
        a_bar = rng.uniform(0.1, 0.99, size=(3, 5))
        b_bar = rng.normal(size=(3, 5))
        c = rng.normal(size=(3, 5))
        x = rng.normal(size=(3, 20))
        y = ssm.scan_recurrence(a_bar, b_bar, c, x)
        np.testing.assert_allclose(y.numpy(), loop_scan(a_bar, b_bar, c, x), atol=1e-12)

    def test_empty_sequence_rejected(self):
        with pytest.raises(T.ContractError):
            ssm.scan_recurrence(0.5, 0.5, 1.0, np.zeros((1, 0)))

    def test_nonfinite_state_reports_step(self):
        # Abar > 1 grows the state; overflow must name the step index
        x = np.ones((1, 2000))
        with pytest.raises(T.NonFiniteError, match=r"step \d+"):
            ssm.scan_recurrence(2.0, 1e300, 1.0, x)

    def test_linearity_in_input(self):
        rng = np.random.default_rng(22)
        a_bar = rng.uniform(0.1, 0.95, size=(2, 4))
        b_bar = rng.normal(size=(2, 4))
        c = rng.normal(size=(2, 4))
        x = rng.normal(size=(2, 16))
        z = rng.normal(size=(2, 16))
        alpha, beta = 1.7, -0.4
        lhs = ssm.scan_recurrence(a_bar, b_bar, c, alpha * x + beta * z).numpy()
        rhs = alpha * ssm.scan_recurrence(a_bar, b_bar, c, x).numpy() + beta * ssm.scan_recurrence(
            a_bar, b_bar, c, z
        ).numpy()
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_bounded_state_under_stable_params(self):
        # |h_t| <= |Bbar| max|x| / (1 - max Abar) for Abar < 1
        rng = np.random.default_rng(23)
        a_bar = np.full((1, 1), 0.9)
        b_bar = np.full((1, 1), 0.7)
        x = rng.uniform(-1, 1, size=(1, 500))
        y = ssm.scan_recurrence(a_bar, b_bar, np.ones((1, 1)), x).numpy()
        bound = 0.7 * np.abs(x).max() / (1 - 0.9)
        assert np.abs(y).max() <= bound + 1e-12


class TestLtiKernel:
    def test_hand_kernel(self):
        k = ssm.lti_kernel(0.5, 0.5, 2.0, 3)
        np.testing.assert_allclose(k, [1.0, 0.5, 0.25])

    def test_zero_readout(self):
        k = ssm.lti_kernel(0.5, 0.5, 0.0, 5)
        np.testing.assert_array_equal(k, np.zeros(5))

    def test_identity_evolution(self):
        k = ssm.lti_kernel(1.0, 1.0, 1.0, 4)
        np.testing.assert_array_equal(k, np.ones(4))

    def test_bad_length(self):
        with pytest.raises(T.ContractError):
            ssm.lti_kernel(0.5, 0.5, 1.0, 0)


class TestLtiConvolve:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(31)
        x = rng.normal(size=12)
        k = np.zeros(12)
        k[0] = 1.0
        np.testing.assert_array_equal(ssm.lti_convolve(x, k), x)

    def test_impulse_recovers_kernel(self):
        k = np.array([1.0, 0.5, 0.25, 0.125])
        x = np.zeros(4)
        x[0] = 1.0
        np.testing.assert_array_equal(ssm.lti_convolve(x, k), k)

    def test_kernel_longer_than_sequence_truncates(self):
        y = ssm.lti_convolve(np.array([1.0, 1.0]), np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(y, [1.0, 3.0])


class TestDuality:
    def test_recurrence_equals_convolution(self):
        rng = np.random.default_rng(41)
        for _ in range(25):
            channels = int(rng.integers(1, 5))
            n = int(rng.integers(1, 9))
            length = int(rng.integers(1, 65))
            params = ssm.SsmParams.random(rng, channels, n)
            a_bar, b_bar = params.discretize()
            x = rng.normal(size=(channels, length))
            via_scan = ssm.scan_recurrence(a_bar, b_bar, params.c, x).numpy()
            via_conv = ssm.lti_convolve(x, ssm.lti_kernel(a_bar, b_bar, params.c, length))
            scale = np.maximum(np.abs(via_conv), 1.0)
            assert (np.abs(via_scan - via_conv) / scale).max() < 1e-10


class TestSelectiveScan:
    def _weights(self, rng, channels=3, n=4):
        return ssm.SelectiveScanWeights.init(rng, channels, n)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(51)
        w = self._weights(rng)
        y = ssm.selective_scan(T.Tensor(np.zeros((3, 10))), w)
        np.testing.assert_array_equal(y.numpy(), np.zeros((3, 10)))

    def test_frozen_projections_reduce_to_lti_recurrence(self):
        rng = np.random.default_rng(52)
        w = self._weights(rng, channels=2, n=3)
        # Freeze: zero projection weights, constant biases
        w.w_delta.data[:] = 0.0
        w.w_b.data[:] = 0.0
        w.w_c.data[:] = 0.0
        w.b_delta.data[:] = np.array([0.3, -0.2])
        w.b_b.data[:] = np.array([0.5, -1.0, 2.0])
        w.b_c.data[:] = np.array([1.0, 0.3, -0.7])
        x = rng.normal(size=(2, 12))
        got = ssm.selective_scan(T.Tensor(x), w).numpy()

        a = -np.exp(w.a_log.numpy())
        delta = np.log1p(np.exp(w.b_delta.numpy()))[:, None]
        a_bar, b_bar = ssm.zoh_discretize(a, np.tile(w.b_b.numpy(), (2, 1)), delta)
        want = ssm.scan_recurrence(a_bar, b_bar, np.tile(w.b_c.numpy(), (2, 1)), x).numpy()
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_lti_switch_matches_frozen_projections(self):
        rng = np.random.default_rng(53)
        w = self._weights(rng, channels=2, n=3)
        frozen = ssm.SelectiveScanWeights(
            a_log=w.a_log,
            w_delta=T.Tensor(np.zeros((2, 2))),
            b_delta=w.b_delta,
            w_b=T.Tensor(np.zeros((2, 3))),
            b_b=w.b_b,
            w_c=T.Tensor(np.zeros((2, 3))),
            b_c=w.b_c,
        )
        frozen.b_b.data[:] = rng.normal(size=3)
        frozen.b_c.data[:] = rng.normal(size=3)
        x = rng.normal(size=(2, 9))
        via_flag = ssm.selective_scan(T.Tensor(x), frozen, lti=True).numpy()
        via_zero_weights = ssm.selective_scan(T.Tensor(x), frozen, lti=False).numpy()
        np.testing.assert_allclose(via_flag, via_zero_weights, atol=1e-12)

    def test_matches_step_loop_oracle(self):
        rng = np.random.default_rng(54)
        channels, n, length = 3, 4, 16
        w = self._weights(rng, channels, n)
        x = rng.normal(size=(channels, length))
        got = ssm.selective_scan(T.Tensor(x), w).numpy()

        # independent per-step loop, python floats
        a = -np.exp(w.a_log.numpy())
        want = np.zeros_like(x)
        for ch in range(channels):
            h = np.zeros(n)
            for t in range(length):
                xt = x[:, t]
                delta = np.log1p(np.exp(xt @ w.w_delta.numpy() + w.b_delta.numpy()))[ch]
                bt = xt @ w.w_b.numpy() + w.b_b.numpy()
                ct = xt @ w.w_c.numpy() + w.b_c.numpy()
                z = delta * a[ch]
                a_bar = np.exp(z)
                phi = np.where(np.abs(z) < 1e-8, 1.0 + 0.5 * z, np.expm1(z) / np.where(np.abs(z) < 1e-8, 1.0, z))
                b_bar = phi * delta * bt
                h = a_bar * h + b_bar * x[ch, t]
                want[ch, t] = float(np.dot(ct, h))
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_batched_leading_dim(self):
        rng = np.random.default_rng(55)
        w = self._weights(rng, channels=2, n=3)
        xb = rng.normal(size=(4, 2, 7))
        yb = ssm.selective_scan(T.Tensor(xb), w).numpy()
        for i in range(4):
            yi = ssm.selective_scan(T.Tensor(xb[i]), w).numpy()
            np.testing.assert_allclose(yb[i], yi, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(60 + seed)
        w = self._weights(rng, channels=2, n=3)

        def f(x):
            return T.tensor_sum(ssm.selective_scan(x, w))

        assert T.grad_check(f, T.Tensor(rng.normal(size=(2, 6)))).passed

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_wrt_weights(self, seed):
        rng = np.random.default_rng(70 + seed)
        w = self._weights(rng, channels=2, n=3)
        x = T.Tensor(rng.normal(size=(2, 6)))

        def f_alog(a_log):
            w2 = ssm.SelectiveScanWeights(a_log, w.w_delta, w.b_delta, w.w_b, w.b_b, w.w_c, w.b_c)
            return T.tensor_sum(ssm.selective_scan(x, w2))

        assert T.grad_check(f_alog, T.Tensor(w.a_log.numpy().copy())).passed

        def f_wd(w_delta):
            w2 = ssm.SelectiveScanWeights(w.a_log, w_delta, w.b_delta, w.w_b, w.b_b, w.w_c, w.b_c)
            return T.tensor_sum(ssm.selective_scan(x, w2))

        assert T.grad_check(f_wd, T.Tensor(w.w_delta.numpy().copy())).passed
