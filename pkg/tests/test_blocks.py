"""Tests for the correspondence-fused mixer block."""

import dataclasses

import numpy as np
import pytest

from denviscom import blocks, ssm
from denviscom import tensor as T
from denviscom.params import count_parameters, named_parameters


def make_patchset(rng, p=2, length=8, embed=8) -> blocks.PatchSet:
    data = T.Tensor(rng.normal(size=(p, length, embed)))
    return blocks.PatchSet(data, grid=(1, p // 2), side=int(np.sqrt(length)))


def make_weights(rng, embed=8, n_state=4, tie=False) -> blocks.BlockWeights:
    return blocks.BlockWeights.init(rng, embed, kernel_size=3, n_state=n_state, tie_conv_branches=tie)


class TestSplitEmbed:
    def test_channel_halves(self):
        x = T.Tensor(np.arange(4.0)[None, :, None] * np.ones((1, 4, 3)))
        f_m, f_s = blocks.split_embed(x)
        np.testing.assert_array_equal(f_m.numpy()[0, :, 0], [0.0, 1.0])
        np.testing.assert_array_equal(f_s.numpy()[0, :, 0], [2.0, 3.0])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(2, 6, 5)))
        f_m, f_s = blocks.split_embed(x)
        back = T.concat([f_m, f_s], axis=1)
        np.testing.assert_array_equal(back.numpy(), x.numpy())

    def test_odd_embed_rejected(self):
        with pytest.raises(T.ConfigError):
            blocks.split_embed(T.Tensor(np.zeros((1, 3, 4))))


class TestFuseUnfuse:
    def test_definitional_pairing(self):
        left = np.array([[[1.0, 2.0]]])  # patch 0, 1 channel, L=2
        right = np.array([[[3.0, 4.0]]])
        x = T.Tensor(np.concatenate([left, right], axis=0))
        fused = blocks.fuse_lr(x)
        assert fused.shape == (1, 2, 2)
        np.testing.assert_array_equal(fused.numpy()[0, 0], [1.0, 2.0])
        np.testing.assert_array_equal(fused.numpy()[0, 1], [3.0, 4.0])

    def test_exact_mutual_inverse(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(6, 4, 9)))
        round_trip = blocks.unfuse_lr(blocks.fuse_lr(x))
        assert np.array_equal(round_trip.numpy(), x.numpy())
        fused = blocks.fuse_lr(x)
        assert np.array_equal(blocks.fuse_lr(blocks.unfuse_lr(fused)).numpy(), fused.numpy())

    def test_zeros(self):
        fused = blocks.fuse_lr(T.Tensor(np.zeros((4, 2, 3))))
        np.testing.assert_array_equal(fused.numpy(), np.zeros((2, 4, 3)))

    def test_odd_patch_count_rejected(self):
        with pytest.raises(T.ContractError):
            blocks.fuse_lr(T.Tensor(np.zeros((3, 2, 4))))

    def test_odd_channels_rejected_on_unfuse(self):
        with pytest.raises(T.ContractError):
            blocks.unfuse_lr(T.Tensor(np.zeros((2, 3, 4))))

    def test_group_adjacent_round_trip(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(size=(4, 3, 5)))
        grouped = blocks.group_adjacent(x)
        assert grouped.shape == (2, 6, 5)
        np.testing.assert_array_equal(grouped.numpy()[0, :3], x.numpy()[0])
        np.testing.assert_array_equal(grouped.numpy()[0, 3:], x.numpy()[1])
        assert np.array_equal(blocks.ungroup_adjacent(grouped).numpy(), x.numpy())


class TestConvBranch:
    def test_zero_input_zero_bias(self):
        rng = np.random.default_rng(3)
        w = blocks.ConvBranchWeights.init(rng, 4, 3)
        w.b.data[:] = 0.0
        w.kbias.data[:] = 0.0
        out = blocks.conv_branch(T.Tensor(np.zeros((1, 4, 6))), w)
        np.testing.assert_array_equal(out.numpy(), np.zeros((1, 4, 6)))

    def test_identity_weights_reduce_to_silu(self):
        rng = np.random.default_rng(4)
        w = blocks.ConvBranchWeights(
            w=T.Tensor(np.eye(4)),
            b=T.Tensor(np.zeros(4)),
            kernel=T.Tensor(np.tile([0.0, 1.0, 0.0], (4, 1))),
            kbias=T.Tensor(np.zeros(4)),
        )
        x = rng.normal(size=(2, 4, 5))
        out = blocks.conv_branch(T.Tensor(x), w)
        np.testing.assert_allclose(out.numpy(), T.silu(T.Tensor(x)).numpy(), atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(10 + seed)
        w = blocks.ConvBranchWeights.init(rng, 3, 3)
        assert T.grad_check(
            lambda x: T.tensor_sum(blocks.conv_branch(x, w)), T.Tensor(rng.normal(size=(2, 3, 5)))
        ).passed


class TestScanBranch:
    def test_zero_input_zero_biases(self):
        rng = np.random.default_rng(5)
        w = blocks.ScanBranchWeights.init(rng, 4, 3, 4)
        w.b.data[:] = 0.0
        w.kbias.data[:] = 0.0
        out = blocks.scan_branch(T.Tensor(np.zeros((2, 4, 6))), w)
        np.testing.assert_array_equal(out.numpy(), np.zeros((2, 4, 6)))

    def test_lti_mode_matches_kernel_convolution(self):
        # With the scan frozen to time-invariant parameters, the branch output
        # equals the pre-scan signal convolved with the structured kernel; with
        # a near-zero state decay it reduces to that signal scaled by C.Bbar.
        rng = np.random.default_rng(6)
        channels, length = 4, 10
        w = blocks.ScanBranchWeights.init(rng, channels, 3, n_state=3)
        w.scan.b_b.data[:] = rng.normal(size=3)
        w.scan.b_c.data[:] = rng.normal(size=3)
        x = T.Tensor(rng.normal(size=(2, channels, length)))

        pre_scan = T.silu(
            T.depthwise_conv1d(
                T.transpose(T.linear(T.transpose(x, (0, 2, 1)), w.w, w.b), (0, 2, 1)),
                w.kernel,
                w.kbias,
            )
        ).numpy()

        out = blocks.scan_branch(x, w, lti=True).numpy()
        a = -np.exp(w.scan.a_log.numpy())
        delta = np.log1p(np.exp(w.scan.b_delta.numpy()))[:, None]
        a_bar, b_bar = ssm.zoh_discretize(a, np.tile(w.scan.b_b.numpy(), (channels, 1)), delta)
        kernel = ssm.lti_kernel(a_bar, b_bar, np.tile(w.scan.b_c.numpy(), (channels, 1)), length)
        expected = ssm.lti_convolve(pre_scan, kernel)
        np.testing.assert_allclose(out, expected, atol=1e-10)

        # delta-kernel limit: decay strong enough that delta*A << -40 for the
        # smallest delta, killing every tap except C.Bbar at lag 0
        w.scan.a_log.data[:] = 11.0
        out2 = blocks.scan_branch(x, w, lti=True).numpy()
        cb = (
            ssm.zoh_discretize(
                -np.exp(w.scan.a_log.numpy()),
                np.tile(w.scan.b_b.numpy(), (channels, 1)),
                delta,
            )[1]
            * w.scan.b_c.numpy()
        ).sum(axis=1)
        np.testing.assert_allclose(out2, pre_scan * cb[:, None], atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(20 + seed)
        w = blocks.ScanBranchWeights.init(rng, 4, 3, 3)
        assert T.grad_check(
            lambda x: T.tensor_sum(blocks.scan_branch(x, w)), T.Tensor(rng.normal(size=(1, 4, 6)))
        ).passed


def _swap_halves(arr: np.ndarray) -> np.ndarray:
    half = arr.shape[0] // 2
    return np.concatenate([arr[half:], arr[:half]], axis=0)


def _permute_scan_channels(w: blocks.ScanBranchWeights) -> blocks.ScanBranchWeights:
    """Swap the two channel halves in every channel-indexed weight."""
    two_c = w.w.shape[0]
    perm = np.concatenate([np.arange(two_c // 2, two_c), np.arange(two_c // 2)])
    s = w.scan
    return blocks.ScanBranchWeights(
        w=T.Tensor(w.w.numpy()[perm][:, perm]),
        b=T.Tensor(w.b.numpy()[perm]),
        kernel=T.Tensor(w.kernel.numpy()[perm]),
        kbias=T.Tensor(w.kbias.numpy()[perm]),
        scan=ssm.SelectiveScanWeights(
            a_log=T.Tensor(s.a_log.numpy()[perm]),
            w_delta=T.Tensor(s.w_delta.numpy()[perm][:, perm]),
            b_delta=T.Tensor(s.b_delta.numpy()[perm]),
            w_b=T.Tensor(s.w_b.numpy()[perm]),
            b_b=T.Tensor(s.b_b.numpy().copy()),
            w_c=T.Tensor(s.w_c.numpy()[perm]),
            b_c=T.Tensor(s.b_c.numpy().copy()),
        ),
    )


class TestBlockForward:
    @pytest.mark.parametrize("p,length", [(2, 49), (4, 196), (2, 196)])
    def test_output_shape_matches_input(self, p, length):
        rng = np.random.default_rng(7)
        embed = 128
        ps = make_patchset(rng, p=p, length=length, embed=embed)
        w = make_weights(rng, embed=embed, n_state=4)
        out = blocks.denviscom_forward(ps, w)
        assert out.data.shape == (p, length, embed)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        ps = make_patchset(rng, p=4, length=16, embed=8)
        w = make_weights(rng)
        a = blocks.denviscom_forward(ps, w).data.numpy()
        b = blocks.denviscom_forward(ps, w).data.numpy()
        assert np.array_equal(a, b)

    def test_pairing_sensitivity_with_fusion(self):
        # Permuting which right patch corresponds to which left patch must
        # change the output: the scan branch reads corresponding pairs jointly.
        rng = np.random.default_rng(9)
        ps = make_patchset(rng, p=4, length=16, embed=8)
        w = make_weights(rng)
        base = blocks.denviscom_forward(ps, w).data.numpy()

        permuted = ps.data.numpy().copy()
        permuted[[2, 3]] = permuted[[3, 2]]  # swap the two right patches
        out = blocks.denviscom_forward(
            blocks.PatchSet(T.Tensor(permuted), ps.grid, ps.side), w
        ).data.numpy()
        assert np.abs(out[:2] - base[:2]).max() > 1e-6

    def test_pairing_invariance_without_fusion(self):
        # Same permutation, no_fusion variant: left patches never share a scan
        # with right patches, so left outputs are bit-identical.
        rng = np.random.default_rng(10)
        ps = make_patchset(rng, p=4, length=16, embed=8)
        w = make_weights(rng)
        base = blocks.denviscom_forward(ps, w, no_fusion=True).data.numpy()

        permuted = ps.data.numpy().copy()
        permuted[[2, 3]] = permuted[[3, 2]]
        out = blocks.denviscom_forward(
            blocks.PatchSet(T.Tensor(permuted), ps.grid, ps.side), w, no_fusion=True
        ).data.numpy()
        assert np.array_equal(out[:2], base[:2])

    def test_parameter_count_same_across_fusion_flag(self):
        # The flag changes dataflow only; weights are identical either way.
        rng = np.random.default_rng(11)
        w = make_weights(rng)
        n_params = count_parameters(w)
        ps = make_patchset(rng, p=4, length=16, embed=8)
        blocks.denviscom_forward(ps, w, no_fusion=True)
        blocks.denviscom_forward(ps, w, no_fusion=False)
        assert count_parameters(w) == n_params

    def test_left_right_structural_symmetry(self):
        # Swapping inputs + conv weight sets + scan channel halves swaps the output halves.
        rng = np.random.default_rng(12)
        ps = make_patchset(rng, p=4, length=16, embed=8)
        w = make_weights(rng)
        out = blocks.denviscom_forward(ps, w).data.numpy()

        swapped_ps = blocks.PatchSet(T.Tensor(_swap_halves(ps.data.numpy())), ps.grid, ps.side)
        swapped_w = dataclasses.replace(
            w,
            conv_left=w.conv_right,
            conv_right=w.conv_left,
            scan=_permute_scan_channels(w.scan),
        )
        out_swapped = blocks.denviscom_forward(swapped_ps, swapped_w).data.numpy()
        np.testing.assert_allclose(out_swapped, _swap_halves(out), atol=1e-12)

    def test_tied_conv_branches_drop_params(self):
        rng = np.random.default_rng(13)
        full = count_parameters(make_weights(rng, embed=8))
        tied = count_parameters(make_weights(rng, embed=8, tie=True))
        names = named_parameters(make_weights(rng, embed=8, tie=True))
        assert tied < full
        assert not any(k.startswith("conv_right") for k in names)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_block_gradient(self, seed):
        # reduced dims: p=2, L=8, embed=8, N=4
        rng = np.random.default_rng(30 + seed)
        w = make_weights(rng, embed=8, n_state=4)

        def f(x):
            ps = blocks.PatchSet(x, grid=(1, 1), side=2)
            return T.tensor_sum(blocks.denviscom_forward(ps, w).data)

        assert T.grad_check(f, T.Tensor(rng.normal(size=(2, 8, 8))), tol=1e-3).passed

    def test_block_gradient_wrt_weights(self):
        rng = np.random.default_rng(40)
        w = make_weights(rng, embed=8, n_state=4)
        x = T.Tensor(rng.normal(size=(2, 8, 8)))

        def f_out_w(out_w):
            w2 = dataclasses.replace(w, out_w=out_w)
            ps = blocks.PatchSet(x, grid=(1, 1), side=2)
            return T.tensor_sum(blocks.denviscom_forward(ps, w2).data)

        assert T.grad_check(f_out_w, T.Tensor(w.out_w.numpy().copy())).passed
