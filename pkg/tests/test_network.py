"""Network layers: conv, primary capsules, routed layers, baseline CNN."""

import numpy as np
import pytest

from capsroute import autograd as ag
from capsroute import network as net
from capsroute.errors import ConfigError, ShapeError
from capsroute.kernels import KernelSpec
from capsroute.routing import CapsuleGrid, RoutingConfig

EPAN_CFG = RoutingConfig(kernel=KernelSpec("epanechnikov", "l1"))


def naive_conv_same(image, kernels):
    """Six-loop oracle for stride-1 same-padding cross-correlation."""
    h, w, cin = image.shape
    kh, kw, _, cout = kernels.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout))
    for y in range(h):
        for x in range(w):
            for co in range(cout):
                acc = 0.0
                for dy in range(kh):
                    for dx in range(kw):
                        sy, sx = y + dy - ph, x + dx - pw
                        if 0 <= sy < h and 0 <= sx < w:
                            acc += np.dot(image[sy, sx], kernels[dy, dx, :, co])
                out[y, x, co] = acc
    return out


def make_grid(rng, h, w, c, scale=0.1):
    poses = rng.normal(0, scale, size=(h, w, c, 4, 4))
    acts = rng.uniform(0.1, 0.9, size=(h, w, c))
    return CapsuleGrid(poses, acts)


class TestConv:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(5, 5, 2))
        k = np.zeros((1, 1, 2, 2))
        k[0, 0] = np.eye(2)
        assert np.array_equal(net.conv2d_forward(img, k), img)

    def test_all_ones_interior(self):
        img = np.ones((5, 5, 1))
        k = np.ones((3, 3, 1, 1))
        out = net.conv2d_forward(img, k)
        assert out[2, 2, 0] == 9.0

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(6, 7, 3))
        k = rng.normal(size=(5, 3, 3, 2))
        out = net.conv2d_forward(img, k)
        assert np.abs(out - naive_conv_same(img, k)).max() < 1e-10

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            net.conv2d_forward(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)))


class TestPrimaryCaps:
    def test_zero_features_give_half_activations(self):
        feats = np.zeros((4, 4, 17 * 2))
        grid = net.primary_caps(feats, np.zeros((1, 1, 34, 2)), np.zeros(2), 2)
        assert np.all(grid.activations == 0.5)

    def test_pose_channels_pass_through_bit_exactly(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(4, 4, 17 * 2))
        grid = net.primary_caps(feats, np.zeros((1, 1, 34, 2)), np.zeros(2), 2)
        assert np.array_equal(grid.poses.reshape(4, 4, 32), feats[:, :, :32])

    def test_output_shape(self):
        feats = np.zeros((32, 32, 17 * 8))
        grid = net.primary_caps(feats, np.zeros((1, 1, 136, 8)), np.zeros(8), 8)
        assert (grid.height, grid.width, grid.count) == (32, 32, 8)

    def test_too_few_channels(self):
        with pytest.raises(ShapeError):
            net.primary_caps(np.zeros((4, 4, 20)), np.zeros((1, 1, 20, 2)),
                             np.zeros(2), 2)


class TestCapsuleLayer:
    def test_single_window_shape(self):
        rng = np.random.default_rng(3)
        grid = make_grid(rng, 2, 2, 3)
        transform = rng.normal(0, 0.3, size=(12, 5, 4, 4))
        beta = np.ones((5, 17))
        beta[:, 0] = 0.0
        out = net.capsule_layer_forward(grid, transform, beta, "frem", EPAN_CFG)
        assert (out.height, out.width, out.count) == (1, 1, 5)

    def test_identity_transforms_identical_poses(self):
        rng = np.random.default_rng(4)
        pose = rng.normal(0, 0.1, size=(4, 4))
        poses = np.broadcast_to(pose, (2, 2, 2, 4, 4)).copy()
        grid = CapsuleGrid(poses, np.ones((2, 2, 2)))
        transform = np.broadcast_to(np.eye(4), (8, 3, 4, 4)).copy()
        beta = np.ones((3, 17))
        beta[:, 0] = 0.0
        out = net.capsule_layer_forward(grid, transform, beta, "frem", EPAN_CFG)
        for j in range(3):
            assert np.abs(out.poses[0, 0, j] - pose).max() < 1e-12

    def test_window_decomposition_bit_exact(self):
        rng = np.random.default_rng(5)
        grid = make_grid(rng, 4, 6, 2)
        transform = rng.normal(0, 0.3, size=(8, 4, 4, 4))
        beta = np.ones((4, 17))
        beta[:, 0] = 0.0
        whole = net.capsule_layer_forward(grid, transform, beta, "frem", EPAN_CFG)
        for wy in range(2):
            for wx in range(3):
                sub = CapsuleGrid(
                    grid.poses[2 * wy:2 * wy + 2, 2 * wx:2 * wx + 2],
                    grid.activations[2 * wy:2 * wy + 2, 2 * wx:2 * wx + 2])
                piece = net.capsule_layer_forward(sub, transform, beta, "frem", EPAN_CFG)
                assert np.array_equal(piece.poses[0, 0], whole.poses[wy, wx])
                assert np.array_equal(piece.activations[0, 0], whole.activations[wy, wx])

    def test_odd_extents_rejected(self):
        rng = np.random.default_rng(6)
        grid = make_grid(rng, 3, 4, 2)
        with pytest.raises(ShapeError):
            net.capsule_layer_forward(grid, np.zeros((8, 4, 4, 4)),
                                      np.ones((4, 17)), "frem", EPAN_CFG)

    def test_per_window_activation_simplex(self):
        rng = np.random.default_rng(7)
        grid = make_grid(rng, 4, 4, 2)
        transform = rng.normal(0, 0.3, size=(8, 4, 4, 4))
        beta = np.ones((4, 17))
        beta[:, 0] = 0.0
        for method in ("frms", "frem", "em"):
            out = net.capsule_layer_forward(grid, transform, beta, method, EPAN_CFG)
            acts = out.activations
            assert np.all(acts > 0) and np.all(acts < 1)
            assert np.abs(acts.sum(axis=-1) - 1.0).max() < 1e-6

    def test_translation_equivariance_one_window(self):
        rng = np.random.default_rng(8)
        grid = make_grid(rng, 8, 8, 2)
        rolled = CapsuleGrid(np.roll(grid.poses, 2, axis=1),
                             np.roll(grid.activations, 2, axis=1))
        transform = rng.normal(0, 0.3, size=(8, 4, 4, 4))
        beta = np.ones((4, 17))
        beta[:, 0] = 0.0
        out = net.capsule_layer_forward(grid, transform, beta, "frem", EPAN_CFG)
        out_rolled = net.capsule_layer_forward(rolled, transform, beta, "frem", EPAN_CFG)
        assert np.abs(np.roll(out.poses, 1, axis=1) - out_rolled.poses).max() < 1e-10
        assert np.abs(np.roll(out.activations, 1, axis=1)
                      - out_rolled.activations).max() < 1e-10

    def test_parameter_sharing_gradient_reaches_every_window(self):
        rng = np.random.default_rng(9)
        poses = rng.normal(0, 0.1, size=(1, 4, 4, 2, 4, 4))
        acts = rng.uniform(0.2, 0.9, size=(1, 4, 4, 2))
        transform = rng.normal(0, 0.3, size=(8, 4, 4, 4))
        beta = np.ones((4, 17))
        beta[:, 0] = 0.0
        for wy in range(2):
            for wx in range(2):
                def program(params):
                    p, a = net._capsule_layer(poses, acts, params["t"], beta,
                                              "frem", EPAN_CFG, None)
                    return ag.reduce_sum(p[:, wy, wx])

                _, tape = ag.record_forward(program, {"t": transform})
                grads = ag.backward(tape)
                assert np.abs(grads["t"]).max() > 0


class TestResidual:
    def test_zero_residual_weights(self):
        rng = np.random.default_rng(10)
        grid = make_grid(rng, 4, 4, 2)
        width = 32
        zeros_k = np.zeros((3, 3, width, width))
        out = net.residual_block_forward(grid, zeros_k, np.zeros(width),
                                         zeros_k, np.zeros(width))
        assert np.array_equal(out.poses, np.maximum(grid.poses, 0.0))
        assert np.array_equal(out.activations, grid.activations)

    def test_shape_preserved_and_matches_composition(self):
        rng = np.random.default_rng(11)
        grid = make_grid(rng, 4, 4, 2)
        width = 32
        k1 = rng.normal(0, 0.1, size=(3, 3, width, width))
        b1 = rng.normal(0, 0.1, size=width)
        k2 = rng.normal(0, 0.1, size=(3, 3, width, width))
        b2 = rng.normal(0, 0.1, size=width)
        out = net.residual_block_forward(grid, k1, b1, k2, b2)
        assert out.poses.shape == grid.poses.shape
        feats = grid.poses.reshape(4, 4, width)
        hidden = np.maximum(naive_conv_same(feats, k1) + b1, 0.0)
        res = naive_conv_same(hidden, k2) + b2
        expected = np.maximum(feats + res, 0.0).reshape(grid.poses.shape)
        assert np.abs(out.poses - expected).max() < 1e-10


class TestGlobalRoute:
    def test_single_class_activation_is_one(self):
        rng = np.random.default_rng(12)
        grid = make_grid(rng, 2, 2, 2)
        transform = rng.normal(0, 0.3, size=(8, 1, 4, 4))
        beta = np.ones((1, 17))
        beta[:, 0] = 0.0
        _, acts = net.global_caps_route(grid, transform, beta, "frem", EPAN_CFG)
        assert np.allclose(acts, [1.0])

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(13)
        grid = make_grid(rng, 2, 2, 2)
        # Swap the two rows of the grid and the matching transform slices:
        # routing treats the window as a set.
        perm = np.array([4, 5, 6, 7, 0, 1, 2, 3])
        transform = rng.normal(0, 0.3, size=(8, 3, 4, 4))
        beta = np.ones((3, 17))
        beta[:, 0] = 0.0
        swapped = CapsuleGrid(grid.poses[::-1].copy(), grid.activations[::-1].copy())
        p1, a1 = net.global_caps_route(grid, transform, beta, "frem", EPAN_CFG)
        p2, a2 = net.global_caps_route(swapped, transform[perm], beta, "frem", EPAN_CFG)
        assert np.abs(p1 - p2).max() < 1e-10
        assert np.abs(a1 - a2).max() < 1e-10

    def test_matches_direct_routing_call(self):
        rng = np.random.default_rng(14)
        grid = make_grid(rng, 2, 2, 2)
        transform = rng.normal(0, 0.3, size=(8, 3, 4, 4))
        beta = np.ones((3, 17))
        beta[:, 0] = 0.0
        poses_flat = grid.poses.reshape(8, 4, 4)
        acts_flat = grid.activations.reshape(8)
        from capsroute.routing import (compute_activation, compute_votes,
                                       frem_route, init_activation_params)
        vt = compute_votes(poses_flat, acts_flat, transform)
        state = frem_route(vt, EPAN_CFG)
        from capsroute.routing import ActivationParams
        expected_acts = compute_activation(vt, state, ActivationParams(beta),
                                           EPAN_CFG.kernel)
        p, a = net.global_caps_route(grid, transform, beta, "frem", EPAN_CFG)
        assert np.abs(p - state.v).max() < 1e-12
        assert np.abs(a - expected_acts).max() < 1e-12


class TestNetworkForward:
    def test_output_simplex_and_determinism(self):
        spec = net.desk_spec(classes=4, base_capsules=1, stem_channels=4)
        params = net.init_parameters(spec, seed=0)
        rng = np.random.default_rng(15)
        img = rng.normal(size=(32, 32, 1)).astype(np.float32)
        out1 = net.network_forward(spec, params, img)
        out2 = net.network_forward(spec, params, img)
        assert abs(out1.sum() - 1.0) < 1e-6
        assert np.array_equal(out1, out2)

    def test_parameter_count_matches_analytic(self):
        c, stem, k = 8, 32, 10
        spec = net.desk_spec(classes=k, base_capsules=c, stem_channels=stem)
        params = net.init_parameters(spec, seed=0)
        # Hand count: stem conv, expansion conv, activation conv, then
        # transforms and activation coefficients per routing layer.
        expected = (5 * 5 * 1 * stem + stem) + (stem * 17 * c + 17 * c) \
            + (17 * c * c + c) \
            + (4 * c * 2 * c * 16 + 2 * c * 17) \
            + (4 * 2 * c * 4 * c * 16 + 4 * c * 17) \
            + (4 * 4 * c * 8 * c * 16 + 8 * c * 17) \
            + (16 * 8 * c * k * 16 + k * 17)
        total = net.count_parameters(params)
        assert abs(total - expected) / expected < 0.10

    def test_full_64_spec_constructible(self):
        spec = net.full_spec_64(classes=5, base_capsules=1, stem_channels=4)
        params = net.init_parameters(spec, seed=0)
        img = np.random.default_rng(16).normal(size=(64, 64, 1)).astype(np.float32)
        out = net.network_forward(spec, params, img)
        assert out.shape == (5,)
        assert abs(out.sum() - 1.0) < 1e-6

    def test_em_network_forward(self):
        spec = net.desk_spec(classes=3, base_capsules=1, stem_channels=4,
                             routing_method="em")
        params = net.init_parameters(spec, seed=1)
        img = np.random.default_rng(17).normal(size=(32, 32, 1)).astype(np.float32)
        out = net.network_forward(spec, params, img)
        assert abs(out.sum() - 1.0) < 1e-6


class TestBaselineCnn:
    def test_structure(self):
        spec = net.desk_spec(classes=10, base_capsules=8, stem_channels=32)
        cnn = net.build_baseline_cnn(spec)
        kinds = [l.kind for l in cnn.layers]
        assert kinds.count("conv") == 5
        assert "caps_route" not in kinds
        assert kinds[-1] == "pool" and cnn.layers[-1].pool == "avg_global"

    def test_parameter_count_within_quarter(self):
        for c, stem in ((8, 32), (2, 8)):
            spec = net.desk_spec(classes=10, base_capsules=c, stem_channels=stem)
            cnn = net.build_baseline_cnn(spec)
            n_caps = net.count_parameters(net.init_parameters(spec, seed=0))
            n_cnn = net.count_parameters(net.init_parameters(cnn, seed=0))
            assert 0.75 <= n_cnn / n_caps <= 1.25

    def test_forward_simplex(self):
        spec = net.desk_spec(classes=4, base_capsules=2, stem_channels=8)
        cnn = net.build_baseline_cnn(spec)
        params = net.init_parameters(cnn, seed=0)
        img = np.random.default_rng(18).normal(size=(32, 32, 1)).astype(np.float32)
        out = net.network_forward(cnn, params, img)
        assert abs(out.sum() - 1.0) < 1e-6

    def test_max_pool_hand_value(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        assert ag.max_pool_2x2(x)[0, 0, 0, 0] == 4.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        net.NetworkSpec(layers=(net.LayerSpec("primary_caps", capsules=2),),
                        classes=3)
    with pytest.raises(ConfigError):
        net.desk_spec(routing_method="bogus")
