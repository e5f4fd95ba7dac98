"""Routing algorithms: examples, independent oracles, and invariants."""

import numpy as np
import pytest

from capsroute import routing
from capsroute.errors import ConfigError, ShapeError
from capsroute.kernels import KernelSpec
from capsroute.routing import (
    ActivationParams,
    RoutingConfig,
    RoutingState,
    VoteTensor,
    compute_activation,
    compute_votes,
    em_route_baseline,
    frem_route,
    frem_v_update,
    frms_route,
    frms_v_update,
    init_activation_params,
    normalize_rows,
    objective,
    rba_activation,
    rba_variant_route,
    uniform_routing_init,
)

EPAN_L1 = KernelSpec("epanechnikov", "l1")
EPAN_L2 = KernelSpec("epanechnikov", "l2sq")
GAUSS_L2 = KernelSpec("gaussian", "l2sq")


def random_votes(rng, n_in, n_out, scale=0.1, dtype=np.float64):
    votes = rng.normal(0.0, scale, size=(n_in, n_out, 16)).astype(dtype)
    acts = rng.uniform(0.2, 1.0, size=(n_in,)).astype(dtype)
    return VoteTensor(votes, acts)


def in_support_instance(rng, n_in, n_out, metric="l1"):
    """Random batched (votes, acts, r_norm, v_prev) with every distance from
    v_prev to each vote strictly inside the epanechnikov support (< 1),
    enforced by construction and asserted."""
    votes = rng.normal(0.0, 0.02, size=(1, n_in, n_out, 16))
    acts = rng.uniform(0.2, 1.0, size=(1, n_in))
    r = rng.uniform(0.1, 1.0, size=(1, n_in, n_out))
    r /= r.sum(-1, keepdims=True)
    v_prev = votes.mean(axis=1)
    if metric == "l1":
        dists = np.abs(votes - v_prev[:, None]).sum(-1)
    else:
        dists = ((votes - v_prev[:, None]) ** 2).sum(-1)
    assert dists.max() < 0.95, "instance escaped the kernel support"
    return votes, acts, r, v_prev


# ---------------------------------------------------------------------------
# compute_votes
# ---------------------------------------------------------------------------

class TestComputeVotes:
    def test_identity_transforms(self):
        rng = np.random.default_rng(0)
        poses = rng.normal(size=(5, 4, 4))
        transforms = np.broadcast_to(np.eye(4), (5, 3, 4, 4)).copy()
        vt = compute_votes(poses, np.ones(5), transforms)
        for i in range(5):
            for j in range(3):
                assert np.array_equal(vt.votes[i, j], poses[i].reshape(16))

    def test_scaling_transform(self):
        rng = np.random.default_rng(1)
        pose = rng.normal(size=(1, 4, 4))
        vt = compute_votes(pose, np.ones(1), 2.0 * np.eye(4)[None, None])
        assert np.allclose(vt.votes[0, 0], 2.0 * pose[0].reshape(16))

    def test_per_pair_matmul_oracle(self):
        rng = np.random.default_rng(2)
        poses = rng.normal(size=(4, 4, 4))
        transforms = rng.normal(size=(4, 3, 4, 4))
        vt = compute_votes(poses, np.ones(4), transforms)
        for i in range(4):
            for j in range(3):
                expected = transforms[i, j] @ poses[i]
                assert np.abs(vt.votes[i, j] - expected.reshape(16)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_votes(np.ones((2, 4, 4)), np.ones(2), np.ones((3, 2, 4, 4)))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

class TestObjective:
    def test_single_pair_at_zero_distance(self):
        u = np.random.default_rng(3).normal(size=(1, 1, 16))
        vt = VoteTensor(u, np.ones(1))
        state = RoutingState(r=np.ones((1, 1)), r_norm=np.ones((1, 1)), v=u[0])
        assert objective(vt, state, EPAN_L1) == 1.0

    def test_zero_activations(self):
        rng = np.random.default_rng(4)
        vt = VoteTensor(rng.normal(size=(3, 2, 16)), np.zeros(3))
        state = RoutingState(r=uniform_routing_init(3, 2),
                             r_norm=uniform_routing_init(3, 2),
                             v=rng.normal(size=(2, 16)))
        assert objective(vt, state, GAUSS_L2) == 0.0

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        vt = random_votes(rng, 6, 3)
        r = rng.uniform(size=(6, 3))
        r_norm = r / r.sum(axis=1, keepdims=True)
        v = rng.normal(0.0, 0.1, size=(3, 16))
        state = RoutingState(r=r, r_norm=r_norm, v=v)
        total = 0.0
        for j in range(3):
            for i in range(6):
                d = np.sum((v[j] - vt.votes[i, j]) ** 2)
                total += r_norm[i, j] * vt.input_activations[i] * np.exp(-d / 2)
        assert abs(objective(vt, state, GAUSS_L2) - total / 6) < 1e-12


# ---------------------------------------------------------------------------
# frms_route
# ---------------------------------------------------------------------------

class TestFrmsRoute:
    def test_single_vote_fixed_point(self):
        rng = np.random.default_rng(6)
        vt = VoteTensor(rng.normal(0, 0.1, size=(1, 1, 16)), np.ones(1))
        state = frms_route(vt, RoutingConfig(iterations=1, kernel=EPAN_L1))
        assert np.array_equal(state.v[0], vt.votes[0, 0])

    def test_identical_votes_recovered_exactly(self):
        # Dyadic pose entries keep every partial sum exact in binary.
        p = np.array([0.5, -0.25, 0.375, 1.5, -0.75, 0.0625, 2.0, -1.0,
                      0.125, 0.25, -0.5, 0.75, -0.375, 1.25, 0.0, -2.0])
        votes = np.broadcast_to(p, (6, 2, 16)).copy()
        vt = VoteTensor(votes, np.ones(6))
        for iterations in (1, 2):
            cfg = RoutingConfig(iterations=iterations, normalization="plain",
                                kernel=EPAN_L2)
            state = frms_route(vt, cfg)
            assert np.array_equal(state.v, np.broadcast_to(p, (2, 16)))

    def test_initial_weights_are_uniform_over_outputs(self):
        # Votes arranged so every kernel value is 0: the raw r never moves
        # off its uniform initialization of 1/16.
        votes = np.zeros((4, 16, 16))
        votes[0::2, :, 0] = 2.0
        votes[1::2, :, 0] = -2.0
        vt = VoteTensor(votes, np.ones(4))
        cfg = RoutingConfig(iterations=1, normalization="plain", kernel=EPAN_L2)
        state = frms_route(vt, cfg)
        assert np.all(state.r == 0.0625)
        assert np.array_equal(uniform_routing_init(4, 16), state.r)

    def test_two_cluster_weighted_means(self):
        # Two separated clusters; output poses seeded near each one.  The
        # derivative weighting restricts each mean to its own cluster.
        rng = np.random.default_rng(7)
        centers = np.zeros((2, 16))
        centers[0, 0], centers[1, 0] = -3.0, 3.0
        members = np.concatenate([
            centers[0] + rng.normal(0, 0.05, size=(5, 16)),
            centers[1] + rng.normal(0, 0.05, size=(5, 16))])
        votes = np.broadcast_to(members[:, None, :], (10, 2, 16)).copy()
        acts = rng.uniform(0.3, 1.0, size=10)
        vt = VoteTensor(votes, acts)
        cfg = RoutingConfig(iterations=1, normalization="plain", kernel=EPAN_L2)
        state = frms_route(vt, cfg, v_init=centers)
        for j, sel in enumerate((slice(0, 5), slice(5, 10))):
            w = acts[sel]
            expected = (w[:, None] * members[sel]).sum(0) / w.sum()
            assert np.abs(state.v[j] - expected).max() < 1e-6

    def test_cosine_metric_rejected(self):
        vt = random_votes(np.random.default_rng(8), 3, 2)
        with pytest.raises(ConfigError):
            frms_route(vt, RoutingConfig(kernel=KernelSpec("epanechnikov", "cosine")))


# ---------------------------------------------------------------------------
# frem_route
# ---------------------------------------------------------------------------

class TestFremRoute:
    def test_single_vote(self):
        rng = np.random.default_rng(9)
        vt = VoteTensor(rng.normal(0, 0.1, size=(1, 1, 16)), np.ones(1))
        state = frem_route(vt, RoutingConfig(iterations=1, kernel=EPAN_L1))
        assert np.array_equal(state.v[0], vt.votes[0, 0])
        assert np.allclose(state.pi, [1.0])

    def test_uniform_weights_give_plain_mean(self):
        rng = np.random.default_rng(10)
        votes = rng.normal(0, 0.05, size=(8, 3, 16))
        vt = VoteTensor(votes, np.ones(8))
        cfg = RoutingConfig(iterations=1, normalization="plain", kernel=EPAN_L1)
        state = frem_route(vt, cfg)
        assert np.abs(state.v - votes.mean(axis=0)).max() < 1e-12

    def test_step2_equivalence_with_frms(self):
        # With every vote inside the kernel support, the derivative factor
        # is the constant -1 and cancels: both step-2 forms coincide.
        rng = np.random.default_rng(11)
        for _ in range(20):
            votes, acts, r, v_prev = in_support_instance(
                rng, int(rng.integers(2, 20)), int(rng.integers(1, 6)))
            v_frms = frms_v_update(votes, acts, r, v_prev, EPAN_L1)
            v_frem = frem_v_update(votes, acts, r)
            assert np.abs(v_frms - v_frem).max() < 1e-12


# ---------------------------------------------------------------------------
# em_route_baseline
# ---------------------------------------------------------------------------

def em_responsibility_oracle(votes, acts, beta, iterations, floor, kern):
    """Direct per-element EM recomputation (loops, log space)."""
    n_in, n_out, dims = votes.shape
    r = np.full((n_in, n_out), 1.0 / n_out)
    for _ in range(iterations):
        w = r * acts[:, None]
        den = w.sum(axis=0)
        v = np.einsum("ij,ijd->jd", w, votes) / den[:, None]
        var = np.einsum("ij,ijd->jd", w, (votes - v[None]) ** 2) / den[:, None]
        var = np.maximum(var, floor)
        logits = np.zeros(n_out)
        for j in range(n_out):
            acc = 0.0
            for i in range(n_in):
                arg = np.sum(np.abs(votes[i, j] - beta[j, 1:] * v[j])) + beta[j, 0]
                arg = max(arg, 0.0)
                k = max(1.0 - arg, 0.0) if kern.profile == "epanechnikov" else np.exp(-arg / 2)
                acc += r[i, j] * acts[i] * k
            logits[j] = acc
        log_a = logits - np.max(logits)
        log_a = log_a - np.log(np.exp(log_a).sum())
        log_like = np.zeros((n_in, n_out))
        for i in range(n_in):
            for j in range(n_out):
                log_like[i, j] = log_a[j] - 0.5 * np.sum(np.log(2 * np.pi * var[j])) \
                    - np.sum((votes[i, j] - v[j]) ** 2 / (2 * var[j]))
        shifted = log_like - log_like.max(axis=1, keepdims=True)
        r = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    return r


class TestEmBaseline:
    def test_single_vote_clamps_variance(self):
        rng = np.random.default_rng(12)
        vt = random_votes(rng, 1, 1)
        cfg = RoutingConfig(iterations=2, kernel=EPAN_L1, variance_floor=1e-4)
        state, acts = em_route_baseline(vt, cfg, init_activation_params(1))
        assert np.array_equal(state.v[0], vt.votes[0, 0])
        assert np.all(state.sigma == 1e-4)
        assert np.allclose(acts, [1.0])

    def test_symmetric_outputs_split_evenly(self):
        rng = np.random.default_rng(13)
        base = rng.normal(0, 0.1, size=(5, 1, 16))
        votes = np.broadcast_to(base, (5, 2, 16)).copy()
        vt = VoteTensor(votes, rng.uniform(0.5, 1.0, size=5))
        state, _ = em_route_baseline(vt, RoutingConfig(iterations=3, kernel=EPAN_L1),
                                     init_activation_params(2))
        assert np.abs(state.r_norm - 0.5).max() < 1e-12

    def test_matches_responsibility_oracle(self):
        rng = np.random.default_rng(14)
        vt = random_votes(rng, 6, 3, scale=0.2)
        params = init_activation_params(3)
        cfg = RoutingConfig(iterations=2, kernel=EPAN_L1, variance_floor=1e-4)
        state, _ = em_route_baseline(vt, cfg, params)
        expected = em_responsibility_oracle(vt.votes, vt.input_activations,
                                            params.beta, 2, 1e-4, EPAN_L1)
        assert np.abs(state.r_norm - expected).max() < 1e-9


# ---------------------------------------------------------------------------
# rba variant
# ---------------------------------------------------------------------------

class TestRbaVariant:
    def test_single_vote(self):
        rng = np.random.default_rng(15)
        vt = random_votes(rng, 1, 1)
        cfg = RoutingConfig(iterations=1, kernel=KernelSpec("epanechnikov", "cosine"))
        state = rba_variant_route(vt, cfg)
        assert np.array_equal(state.v[0], vt.votes[0, 0])
        assert np.allclose(rba_activation(vt, state), [1.0])

    def test_first_iteration_weights_uniform(self):
        # softmax of the uniform initialization: 0.5 everywhere for 2 outputs.
        rng = np.random.default_rng(16)
        vt = random_votes(rng, 4, 2)
        cfg = RoutingConfig(iterations=1, kernel=KernelSpec("epanechnikov", "cosine"))
        state = rba_variant_route(vt, cfg)
        expected_v = 0.5 * vt.votes.sum(axis=0)
        assert np.abs(state.v - expected_v).max() < 1e-12

    def test_hand_unrolled_two_iterations(self):
        rng = np.random.default_rng(17)
        votes = rng.normal(0, 0.3, size=(3, 2, 16))
        vt = VoteTensor(votes, np.ones(3))
        cfg = RoutingConfig(iterations=2, kernel=KernelSpec("epanechnikov", "cosine"))
        state = rba_variant_route(vt, cfg)
        # Oracle: literal per-step recomputation.
        r = np.full((3, 2), 0.5)
        for _ in range(2):
            e = np.exp(r - r.max(axis=1, keepdims=True))
            rn = e / e.sum(axis=1, keepdims=True)
            v = np.einsum("ij,ijd->jd", rn, votes)
            r = r + np.einsum("ijd,jd->ij", votes, v)
        assert np.abs(state.v - v).max() < 1e-12
        assert np.abs(state.r - r).max() < 1e-12

    def test_requires_cosine_metric(self):
        vt = random_votes(np.random.default_rng(18), 3, 2)
        with pytest.raises(ConfigError):
            rba_variant_route(vt, RoutingConfig(kernel=EPAN_L1))

    def test_logit_identity_squared_length(self):
        rng = np.random.default_rng(19)
        vt = random_votes(rng, 5, 3, scale=0.3)
        cfg = RoutingConfig(iterations=2, kernel=KernelSpec("epanechnikov", "cosine"))
        state = rba_variant_route(vt, cfg)
        logits = np.einsum("ij,ijd,jd->j", state.r_norm, vt.votes, state.v)
        lengths = np.einsum("jd,jd->j", state.v, state.v)
        assert np.abs(logits - lengths).max() < 1e-9


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class TestComputeActivation:
    def test_single_pair_rigid_connection(self):
        rng = np.random.default_rng(20)
        u = rng.normal(0, 0.1, size=(1, 1, 16))
        vt = VoteTensor(u, np.ones(1))
        state = RoutingState(r=np.ones((1, 1)), r_norm=np.ones((1, 1)), v=u[0])
        acts = compute_activation(vt, state, init_activation_params(1), EPAN_L1)
        assert np.allclose(acts, [1.0])

    def test_identical_logits_split(self):
        rng = np.random.default_rng(21)
        base = rng.normal(0, 0.1, size=(4, 1, 16))
        votes = np.broadcast_to(base, (4, 2, 16)).copy()
        vt = VoteTensor(votes, np.ones(4))
        state = RoutingState(r=uniform_routing_init(4, 2),
                             r_norm=uniform_routing_init(4, 2),
                             v=np.broadcast_to(base.mean(axis=0)[0], (2, 16)).copy())
        acts = compute_activation(vt, state, init_activation_params(2), EPAN_L1)
        assert np.allclose(acts, [0.5, 0.5])

    def test_direct_summation_oracle(self):
        rng = np.random.default_rng(22)
        vt = random_votes(rng, 5, 3, scale=0.15)
        state = frem_route(vt, RoutingConfig(iterations=2, kernel=EPAN_L1))
        beta = init_activation_params(3).beta.copy()
        beta[:, 0] = rng.uniform(0, 0.1, size=3)
        beta[:, 1:] += rng.normal(0, 0.05, size=(3, 16))
        acts = compute_activation(vt, state, ActivationParams(beta), EPAN_L1)
        logits = np.zeros(3)
        for j in range(3):
            for i in range(5):
                arg = np.sum(np.abs(vt.votes[i, j] - beta[j, 1:] * state.v[j])) + beta[j, 0]
                k = max(1.0 - max(arg, 0.0), 0.0)
                logits[j] += state.r_norm[i, j] * vt.input_activations[i] * k
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        assert np.abs(acts - expected).max() < 1e-9

    def test_simplex_output(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            vt = random_votes(rng, 6, 4)
            state = frem_route(vt, RoutingConfig(kernel=EPAN_L1))
            acts = compute_activation(vt, state, init_activation_params(4), EPAN_L1)
            assert np.all(acts > 0) and np.all(acts < 1)
            assert abs(acts.sum() - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

@pytest.mark.properties
class TestInvariants:
    def test_row_normalization_both_modes(self):
        rng = np.random.default_rng(24)
        for mode in ("softmax", "plain"):
            for _ in range(20):
                r = rng.uniform(0.0, 2.0, size=(1, 7, 4))
                rn = normalize_rows(r, mode)
                assert np.abs(np.asarray(rn).sum(axis=-1) - 1.0).max() < 1e-6

    def test_plain_mode_zero_row_falls_back_to_uniform(self):
        r = np.zeros((1, 2, 4))
        rn = np.asarray(normalize_rows(r, "plain"))
        assert np.allclose(rn, 0.25)

    def test_mean_shift_ascent_never_decreases_objective(self):
        rng = np.random.default_rng(25)
        cfg_kernel = GAUSS_L2
        for _ in range(30):
            n_in, n_out = int(rng.integers(3, 15)), int(rng.integers(1, 5))
            vt = random_votes(rng, n_in, n_out, scale=0.5)
            r = rng.uniform(0.05, 1.0, size=(n_in, n_out))
            r_norm = r / r.sum(axis=1, keepdims=True)
            v = np.asarray(frem_v_update(vt.votes[None], vt.input_activations[None],
                                         r_norm[None]))[0]
            prev = objective(vt, RoutingState(r, r_norm, v), cfg_kernel)
            for _ in range(10):
                v = np.asarray(frms_v_update(vt.votes[None], vt.input_activations[None],
                                             r_norm[None], v[None], cfg_kernel))[0]
                now = objective(vt, RoutingState(r, r_norm, v), cfg_kernel)
                assert now >= prev - 1e-10
                prev = now

    def test_stationarity_after_one_update(self):
        rng = np.random.default_rng(26)
        for _ in range(10):
            n_in = int(rng.integers(3, 10))
            votes = rng.normal(0, 0.08, size=(n_in, 2, 16))
            vt = VoteTensor(votes, rng.uniform(0.3, 1.0, size=n_in))
            r = rng.uniform(0.1, 1.0, size=(n_in, 2))
            r_norm = r / r.sum(axis=1, keepdims=True)
            v_prev = votes.mean(axis=0) + rng.normal(0, 0.02, size=(2, 16))
            v = np.asarray(frms_v_update(vt.votes[None], vt.input_activations[None],
                                         r_norm[None], v_prev[None], EPAN_L2))[0]
            h = 1e-5
            grad = np.zeros_like(v)
            for j in range(2):
                for d in range(16):
                    vp = v.copy()
                    vp[j, d] += h
                    up = objective(vt, RoutingState(r, r_norm, vp), EPAN_L2)
                    vp[j, d] -= 2 * h
                    down = objective(vt, RoutingState(r, r_norm, vp), EPAN_L2)
                    grad[j, d] = (up - down) / (2 * h)
            assert np.linalg.norm(grad) < 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(27)
        vt = random_votes(rng, 8, 3)
        perm = rng.permutation(8)
        permuted = VoteTensor(vt.votes[perm], vt.input_activations[perm])
        cfg = RoutingConfig(iterations=2, kernel=EPAN_L1)
        beta = init_activation_params(3)
        for route in (frms_route, frem_route):
            a = route(vt, cfg)
            b = route(permuted, cfg)
            assert np.abs(a.r_norm[perm] - b.r_norm).max() < 1e-10
            assert np.abs(a.v - b.v).max() < 1e-10
            acts_a = compute_activation(vt, a, beta, EPAN_L1)
            acts_b = compute_activation(permuted, b, beta, EPAN_L1)
            assert np.abs(acts_a - acts_b).max() < 1e-10

    def test_finite_on_edge_cases(self):
        rng = np.random.default_rng(28)
        cases = []
        # all-zero activations
        cases.append(VoteTensor(rng.normal(0, 0.1, size=(5, 2, 16)), np.zeros(5)))
        # coincident votes
        cases.append(VoteTensor(np.broadcast_to(rng.normal(0, 0.1, size=(1, 1, 16)),
                                                (4, 2, 16)).copy(), np.ones(4)))
        # single input capsule
        cases.append(random_votes(rng, 1, 3))
        # every vote outside the epanechnikov support
        far = np.zeros((4, 2, 16))
        far[0::2, :, 0] = 5.0
        far[1::2, :, 0] = -5.0
        cases.append(VoteTensor(far, np.ones(4)))
        for vt in cases:
            for mode in ("softmax", "plain"):
                cfg = RoutingConfig(iterations=2, normalization=mode, kernel=EPAN_L1)
                for state in (frms_route(vt, cfg), frem_route(vt, cfg)):
                    assert np.all(np.isfinite(state.r_norm))
                    assert np.all(np.isfinite(state.v))
                state, acts = em_route_baseline(vt, cfg,
                                                init_activation_params(vt.n_outputs))
                assert np.all(np.isfinite(state.v)) and np.all(np.isfinite(acts))

    def test_degenerate_windows_are_counted(self):
        far = np.zeros((4, 2, 16))
        far[0::2, :, 0] = 5.0
        far[1::2, :, 0] = -5.0
        vt = VoteTensor(far, np.ones(4))
        diag = routing.RoutingDiagnostics()
        frms_route(vt, RoutingConfig(iterations=2, kernel=EPAN_L1), diagnostics=diag)
        assert diag.degenerate_windows > 0
