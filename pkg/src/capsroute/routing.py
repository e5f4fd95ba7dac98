"""Dynamic routing between capsule layers as weighted kernel density ascent.

Routing assigns weights r_ij between transformed input votes and candidate
output capsules by iteratively maximizing a weighted mixture-KDE score.  Two
fast strategies are implemented:

* ``frms_route`` — mean-shift style: the output pose moves to a kernel-
  derivative-weighted mean of the votes, and r takes an additive gradient
  step on the kernel value.
* ``frem_route`` — expectation-maximization style: the pose update is a
  plain activation-weighted mean, mixture coefficients pi are maintained,
  and r is reset to pi * kernel likelihood each iteration.

``em_route_baseline`` is the conventional Gaussian-mixture routing used as
a speed/accuracy baseline (per-dimension variances, log-space
responsibilities), and ``rba_variant_route`` is a diagnostic-only
agreement-based variant (cosine metric, no activation weighting) that is
excluded from the training path because stacking it is unstable.

All cores operate on a leading window-batch axis and are written against the
autograd op layer, so the same code runs untraced (numpy arrays) or traced
(Vars) with bitwise-identical values.  Within one window the summation order
is fixed; distinct windows are independent.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import kernels
from .errors import ConfigError, NumericError, ShapeError
from .kernels import COSINE_VARIANT, L1, L2_SQUARED, KernelSpec

SOFTMAX = "softmax"
PLAIN = "plain"
NORMALIZATIONS = (SOFTMAX, PLAIN)

POSE_DIM = 16
DEGENERATE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class CapsuleGrid:
    """A spatial grid of capsules: 4x4 poses plus scalar activations.

    poses: [h, w, c, 4, 4]; activations: [h, w, c] with entries in [0, 1].
    """

    poses: np.ndarray
    activations: np.ndarray

    def __post_init__(self):
        p, a = np.asarray(ag.val(self.poses)), np.asarray(ag.val(self.activations))
        if p.ndim != 5 or p.shape[3:] != (4, 4):
            raise ShapeError(f"poses must be [h,w,c,4,4], got {p.shape}")
        if a.shape != p.shape[:3]:
            raise ShapeError(f"activations {a.shape} do not match poses {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericError("capsule poses contain non-finite values")
        if np.any(a < 0) or np.any(a > 1):
            raise ShapeError("activations must lie in [0, 1]")

    @property
    def height(self):
        return np.shape(ag.val(self.poses))[0]

    @property
    def width(self):
        return np.shape(ag.val(self.poses))[1]

    @property
    def count(self):
        return np.shape(ag.val(self.poses))[2]


@dataclass
class VoteTensor:
    """Transformed votes from every input capsule to every candidate output.

    votes: [n_l, n_out, 16] flattened transformed poses;
    input_activations: [n_l].
    """

    votes: np.ndarray
    input_activations: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.votes)
        a = np.asarray(self.input_activations)
        if v.ndim != 3:
            raise ShapeError(f"votes must be [n_l, n_out, D], got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError(f"need at least one input and one output capsule, got {v.shape}")
        if a.shape != (v.shape[0],):
            raise ShapeError(f"activations {a.shape} do not match votes {v.shape}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a))):
            raise NumericError("vote tensor contains non-finite values")

    @property
    def n_inputs(self):
        return self.votes.shape[0]

    @property
    def n_outputs(self):
        return self.votes.shape[1]


@dataclass
class RoutingState:
    """Routing result for one window.

    r is the raw routing weight after the final update and r_norm its
    current normalized form (what a further step 1 would produce), which is
    what activation computation consumes.  Exceptions: the agreement
    variant keeps r_norm aligned with the weights that blended its final
    pose (its activation is defined through that identity), and the
    Gaussian EM baseline's responsibilities are normalized by construction
    (r == r_norm).  pi is only set by the EM-style methods, sigma only by
    the EM baseline.
    """

    r: np.ndarray
    r_norm: np.ndarray
    v: np.ndarray
    pi: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None


@dataclass
class RoutingConfig:
    iterations: int = 2
    alpha: float = 1.0
    normalization: str = SOFTMAX
    kernel: KernelSpec = field(default_factory=KernelSpec)
    variance_floor: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if not self.variance_floor > 0:
            raise ConfigError(f"variance_floor must be positive, got {self.variance_floor}")


@dataclass
class ActivationParams:
    """Per-output-capsule linear coefficients for activation computation.

    beta: [n_out, D+1]; column 0 is the bias term, columns 1..D scale the
    output pose per dimension.
    """

    beta: np.ndarray


def init_activation_params(n_out: int, dims: int = POSE_DIM, dtype=np.float64) -> ActivationParams:
    """Start at the rigid pose/activation connection: unit scales, zero bias."""
    beta = np.ones((n_out, dims + 1), dtype=dtype)
    beta[:, 0] = 0.0
    return ActivationParams(beta)


@dataclass
class RoutingDiagnostics:
    """Counts degenerate windows that needed the fallback mean."""

    degenerate_windows: int = 0
    by_reason: dict = field(default_factory=dict)

    def record(self, reason: str, count: int):
        if count:
            self.degenerate_windows += count
            self.by_reason[reason] = self.by_reason.get(reason, 0) + count


def uniform_routing_init(n_inputs: int, n_outputs: int, dtype=np.float64) -> np.ndarray:
    """Initial routing weights: every input spread evenly over outputs."""
    return np.full((n_inputs, n_outputs), 1.0 / n_outputs, dtype=dtype)


# ---------------------------------------------------------------------------
# Shared steps (batched over a leading window axis)
# ---------------------------------------------------------------------------

def normalize_rows(r, mode: str):
    """Step 1: constrain each input's weights to sum to 1 across outputs.

    Plain division reproduces the literal constraint; softmax is the
    practical choice that also relaxes how tightly the kernel bandwidth
    binds.  All-zero rows (possible in plain mode when every kernel value
    vanished) fall back to uniform.
    """
    if mode == SOFTMAX:
        return ag.softmax(r, axis=-1)
    if mode != PLAIN:
        raise ConfigError(f"unknown normalization {mode!r}")
    rv = np.asarray(ag.val(r))
    row_sum = ag.reduce_sum(r, axis=-1, keepdims=True)
    sums = np.asarray(ag.val(row_sum))
    zero = sums <= DEGENERATE_EPS
    if not zero.any():
        return ag.div(r, row_sum)
    safe = ag.where(zero, np.ones_like(sums), row_sum)
    uniform = np.full_like(rv, 1.0 / rv.shape[-1])
    return ag.where(np.broadcast_to(zero, rv.shape), uniform, ag.div(r, safe))


def _expand_acts(acts):
    shape = np.shape(ag.val(acts))
    return ag.reshape(acts, shape + (1,))


def _ratio_mean(votes, weights, fallbacks, diagnostics, reason):
    """v_j = sum_i w_ij u_ij / sum_i w_ij with a fallback chain for clusters
    whose denominator collapses (|den| < 1e-12).  The final fallback is the
    unweighted vote mean, which always exists."""
    num = ag.sum_over_inputs_weighted(weights, votes)      # [B, n_out, D]
    den = ag.reduce_sum(weights, axis=1)                   # [B, n_out]
    denv = np.asarray(ag.val(den))
    bad = np.abs(denv) < DEGENERATE_EPS
    if not bad.any():
        return ag.div(num, ag.reshape(den, denv.shape + (1,)))
    if diagnostics is not None:
        diagnostics.record(reason, int(bad.sum()))
    den_safe = ag.where(bad, np.ones_like(denv), den)
    ok = ag.div(num, ag.reshape(den_safe, denv.shape + (1,)))
    if fallbacks:
        fallback_v = _ratio_mean(votes, fallbacks[0](), list(fallbacks[1:]),
                                 None, reason)
    else:
        fallback_v = ag.mean(votes, axis=1)
    mask = np.broadcast_to(bad[..., None], np.shape(ag.val(ok)))
    return ag.where(mask, fallback_v, ok)


def frem_v_update(votes, acts, r_norm, diagnostics=None):
    """Step 2 (EM form): plain activation-weighted mean of the votes."""
    w = ag.mul(r_norm, _expand_acts(acts))
    return _ratio_mean(votes, w, [lambda: r_norm], diagnostics, "zero_activation_mass")


def frms_v_update(votes, acts, r_norm, v_prev, kern: KernelSpec,
                  diagnostics=None, distances=None):
    """Step 2 (mean-shift form): kernel-derivative-weighted mean around the
    previous pose.  The derivative's sign cancels in the ratio.  If every
    contributing derivative vanished (all votes outside an epanechnikov
    support), the EM-form mean is used for that cluster instead."""
    if distances is None:
        vv = ag.val(v_prev)
        distances = kernels.distance_along_axis(
            kern.metric, votes, ag.reshape(v_prev, (np.shape(vv)[0], 1) + np.shape(vv)[1:]),
            axis=-1)
    kprime = kernels.profile_derivative(kern, distances)
    wa = ag.mul(r_norm, _expand_acts(acts))
    w = ag.mul(wa, kprime)
    return _ratio_mean(votes, w, [lambda: wa, lambda: r_norm],
                       diagnostics, "empty_kernel_support")


def _pairwise_distances(kern, votes, v):
    vv = ag.val(v)
    v_row = ag.reshape(v, (np.shape(vv)[0], 1) + np.shape(vv)[1:])
    return kernels.distance_along_axis(kern.metric, votes, v_row, axis=-1)


def _check_metric(cfg, allowed, method):
    if cfg.kernel.metric not in allowed:
        raise ConfigError(
            f"{method} requires metric in {allowed}, got {cfg.kernel.metric!r}")


# ---------------------------------------------------------------------------
# Batched routing cores
# ---------------------------------------------------------------------------

def frms_core(votes, acts, cfg: RoutingConfig, v_init=None, diagnostics=None):
    """Mean-shift routing on batched votes [B, n_l, n_out, D].

    Without a seed pose, the first pose evaluation is the plain activation-
    weighted mean (the derivative factor needs a previous pose to exist);
    later iterations weight by k' at the previous pose.  Returns
    (raw r, normalized r, v).
    """
    _check_metric(cfg, (L1, L2_SQUARED), "frms_route")
    batch, n_in, n_out, _ = np.shape(ag.val(votes))
    dtype = np.asarray(ag.val(votes)).dtype
    r = np.broadcast_to(uniform_routing_init(n_in, n_out, dtype), (batch, n_in, n_out)).copy()
    v = v_init
    dist = None if v is None else _pairwise_distances(cfg.kernel, votes, v)
    for _ in range(cfg.iterations):
        r_norm = normalize_rows(r, cfg.normalization)
        if v is None:
            v = frem_v_update(votes, acts, r_norm, diagnostics)
        else:
            v = frms_v_update(votes, acts, r_norm, v, cfg.kernel,
                              diagnostics, distances=dist)
        dist = _pairwise_distances(cfg.kernel, votes, v)
        k = kernels.profile(cfg.kernel, dist)
        step = ag.mul(ag.mul(k, _expand_acts(acts)), cfg.alpha)
        r = ag.add(r, step)
    return r, normalize_rows(r, cfg.normalization), v


def frem_core(votes, acts, cfg: RoutingConfig, diagnostics=None):
    """EM-style routing on batched votes: mean, mixture coefficients, then a
    multiplicative reassignment of r.  Returns (raw r, normalized r, v, pi)."""
    _check_metric(cfg, (L1, L2_SQUARED), "frem_route")
    batch, n_in, n_out, _ = np.shape(ag.val(votes))
    dtype = np.asarray(ag.val(votes)).dtype
    r = np.broadcast_to(uniform_routing_init(n_in, n_out, dtype), (batch, n_in, n_out)).copy()
    v = None
    pi = None
    for _ in range(cfg.iterations):
        r_norm = normalize_rows(r, cfg.normalization)
        v = frem_v_update(votes, acts, r_norm, diagnostics)
        col = ag.reduce_sum(r_norm, axis=1)                       # [B, n_out]
        total = ag.reduce_sum(col, axis=-1, keepdims=True)
        pi = ag.div(col, total)
        dist = _pairwise_distances(cfg.kernel, votes, v)
        k = kernels.profile(cfg.kernel, dist)
        r = ag.mul(ag.reshape(pi, (batch, 1, n_out)), k)
    return r, normalize_rows(r, cfg.normalization), v, pi


def activation_logits(votes, acts, r_norm, v, beta, kern: KernelSpec):
    """Pre-softmax activation scores for each output capsule.

    score_j = sum_i r'_ij a_i k(max(0, sum_d d(u_ijd - beta_jd v_jd) + beta_j0)).
    The distance is taken per dimension; the kernel argument is clamped at 0
    from below because profiles are defined on nonnegative inputs.
    """
    batch, n_in, n_out, dims = np.shape(ag.val(votes))
    coeff = ag.reshape(beta[:, 1:], (1, 1, n_out, dims))
    bias = ag.reshape(beta[:, 0], (1, 1, n_out))
    vb = ag.reshape(v, (batch, 1, n_out, dims))
    diff = ag.sub(votes, ag.mul(coeff, vb))
    per_dim = kernels.elementwise_distance(kern.metric, diff)
    arg = ag.relu(ag.add(ag.reduce_sum(per_dim, axis=-1), bias))
    k = kernels.profile(kern, arg)
    wa = ag.mul(r_norm, _expand_acts(acts))
    return ag.reduce_sum(ag.mul(wa, k), axis=1)                   # [B, n_out]


def em_core(votes, acts, cfg: RoutingConfig, beta, diagnostics=None):
    """Gaussian-mixture EM routing baseline on batched votes.

    Each iteration: an activation-weighted M-step for per-dimension mean and
    variance (floored, never an error) plus an output activation, then a
    log-space E-step setting responsibilities proportional to activation
    times the diagonal Gaussian likelihood.  Returns
    (r, v, sigma, pi, activations)."""
    _check_metric(cfg, (L1, L2_SQUARED), "em_route_baseline")
    batch, n_in, n_out, dims = np.shape(ag.val(votes))
    dtype = np.asarray(ag.val(votes)).dtype
    floor = np.asarray(cfg.variance_floor, dtype=dtype)
    r = np.broadcast_to(uniform_routing_init(n_in, n_out, dtype), (batch, n_in, n_out)).copy()
    v = sigma = None
    for _ in range(cfg.iterations):
        # M-step: responsibilities are already normalized across outputs.
        w = ag.mul(r, _expand_acts(acts))
        num = ag.sum_over_inputs_weighted(w, votes)
        den = ag.reduce_sum(w, axis=1)
        denv = np.asarray(ag.val(den))
        bad = np.abs(denv) < DEGENERATE_EPS
        if bad.any() and diagnostics is not None:
            diagnostics.record("zero_activation_mass", int(bad.sum()))
        den_safe = ag.reshape(ag.where(bad, np.ones_like(denv), den),
                              denv.shape + (1,))
        v_ok = ag.div(num, den_safe)
        if bad.any():
            v = ag.where(np.broadcast_to(bad[..., None], (batch, n_out, dims)),
                         _ratio_mean(votes, r, [], None, "unused"), v_ok)
        else:
            v = v_ok
        diff = ag.sub(votes, ag.reshape(v, (batch, 1, n_out, dims)))
        sq = ag.mul(diff, diff)
        var = ag.div(ag.sum_over_inputs_weighted(w, sq), den_safe)
        varv = np.asarray(ag.val(var))
        low = varv < cfg.variance_floor
        if low.any():
            var = ag.where(low, np.full_like(varv, cfg.variance_floor), var)
        sigma = var
        # E-step: log-space responsibilities against activation priors.
        logits_a = activation_logits(votes, acts, r, v, beta, cfg.kernel)
        log_prior = ag.log_softmax(logits_a, axis=-1)             # [B, n_out]
        log_norm = ag.mul(ag.reduce_sum(ag.log(ag.mul(var, 2.0 * np.pi)), axis=-1), -0.5)
        quad = ag.dot_over_dims(sq, ag.div(0.5, var))             # [B, n_in, n_out]
        log_like = ag.sub(ag.reshape(ag.add(log_prior, log_norm), (batch, 1, n_out)), quad)
        r = ag.softmax(log_like, axis=-1)
    col = ag.reduce_sum(r, axis=1)
    pi = ag.div(col, ag.reduce_sum(col, axis=-1, keepdims=True))
    final_logits = activation_logits(votes, acts, r, v, beta, cfg.kernel)
    activations = ag.softmax(final_logits, axis=-1)
    return r, v, sigma, pi, activations


def rba_core(votes, cfg: RoutingConfig):
    """Agreement-based variant: softmax-normalized weights, unweighted vote
    blend, additive dot-product agreement update.  Input activations are
    deliberately ignored.  Diagnostic only; not wired into training."""
    if cfg.kernel.metric != COSINE_VARIANT:
        raise ConfigError("rba_variant_route requires the cosine metric")
    batch, n_in, n_out, _ = np.shape(ag.val(votes))
    dtype = np.asarray(ag.val(votes)).dtype
    r = np.broadcast_to(uniform_routing_init(n_in, n_out, dtype), (batch, n_in, n_out)).copy()
    v = None
    r_norm = None
    for _ in range(cfg.iterations):
        r_norm = ag.softmax(r, axis=-1)
        v = ag.sum_over_inputs_weighted(r_norm, votes)
        agreement = ag.dot_over_dims(votes, v)
        r = ag.add(r, agreement)
    return r, r_norm, v


# ---------------------------------------------------------------------------
# Single-window public surface
# ---------------------------------------------------------------------------

def compute_votes(poses, activations, transforms) -> VoteTensor:
    """Transform each input pose by each per-pair matrix.

    poses: [n_l, 4, 4]; transforms: [n_l, n_out, 4, 4].  Vote (i, j) is the
    flattened product transforms[i, j] @ poses[i]; activations pass through.
    """
    poses = np.asarray(poses)
    transforms = np.asarray(transforms)
    if poses.ndim != 3 or poses.shape[1:] != (4, 4):
        raise ShapeError(f"poses must be [n_l,4,4], got {poses.shape}")
    if transforms.ndim != 4 or transforms.shape[0] != poses.shape[0] \
            or transforms.shape[2:] != (4, 4):
        raise ShapeError(f"transforms must be [n_l,n_out,4,4], got {transforms.shape}")
    votes = np.matmul(transforms, poses[:, None, :, :])
    n_in, n_out = transforms.shape[:2]
    return VoteTensor(votes.reshape(n_in, n_out, POSE_DIM), np.asarray(activations))


def objective(votes: VoteTensor, state: RoutingState, kern: KernelSpec) -> float:
    """The weighted mixture-KDE score the routing methods ascend.

    (1/n_l) sum_j sum_i r'_ij a_i k(d(v_j - u_ij)); diagnostics/tests only.
    """
    u = votes.votes
    n_in = u.shape[0]
    dist = kernels.distance_along_axis(kern.metric, u, state.v[None, :, :], axis=-1)
    k = kernels.profile(kern, dist)
    weighted = state.r_norm * votes.input_activations[:, None] * k
    return float(np.sum(weighted) / n_in)


def _batched(votes: VoteTensor):
    return votes.votes[None, ...], votes.input_activations[None, ...]


def frms_route(votes: VoteTensor, cfg: RoutingConfig, v_init=None,
               diagnostics=None) -> RoutingState:
    """Mean-shift routing for one window.  ``v_init`` optionally seeds the
    output poses so the first pose update is already derivative-weighted."""
    vb, ab = _batched(votes)
    seed = None if v_init is None else np.asarray(v_init)[None, ...]
    r, r_norm, v = frms_core(vb, ab, cfg, v_init=seed, diagnostics=diagnostics)
    state = RoutingState(r=ag.val(r)[0], r_norm=ag.val(r_norm)[0], v=ag.val(v)[0])
    _check_state_finite(state)
    return state


def frem_route(votes: VoteTensor, cfg: RoutingConfig, diagnostics=None) -> RoutingState:
    vb, ab = _batched(votes)
    r, r_norm, v, pi = frem_core(vb, ab, cfg, diagnostics=diagnostics)
    state = RoutingState(r=ag.val(r)[0], r_norm=ag.val(r_norm)[0],
                         v=ag.val(v)[0], pi=ag.val(pi)[0])
    _check_state_finite(state)
    return state


def em_route_baseline(votes: VoteTensor, cfg: RoutingConfig,
                      activation_params: ActivationParams,
                      diagnostics=None):
    """Gaussian EM routing baseline; returns (state, output activations)."""
    vb, ab = _batched(votes)
    r, v, sigma, pi, acts = em_core(vb, ab, cfg, activation_params.beta,
                                    diagnostics=diagnostics)
    state = RoutingState(r=ag.val(r)[0], r_norm=ag.val(r)[0], v=ag.val(v)[0],
                         pi=ag.val(pi)[0], sigma=ag.val(sigma)[0])
    _check_state_finite(state)
    return state, ag.val(acts)[0]


def rba_variant_route(votes: VoteTensor, cfg: RoutingConfig) -> RoutingState:
    vb, _ = _batched(votes)
    r, r_norm, v = rba_core(vb, cfg)
    state = RoutingState(r=ag.val(r)[0], r_norm=ag.val(r_norm)[0], v=ag.val(v)[0])
    _check_state_finite(state)
    return state


def compute_activation(votes: VoteTensor, state: RoutingState,
                       params: ActivationParams,
                       kern: KernelSpec = None) -> np.ndarray:
    """Output activations: softmax over the per-capsule weighted kernel
    scores of the votes against the (per-dimension scaled) output poses."""
    kern = kern or KernelSpec()
    vb, ab = _batched(votes)
    logits = activation_logits(vb, ab, state.r_norm[None, ...],
                               state.v[None, ...], params.beta, kern)
    return ag.val(ag.softmax(logits, axis=-1))[0]


def rba_activation(votes: VoteTensor, state: RoutingState) -> np.ndarray:
    """Agreement-variant activations: softmax of summed vote/pose dot
    products, which equals a softmax over squared pose lengths."""
    dots = ag.dot_over_dims(votes.votes[None, ...], state.v[None, ...])
    logits = ag.reduce_sum(state.r_norm[None, ...] * dots, axis=1)
    return ag.val(ag.softmax(logits, axis=-1))[0]


def _check_state_finite(state: RoutingState):
    for name in ("r", "r_norm", "v", "pi", "sigma"):
        arr = getattr(state, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericError(f"routing produced non-finite {name}")
