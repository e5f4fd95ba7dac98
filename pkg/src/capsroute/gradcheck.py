"""Named finite-difference checks for every differentiable op and for whole
networks.  Instances are drawn away from the known kinks (relu at 0, the
epanechnikov breakpoint, pooling ties) so central differences are valid at
the default epsilon.
"""

import numpy as np

from . import autograd as ag
from . import network as net
from .errors import ConfigError
from .kernels import KernelSpec
from .routing import RoutingConfig, activation_logits, em_core, frem_core, frms_core
from .rng import seed_stream
from .training import batched_spread_loss


def _rng(seed, name):
    return seed_stream(seed, f"gradcheck:{name}")


def _away_from(values, points, band=2e-3):
    """Shift samples sitting within ``band`` of any kink point."""
    for p in points:
        mask = np.abs(values - p) < band
        values = values + mask * (2 * band)
    return values


def _weighted_scalar(x, rng):
    w = rng.normal(size=np.shape(ag.val(x)))
    return ag.reduce_sum(ag.mul(x, w))


def _elementwise_case(fn, seed, name, positive=False, kinks=()):
    rng = _rng(seed, name)
    x = rng.normal(0.0, 1.0, size=(4, 5))
    if positive:
        x = np.abs(x) + 0.5
    x = _away_from(x, kinks)
    w = rng.normal(size=x.shape)

    def program(params):
        return ag.reduce_sum(ag.mul(fn(params["x"]), w))

    return program, {"x": x}, ()


def _routing_case(method, seed, kernel=KernelSpec("gaussian", "l2sq"),
                  iterations=2, normalization="softmax"):
    rng = _rng(seed, f"routing:{method}")
    n_in, n_out = 6, 3
    poses = rng.normal(0.0, 0.4, size=(n_in, 4, 4))
    acts = rng.uniform(0.3, 1.0, size=(n_in,))
    transform = rng.normal(0.0, 0.3, size=(n_in, n_out, 4, 4))
    beta = np.ones((n_out, 17))
    beta[:, 0] = 0.05
    beta[:, 1:] += rng.normal(0.0, 0.05, size=(n_out, 16))
    w_acts = rng.normal(size=(1, n_out))
    w_poses = rng.normal(size=(1, n_out, 16))
    cfg = RoutingConfig(iterations=iterations, normalization=normalization,
                        kernel=kernel)

    def program(params, poses_in, acts_in):
        t = ag.reshape(params["transform"], (1, n_in, n_out, 4, 4))
        p = poses_in[None, :, None, :, :]
        votes = ag.reshape(ag.matmul(t, p), (1, n_in, n_out, 16))
        if method == "frms":
            _, r_norm, v = frms_core(votes, acts_in[None], cfg)
        elif method == "frem":
            _, r_norm, v, _ = frem_core(votes, acts_in[None], cfg)
        elif method == "em":
            _, v, _, _, a = em_core(votes, acts_in[None], cfg, params["beta"])
            return ag.add(ag.reduce_sum(ag.mul(a, w_acts)),
                          ag.reduce_sum(ag.mul(v, w_poses)))
        else:
            raise ConfigError(f"unknown routing method {method!r}")
        logits = activation_logits(votes, acts_in[None], r_norm, v,
                                   params["beta"], cfg.kernel)
        a = ag.softmax(logits, axis=-1)
        return ag.add(ag.reduce_sum(ag.mul(a, w_acts)),
                      ag.reduce_sum(ag.mul(v, w_poses)))

    return program, {"transform": transform, "beta": beta}, (poses, acts)


def _epanechnikov_routing_case(seed):
    """Epanechnikov instance shrunk so every distance stays well inside the
    kernel support: output poses live in the votes' convex hull, so capping
    vote magnitude bounds all squared distances by ~0.64 and the breakpoint
    at 1 is never approached during differencing.  The metric is l2sq: the
    l1 metric's |.| kinks sit near zero for any in-support instance and
    cannot be banded away, so abs is covered by its own op check instead."""
    program, params, inputs = _routing_case(
        "frem", seed, kernel=KernelSpec("epanechnikov", "l2sq"))
    poses, _ = inputs
    votes = np.matmul(params["transform"], poses[:, None, :, :])
    scale = 0.1 / max(np.abs(votes).max(), 1e-9)
    shrunk = dict(params)
    shrunk["transform"] = params["transform"] * scale
    return program, shrunk, inputs


def _conv_case(seed):
    rng = _rng(seed, "conv")
    x = rng.normal(size=(2, 6, 6, 3))
    k = rng.normal(0.0, 0.3, size=(3, 3, 3, 4))
    w = rng.normal(size=(2, 6, 6, 4))

    def program(params):
        return ag.reduce_sum(ag.mul(ag.conv2d_same(params["x"], params["k"]), w))

    return program, {"x": x, "k": k}, ()


def _maxpool_case(seed):
    rng = _rng(seed, "maxpool")
    # Distinct values with comfortable gaps, so the argmax never flips.
    x = rng.permutation(np.arange(2 * 4 * 4 * 3, dtype=np.float64)).reshape(2, 4, 4, 3)
    w = rng.normal(size=(2, 2, 2, 3))

    def program(params):
        return ag.reduce_sum(ag.mul(ag.max_pool_2x2(params["x"]), w))

    return program, {"x": x}, ()


def _matmul_case(seed):
    rng = _rng(seed, "matmul")
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))

    def program(params):
        return ag.reduce_sum(ag.mul(ag.matmul(params["a"], params["b"]), w))

    return program, {"a": a, "b": b}, ()


def _spread_loss_case(seed):
    rng = _rng(seed, "spread")
    logits = rng.normal(size=(3, 5))
    targets = np.array([0, 3, 1])

    def program(params):
        probs = ag.softmax(params["logits"], axis=-1)
        return batched_spread_loss(probs, targets, 0.6)

    return program, {"logits": logits}, ()


OP_CHECKS = {
    "matmul": _matmul_case,
    "softmax": lambda seed: _elementwise_case(lambda x: ag.softmax(x, axis=-1), seed, "softmax"),
    "log_softmax": lambda seed: _elementwise_case(lambda x: ag.log_softmax(x, axis=-1), seed, "log_softmax"),
    "exp": lambda seed: _elementwise_case(ag.exp, seed, "exp"),
    "log": lambda seed: _elementwise_case(ag.log, seed, "log", positive=True),
    "sigmoid": lambda seed: _elementwise_case(ag.sigmoid, seed, "sigmoid"),
    "relu": lambda seed: _elementwise_case(ag.relu, seed, "relu", kinks=(0.0,)),
    "abs": lambda seed: _elementwise_case(ag.absolute, seed, "abs", kinks=(0.0,)),
    "div": lambda seed: _elementwise_case(lambda x: ag.div(1.0, x), seed, "div", positive=True),
    "conv2d": _conv_case,
    "max_pool": _maxpool_case,
    "spread_loss": _spread_loss_case,
    "frms": lambda seed: _routing_case("frms", seed),
    "frem": lambda seed: _routing_case("frem", seed),
    "em": lambda seed: _routing_case("em", seed),
    "frem_epanechnikov": _epanechnikov_routing_case,
}


def run_op_check(name: str, epsilon: float = 1e-5, seed: int = 0):
    """Returns {param name: max relative error} for the named op check."""
    if name not in OP_CHECKS:
        raise ConfigError(f"unknown gradcheck op {name!r}; "
                          f"choose from {sorted(OP_CHECKS)}")
    program, params, inputs = OP_CHECKS[name](seed)
    return ag.finite_diff_report(program, params, *inputs, epsilon=epsilon, seed=seed)


def network_check(spec, epsilon: float = 1e-5, seed: int = 0,
                  samples_per_tensor: int = 256):
    """Finite-difference check of a full network loss against every
    parameter group (float64)."""
    rng = _rng(seed, "network")
    params = net.init_parameters(spec, seed=seed, dtype=np.float64)
    image = rng.normal(0.0, 1.0, size=(1, spec.input_size, spec.input_size,
                                       spec.input_channels))
    target = np.array([rng.integers(0, spec.classes)])

    def program(p, img, tgt):
        probs = net.forward_batch(spec, p, img)
        return batched_spread_loss(probs, tgt, 0.6)

    return ag.finite_diff_report(program, params, image, target,
                                 epsilon=epsilon, seed=seed,
                                 samples_per_tensor=samples_per_tensor)
