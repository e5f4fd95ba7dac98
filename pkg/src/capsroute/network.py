"""Hybrid convolutional/capsule network.

A conv stem initializes capsule poses and activations; capsule layers then
route non-overlapping 2x2 windows of capsules (stride 2, halving each
spatial extent and doubling the per-position capsule count) until a final
global routing layer maps every remaining capsule to one capsule per class.
Transform matrices are shared across all windows of a layer.  A matched
plain CNN (pooling instead of routing, global average pooling head) is
provided as the comparison baseline.

Forward passes run batched over a leading example axis and are written
against the autograd op layer, so the same code serves inference and traced
training.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError
from .routing import (
    POSE_DIM,
    CapsuleGrid,
    RoutingConfig,
    activation_logits,
    em_core,
    frem_core,
    frms_core,
)

CONV = "conv"
PRIMARY_CAPS = "primary_caps"
CAPS_ROUTE = "caps_route"
RESIDUAL = "residual"
GLOBAL_CAPS_ROUTE = "global_caps_route"
POOL = "pool"
DENSE = "dense"

METHOD_FRMS = "frms"
METHOD_FREM = "frem"
METHOD_EM = "em"
ROUTING_METHODS = (METHOD_FRMS, METHOD_FREM, METHOD_EM)


LAYER_KINDS = (CONV, PRIMARY_CAPS, CAPS_ROUTE, RESIDUAL, GLOBAL_CAPS_ROUTE,
               POOL, DENSE)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 3
    channels: int = 0          # conv/dense output width
    capsules: int = 0          # capsule count (primary) or output capsules per window
    activation: str = "relu"   # conv nonlinearity: "relu" | "none"
    pool: str = "max"          # "max" (2x2/stride 2) | "avg_global"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; "
                              f"expected one of {LAYER_KINDS}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_size: int = 32
    input_channels: int = 1
    classes: int = 10
    routing_method: str = METHOD_FREM
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    loss: str = "spread"

    def __post_init__(self):
        if self.routing_method not in ROUTING_METHODS:
            raise ConfigError(f"unknown routing method {self.routing_method!r}")
        caps_layers = [l for l in self.layers if l.kind == GLOBAL_CAPS_ROUTE]
        has_caps = any(l.kind in (PRIMARY_CAPS, CAPS_ROUTE) for l in self.layers)
        if has_caps and len(caps_layers) != 1:
            raise ConfigError("a capsule network needs exactly one terminal "
                              "global routing layer")
        if caps_layers and self.layers[-1].kind != GLOBAL_CAPS_ROUTE:
            raise ConfigError("the global routing layer must be terminal")


def desk_spec(classes: int = 10, base_capsules: int = 8, stem_channels: int = 32,
              routing_method: str = METHOD_FREM,
              routing: Optional[RoutingConfig] = None,
              input_size: int = 32) -> NetworkSpec:
    """The four-capsule-layer network for 32x32 inputs.

    Feature-map sides run input -> input/2 -> /4 -> /8 before the global
    layer; per-position capsule counts double at each routing layer.
    """
    c = base_capsules
    layers = (
        LayerSpec(CONV, kernel_size=5, channels=stem_channels, activation="relu"),
        LayerSpec(CONV, kernel_size=1, channels=17 * c, activation="none"),
        LayerSpec(PRIMARY_CAPS, capsules=c),
        LayerSpec(CAPS_ROUTE, capsules=2 * c),
        LayerSpec(CAPS_ROUTE, capsules=4 * c),
        LayerSpec(CAPS_ROUTE, capsules=8 * c),
        LayerSpec(GLOBAL_CAPS_ROUTE, capsules=classes),
    )
    return NetworkSpec(layers=layers, input_size=input_size, classes=classes,
                       routing_method=routing_method,
                       routing=routing or RoutingConfig())


def full_spec_64(classes: int = 5, base_capsules: int = 4, stem_channels: int = 32,
                 routing_method: str = METHOD_FREM,
                 routing: Optional[RoutingConfig] = None) -> NetworkSpec:
    """The five-capsule-layer 64x64 variant with residual pose blocks.

    Constructible and differentiable, but training it to benchmark accuracy
    is outside the desk-scale targets.
    """
    c = base_capsules
    layers = (
        LayerSpec(CONV, kernel_size=5, channels=stem_channels, activation="relu"),
        LayerSpec(CONV, kernel_size=1, channels=17 * c, activation="none"),
        LayerSpec(PRIMARY_CAPS, capsules=c),
        LayerSpec(CAPS_ROUTE, capsules=2 * c),
        LayerSpec(RESIDUAL),
        LayerSpec(CAPS_ROUTE, capsules=4 * c),
        LayerSpec(RESIDUAL),
        LayerSpec(CAPS_ROUTE, capsules=8 * c),
        LayerSpec(RESIDUAL),
        LayerSpec(CAPS_ROUTE, capsules=16 * c),
        LayerSpec(GLOBAL_CAPS_ROUTE, capsules=classes),
    )
    return NetworkSpec(layers=layers, input_size=64, classes=classes,
                       routing_method=routing_method,
                       routing=routing or RoutingConfig())


def _cnn_layers(spec, stem, multiplier):
    n_stages = sum(1 for l in spec.layers if l.kind == CAPS_ROUTE)
    layers = [LayerSpec(CONV, kernel_size=stem.kernel_size, channels=stem.channels,
                        activation="relu")]
    width = stem.channels
    for _ in range(n_stages):
        width *= 2
        channels = max(int(round(width * multiplier)), 1)
        layers.append(LayerSpec(POOL, pool="max"))
        layers.append(LayerSpec(CONV, kernel_size=3, channels=channels,
                                activation="relu"))
    layers.append(LayerSpec(CONV, kernel_size=3, channels=spec.classes,
                            activation="none"))
    layers.append(LayerSpec(POOL, pool="avg_global"))
    return tuple(layers)


def build_baseline_cnn(spec: NetworkSpec) -> NetworkSpec:
    """The matched plain CNN: shared stem, max pooling where the capsule
    layers downsample, a final 3x3 conv to one channel per class, and a
    global average pool into the class softmax.  Hidden widths double per
    stage and are scaled by whichever multiplier lands the parameter count
    closest to the capsule network's."""
    stem = next((l for l in spec.layers if l.kind == CONV), None)
    if stem is None:
        raise ConfigError("capsule spec has no conv stem to share")
    target = count_spec_parameters(spec)

    def build(multiplier):
        return NetworkSpec(layers=_cnn_layers(spec, stem, multiplier),
                           input_size=spec.input_size,
                           input_channels=spec.input_channels,
                           classes=spec.classes,
                           routing_method=spec.routing_method,
                           routing=spec.routing, loss=spec.loss)

    candidates = [build(m) for m in np.linspace(0.25, 6.0, 93)]
    return min(candidates, key=lambda c: abs(count_spec_parameters(c) - target))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def truncated_normal(rng, shape, stddev, dtype):
    """Normal(0, stddev) with redraws outside +-2 stddev."""
    x = rng.normal(0.0, stddev, size=shape)
    bad = np.abs(x) > 2.0 * stddev
    while bad.any():
        x[bad] = rng.normal(0.0, stddev, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * stddev
    return x.astype(dtype)


def _layer_shapes(spec: NetworkSpec):
    """Walk the layer list tracking (feature channels | capsule grid) shape;
    yields (index, layer, shape-dict with what init/forward need)."""
    size = spec.input_size
    channels = spec.input_channels
    capsules = None
    out = []
    for idx, layer in enumerate(spec.layers):
        info = {"in_channels": channels, "size": size, "in_capsules": capsules}
        if layer.kind == CONV:
            channels = layer.channels
        elif layer.kind == PRIMARY_CAPS:
            if channels < 17 * layer.capsules:
                raise ConfigError(
                    f"primary capsules need >= {17 * layer.capsules} feature "
                    f"channels, got {channels}")
            capsules = layer.capsules
            channels = None
        elif layer.kind == CAPS_ROUTE:
            if capsules is None:
                raise ConfigError("caps_route needs a capsule grid input")
            if size % 2:
                raise ConfigError(f"caps_route needs even extents, got {size}")
            info["window_inputs"] = 4 * capsules
            capsules = layer.capsules
            size //= 2
        elif layer.kind == RESIDUAL:
            if capsules is None:
                raise ConfigError("residual block needs a capsule grid input")
            info["pose_channels"] = POSE_DIM * capsules
        elif layer.kind == GLOBAL_CAPS_ROUTE:
            if capsules is None:
                raise ConfigError("global routing needs a capsule grid input")
            info["window_inputs"] = size * size * capsules
        elif layer.kind == POOL:
            if layer.pool == "max":
                if size % 2:
                    raise ConfigError(f"max pool needs even extents, got {size}")
                size //= 2
            elif layer.pool == "avg_global":
                size = 1
            else:
                raise ConfigError(f"unknown pool {layer.pool!r}")
        elif layer.kind == DENSE:
            info["in_features"] = channels * size * size
            channels = layer.channels
            size = 1
        else:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
        out.append((idx, layer, info))
    return out


def init_parameters(spec: NetworkSpec, seed: int = 0, dtype=np.float32,
                    transform_stddev: float = 0.1,
                    conv_stddev: float = 0.01,
                    stddev_overrides: Optional[dict] = None) -> dict:
    """Truncated-normal initialization: wide for transform matrices (more
    initial diversity between windows' votes), narrow for everything else.
    Activation coefficients start at the rigid pose/activation connection.

    ``stddev_overrides`` maps parameter names to stddevs; narrow desk-scale
    networks need scale-preserving gains (see the training docs) that the
    benchmark-scale defaults do not provide.
    """
    from .rng import seed_stream
    rng = seed_stream(seed, "init")
    overrides = stddev_overrides or {}
    params = {}

    def draw(name, shape, default_stddev):
        return truncated_normal(rng, shape, overrides.get(name, default_stddev), dtype)

    for idx, layer, info in _layer_shapes(spec):
        key = f"L{idx:02d}"
        if layer.kind == CONV:
            shape = (layer.kernel_size, layer.kernel_size,
                     info["in_channels"], layer.channels)
            params[f"{key}.kernel"] = draw(f"{key}.kernel", shape, conv_stddev)
            params[f"{key}.bias"] = np.zeros(layer.channels, dtype=dtype)
        elif layer.kind == PRIMARY_CAPS:
            shape = (1, 1, info["in_channels"], layer.capsules)
            params[f"{key}.act_kernel"] = draw(f"{key}.act_kernel", shape, conv_stddev)
            params[f"{key}.act_bias"] = np.zeros(layer.capsules, dtype=dtype)
        elif layer.kind in (CAPS_ROUTE, GLOBAL_CAPS_ROUTE):
            n_out = layer.capsules
            shape = (info["window_inputs"], n_out, 4, 4)
            params[f"{key}.transform"] = draw(f"{key}.transform", shape, transform_stddev)
            beta = np.ones((n_out, POSE_DIM + 1), dtype=dtype)
            beta[:, 0] = 0.0
            params[f"{key}.beta"] = beta
        elif layer.kind == RESIDUAL:
            width = info["pose_channels"]
            for half in ("a", "b"):
                params[f"{key}.kernel_{half}"] = draw(
                    f"{key}.kernel_{half}", (3, 3, width, width), conv_stddev)
                params[f"{key}.bias_{half}"] = np.zeros(width, dtype=dtype)
        elif layer.kind == DENSE:
            params[f"{key}.weight"] = draw(
                f"{key}.weight", (info["in_features"], layer.channels), conv_stddev)
            params[f"{key}.bias"] = np.zeros(layer.channels, dtype=dtype)
    return params


def count_parameters(params: dict) -> int:
    return int(sum(np.asarray(ag.val(p)).size for p in params.values()))


def count_spec_parameters(spec: NetworkSpec) -> int:
    """Analytic parameter count from the layer shapes (no allocation)."""
    total = 0
    for _, layer, info in _layer_shapes(spec):
        if layer.kind == CONV:
            total += layer.kernel_size ** 2 * info["in_channels"] * layer.channels
            total += layer.channels
        elif layer.kind == PRIMARY_CAPS:
            total += info["in_channels"] * layer.capsules + layer.capsules
        elif layer.kind in (CAPS_ROUTE, GLOBAL_CAPS_ROUTE):
            total += info["window_inputs"] * layer.capsules * POSE_DIM
            total += layer.capsules * (POSE_DIM + 1)
        elif layer.kind == RESIDUAL:
            width = info["pose_channels"]
            total += 2 * (9 * width * width + width)
        elif layer.kind == DENSE:
            total += info["in_features"] * layer.channels + layer.channels
    return total


# ---------------------------------------------------------------------------
# Batched layer forwards
# ---------------------------------------------------------------------------

def _conv(x, kernel, bias, activation):
    out = ag.add(ag.conv2d_same(x, kernel), bias)
    return ag.relu(out) if activation == "relu" else out


def _primary_caps(features, act_kernel, act_bias, capsules):
    """Pose channels pass through a pure reshape; activation logits come
    from a 1x1 conv over all features, squashed to (0, 1)."""
    fshape = np.shape(ag.val(features))
    batch, height, width, channels = fshape
    if channels < 17 * capsules:
        raise ShapeError(f"primary capsules need >= {17 * capsules} channels, "
                         f"got {channels}")
    poses = ag.reshape(features[:, :, :, :POSE_DIM * capsules],
                       (batch, height, width, capsules, 4, 4))
    logits = ag.add(ag.conv2d_same(features, act_kernel), act_bias)
    acts = ag.sigmoid(logits)
    return poses, acts


def _route_batch(votes, acts, method, cfg, beta, diagnostics):
    """Dispatch one batched routing call; returns (poses [B,n_out,16],
    activations [B,n_out])."""
    if method == METHOD_FRMS:
        _, r_norm, v = frms_core(votes, acts, cfg, diagnostics=diagnostics)
    elif method == METHOD_FREM:
        _, r_norm, v, _ = frem_core(votes, acts, cfg, diagnostics=diagnostics)
    elif method == METHOD_EM:
        _, v, _, _, a = em_core(votes, acts, cfg, beta, diagnostics=diagnostics)
        return v, a
    else:
        raise ConfigError(f"unknown routing method {method!r}")
    logits = activation_logits(votes, acts, r_norm, v, beta, cfg.kernel)
    return v, ag.softmax(logits, axis=-1)


def _window_votes(poses, acts, transform):
    """Gather non-overlapping 2x2 windows and transform every capsule's pose
    toward every candidate output.

    poses: [B,H,W,c,4,4] -> votes [B*(H/2)*(W/2), 4c, n_out, 16].  Window
    capsule order is (row-in-window, col-in-window, channel).
    """
    pshape = np.shape(ag.val(poses))
    batch, height, width, caps = pshape[:4]
    h2, w2 = height // 2, width // 2
    n_in = 4 * caps
    n_out = np.shape(ag.val(transform))[1]
    p = ag.reshape(poses, (batch, h2, 2, w2, 2, caps, 4, 4))
    p = ag.transpose(p, (0, 1, 3, 2, 4, 5, 6, 7))
    p = ag.reshape(p, (batch * h2 * w2, n_in, 1, 4, 4))
    a = ag.reshape(acts, (batch, h2, 2, w2, 2, caps))
    a = ag.transpose(a, (0, 1, 3, 2, 4, 5))
    a = ag.reshape(a, (batch * h2 * w2, n_in))
    t = ag.reshape(transform, (1, n_in, n_out, 4, 4))
    votes = ag.reshape(ag.matmul(t, p), (batch * h2 * w2, n_in, n_out, POSE_DIM))
    return votes, a, (batch, h2, w2)


def _capsule_layer(poses, acts, transform, beta, method, cfg, diagnostics):
    votes, window_acts, (batch, h2, w2) = _window_votes(poses, acts, transform)
    v, a = _route_batch(votes, window_acts, method, cfg, beta, diagnostics)
    n_out = np.shape(ag.val(v))[1]
    out_poses = ag.reshape(v, (batch, h2, w2, n_out, 4, 4))
    out_acts = ag.reshape(a, (batch, h2, w2, n_out))
    return out_poses, out_acts


def _global_layer(poses, acts, transform, beta, method, cfg, diagnostics):
    pshape = np.shape(ag.val(poses))
    batch, height, width, caps = pshape[:4]
    n_in = height * width * caps
    n_out = np.shape(ag.val(transform))[1]
    p = ag.reshape(poses, (batch, n_in, 1, 4, 4))
    a = ag.reshape(acts, (batch, n_in))
    t = ag.reshape(transform, (1, n_in, n_out, 4, 4))
    votes = ag.reshape(ag.matmul(t, p), (batch, n_in, n_out, POSE_DIM))
    return _route_batch(votes, a, method, cfg, beta, diagnostics)


def _residual(poses, acts, k1, b1, k2, b2):
    """pose' = relu(pose + residual(pose)); activations route around."""
    pshape = np.shape(ag.val(poses))
    batch, height, width, caps = pshape[:4]
    feats = ag.reshape(poses, (batch, height, width, caps * POSE_DIM))
    hidden = ag.relu(ag.add(ag.conv2d_same(feats, k1), b1))
    res = ag.add(ag.conv2d_same(hidden, k2), b2)
    out = ag.relu(ag.add(feats, res))
    return ag.reshape(out, pshape), acts


def _global_avg_pool(x):
    return ag.mean(x, axis=(1, 2))


def forward_batch(spec: NetworkSpec, params: dict, images, diagnostics=None):
    """Class probabilities [B, classes] for a batch of [B, H, W, C] images."""
    shape = np.shape(ag.val(images))
    if len(shape) != 4 or shape[1] != spec.input_size or shape[2] != spec.input_size:
        raise ShapeError(f"expected [B,{spec.input_size},{spec.input_size},C] "
                         f"images, got {shape}")
    x = images
    poses = acts = None
    class_acts = None
    for idx, layer in enumerate(spec.layers):
        key = f"L{idx:02d}"
        if layer.kind == CONV:
            x = _conv(x, params[f"{key}.kernel"], params[f"{key}.bias"],
                      layer.activation)
        elif layer.kind == PRIMARY_CAPS:
            poses, acts = _primary_caps(x, params[f"{key}.act_kernel"],
                                        params[f"{key}.act_bias"], layer.capsules)
        elif layer.kind == CAPS_ROUTE:
            poses, acts = _capsule_layer(poses, acts, params[f"{key}.transform"],
                                         params[f"{key}.beta"],
                                         spec.routing_method, spec.routing,
                                         diagnostics)
        elif layer.kind == RESIDUAL:
            poses, acts = _residual(poses, acts,
                                    params[f"{key}.kernel_a"], params[f"{key}.bias_a"],
                                    params[f"{key}.kernel_b"], params[f"{key}.bias_b"])
        elif layer.kind == GLOBAL_CAPS_ROUTE:
            _, class_acts = _global_layer(poses, acts, params[f"{key}.transform"],
                                          params[f"{key}.beta"],
                                          spec.routing_method, spec.routing,
                                          diagnostics)
        elif layer.kind == POOL:
            x = ag.max_pool_2x2(x) if layer.pool == "max" else _global_avg_pool(x)
        elif layer.kind == DENSE:
            flat = ag.reshape(x, (shape[0], -1))
            x = ag.add(ag.matmul(flat, params[f"{key}.weight"]), params[f"{key}.bias"])
    if class_acts is not None:
        return class_acts
    return ag.softmax(x, axis=-1)


# ---------------------------------------------------------------------------
# Single-example / single-grid public surface
# ---------------------------------------------------------------------------

def conv2d_forward(image, kernels, bias=None, activation="none"):
    """Stride-1 same-padding cross-correlation on one [H, W, Cin] image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected [H,W,C] image, got {image.shape}")
    out = ag.conv2d_same(image[None], np.asarray(kernels))
    if bias is not None:
        out = ag.add(out, np.asarray(bias))
    if activation == "relu":
        out = ag.relu(out)
    return ag.val(out)[0]


def primary_caps(features, act_kernel, act_bias, capsules: int) -> CapsuleGrid:
    poses, acts = _primary_caps(np.asarray(features)[None], np.asarray(act_kernel),
                                np.asarray(act_bias), capsules)
    return CapsuleGrid(ag.val(poses)[0], ag.val(acts)[0])


def capsule_layer_forward(grid: CapsuleGrid, transform, beta, method: str,
                          cfg: RoutingConfig, diagnostics=None) -> CapsuleGrid:
    if grid.height % 2 or grid.width % 2:
        raise ShapeError(f"capsule layer needs even grid extents, got "
                         f"{grid.height}x{grid.width}")
    poses, acts = _capsule_layer(grid.poses[None], grid.activations[None],
                                 np.asarray(transform), np.asarray(beta),
                                 method, cfg, diagnostics)
    return CapsuleGrid(ag.val(poses)[0], ag.val(acts)[0])


def residual_block_forward(grid: CapsuleGrid, k1, b1, k2, b2) -> CapsuleGrid:
    poses, acts = _residual(grid.poses[None], grid.activations[None],
                            np.asarray(k1), np.asarray(b1),
                            np.asarray(k2), np.asarray(b2))
    return CapsuleGrid(ag.val(poses)[0], ag.val(acts)[0])


def global_caps_route(grid: CapsuleGrid, transform, beta, method: str,
                      cfg: RoutingConfig, diagnostics=None):
    """Route every capsule of the grid to the class capsules; returns
    (class poses [k, 16], class activations [k])."""
    poses, acts = _global_layer(grid.poses[None], grid.activations[None],
                                np.asarray(transform), np.asarray(beta),
                                method, cfg, diagnostics)
    return ag.val(poses)[0], ag.val(acts)[0]


def network_forward(spec: NetworkSpec, params: dict, image, diagnostics=None):
    """Class probability vector for a single [H, W, C] image."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    return ag.val(forward_batch(spec, params, image[None], diagnostics))[0]
