"""Config file schema: network layers, routing, training, and data blocks.

The file format is JSON with a versioned ``schema_version`` field.  Defaults
that are package choices rather than design-dictated values are labeled
"non-paper default" in the ``notes`` block that ``capsroute config
--print-defaults`` emits, so a config reader can tell which knobs were
pinned by the method and which were picked here.
"""

import json
from dataclasses import asdict

from .errors import ConfigError
from .kernels import KernelSpec
from .network import LayerSpec, NetworkSpec, build_baseline_cnn, desk_spec
from .routing import RoutingConfig
from .training import TrainConfig

SCHEMA_VERSION = 1

DEFAULT_NOTES = {
    "network.layers[conv].channels": "non-paper default (stem width)",
    "network.base_capsules": "non-paper default (primary capsule count)",
    "routing.iterations": "2 iterations: the recommended setting; 1 fails, 3 degrades",
    "routing.alpha": "step size 1, used directly",
    "routing.normalization": "softmax replaces plain normalization in step 1",
    "routing.kernel": "epanechnikov + l1 is the default configuration",
    "routing.variance_floor": "non-paper default (EM baseline numeric floor)",
    "train.epochs": "50 epochs",
    "train.batch_size": "mini-batches of size 50",
    "train.margin": "spread margin ramps 0.2 -> 0.9 within 5 epochs",
    "train.learning_rate": "non-paper default (optimizer unspecified upstream)",
    "train.momentum": "non-paper default (optimizer unspecified upstream)",
    "train.microbatch": "non-paper default (gradient accumulation chunk)",
    "init.transform_stddev": "truncated normal, stddev 0.1 for transforms",
    "init.conv_stddev": "truncated normal, stddev 0.01 for other weights",
    "data.resize": "non-paper default (bilinear; only 'resize' is specified)",
}


def routing_to_dict(cfg: RoutingConfig, method: str) -> dict:
    return {
        "method": method,
        "iterations": cfg.iterations,
        "alpha": cfg.alpha,
        "normalization": cfg.normalization,
        "kernel": cfg.kernel.profile,
        "metric": cfg.kernel.metric,
        "variance_floor": cfg.variance_floor,
    }


def routing_from_dict(d: dict):
    cfg = RoutingConfig(
        iterations=int(d.get("iterations", 2)),
        alpha=float(d.get("alpha", 1.0)),
        normalization=d.get("normalization", "softmax"),
        kernel=KernelSpec(d.get("kernel", "epanechnikov"), d.get("metric", "l1")),
        variance_floor=float(d.get("variance_floor", 1e-4)),
    )
    return cfg, d.get("method", "frem")


def spec_to_dict(spec: NetworkSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry = {"kind": layer.kind}
        defaults = LayerSpec(kind=layer.kind)
        for fname in ("kernel_size", "channels", "capsules", "activation", "pool"):
            value = getattr(layer, fname)
            if value != getattr(defaults, fname):
                entry[fname] = value
        layers.append(entry)
    return {
        "input_size": spec.input_size,
        "input_channels": spec.input_channels,
        "classes": spec.classes,
        "loss": spec.loss,
        "routing": routing_to_dict(spec.routing, spec.routing_method),
        "layers": layers,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    try:
        routing, method = routing_from_dict(d.get("routing", {}))
        layers = tuple(LayerSpec(**entry) for entry in d["layers"])
        return NetworkSpec(
            layers=layers,
            input_size=int(d.get("input_size", 32)),
            input_channels=int(d.get("input_channels", 1)),
            classes=int(d["classes"]),
            routing_method=method,
            routing=routing,
            loss=d.get("loss", "spread"),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad network config: {exc}") from exc


def train_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_from_dict(d: dict) -> TrainConfig:
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def default_config(classes: int = 10, base_capsules: int = 8,
                   stem_channels: int = 32, routing_method: str = "frem") -> dict:
    spec = desk_spec(classes=classes, base_capsules=base_capsules,
                     stem_channels=stem_channels, routing_method=routing_method)
    return {
        "schema_version": SCHEMA_VERSION,
        "network": spec_to_dict(spec),
        "train": train_to_dict(TrainConfig()),
        "data": {"dataset": "synth", "data_dir": ".", "synth_classes": 5,
                 "synth_train": 2000, "synth_test": 500, "resize": "bilinear"},
        "notes": dict(DEFAULT_NOTES),
    }


def parse_config(d: dict):
    """Returns (NetworkSpec, TrainConfig, data dict)."""
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    spec = spec_from_dict(d["network"])
    train_cfg = train_from_dict(d.get("train", {}))
    return spec, train_cfg, dict(d.get("data", {}))


def load_config(path):
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(d)


def dump_config(d: dict, path=None) -> str:
    text = json.dumps(d, indent=2, sort_keys=False)
    if path is not None:
        with open(path, "w") as f:
            f.write(text + "\n")
    return text


def baseline_cnn_config(capsnet_config: dict) -> dict:
    """Derive the matched plain-CNN config from a capsule network config."""
    spec, _, _ = parse_config(capsnet_config)
    cnn = build_baseline_cnn(spec)
    out = dict(capsnet_config)
    out["network"] = spec_to_dict(cnn)
    return out
