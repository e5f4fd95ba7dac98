"""capsroute: fast weighted-KDE dynamic routing for capsule networks.

Public surface: the routing algorithms and their configuration, a trainable
hybrid conv/capsule network with a matched CNN baseline, scikit-learn style
classifiers, dataset utilities, and the routing benchmark harness.
"""

from .bench import BenchCase, BenchStats, compare_report, run_bench
from .data import AugmentConfig, Dataset, augment, load_idx, preprocess, synth_affine_glyphs
from .errors import CapsrouteError
from .estimators import BaselineCnnClassifier, CapsuleNetClassifier
from .kernels import KernelSpec, distance, kde_density, profile, profile_derivative
from .network import (
    LayerSpec,
    NetworkSpec,
    build_baseline_cnn,
    count_parameters,
    desk_spec,
    full_spec_64,
    init_parameters,
    network_forward,
)
from .routing import (
    ActivationParams,
    CapsuleGrid,
    RoutingConfig,
    RoutingDiagnostics,
    RoutingState,
    VoteTensor,
    compute_activation,
    compute_votes,
    em_route_baseline,
    frem_route,
    frms_route,
    objective,
    rba_activation,
    rba_variant_route,
)
from .training import (
    TrainConfig,
    TrainReport,
    evaluate,
    margin_loss,
    margin_schedule,
    spread_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ActivationParams", "BaselineCnnClassifier", "BenchCase",
    "BenchStats", "CapsrouteError", "CapsuleGrid",
    "CapsuleNetClassifier", "Dataset", "KernelSpec", "LayerSpec", "NetworkSpec",
    "RoutingConfig", "RoutingDiagnostics", "RoutingState", "TrainConfig",
    "TrainReport", "VoteTensor", "augment", "build_baseline_cnn",
    "compare_report", "compute_activation", "compute_votes", "count_parameters",
    "desk_spec", "distance", "em_route_baseline", "evaluate", "frem_route",
    "frms_route", "full_spec_64", "init_parameters", "kde_density", "load_idx",
    "margin_loss", "margin_schedule", "network_forward", "objective",
    "preprocess", "profile", "profile_derivative", "rba_activation",
    "rba_variant_route", "run_bench", "spread_loss", "synth_affine_glyphs",
    "train",
]
