"""Losses, the margin schedule, SGD training loop, and evaluation.

The margin of the spread loss ramps linearly over the first epochs, which
keeps early gradients alive while the output capsules are still nearly
uniform.  The optimizer is plain SGD with momentum (the choice is not
dictated by the routing design; it is a package default).  Training is
deterministic for a fixed seed in single-threaded mode: batch order comes
from a named stream and per-example gradients reduce in a fixed order.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import network as net
from .errors import ConfigError, NumericError, ShapeError, TrainAbortError
from .rng import seed_stream
from .routing import RoutingDiagnostics

SPREAD = "spread"
MARGIN = "margin"
LOSSES = (SPREAD, MARGIN)

MARGIN_POSITIVE = 0.9
MARGIN_NEGATIVE = 0.1
MARGIN_DOWNWEIGHT = 0.5


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 50
    loss: str = SPREAD
    margin_start: float = 0.2
    margin_end: float = 0.9
    margin_ramp_epochs: float = 5.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    init_stddev: float = 0.1
    microbatch: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 < self.margin_start < 1.0 and 0.0 < self.margin_end < 1.0):
            raise ConfigError("margins must lie in (0, 1)")
        if self.margin_ramp_epochs > self.epochs:
            raise ConfigError("margin ramp cannot outlast training")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.microbatch < 1:
            raise ConfigError("microbatch must be >= 1")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    test_error: Optional[float] = None
    degenerate_windows: int = 0

    def mean_ms_per_step(self):
        if not self.steps:
            return 0.0
        return float(np.mean([s["ms_per_step"] for s in self.steps]))


# ---------------------------------------------------------------------------
# Losses (op-layer implementations; work on arrays or Vars)
# ---------------------------------------------------------------------------

def _check_targets(targets, classes):
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ShapeError(f"target out of range for {classes} classes")
    return targets


def batched_spread_loss(probs, targets, margin):
    """Mean over the batch of sum_{i != t} max(0, margin - (a_t - a_i))^2."""
    shape = np.shape(ag.val(probs))
    targets = _check_targets(targets, shape[1])
    a_t = ag.take_per_row(probs, targets)
    hinge = ag.relu(ag.sub(margin, ag.sub(ag.reshape(a_t, (shape[0], 1)), probs)))
    off_target = np.ones(shape, dtype=np.asarray(ag.val(probs)).dtype)
    off_target[np.arange(shape[0]), targets] = 0.0
    per_example = ag.reduce_sum(ag.mul(ag.mul(hinge, hinge), off_target), axis=-1)
    return ag.mean(per_example)


def spread_loss(activations, target: int, margin: float):
    """Squared hinge on the activation margin between the target class and
    every other class."""
    probs = ag.reshape(activations, (1, np.shape(ag.val(activations))[0]))
    out = batched_spread_loss(probs, np.asarray([target]), margin)
    return out if isinstance(out, ag.Var) else float(out)


def batched_margin_loss(probs, targets):
    """Two-sided hinge: push the target activation above 0.9 and every other
    activation below 0.1 (down-weighted by 0.5)."""
    shape = np.shape(ag.val(probs))
    targets = _check_targets(targets, shape[1])
    a_t = ag.take_per_row(probs, targets)
    pos = ag.relu(ag.sub(MARGIN_POSITIVE, a_t))
    pos = ag.mul(pos, pos)
    neg = ag.relu(ag.sub(probs, MARGIN_NEGATIVE))
    off_target = np.ones(shape, dtype=np.asarray(ag.val(probs)).dtype)
    off_target[np.arange(shape[0]), targets] = 0.0
    neg_sum = ag.reduce_sum(ag.mul(ag.mul(neg, neg), off_target), axis=-1)
    return ag.mean(ag.add(pos, ag.mul(neg_sum, MARGIN_DOWNWEIGHT)))


def margin_loss(activations, target: int):
    probs = ag.reshape(activations, (1, np.shape(ag.val(activations))[0]))
    out = batched_margin_loss(probs, np.asarray([target]))
    return out if isinstance(out, ag.Var) else float(out)


def margin_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear ramp from the start to the end margin over the first ramp
    epochs (fractional epochs allowed: the ramp moves per step)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    frac = min(epoch / cfg.margin_ramp_epochs, 1.0) if cfg.margin_ramp_epochs > 0 else 1.0
    return cfg.margin_start + (cfg.margin_end - cfg.margin_start) * frac


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _loss_program(spec, cfg, diagnostics):
    def program(params, images, targets, margin):
        probs = net.forward_batch(spec, params, images, diagnostics)
        if cfg.loss == SPREAD:
            return batched_spread_loss(probs, targets, margin)
        return batched_margin_loss(probs, targets)
    return program


def train(spec: net.NetworkSpec, dataset, cfg: TrainConfig,
          eval_dataset=None, params=None, verbose: bool = False):
    """Mini-batch SGD with momentum over the traced network.

    Returns (parameters, report).  A non-finite loss or gradient aborts with
    a diagnostics snapshot.  Fixed seed, single thread: identical reports
    across runs.
    """
    if dataset is None or len(dataset) < 1:
        raise ConfigError("dataset is empty")
    if params is None:
        params = net.init_parameters(spec, seed=cfg.seed,
                                     transform_stddev=cfg.init_stddev)
    else:
        params = {k: np.array(v) for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    diagnostics = RoutingDiagnostics()
    program = _loss_program(spec, cfg, diagnostics)
    report = TrainReport()
    order_rng = seed_stream(cfg.seed, "batch_order")
    n = len(dataset)
    steps_per_epoch = max(n // cfg.batch_size, 1)
    images_all = dataset.images.astype(np.float32)
    labels_all = dataset.labels

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            margin = margin_schedule(epoch + step / steps_per_epoch, cfg)
            t0 = time.perf_counter()
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            loss_value = 0.0
            for lo in range(0, len(idx), cfg.microbatch):
                chunk = idx[lo:lo + cfg.microbatch]
                weight = len(chunk) / len(idx)
                try:
                    value, tape = ag.record_forward(
                        program, params, images_all[chunk], labels_all[chunk],
                        np.float32(margin))
                    if not np.isfinite(value):
                        raise NumericError("non-finite loss")
                    part = ag.backward(tape)
                except NumericError as exc:
                    raise TrainAbortError(
                        f"aborted at epoch {epoch} step {step}: {exc}",
                        snapshot={"epoch": epoch, "step": step, "margin": margin,
                                  "recent_losses": epoch_losses[-5:],
                                  "cause": str(exc)}) from exc
                loss_value += float(value) * weight
                for k in grads:
                    grads[k] += part[k] * np.float32(weight)
            for k in params:
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                params[k] = params[k] - np.float32(cfg.learning_rate) * velocity[k]
            ms = (time.perf_counter() - t0) * 1000.0
            epoch_losses.append(loss_value)
            report.steps.append({"epoch": epoch, "step": step, "loss": loss_value,
                                 "margin": margin, "test_error": "",
                                 "ms_per_step": ms})
        report.epoch_losses.append(float(np.mean(epoch_losses)))
        if eval_dataset is not None:
            report.test_error = evaluate(spec, params, eval_dataset)
            report.steps[-1]["test_error"] = report.test_error
        if verbose:
            err = f" test_error={report.test_error:.4f}" if eval_dataset is not None else ""
            print(f"epoch {epoch}: loss={report.epoch_losses[-1]:.5f}"
                  f" margin={margin:.3f}{err}")
    report.degenerate_windows = diagnostics.degenerate_windows
    return params, report


def predict_proba(spec, params, images, batch_size: int = 64):
    """Untraced forward pass over [n, h, w, c] images in chunks."""
    images = np.asarray(images, dtype=np.float32)
    outputs = []
    for lo in range(0, images.shape[0], batch_size):
        outputs.append(net.forward_batch(spec, params, images[lo:lo + batch_size]))
    return np.concatenate(outputs, axis=0)


def evaluate(spec, params, dataset, batch_size: int = 64) -> float:
    """Top-1 error rate over the dataset."""
    probs = predict_proba(spec, params, dataset.images, batch_size)
    predicted = np.argmax(probs, axis=1)
    return float(np.mean(predicted != dataset.labels))


def report_to_csv(report: TrainReport, path) -> None:
    with open(path, "w") as f:
        f.write("epoch,step,loss,margin,test_error,ms_per_step\n")
        for row in report.steps:
            f.write(f"{row['epoch']},{row['step']},{row['loss']!r},"
                    f"{row['margin']!r},{row['test_error']},"
                    f"{row['ms_per_step']!r}\n")
