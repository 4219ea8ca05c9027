"""Proactive RSSI estimator: physics-generated training data, a plain MLP
with hand-written backpropagation, and Adam.

The estimator maps (measured RSSI, hidden-node indicator and distance,
exposed-node indicator and distance) to the RSSI the cell will actually show
at transmission time. Labels are generated from the power balance

    proactive = measured + hidden - exposed        (linear mW)

where the measured value already contains the exposed node's power (it was
transmitting during the sensing window) and the hidden node's power is absent
from it. dB quantities never get added directly.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (
    ChannelParams,
    LinkBudget,
    db_to_linear,
    linear_to_db,
    noise_power_dbm,
    sample_channel_gain,
)

LAYER_DIMS = (5, 64, 64, 64, 64, 64, 1)

# Generative ranges: distant always-on interferers vs close hidden/exposed ones.
ORIGINAL_COUNT_RANGE = (0, 6)
ORIGINAL_DISTANCE_RANGE_M = (150.0, 1000.0)
NEAR_COUNT_RANGE = (0, 1)
NEAR_DISTANCE_RANGE_M = (3.0, 150.0)
ABSENT_DISTANCE_M = 1000.0

# Feature/label normalization: RSSI [-120, -40] dBm -> [-1, 1], distance
# [0, 1000] m -> [0, 1]; indicators pass through.
RSSI_CENTER_DBM = -80.0
RSSI_HALF_SPAN_DB = 40.0
DISTANCE_SCALE_M = 1000.0


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class WeightFormatError(ValueError):
    """Weight file is malformed or does not match the expected architecture."""


@dataclass(frozen=True)
class TrainingSample:
    eps_o_dbm: float
    i_h: int
    d_h_m: float
    i_e: int
    d_e_m: float
    eps_p_dbm: float


@dataclass
class EstimatorNet:
    """Fully connected ReLU net; weights[i] has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    layer_dims: tuple[int, ...] = LAYER_DIMS

    @classmethod
    def initialize(cls, rng: np.random.Generator, layer_dims: tuple[int, ...] = LAYER_DIMS) -> "EstimatorNet":
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, layer_dims=tuple(layer_dims))

    @classmethod
    def zeros(cls, layer_dims: tuple[int, ...] = LAYER_DIMS) -> "EstimatorNet":
        weights = [np.zeros((i, o)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        biases = [np.zeros(o) for o in layer_dims[1:]]
        return cls(weights=weights, biases=biases, layer_dims=tuple(layer_dims))


@dataclass
class AdamState:
    alpha: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_net(cls, net: EstimatorNet, alpha: float = 0.05) -> "AdamState":
        params = net.weights + net.biases
        return cls(
            alpha=alpha,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def normalize_features(
    eps_o_dbm, i_h, d_h_m, i_e, d_e_m
) -> np.ndarray:
    """Map raw sample fields to the net's input scale. Accepts scalars or
    equal-length arrays; returns shape (5,) or (n, 5)."""
    eps = (np.asarray(eps_o_dbm, dtype=float) - RSSI_CENTER_DBM) / RSSI_HALF_SPAN_DB
    cols = [
        eps,
        np.asarray(i_h, dtype=float),
        np.asarray(d_h_m, dtype=float) / DISTANCE_SCALE_M,
        np.asarray(i_e, dtype=float),
        np.asarray(d_e_m, dtype=float) / DISTANCE_SCALE_M,
    ]
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def normalize_rssi(rssi_dbm) -> np.ndarray:
    return (np.asarray(rssi_dbm, dtype=float) - RSSI_CENTER_DBM) / RSSI_HALF_SPAN_DB


def denormalize_rssi(value) -> np.ndarray:
    return np.asarray(value, dtype=float) * RSSI_HALF_SPAN_DB + RSSI_CENTER_DBM


def generate_dataset(
    rng: np.random.Generator,
    n: int,
    channel: ChannelParams,
    budget: LinkBudget,
    return_components: bool = False,
):
    """Draw n physics-generated samples.

    Per sample: 0-6 original interferers at 150-1000 m, at most one hidden
    and one exposed node at 3-150 m. The measured RSSI is noise plus the
    original powers plus the exposed power; the label moves the hidden power
    in and the exposed power out, in linear mW, clamped at the noise floor.
    With return_components=True also returns an (n, 3) array of
    (original_sum, hidden, exposed) powers in mW for invariant checks.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    noise_mw = db_to_linear(noise_power_dbm(budget))
    eirp_mw = db_to_linear(budget.eirp_dbm())
    samples: list[TrainingSample] = []
    components = np.zeros((n, 3))
    for i in range(n):
        n_orig = int(rng.integers(ORIGINAL_COUNT_RANGE[0], ORIGINAL_COUNT_RANGE[1] + 1))
        p_orig = 0.0
        if n_orig:
            d_orig = rng.uniform(*ORIGINAL_DISTANCE_RANGE_M, size=n_orig)
            p_orig = float(np.sum(eirp_mw * sample_channel_gain(rng, d_orig, channel)))
        i_h = int(rng.integers(NEAR_COUNT_RANGE[0], NEAR_COUNT_RANGE[1] + 1))
        i_e = int(rng.integers(NEAR_COUNT_RANGE[0], NEAR_COUNT_RANGE[1] + 1))
        d_h = float(rng.uniform(*NEAR_DISTANCE_RANGE_M)) if i_h else ABSENT_DISTANCE_M
        d_e = float(rng.uniform(*NEAR_DISTANCE_RANGE_M)) if i_e else ABSENT_DISTANCE_M
        p_h = float(eirp_mw * sample_channel_gain(rng, d_h, channel)) if i_h else 0.0
        p_e = float(eirp_mw * sample_channel_gain(rng, d_e, channel)) if i_e else 0.0
        eps_o_mw = noise_mw + p_orig + p_e
        eps_p_mw = max(eps_o_mw + p_h - p_e, noise_mw)
        samples.append(
            TrainingSample(
                eps_o_dbm=float(linear_to_db(eps_o_mw)),
                i_h=i_h,
                d_h_m=d_h,
                i_e=i_e,
                d_e_m=d_e,
                eps_p_dbm=float(linear_to_db(eps_p_mw)),
            )
        )
        components[i] = (p_orig, p_h, p_e)
    if return_components:
        return samples, components
    return samples


def forward(net: EstimatorNet, features: np.ndarray) -> float:
    """Scalar output for one already-normalized feature vector."""
    x = np.asarray(features, dtype=float)
    if x.shape != (net.layer_dims[0],):
        raise ValueError(f"expected {net.layer_dims[0]} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input feature")
    return float(forward_batch(net, x[None, :])[0])


def forward_batch(net: EstimatorNet, x: np.ndarray) -> np.ndarray:
    """(n, in) -> (n,) outputs; ReLU on hidden layers, linear output."""
    a = np.asarray(x, dtype=float)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i != last:
            a = np.maximum(a, 0.0)
    return a[:, 0]


def predict_rssi_dbm(net: EstimatorNet, eps_o_dbm, i_h, d_h_m, i_e, d_e_m) -> np.ndarray:
    """Convenience end-to-end inference on raw (dBm, indicator, m) inputs."""
    x = normalize_features(eps_o_dbm, i_h, d_h_m, i_e, d_e_m)
    out = forward_batch(net, np.atleast_2d(x))
    out = denormalize_rssi(out)
    return float(out[0]) if x.ndim == 1 else out


def _sample_matrix(batch: list[TrainingSample]) -> tuple[np.ndarray, np.ndarray]:
    x = normalize_features(
        [s.eps_o_dbm for s in batch],
        [s.i_h for s in batch],
        [s.d_h_m for s in batch],
        [s.i_e for s in batch],
        [s.d_e_m for s in batch],
    )
    y = normalize_rssi([s.eps_p_dbm for s in batch])
    return x, y


def loss_and_gradient(
    net: EstimatorNet, batch: list[TrainingSample]
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Mean squared error over the batch and its gradients by backprop.

    Inputs and labels go through the documented normalization, so the loss is
    on the net's output scale; multiply by RSSI_HALF_SPAN_DB**2 for dB^2.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    x, y = _sample_matrix(batch)
    return _loss_and_gradient_arrays(net, x, y)


def _loss_and_gradient_arrays(net, x, y):
    n = x.shape[0]
    last = len(net.weights) - 1
    activations = [x]
    a = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    out = activations[-1][:, 0]
    residual = out - y
    mse = float(np.mean(residual**2))
    # d(mse)/d(out) = 2 * residual / n
    delta = (2.0 * residual / n)[:, None]
    grad_w = [np.empty(0)] * len(net.weights)
    grad_b = [np.empty(0)] * len(net.biases)
    for i in range(last, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (activations[i] > 0.0)
    return mse, (grad_w, grad_b)


def adam_step(
    net: EstimatorNet,
    gradients: tuple[list[np.ndarray], list[np.ndarray]],
    state: AdamState,
) -> tuple[EstimatorNet, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    grad_w, grad_b = gradients
    params = net.weights + net.biases
    grads = list(grad_w) + list(grad_b)
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g**2
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return net, state


@dataclass(frozen=True)
class TrainConfig:
    n_samples: int = 100_000
    batch_size: int = 256
    epochs: int = 30
    holdout_fraction: float = 0.1
    learning_rate: float = 0.05
    channel: ChannelParams | None = None
    budget: LinkBudget = LinkBudget()


# The default learning rate is aggressive for Adam and collapses the ReLU
# stack on some seeds; unstable runs are retried once at this rate.
FALLBACK_LEARNING_RATE = 0.005
_COLLAPSE_RATIO = 1.25

log = logging.getLogger(__name__)


def _fit(rng, config, lr, x_train, y_train, x_hold, y_hold):
    net = EstimatorNet.initialize(rng)
    state = AdamState.for_net(net, alpha=lr)
    scale = RSSI_HALF_SPAN_DB**2
    epochs = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(x_train))
        epoch_losses = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            mse, grads = _loss_and_gradient_arrays(net, x_train[idx], y_train[idx])
            if not math.isfinite(mse):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {state.step} (lr={lr})"
                )
            adam_step(net, grads, state)
            epoch_losses.append(mse)
        hold_mse = float(np.mean((forward_batch(net, x_hold) - y_hold) ** 2)) * scale
        epochs.append(
            {
                "epoch": epoch,
                "train_mse_db2": float(np.mean(epoch_losses)) * scale,
                "holdout_mse_db2": hold_mse,
            }
        )
    return net, epochs


def _collapsed(epochs) -> bool:
    best = min(e["holdout_mse_db2"] for e in epochs)
    return epochs[-1]["holdout_mse_db2"] > _COLLAPSE_RATIO * best


def train(
    rng: np.random.Generator,
    config: TrainConfig,
    samples: list[TrainingSample] | None = None,
) -> tuple[EstimatorNet, dict]:
    """Train on generated (or given) samples; returns the net and a report.

    The report carries per-epoch train/holdout MSE plus the holdout MSE of
    the predict-the-measured-RSSI baseline, all in dB^2. A run whose holdout
    error collapses late (or goes non-finite) is retried once at the fallback
    learning rate, with the deviation logged and flagged in the report;
    TrainingDivergedError is raised only when the retry fails too.
    """
    if samples is None:
        channel = config.channel
        if channel is None:
            raise ValueError("TrainConfig.channel is required when generating samples")
        samples = generate_dataset(rng, config.n_samples, channel, config.budget)
    x, y = _sample_matrix(samples)
    n_holdout = max(1, int(round(len(samples) * config.holdout_fraction)))
    order = rng.permutation(len(samples))
    hold_idx, train_idx = order[:n_holdout], order[n_holdout:]
    x_train, y_train = x[train_idx], y[train_idx]
    x_hold, y_hold = x[hold_idx], y[hold_idx]
    scale = RSSI_HALF_SPAN_DB**2
    baseline_mse = float(np.mean((x_hold[:, 0] - y_hold) ** 2)) * scale

    rate = config.learning_rate
    fallback_used = False
    try:
        net, epochs = _fit(rng, config, rate, x_train, y_train, x_hold, y_hold)
        unstable = _collapsed(epochs)
    except TrainingDivergedError:
        if rate <= FALLBACK_LEARNING_RATE:
            raise
        unstable = True
    if unstable and rate > FALLBACK_LEARNING_RATE:
        log.warning(
            "training unstable at learning rate %s; retrying at %s",
            rate,
            FALLBACK_LEARNING_RATE,
        )
        fallback_used = True
        rate = FALLBACK_LEARNING_RATE
        net, epochs = _fit(rng, config, rate, x_train, y_train, x_hold, y_hold)

    report = {
        "epochs": epochs,
        "holdout_mse_db2": epochs[-1]["holdout_mse_db2"],
        "baseline_mse_db2": baseline_mse,
        "n_train": int(len(train_idx)),
        "n_holdout": int(len(hold_idx)),
        "learning_rate": rate,
        "requested_learning_rate": config.learning_rate,
        "fallback_used": fallback_used,
    }
    return net, report


_MAGIC = b"PRCW"
_FORMAT_VERSION = 1


def save_weights(net: EstimatorNet, path: str | Path) -> None:
    """Versioned binary dump: magic, version, layer dims, then per layer the
    row-major float64 weight matrix followed by the bias vector."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(net.layer_dims)))
        fh.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(
    path: str | Path, expected_dims: tuple[int, ...] | None = LAYER_DIMS
) -> EstimatorNet:
    """Inverse of save_weights; validates magic, version and architecture."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: not a weight file")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != _FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    offset = 12
    if len(data) < offset + 4 * n_dims:
        raise WeightFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    offset += 4 * n_dims
    if expected_dims is not None and tuple(dims) != tuple(expected_dims):
        raise WeightFormatError(f"{path}: layer dims {dims} do not match expected {expected_dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n_bytes = 8 * fan_in * fan_out
        if len(data) < offset + n_bytes + 8 * fan_out:
            raise WeightFormatError(f"{path}: truncated weights")
        weights.append(
            np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
            .reshape(fan_in, fan_out)
            .copy()
        )
        offset += n_bytes
        biases.append(np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset).copy())
        offset += 8 * fan_out
    if offset != len(data):
        raise WeightFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return EstimatorNet(weights=weights, biases=biases, layer_dims=tuple(dims))


_CSV_COLUMNS = ("eps_o_dbm", "i_h", "d_h_m", "i_e", "d_e_m", "eps_p_dbm")


def save_dataset_csv(samples: list[TrainingSample], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for s in samples:
            writer.writerow([repr(s.eps_o_dbm), s.i_h, repr(s.d_h_m), s.i_e, repr(s.d_e_m), repr(s.eps_p_dbm)])


def load_dataset_csv(path: str | Path) -> list[TrainingSample]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != _CSV_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(_CSV_COLUMNS)}")
        samples = []
        for row in reader:
            if len(row) != len(_CSV_COLUMNS):
                raise ValueError(f"{path}: malformed row {row!r}")
            samples.append(
                TrainingSample(
                    eps_o_dbm=float(row[0]),
                    i_h=int(row[1]),
                    d_h_m=float(row[2]),
                    i_e=int(row[3]),
                    d_e_m=float(row[4]),
                    eps_p_dbm=float(row[5]),
                )
            )
    return samples
