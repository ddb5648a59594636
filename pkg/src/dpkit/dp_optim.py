"""DP-SGD: per-example clipping, Gaussian noise, and the SGD/Adam/RMSProp/Adagrad updates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from dpkit import autograd as ag
from dpkit import convnet
from dpkit.accountant import PrivacySpec, SubsampleSchedule, calibrate_noise, epsilon_of
from dpkit.autograd import PerSampleGrads
from dpkit.data import Dataset, PoissonSampler
from dpkit.errors import ConfigError, DataError, ShapeError
from dpkit.metrics import MetricsRecord

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "rmsprop", "adagrad")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-8
ADAGRAD_EPS = 1e-10
SIGMA_TOLERANCE = 0.05


def _optimizer_name(name: str) -> str:
    key = str(name).strip().lower()
    if key not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
    return key


@dataclass(frozen=True)
class DpTrainConfig:
    """One training configuration.

    ``epsilon = inf`` switches off the privacy budget (non-private runs);
    ``noise_multiplier = None`` means "calibrate from epsilon".
    """

    optimizer: str = "adam"
    batch_size: int = 256
    epsilon: float = 5.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 100
    noise_multiplier: float | None = None
    seed: int = 0
    runs: int = 1
    widths: tuple[int, ...] = convnet.DEFAULT_WIDTHS
    chunk_size: int = 64
    accountant: str = "prv"

    def __post_init__(self):
        object.__setattr__(self, "optimizer", _optimizer_name(self.optimizer))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.runs < 1:
            raise ConfigError("epochs and runs must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be nonnegative")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)

    def schedule(self, dataset_size: int) -> SubsampleSchedule:
        return SubsampleSchedule.from_training(self.batch_size, self.epochs, dataset_size)


def resolve_sigma(config: DpTrainConfig, dataset_size: int) -> float:
    """Noise multiplier to train with: the configured one, or calibrated for this dataset size."""
    if config.noise_multiplier is not None:
        return float(config.noise_multiplier)
    if not config.private:
        return 0.0
    nm = calibrate_noise(PrivacySpec(config.epsilon, config.delta), config.schedule(dataset_size),
                         accountant=config.accountant)
    return nm.sigma


def check_sigma_consistency(config: DpTrainConfig, dataset_size: int = 50_000,
                            tolerance: float = SIGMA_TOLERANCE) -> float:
    """Calibrated sigma for the config; raises if a configured sigma is further than ``tolerance``."""
    nm = calibrate_noise(PrivacySpec(config.epsilon, config.delta), config.schedule(dataset_size),
                         accountant=config.accountant)
    if config.noise_multiplier is not None and abs(nm.sigma - config.noise_multiplier) > tolerance:
        raise ConfigError(f"noise_multiplier {config.noise_multiplier} inconsistent with "
                          f"epsilon={config.epsilon}: calibrated {nm.sigma:.4f}")
    return nm.sigma


# ---------------------------------------------------------------- clipping and noise

def _rows(grads) -> np.ndarray:
    rows = grads.rows if isinstance(grads, PerSampleGrads) else np.asarray(grads, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError(f"per-sample gradients must be [B, P], got {rows.shape}")
    return rows


def clip_per_sample(grads, clip_norm: float):
    """Scale each row by ``min(1, C / ||row||)``."""
    if not clip_norm > 0:
        raise ValueError(f"invalid threshold: clip norm must be positive, got {clip_norm}")
    rows = _rows(grads)
    norms = np.linalg.norm(rows, axis=1)
    with np.errstate(divide="ignore"):
        factor = np.minimum(1.0, clip_norm / norms)
    clipped = rows * factor[:, None]
    if isinstance(grads, PerSampleGrads):
        return grads.with_rows(clipped)
    return clipped


def add_noise(clipped_sum: np.ndarray, clip_norm: float, sigma: float, expected_batch: float,
              rng: np.random.Generator) -> np.ndarray:
    """``(clipped_sum + N(0, sigma^2 C^2 I)) / expected_batch``."""
    if sigma < 0:
        raise ValueError(f"invalid noise: sigma must be nonnegative, got {sigma}")
    if not expected_batch > 0:
        raise ValueError("expected_batch must be positive")
    out = np.array(clipped_sum, dtype=np.float64)
    if sigma > 0:
        out += rng.normal(0.0, sigma * clip_norm, size=out.shape)
    return out / expected_batch


def privatize(grads, clip_norm: float, sigma: float, expected_batch: float,
              rng: np.random.Generator) -> np.ndarray:
    """Clip each example, sum, add Gaussian noise of std sigma*C, divide by the expected batch."""
    if sigma < 0:
        raise ValueError(f"invalid noise: sigma must be nonnegative, got {sigma}")
    clipped = _rows(clip_per_sample(grads, clip_norm))
    return add_noise(clipped.sum(axis=0), clip_norm, sigma, expected_batch, rng)


# ---------------------------------------------------------------- update rules

@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    first: np.ndarray | None = None
    second: np.ndarray | None = None
    hyper: dict = field(default_factory=dict)


def init_state(kind: str, num_params: int, **hyper) -> OptimizerState:
    kind = _optimizer_name(kind)
    state = OptimizerState(kind, hyper=hyper)
    if kind == "adam":
        state.first = np.zeros(num_params)
    if kind in ("adam", "rmsprop", "adagrad"):
        state.second = np.zeros(num_params)
    return state


def step(state: OptimizerState, params, grad, lr: float) -> tuple[np.ndarray, OptimizerState]:
    """One update; returns new parameters and a new state (inputs are not modified)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    for acc in (state.first, state.second):
        if acc is not None and acc.shape != params.shape:
            raise ShapeError("optimizer state does not match parameter shape")
    t = state.step + 1
    h = state.hyper
    first, second = state.first, state.second
    if state.kind == "sgd":
        new = params - lr * grad
    elif state.kind == "adam":
        b1, b2 = h.get("betas", ADAM_BETAS)
        eps = h.get("eps", ADAM_EPS)
        first = b1 * first + (1 - b1) * grad
        second = b2 * second + (1 - b2) * grad**2
        m_hat = first / (1 - b1**t)
        v_hat = second / (1 - b2**t)
        new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    elif state.kind == "rmsprop":
        rho = h.get("decay", RMSPROP_DECAY)
        eps = h.get("eps", RMSPROP_EPS)
        second = rho * second + (1 - rho) * grad**2
        new = params - lr * grad / (np.sqrt(second) + eps)
    else:
        eps = h.get("eps", ADAGRAD_EPS)
        second = second + grad**2
        new = params - lr * grad / (np.sqrt(second) + eps)
    return new, replace(state, step=t, first=first, second=second)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    records: list[MetricsRecord]
    params: convnet.ConvNetParams
    sigma: float


def evaluate(params: convnet.ConvNetParams, ds: Dataset, chunk: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset."""
    logits = convnet.predict(params, ds.images, chunk)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(len(ds)), ds.labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return loss, acc


def summed_clipped_gradient(params: convnet.ConvNetParams, images, labels, clip_norm: float,
                            chunk_size: int) -> np.ndarray:
    """Sum over examples of per-example clipped gradients, computed chunk by chunk."""
    total = np.zeros(params.count)
    for i in range(0, len(labels), chunk_size):
        with ag.Tape() as tape:
            logits = convnet.forward(params, images[i:i + chunk_size])
            losses = ag.softmax_cross_entropy(logits, labels[i:i + chunk_size], reduction="none")
        grads = ag.per_sample_backward(tape, losses, params.tensors)
        total += clip_per_sample(grads, clip_norm).rows.sum(axis=0)
    return total


def fit(config: DpTrainConfig, model: convnet.ConvNetParams | None, dataset,
        experiment_id: str = "", run: int = 0) -> TrainResult:
    """Train with Poisson-sampled noisy steps; one MetricsRecord per epoch.

    ``dataset`` is a ``(train, test)`` pair.  The privacy spend reported at
    each epoch boundary comes from the accountant for the steps taken so far.
    """
    train_ds, test_ds = dataset
    if train_ds is None or len(train_ds) == 0:
        raise DataError("training set is empty")
    n = len(train_ds)
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    schedule = config.schedule(n)
    steps_per_epoch = math.ceil(n / config.batch_size)
    sigma = resolve_sigma(config, n)
    if config.private:
        final_eps = _spent(sigma, schedule, config)
        if final_eps > config.epsilon + SIGMA_TOLERANCE:
            raise ConfigError(f"sigma={sigma} spends epsilon={final_eps:.3f} over "
                              f"{schedule.steps} steps, above the budget {config.epsilon}")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    params = model if model is not None else convnet.init(int(seeds[0].generate_state(1)[0]),
                                                          config.widths)
    sampler = PoissonSampler(schedule.sample_rate, n, np.random.default_rng(seeds[1]))
    noise_rng = np.random.default_rng(seeds[2])
    flat = params.flat()
    state = init_state(config.optimizer, flat.size)
    widths = params.widths
    expected_batch = schedule.sample_rate * n

    records = []
    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            idx = sampler.draw()
            clipped = summed_clipped_gradient(params, train_ds.images[idx], train_ds.labels[idx],
                                              config.clip_norm, config.chunk_size)
            noisy = add_noise(clipped, config.clip_norm, sigma, expected_batch, noise_rng)
            flat, state = step(state, flat, noisy, config.learning_rate)
            params = convnet.ConvNetParams.from_flat(flat, widths)
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError(f"parameters diverged at epoch {epoch}")
        tr_loss, tr_acc = evaluate(params, train_ds)
        te_loss, te_acc = evaluate(params, test_ds) if test_ds is not None else (math.nan, 0.0)
        spent = _spent(sigma, SubsampleSchedule(schedule.sample_rate, epoch * steps_per_epoch),
                       config)
        records.append(MetricsRecord(experiment_id, run, epoch, tr_loss, tr_acc, te_loss, te_acc,
                                     spent, sigma))
        log.info("%s run %d epoch %d: train_acc=%.4f test_acc=%.4f eps=%.4f", experiment_id, run,
                 epoch, tr_acc, te_acc, spent)
    return TrainResult(records, params, sigma)


def train(config: DpTrainConfig, model, dataset, experiment_id: str = "",
          run: int = 0) -> list[MetricsRecord]:
    return fit(config, model, dataset, experiment_id, run).records


def _spent(sigma, schedule, config) -> float:
    if sigma == 0:
        return math.inf
    return epsilon_of(sigma, schedule, config.delta, accountant=config.accountant)
