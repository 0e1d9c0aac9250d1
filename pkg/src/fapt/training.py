"""NMSE objective, warm-up + cosine schedule, Adam and the train/validate loop."""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import List, Optional, Tuple

import numpy as np

from .nn import ConfigError, NumericError
from .ports import MetricDomainError, gather_port_channels, select_ports, table_accuracy, validation_nmse
from .scenario import ChannelDataset

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "lr", "train_nmse_db", "test_nmse_db", "accuracy_pct", "validation_nmse_db")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    alpha_min: float = 4e-6
    alpha_max: float = 1e-3
    warmup_epochs: int = 100
    total_epochs: int = 600
    batch_train: int = 200
    batch_test: int = 200
    betas: Tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ConfigError("need 0 < alpha_min <= alpha_max")
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 < warmup_epochs < total_epochs")
        if self.batch_train < 1 or self.batch_test < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# objective and schedule
# ---------------------------------------------------------------------------

def _per_sample_energy(truth):
    axes = tuple(range(1, truth.ndim))
    energy = np.sum(truth.real**2 + truth.imag**2, axis=axes)
    if np.any(energy == 0):
        raise MetricDomainError("truth tensor has zero norm")
    return energy


def nmse_loss(pred, truth, batched: bool = False):
    """``||truth - pred||^2 / ||truth||^2`` and its gradient w.r.t. ``Re pred``, ``Im pred``.

    With ``batched=True`` the leading axis indexes samples and the loss is the
    mean of the per-sample ratios. Returns ``(loss, d_real, d_imag)``.
    """
    pred = np.asarray(pred, dtype=np.complex128)
    truth = np.asarray(truth, dtype=np.complex128)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if not batched:
        loss, dr, di = nmse_loss(pred[None], truth[None], batched=True)
        return loss, dr[0], di[0]
    b = pred.shape[0]
    energy = _per_sample_energy(truth)
    diff = pred - truth
    axes = tuple(range(1, pred.ndim))
    per = np.sum(diff.real**2 + diff.imag**2, axis=axes) / energy
    scale = (2.0 / (b * energy)).reshape((b,) + (1,) * (pred.ndim - 1))
    return float(per.mean()), scale * diff.real, scale * diff.imag


def nmse_per_sample(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.complex128)
    truth = np.asarray(truth, dtype=np.complex128)
    energy = _per_sample_energy(truth)
    axes = tuple(range(1, pred.ndim))
    return np.sum(np.abs(pred - truth) ** 2, axis=axes) / energy


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else float("-inf")


def lr_at_epoch(t: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``alpha_min`` to ``alpha_max`` over ``warmup_epochs``, then cosine decay."""
    if t < 0 or t > cfg.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.total_epochs}]")
    a0, a1, tm, k = cfg.alpha_min, cfg.alpha_max, cfg.warmup_epochs, cfg.total_epochs
    if t <= tm:
        return a0 + (a1 - a0) * t / tm
    return a0 + 0.5 * (a1 - a0) * (1.0 + math.cos(math.pi * (t - tm) / (k - tm)))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float, betas=(0.9, 0.99), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over trainable ``(name, Parameter)`` pairs, in place."""
    named_params = [(n, p) for n, p in named_params if p.trainable]
    for name, p in named_params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named_params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.trainable))
    if total > max_norm:
        for p in params:
            if p.trainable:
                p.grad *= max_norm / total
    return total


def frozen_digest(model) -> str:
    """SHA-256 over every frozen parameter payload, in registration order."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.trainable:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def port_validation(pred, future, reference) -> Tuple[np.ndarray, float]:
    """Validation NMSE of the channels found at the predicted ports.

    ``pred``, ``future`` and ``reference`` are ``(B, F, N, M)`` (or with an extra
    BS-antenna axis before ``N``). Ports are chosen on ``pred``; the channel
    is then read from the true ``future`` tables. Returns the per-horizon dB
    curve and the overall dB value, each energy-weighted over samples.
    """
    pred = np.asarray(pred, dtype=np.complex128)
    future = np.asarray(future, dtype=np.complex128)
    reference = np.asarray(reference, dtype=np.complex128)
    if pred.ndim == 4:
        pred, future, reference = pred[:, :, None], future[:, :, None], reference[:, :, None]
    ports = select_ports(pred, reference)                       # (B, F)
    got = gather_port_channels(future, ports[:, :, None])       # (B, F, Nt)
    ref = reference[..., 0, 0]
    curve = np.array([validation_nmse(got[:, f], ref[:, f]) for f in range(pred.shape[1])])
    return curve, validation_nmse(got, ref)


@dataclass
class EvalMetrics:
    nmse: float
    nmse_db: float
    accuracy_pct: float
    validation_curve_db: np.ndarray
    validation_nmse_db: float


def evaluate(predictor, data: ChannelDataset, batch_size: int = 200) -> EvalMetrics:
    """Loss, table accuracy and port validation of ``predictor`` on ``data``."""
    preds = []
    for i in range(0, len(data), batch_size):
        preds.append(predictor(data.past[i:i + batch_size], data.future.shape[1]))
    pred = np.concatenate(preds, axis=0)
    nmse = float(nmse_per_sample(pred, data.future).mean())
    curve, overall = port_validation(pred, data.future, data.reference)
    return EvalMetrics(nmse, to_db(nmse), table_accuracy(pred, data.future), curve, overall)


# ---------------------------------------------------------------------------
# report and loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_nmse_db: float
    test_nmse_db: float
    accuracy_pct: float
    validation_nmse_db: float


@dataclass
class TrainReport:
    rows: List[EpochRow] = field(default_factory=list)
    trainable_params: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_csv_rows(fh, CSV_FIELDS, ([getattr(r, k) for k in CSV_FIELDS] for r in self.rows))


def write_csv_rows(fh, header, rows) -> None:
    """CSV with a leading ISO-8601 timestamp comment line and a header row."""
    fh.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17, epoch))).permutation(n)


def train(model, train_data: ChannelDataset, test_data: ChannelDataset, cfg: TrainConfig,
          epochs: Optional[int] = None, progress=None) -> TrainReport:
    """Algorithm loop: per epoch shuffle, minibatch Adam updates, then test-set evaluation.

    ``epochs`` may stop the run before ``cfg.total_epochs`` (the schedule still
    spans ``total_epochs``). ``progress`` is called with each finished row.
    """
    if len(train_data) == 0 or len(test_data) == 0:
        raise ValueError("training and test sets must be non-empty")
    c = model.cfg
    if train_data.dims != (c.t_in, c.f_out, c.n, c.m):
        raise ValueError(f"dataset dims (T,F,N,M)={train_data.dims} do not match model "
                         f"({c.t_in},{c.f_out},{c.n},{c.m})")
    n_epochs = cfg.total_epochs if epochs is None else epochs
    params = model.trainable_parameters()
    state = AdamState()
    report = TrainReport(trainable_params=model.num_parameters(trainable_only=True))
    past_all = train_data.past
    future_all = train_data.future
    for epoch in range(n_epochs):
        lr = lr_at_epoch(epoch, cfg)
        model.train()
        order = _epoch_order(cfg.seed, epoch, len(train_data))
        losses, weights = [], []
        for i in range(0, len(order), cfg.batch_train):
            idx = order[i:i + cfg.batch_train]
            model.zero_grad()
            pred = model.forward(past_all[idx])
            loss, dr, di = nmse_loss(pred, future_all[idx], batched=True)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            model.backward(dr, di)
            if cfg.grad_clip is not None:
                clip_gradients([p for _, p in params], cfg.grad_clip)
            adam_step(params, state, lr, cfg.betas, cfg.adam_eps)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        m = evaluate(model, test_data, cfg.batch_test)
        if not math.isfinite(m.nmse):
            raise TrainingDivergedError(epoch, m.nmse)
        row = EpochRow(epoch, lr, to_db(train_loss), m.nmse_db, m.accuracy_pct, m.validation_nmse_db)
        report.rows.append(row)
        log.info("epoch %d lr %.3g train %.2f dB test %.2f dB acc %.2f%% val %.2f dB",
                 epoch, lr, row.train_nmse_db, row.test_nmse_db, row.accuracy_pct,
                 row.validation_nmse_db)
        if progress is not None:
            progress(row)
    model.eval()
    return report
