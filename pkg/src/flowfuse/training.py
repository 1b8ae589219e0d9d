"""Bidirectional training of the invertible model.

The objective combines a forward synthesis residual and an inverse recovery
residual over the same weights:

    loss = lam * ||forward(X) - Y||_p + ||inverse(Y) - X||_p

with p in {1, 2}. Norms are normalized per element (root-mean-square for L2,
mean absolute for L1) so ``lam`` keeps its meaning across image and batch
sizes. Gradients flow through both terms, including the dependence of the
inverted mixing matrices on the mixing weights.

Optimization is plain Adam with a halving learning-rate schedule. Everything
is seeded and uses fixed iteration orders, so a (seed, data, config) triple
reproduces the loss log bitwise within a build.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .augment import AugmentationPlan, augment
from .errors import ConfigError, ShapeError, TrainingDiverged
from .flow import (
    FlowModel,
    _model_backward_forward,
    _model_backward_inverse,
    _model_forward_cached,
    _model_fwd_cnhw,
    _model_inv_cnhw,
    _model_inverse_cached,
    named_parameters,
    zero_gradients,
)
from .numerics import make_rng, to_cnhw

LOSS_NORMS = ("l1", "l2")


@dataclass
class TrainConfig:
    lam: float = 1.0  # weight of the forward (synthesis) term
    loss_norm: str = "l2"
    epochs: int = 300
    lr0: float = 1e-4
    halve_every: int = 50
    batch_size: int = 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None  # escape hatch for diverging runs

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.halve_every < 1:
            raise ConfigError(f"halve_every must be >= 1, got {self.halve_every}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.loss_norm not in LOSS_NORMS:
            raise ConfigError(f"loss_norm must be one of {LOSS_NORMS}, got {self.loss_norm!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam, "loss_norm": self.loss_norm, "epochs": self.epochs,
            "lr0": self.lr0, "halve_every": self.halve_every,
            "batch_size": self.batch_size, "seed": self.seed,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps, "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["lam"] = data.pop("lambda", data.pop("lam", 1.0))
        return cls(**data)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Halving schedule: lr0 * 2^-floor(epoch / halve_every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.halve_every))


def _residual_norm(residual: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Per-element-normalized norm and its gradient w.r.t. the residual."""
    count = residual.size
    if kind == "l2":
        value = float(np.sqrt(np.mean(residual ** 2)))
        if value == 0.0:
            return 0.0, np.zeros_like(residual)
        return value, residual / np.asarray(count * value, dtype=residual.dtype)
    value = float(np.mean(np.abs(residual)))
    return value, np.sign(residual) / np.asarray(count, dtype=residual.dtype)


def _check_pair(model: FlowModel, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"X shape {x.shape} != Y shape {y.shape}")
    if x.shape[1] != model.channels:
        raise ShapeError(
            f"augmented tensors have {x.shape[1]} channels, model expects {model.channels}"
        )


def loss_total(model: FlowModel, x: np.ndarray, y: np.ndarray,
               cfg: TrainConfig) -> tuple[float, tuple[float, float]]:
    """Total loss and its (forward, backward) parts, without gradients."""
    _check_pair(model, x, y)
    xc, yc = to_cnhw(x), to_cnhw(y)
    fwd, _ = _residual_norm(_model_fwd_cnhw(model, xc) - yc, cfg.loss_norm)
    bwd, _ = _residual_norm(_model_inv_cnhw(model, yc) - xc, cfg.loss_norm)
    total = cfg.lam * fwd + bwd
    if not np.isfinite(total):
        raise TrainingDiverged(-1, -1)
    return total, (fwd, bwd)


def loss_and_gradients(model: FlowModel, x: np.ndarray, y: np.ndarray,
                       cfg: TrainConfig):
    """Loss, parts, and the analytic gradient for every parameter array."""
    _check_pair(model, x, y)
    xc, yc = to_cnhw(x), to_cnhw(y)
    grads = zero_gradients(model)

    y_hat, fwd_caches = _model_forward_cached(model, xc)
    fwd, gfwd = _residual_norm(y_hat - yc, cfg.loss_norm)
    if cfg.lam != 0.0:
        _model_backward_forward(model, fwd_caches, np.asarray(cfg.lam, x.dtype) * gfwd, grads)
    del fwd_caches

    x_hat, inv_caches = _model_inverse_cached(model, yc)
    bwd, gbwd = _residual_norm(x_hat - xc, cfg.loss_norm)
    _model_backward_inverse(model, inv_caches, gbwd, grads)

    total = cfg.lam * fwd + bwd
    return total, (fwd, bwd), grads


def backward(model: FlowModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> dict:
    """Analytic gradient of the total loss for every parameter array."""
    _, _, grads = loss_and_gradients(model, x, y, cfg)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(-1, -1) from ValueError(f"non-finite gradient in {name}")
    return grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(model: FlowModel) -> AdamState:
    state = AdamState()
    for name, arr in named_parameters(model):
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place, in a fixed parameter order."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name in params:
        g = grads[name]
        if cfg.grad_clip is not None:
            g = np.clip(g, -cfg.grad_clip, cfg.grad_clip)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if not np.isfinite(update).all():
            raise TrainingDiverged(-1, -1) from ValueError(f"non-finite Adam update for {name}")
        params[name] -= update.astype(params[name].dtype)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    where: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(model: FlowModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               step: float = 1e-5, atol: float = 1e-5) -> GradCheckReport:
    """Central-difference check of every analytic gradient element.

    Requires a float64 model; float32 round-off would swamp the differences.
    Differences below ``atol`` count as zero: they are dominated by finite-
    difference noise (and, at a zero-residual kink of the rooted L2 loss, by
    an O(step) curvature artifact). Reports per-array worst relative error
    and never raises on mismatch.
    """
    if model.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 model (use model_astype)")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    _, _, grads = loss_and_gradients(model, x, y, cfg)

    entries = []
    for name, arr in named_parameters(model):
        analytic = grads[name]
        worst_rel, worst_idx = 0.0, ()
        worst_a = worst_n = 0.0
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            plus, _ = loss_total(model, x, y, cfg)
            flat[k] = orig - step
            minus, _ = loss_total(model, x, y, cfg)
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[k])
            denom = max(abs(a), abs(numeric))
            diff = abs(a - numeric)
            rel = 0.0 if diff <= atol else diff / denom
            if rel >= worst_rel:
                worst_rel = rel
                worst_idx = np.unravel_index(k, arr.shape)
                worst_a, worst_n = a, numeric
        entries.append(GradCheckEntry(name, worst_rel, worst_idx, worst_a, worst_n))
    return GradCheckReport(entries)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_total: float
    loss_forward: float
    loss_backward: float


def train(model: FlowModel, data: dict, plan: AugmentationPlan, cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochStats], None]] = None
          ) -> tuple[FlowModel, list]:
    """Seeded epoch loop: shuffle, batch, augment, loss, backward, Adam.

    ``data`` maps modality names to (N, c, H, W) tensors covering every
    modality the plan references on either side. Returns the trained model
    (mutated in place) and per-epoch statistics; aborts with
    :class:`TrainingDiverged` if the loss goes non-finite.
    """
    needed = {name for name, _ in plan.source_layout + plan.target_layout}
    missing = needed - set(data)
    if missing:
        raise ShapeError(f"training data is missing modalities {sorted(missing)}")
    counts = {name: data[name].shape[0] for name in needed}
    n_total = next(iter(counts.values()))
    if n_total == 0:
        raise ShapeError("training dataset is empty")
    if any(c != n_total for c in counts.values()):
        raise ShapeError(f"modalities disagree on record count: {counts}")

    params = dict(named_parameters(model))
    state = adam_init(model)
    rng = make_rng(cfg.seed)
    log = []

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n_total)
        sum_total = sum_fwd = sum_bwd = 0.0
        for batch_index, start in enumerate(range(0, n_total, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = {name: data[name][idx] for name in needed}
            x = augment(plan, batch, "source")
            y = augment(plan, batch, "target")
            try:
                total, (fwd, bwd), grads = loss_and_gradients(model, x, y, cfg)
                if not np.isfinite(total):
                    raise TrainingDiverged(epoch, batch_index)
                adam_step(params, grads, state, lr, cfg)
            except TrainingDiverged as exc:
                if exc.epoch < 0:
                    raise TrainingDiverged(epoch, batch_index) from exc
                raise
            weight = len(idx)
            sum_total += total * weight
            sum_fwd += fwd * weight
            sum_bwd += bwd * weight
        stats = EpochStats(epoch, lr, sum_total / n_total, sum_fwd / n_total,
                           sum_bwd / n_total)
        log.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return model, log
