"""Training loops (plain SGD) and the PGD baseline attack.

All randomness comes from streams spawned off ``config.seed``, so a run is
bit-reproducible on one build. Learning rates and epoch counts in the
default configs were calibrated once and then frozen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Dataset
from .diffusion import NULL_LABEL, ConfigError, NoiseSchedule, forward_marginal
from .models import (
    ClassifierParams,
    DenoiserParams,
    classifier_graph,
    denoiser_graph,
    init_classifier,
    init_denoiser,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    p_uncond: float = 0.1
    seed: int = 0
    loss_threshold: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must be in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class PgdConfig:
    epsilon: float = 0.3
    step_size: float = 0.05
    steps: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("PGD needs at least one step")
        if self.step_size > self.epsilon and self.epsilon > 0:
            raise ConfigError("step_size must not exceed epsilon")


@dataclass
class CurvePoint:
    epoch: int
    loss: float
    accuracy: float | None = None


def write_curve_csv(curve: list[CurvePoint], path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss", "accuracy"])
        for c in curve:
            wr.writerow([c.epoch, repr(c.loss), "" if c.accuracy is None else repr(c.accuracy)])


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _ddpm_terms(rng: np.random.Generator, x0: np.ndarray, y: np.ndarray, sched: NoiseSchedule, p_uncond: float):
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(b) < p_uncond
    y_in = np.where(drop, NULL_LABEL, y)
    return t, eps, y_in, forward_marginal(x0, t, eps, sched)


def ddpm_loss(denoiser, x0, y, sched: NoiseSchedule, rng: np.random.Generator, p_uncond: float = 0.1) -> float:
    """Monte-Carlo estimate of E ||eps - eps_theta(x_t, t, y')||^2 over a batch.

    ``denoiser`` is anything with ``epsilon(x_t, t, y)`` accepting per-row ``t``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t, eps, y_in, x_t = _ddpm_terms(rng, x0, np.asarray(y), sched, p_uncond)
    pred = denoiser.epsilon(x_t, t, y_in)
    return float(((eps - pred) ** 2).sum(axis=1).mean())


def ddpm_loss_and_grad(p: DenoiserParams, x0, y, sched, rng, p_uncond: float = 0.1):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t, eps, y_in, x_t = _ddpm_terms(rng, x0, np.asarray(y), sched, p_uncond)
    names = list(p.weights)

    def loss(*ws):
        pred = denoiser_graph(p, dict(zip(names, ws)), x_t, t, y_in)
        return nx.scale(nx.total(nx.square(nx.sub(pred, eps))), 1.0 / x0.shape[0])

    value, grads = nx.value_and_grad(loss, *(p.weights[n] for n in names))
    return value, dict(zip(names, grads))


def _sgd(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    for k, g in grads.items():
        weights[k] = weights[k] - lr * g


def train_denoiser(
    config: TrainConfig,
    dataset: Dataset,
    sched: NoiseSchedule,
    curve: list[CurvePoint] | None = None,
    **arch,
) -> DenoiserParams:
    init_rng, shuffle_rng, noise_rng = _streams(config.seed, 3)
    p = init_denoiser(dataset.dim, dataset.num_classes, sched.T, seed=int(init_rng.integers(2**63)), **arch)
    n = len(dataset)
    epoch_loss = float("nan")
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            try:
                value, grads = ddpm_loss_and_grad(p, dataset.x[idx], dataset.y[idx], sched, noise_rng, config.p_uncond)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"denoiser training diverged at epoch {epoch}: {exc}") from exc
            _sgd(p.weights, grads, config.lr)
            total += value * len(idx)
            count += len(idx)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"denoiser training diverged at epoch {epoch}")
        if curve is not None:
            curve.append(CurvePoint(epoch, epoch_loss))
        log.debug("denoiser epoch %d loss %.5f", epoch, epoch_loss)
    if config.loss_threshold is not None and epoch_loss > config.loss_threshold:
        raise TrainingError(f"final loss {epoch_loss:.4f} above threshold {config.loss_threshold}")
    p.meta = {"seed": config.seed, "epochs": config.epochs, "final_loss": epoch_loss, "p_uncond": config.p_uncond}
    return p


def cross_entropy_and_grad(p: ClassifierParams, x, y):
    names = list(p.weights)

    def loss(*ws):
        lp = classifier_graph(p, dict(zip(names, ws)), x)
        return nx.scale(nx.total(nx.pick(lp, y)), -1.0 / x.shape[0])

    value, grads = nx.value_and_grad(loss, *(p.weights[n] for n in names))
    return value, dict(zip(names, grads))


def pgd_attack(f, x, y, cfg: PgdConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Untargeted L-inf PGD: ascend the cross-entropy sign gradient, project."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y), (x.shape[0],))
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        if rng is None:
            raise ValueError("random_start needs an rng")
        adv = adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    for _ in range(cfg.steps):
        ce_grad = -f.log_prob_grad(adv, y)
        adv = np.clip(adv + cfg.step_size * np.sign(ce_grad), lo, hi)
    return adv


def accuracy(f, x, y) -> float:
    return float(np.mean(f.predict(x) == y))


def adversarial_train(
    config: TrainConfig,
    pgd: PgdConfig | None,
    dataset: Dataset,
    curve: list[CurvePoint] | None = None,
    **arch,
) -> ClassifierParams:
    """Cross-entropy SGD; with ``pgd`` set, each minibatch is first replaced
    by PGD examples against the current weights."""
    init_rng, shuffle_rng, pgd_rng = _streams(config.seed, 3)
    p = init_classifier(dataset.dim, dataset.num_classes, seed=int(init_rng.integers(2**63)), **arch)
    n = len(dataset)
    epoch_loss = float("nan")
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = dataset.x[idx], dataset.y[idx]
            if pgd is not None:
                xb = pgd_attack(p, xb, yb, pgd, pgd_rng)
            try:
                value, grads = cross_entropy_and_grad(p, xb, yb)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"classifier training diverged at epoch {epoch}: {exc}") from exc
            _sgd(p.weights, grads, config.lr)
            total += value * len(idx)
            count += len(idx)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"classifier training diverged at epoch {epoch}")
        if curve is not None:
            curve.append(CurvePoint(epoch, epoch_loss, accuracy(p, dataset.x, dataset.y)))
    p.meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "final_loss": epoch_loss,
        "adversarial": pgd is not None,
    }
    if pgd is not None:
        p.meta["pgd_epsilon"] = pgd.epsilon
    return p


def train_classifier(config: TrainConfig, dataset: Dataset, curve: list[CurvePoint] | None = None, **arch) -> ClassifierParams:
    return adversarial_train(config, None, dataset, curve, **arch)
