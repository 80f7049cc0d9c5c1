"""Noise schedules, the forward marginal, and single reverse steps.

Timesteps are 1-based. Arrays in :class:`NoiseSchedule` have length ``T + 1``
and slot 0 holds the clean-data convention (``alpha_bar[0] == 1``), so DDIM
can step all the way to ``t = 0`` without special cases.

Guidance weights follow the ``(1 + w) * eps_cond - w * eps_uncond`` form.
The other common form, ``eps_uncond + w' * (eps_cond - eps_uncond)``, is the
same thing with ``w' = 1 + w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

NULL_LABEL = -1


class ConfigError(ValueError):
    pass


class NoisePredictor(Protocol):
    def epsilon(self, x_t: np.ndarray, t: int, y: np.ndarray) -> np.ndarray:
        """Predicted noise for a (B, D) batch; ``y == NULL_LABEL`` means unconditional."""


class Classifier(Protocol):
    num_classes: int

    def log_prob(self, x: np.ndarray) -> np.ndarray: ...

    def log_prob_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def predict(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def sigma_bar_T_sq(self) -> float:
        return float(1.0 - self.alpha_bar[self.T])


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.flags.writeable = False
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _check_t(t: int, sched: NoiseSchedule, lo: int = 1) -> None:
    if not (lo <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_marginal(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Sample of q(x_t | x_0) given standard normal ``eps``.

    ``t`` may also be an integer array with one entry per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    if np.ndim(t):
        if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > sched.T):
            raise ValueError("timestep outside [1, T]")
        ab = ab[:, None]
    else:
        _check_t(t, sched)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(x_prev: np.ndarray, t: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One transition of q(x_t | x_{t-1})."""
    return np.sqrt(sched.alpha[t]) * x_prev + np.sqrt(sched.beta[t]) * z


def cfg_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("eps_cond and eps_uncond shapes differ")
    return (1.0 + w) * eps_cond - w * eps_uncond


def guided_epsilon(denoiser: NoisePredictor, x_t: np.ndarray, t: int, y: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free combined noise estimate; one batched forward pass."""
    b = x_t.shape[0]
    both = denoiser.epsilon(
        np.concatenate([x_t, x_t]), t, np.concatenate([y, np.full(b, NULL_LABEL)])
    )
    return cfg_epsilon(both[:b], both[b:], w)


def ddpm_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    return (x_t - coef * eps_hat) / np.sqrt(sched.alpha[t])


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    """Ancestral step x_t -> x_{t-1} with fixed variance sigma_t^2 = beta_t."""
    if t == 0:
        raise ValueError("cannot take a reverse step from t = 0")
    _check_t(t, sched)
    return ddpm_mean(x_t, t, eps_hat, sched) + sched.sigma[t] * z


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    _check_t(t, sched)
    _check_t(t_prev, sched, lo=0)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strided descending timesteps ``[T, ..., 0]`` with ``steps`` transitions."""
    if not (1 <= steps <= T):
        raise ConfigError(f"DDIM steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in ts]


def classifier_guided_epsilon(
    eps_hat: np.ndarray,
    x_t: np.ndarray,
    classifier: Classifier,
    y: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    scale: float,
) -> np.ndarray:
    """Shift a noise estimate along the classifier score for labels ``y``."""
    if scale == 0.0:
        return eps_hat
    g = classifier.log_prob_grad(x_t, y)
    return eps_hat - np.sqrt(1.0 - sched.alpha_bar[t]) * scale * g


def draw_chain_noise(rng: np.random.Generator, dim: int, T: int, restarts: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Initial noise and per-step noise for one chain, in a fixed draw order.

    Returns ``x_T`` of shape (dim,) and ``z`` of shape (restarts, T, dim) where
    ``z[i, t - 1]`` feeds the step out of timestep ``t`` in restart ``i``.
    Drawing the block at once keeps a restart-``N`` chain's first restarts
    identical to a shorter run on the same stream.
    """
    x_T = rng.standard_normal(dim)
    z = rng.standard_normal((restarts, T, dim))
    return x_T, z


def ddpm_sample(
    denoiser: NoisePredictor,
    y: np.ndarray,
    w: float,
    sched: NoiseSchedule,
    x_T: np.ndarray,
    z: np.ndarray,
    trajectory: list | None = None,
) -> np.ndarray:
    """Benign classifier-free DDPM sampling of a (B, D) batch.

    ``z`` has shape (T, B, D); the noise at ``t = 1`` is ignored.
    """
    x = np.array(x_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        eps = guided_epsilon(denoiser, x, t, y, w)
        noise = z[t - 1] if t > 1 else np.zeros_like(x)
        x = ddpm_step(x, t, eps, sched, noise)
        if trajectory is not None:
            trajectory.append(x)
    return x


def ddim_sample(
    denoiser: NoisePredictor,
    y: np.ndarray,
    w: float,
    sched: NoiseSchedule,
    x_T: np.ndarray,
    timesteps: list[int],
    trajectory: list | None = None,
) -> np.ndarray:
    """Benign deterministic DDIM sampling over ``timesteps`` (descending, ending at 0)."""
    x = np.array(x_T, dtype=np.float64)
    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        eps = guided_epsilon(denoiser, x, t, y, w)
        x = ddim_step(x, t, t_prev, eps, sched)
        if trajectory is not None:
            trajectory.append(x)
    return x
