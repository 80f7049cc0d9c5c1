"""Adversarial guidance for classifier-free diffusion samplers.

Two mechanisms steer a benign conditional sampler toward samples the target
classifier gets wrong:

* per-step guidance: after each reverse step, move ``x_{t-1}`` along
  ``sigma_t^2 * s * grad log p_f(y_a | x_{t-1})`` (only for ``t <= t_star * T``);
* noise guidance: after a full chain, move the initial noise along
  ``sigma_bar_T^2 * a * grad log p_f(y_a | x_0)`` and sample again.

The untargeted variant uses ``-grad log p_f(y | .)`` in both places.

The attack loops are batched over independent chains. Each chain keeps its
own success bookkeeping; rows never interact, so a chain's result depends
only on its own noise and labels.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    ConfigError,
    NoiseSchedule,
    classifier_guided_epsilon,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    draw_chain_noise,
    guided_epsilon,
)

TARGETED = "targeted"
UNTARGETED = "untargeted"


class AttackError(FloatingPointError):
    pass


@dataclass
class GuidanceConfig:
    """Attack knobs. ``T`` is taken from the noise schedule; DDIM uses
    ``ddim_steps`` strided steps over it."""

    w: float = 1.0
    s: float = 0.5
    a: float = 1.0
    N: int = 10
    t_star: float = 0.5
    mode: str = TARGETED
    sampler: str = "ddpm"
    ddim_steps: int = 50
    # None follows each sampler's own update: scaled by sigma_bar_T^2 for
    # DDPM, unscaled for DDIM
    noise_sigma_bar: bool | None = None

    def __post_init__(self):
        if self.s < 0 or self.a < 0:
            raise ConfigError("guidance scales s and a must be >= 0")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not 0.0 <= self.t_star <= 1.0:
            raise ConfigError("t_star must be in [0, 1]")
        if self.mode not in (TARGETED, UNTARGETED):
            raise ConfigError(f"mode must be {TARGETED!r} or {UNTARGETED!r}")
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError("sampler must be 'ddpm' or 'ddim'")

    def uses_sigma_bar(self) -> bool:
        if self.noise_sigma_bar is None:
            return self.sampler == "ddpm"
        return self.noise_sigma_bar


PRESETS = {
    "mnist-paper": dict(w=1.0, s=0.5, a=1.0, N=10),
    "imagenet-paper": dict(w=1.0, s=0.7, a=0.5, N=5),
    # guidance disabled: the attack loop reduces to the plain sampler
    "benign": dict(s=0.0, a=0.0, N=1),
}


@dataclass
class AttackSpec:
    """Labels for a batch of chains (scalars are broadcast).

    ``y`` is the generation label; ``y_a`` the target label, ignored in
    untargeted mode.
    """

    y: np.ndarray
    y_a: np.ndarray | None
    classifier: object
    mode: str = TARGETED

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.int64))
        if self.mode == TARGETED:
            if self.y_a is None:
                raise ConfigError("targeted mode needs y_a")
            self.y_a = np.broadcast_to(np.asarray(self.y_a, dtype=np.int64), self.y.shape)
            if np.any(self.y_a == self.y):
                raise ConfigError("target label must differ from the generation label")

    def direction(self, x: np.ndarray) -> np.ndarray:
        """Gradient the attack ascends at ``x``."""
        if self.mode == TARGETED:
            return self.classifier.log_prob_grad(x, self.y_a)
        return -self.classifier.log_prob_grad(x, self.y)

    def succeeded(self, verdict: np.ndarray) -> np.ndarray:
        if self.mode == TARGETED:
            return verdict == self.y_a
        return verdict != self.y


@dataclass
class AttackResult:
    x0: np.ndarray
    success: bool
    first_success: int | None  # 0-based restart index
    verdicts: list[int]
    y: int
    y_a: int | None
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def restarts(self) -> int | None:
        """1-based restart at which the attack first succeeded."""
        return None if self.first_success is None else self.first_success + 1


def guidance_active(t: int, t_star: float, T: int) -> bool:
    return t <= t_star * T


def adversarial_guidance_step(
    x_prev: np.ndarray,
    t: int,
    spec: AttackSpec,
    s: float,
    sched: NoiseSchedule,
    t_star: float = 1.0,
) -> np.ndarray:
    """Shift a benign reverse-step output toward the attack objective."""
    if s == 0.0 or not guidance_active(t, t_star, sched.T):
        return x_prev
    return x_prev + sched.beta[t] * s * spec.direction(x_prev)


def noise_guidance_update(
    x_T: np.ndarray,
    x0: np.ndarray,
    spec: AttackSpec,
    a: float,
    sched: NoiseSchedule,
    sigma_bar: bool = True,
) -> np.ndarray:
    """New initial noise for the next restart, from the finished sample ``x0``."""
    if a == 0.0:
        return x_T
    factor = sched.sigma_bar_T_sq if sigma_bar else 1.0
    return x_T + factor * a * spec.direction(x0)


def _check_finite(x: np.ndarray, restart: int, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise AttackError(f"non-finite sample at restart {restart + 1}, timestep {t}")


def _attack_loop(denoiser, spec: AttackSpec, cfg: GuidanceConfig, sched: NoiseSchedule, x_T, z, keep_trajectory: bool):
    """Shared outer loop; ``z`` is (N, T, B, D) for DDPM and unused for DDIM."""
    b = x_T.shape[0]
    x_T = np.array(x_T, dtype=np.float64)
    best = np.zeros_like(x_T)
    success = np.zeros(b, dtype=bool)
    first = np.full(b, -1)
    verdicts = np.zeros((cfg.N, b), dtype=np.int64)
    trajectories: list[list[np.ndarray]] | None = [] if keep_trajectory else None
    x = x_T
    sigma_bar = cfg.uses_sigma_bar()
    ts = ddim_timesteps(sched.T, cfg.ddim_steps) if cfg.sampler == "ddim" else None
    for i in range(cfg.N):
        x = x_T
        traj = [x] if keep_trajectory else None
        if ts is None:
            for t in range(sched.T, 0, -1):
                eps = guided_epsilon(denoiser, x, t, spec.y, cfg.w)
                noise = z[i, t - 1] if t > 1 else np.zeros_like(x)
                x = ddpm_step(x, t, eps, sched, noise)
                x = adversarial_guidance_step(x, t, spec, cfg.s, sched, cfg.t_star)
                _check_finite(x, i, t)
                if traj is not None:
                    traj.append(x)
        else:
            for t, t_prev in zip(ts[:-1], ts[1:]):
                eps = guided_epsilon(denoiser, x, t, spec.y, cfg.w)
                if cfg.s != 0.0 and guidance_active(t, cfg.t_star, sched.T):
                    if spec.mode == TARGETED:
                        eps = classifier_guided_epsilon(eps, x, spec.classifier, spec.y_a, t, sched, cfg.s)
                    else:
                        eps = classifier_guided_epsilon(eps, x, spec.classifier, spec.y, t, sched, -cfg.s)
                x = ddim_step(x, t, t_prev, eps, sched)
                _check_finite(x, i, t)
                if traj is not None:
                    traj.append(x)
        verdicts[i] = spec.classifier.predict(x)
        x_T = noise_guidance_update(x_T, x, spec, cfg.a, sched, sigma_bar)
        hit = spec.succeeded(verdicts[i])
        best[hit] = x[hit]
        first[hit & (first < 0)] = i
        success |= hit
        if trajectories is not None:
            trajectories.append(traj)
    results = []
    for k in range(b):
        results.append(
            AttackResult(
                x0=(best[k] if success[k] else x[k]).copy(),
                success=bool(success[k]),
                first_success=int(first[k]) if first[k] >= 0 else None,
                verdicts=[int(v) for v in verdicts[:, k]],
                y=int(spec.y[k]),
                y_a=None if spec.mode == UNTARGETED else int(spec.y_a[k]),
                trajectory=[tr[j][k] for tr in trajectories for j in range(len(tr))] if trajectories else None,
            )
        )
    return results


def _dim(denoiser) -> int:
    if hasattr(denoiser, "dim"):
        return int(denoiser.dim)
    return int(np.asarray(denoiser.centers).shape[1])


def advdiff_ddpm(denoiser, spec: AttackSpec, cfg: GuidanceConfig, sched: NoiseSchedule, rng, keep_trajectory=False) -> AttackResult:
    """One attack chain with the DDPM sampler; ``spec`` holds a single label pair.

    The stream draws ``x_T`` then the (N, T, D) noise block, the same order
    as :func:`draw_chain_noise` uses for a benign chain.
    """
    if cfg.sampler != "ddpm":
        cfg = GuidanceConfig(**{**cfg.__dict__, "sampler": "ddpm"})
    x_T, z = draw_chain_noise(rng, _dim(denoiser), sched.T, cfg.N)
    return _attack_loop(denoiser, spec, cfg, sched, x_T[None], z[:, :, None, :], keep_trajectory)[0]


def advdiff_ddim(denoiser, spec: AttackSpec, cfg: GuidanceConfig, sched: NoiseSchedule, rng, keep_trajectory=False) -> AttackResult:
    """One attack chain with the deterministic DDIM sampler (only ``x_T`` is random)."""
    if cfg.sampler != "ddim":
        cfg = GuidanceConfig(**{**cfg.__dict__, "sampler": "ddim"})
    x_T = rng.standard_normal(_dim(denoiser))
    return _attack_loop(denoiser, spec, cfg, sched, x_T[None], None, keep_trajectory)[0]


def chain_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for chain ``index`` of a run: Philox keyed by (seed, index).

    Streams are derived from a counter rather than drawn in sequence, so any
    subset of chains can be run in any order or grouping.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def chain_noise(seed: int, indices, dim: int, T: int, restarts: int, sampler: str):
    """Stack per-chain noise for a group of chain indices."""
    xs, zs = [], []
    for idx in indices:
        rng = chain_rng(seed, int(idx))
        if sampler == "ddim":
            xs.append(rng.standard_normal(dim))
        else:
            x_T, z = draw_chain_noise(rng, dim, T, restarts)
            xs.append(x_T)
            zs.append(z)
    x_T = np.stack(xs)
    z = np.stack(zs, axis=2) if zs else None
    return x_T, z


def run_attacks(
    denoiser,
    classifier,
    y,
    y_a,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    seed: int,
    chunk: int = 50,
    workers: int = 1,
) -> list[AttackResult]:
    """Run ``len(y)`` independent attacks; chain ``i`` uses stream ``chain_rng(seed, i)``.

    Chains are grouped in fixed blocks of ``chunk`` consecutive indices, so
    serial and threaded runs evaluate exactly the same batches.
    """
    y = np.asarray(y, dtype=np.int64)
    y_a = None if y_a is None else np.asarray(y_a, dtype=np.int64)
    dim = _dim(denoiser)
    blocks = [np.arange(lo, min(lo + chunk, len(y))) for lo in range(0, len(y), chunk)]

    def work(idx):
        x_T, z = chain_noise(seed, idx, dim, sched.T, cfg.N, cfg.sampler)
        spec = AttackSpec(y[idx], None if y_a is None else y_a[idx], classifier, cfg.mode)
        return _attack_loop(denoiser, spec, cfg, sched, x_T, z, False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return [r for part in parts for r in part]


def choose_targets(y: np.ndarray, num_classes: int, seed: int, how: str = "random") -> np.ndarray:
    """Target labels: ``random`` (uniform over other classes, per-chain stream)
    or ``next`` (``y + 1 mod K``)."""
    y = np.asarray(y, dtype=np.int64)
    if how == "next":
        return (y + 1) % num_classes
    if how != "random":
        raise ConfigError(f"unknown target rule {how!r}")
    out = np.empty_like(y)
    for i, yi in enumerate(y):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i, 1))))
        off = int(rng.integers(1, num_classes))
        out[i] = (yi + off) % num_classes
    return out
