"""Self-contained property checks against analytic oracles.

Each check reports the measured error next to its tolerance. Checks are
either ``exact`` (deterministic comparisons: bitwise equality, closed forms,
finite differences) or ``monte-carlo`` (statistical, tolerance in standard
errors). ``tighten`` divides every tolerance, which is how the suite shows
which checks are statistical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import AnalyticDenoiser, QuadraticClassifier, ring_centers
from .diffusion import (
    cfg_epsilon,
    ddim_sample,
    ddim_timesteps,
    ddpm_mean,
    ddpm_sample,
    draw_chain_noise,
    forward_marginal,
    make_schedule,
)
from .guidance import (
    TARGETED,
    UNTARGETED,
    AttackSpec,
    GuidanceConfig,
    adversarial_guidance_step,
    advdiff_ddim,
    advdiff_ddpm,
)
from .models import classifier_graph, denoiser_graph, init_classifier, init_denoiser

EXACT = "exact"
MONTE_CARLO = "monte-carlo"


@dataclass
class CheckResult:
    name: str
    kind: str
    measured: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.measured <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<34} [{self.kind}] measured={self.measured:.3e} "
            f"tolerance={self.tolerance:.3e} ({self.seconds:.1f}s)"
        )


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def ring_oracles(T: int = 500, K: int = 8, radius: float = 2.0, gamma: float = 0.2, tau: float = 0.25):
    sched = make_schedule("linear", T, 1e-4 * 1000 / T, 0.02 * 1000 / T)
    centers = ring_centers(K, radius)
    return sched, AnalyticDenoiser(centers, gamma, sched), QuadraticClassifier(centers, tau)


def gradient_check(n: int = 100, seed: int = 0) -> float:
    """Worst relative error of reverse mode vs central differences on random MLPs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        dim = int(rng.integers(1, 65))
        K = int(rng.integers(2, 11))
        hidden = tuple(int(h) for h in rng.integers(4, 65, size=int(rng.integers(1, 4))))
        x = rng.standard_normal((1, dim))
        if i % 2 == 0:
            p = init_classifier(dim, K, seed=int(rng.integers(2**31)), hidden=hidden)
            W = {k: nx.Tensor(v) for k, v in p.weights.items()}
            y = np.array([int(rng.integers(K))])

            def f(xt, W=W, p=p, y=y):
                return nx.total(nx.pick(classifier_graph(p, W, xt), y))

        else:
            p = init_denoiser(dim, K, 100, seed=int(rng.integers(2**31)), hidden=hidden)
            W = {k: nx.Tensor(v) for k, v in p.weights.items()}
            v = rng.standard_normal((1, dim))
            t = int(rng.integers(1, 101))
            y = int(rng.integers(-1, K))

            def f(xt, W=W, p=p, v=v, t=t, y=y):
                return nx.total(nx.mul(denoiser_graph(p, W, xt, t, y), v))

        worst = max(worst, rel_err(nx.grad(f, x), nx.finite_diff_grad(f, x, 1e-5)))
    return worst


def forward_marginal_check(n: int = 100_000, seed: int = 1) -> float:
    """Largest |z-score| of empirical mean/variance of q(x_t|x_0) draws over 5 timesteps."""
    sched = make_schedule("linear", 1000, 1e-4, 0.02)
    rng = np.random.default_rng(seed)
    x0 = np.array([1.0, -0.5])
    worst = 0.0
    for t in (1, 10, 100, 500, 1000):
        xt = forward_marginal(np.broadcast_to(x0, (n, 2)), t, rng.standard_normal((n, 2)), sched)
        ab = sched.alpha_bar[t]
        var = 1.0 - ab
        z_mean = np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) / np.sqrt(var / n)
        z_var = np.abs(xt.var(axis=0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
        worst = max(worst, float(z_mean.max()), float(z_var.max()))
    return worst


def one_step_law_check(
    n: int = 100_000,
    seed: int = 2,
    scales=(0.1, 0.5, 1.0),
    guidance_step: Callable = adversarial_guidance_step,
) -> float:
    """Largest |z-score| between the mean of guided one-step samples and
    mu + sigma_t^2 * s * grad log p(y_a | mu)."""
    sched, den, clf = ring_oracles()
    rng = np.random.default_rng(seed)
    t, y, y_a = 20, 0, 1
    x_t = np.sqrt(sched.alpha_bar[t]) * den.centers[y] + np.array([0.05, -0.03])
    xb = np.broadcast_to(x_t, (1, 2))
    eps = cfg_epsilon(den.epsilon(xb, t, [y]), den.epsilon(xb, t, [-1]), 1.0)
    mu = ddpm_mean(xb, t, eps, sched)
    worst = 0.0
    for s in scales:
        spec = AttackSpec(np.full(n, y), np.full(n, y_a), clf, TARGETED)
        x_prev = mu + sched.sigma[t] * rng.standard_normal((n, 2))
        guided = guidance_step(x_prev, t, spec, s, sched, 1.0)
        expect = mu[0] + sched.sigma[t] ** 2 * s * clf.log_prob_grad(mu, [y_a])[0]
        se = guided.std(axis=0, ddof=1) / np.sqrt(n)
        worst = max(worst, float((np.abs(guided.mean(axis=0) - expect) / se).max()))
    return worst


def two_class_identity_check(n: int = 200, seed: int = 3) -> float:
    """For K = 2 the targeted direction (on y_a) and the untargeted direction
    (on y) are parallel: p(y_a|x) * targeted == p(y|x) * untargeted.

    Both equal p(y|x) p(y_a|x) times the gradient of the logit gap.
    """
    rng = np.random.default_rng(seed)
    quad = QuadraticClassifier(rng.standard_normal((2, 3)), tau=0.5)
    mlp = init_classifier(3, 2, seed=seed, hidden=(16, 16))
    worst = 0.0
    for clf in (quad, mlp):
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 2, size=n)
        rows = np.arange(n)
        prob = np.exp(clf.log_prob(x))
        tgt = AttackSpec(y, 1 - y, clf, TARGETED).direction(x)
        unt = AttackSpec(y, None, clf, UNTARGETED).direction(x)
        lhs = prob[rows, 1 - y][:, None] * tgt
        rhs = prob[rows, y][:, None] * unt
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def quadratic_autodiff_check(n: int = 200, seed: int = 4) -> float:
    rng = np.random.default_rng(seed)
    clf = QuadraticClassifier(ring_centers(8, 2.0), tau=0.25)
    x = 2.5 * rng.standard_normal((n, 2))
    y = rng.integers(0, 8, size=n)
    auto = nx.grad(lambda xt: nx.total(nx.pick(nx.log_softmax(clf.logits_tensor(xt)), y)), x)
    return float(np.abs(auto - clf.log_prob_grad(x, y)).max())


def guidance_off_check(seed: int = 5) -> float:
    """1.0 if any backend differs bitwise from its benign sampler, else 0.0."""
    sched, den, clf = ring_oracles(T=100)
    mlp = init_denoiser(2, 8, sched.T, seed=seed, hidden=(32, 32))
    for denoiser in (den, mlp):
        for y, y_a in ((0, 3), (5, 4)):
            spec = AttackSpec(y, y_a, clf)
            cfg = GuidanceConfig(w=1.0, s=0.0, a=0.0, N=1, ddim_steps=20)
            r = advdiff_ddpm(denoiser, spec, cfg, sched, np.random.default_rng(seed))
            x_T, z = draw_chain_noise(np.random.default_rng(seed), 2, sched.T, 1)
            ref = ddpm_sample(denoiser, np.array([y]), 1.0, sched, x_T[None], z[0][:, None, :])[0]
            if r.x0.tobytes() != ref.tobytes():
                return 1.0
            r = advdiff_ddim(denoiser, spec, cfg, sched, np.random.default_rng(seed))
            x_T = np.random.default_rng(seed).standard_normal(2)
            ref = ddim_sample(denoiser, np.array([y]), 1.0, sched, x_T[None], ddim_timesteps(sched.T, 20))[0]
            if r.x0.tobytes() != ref.tobytes():
                return 1.0
    return 0.0


def analytic_sampling_check(n: int = 10_000, seed: int = 6) -> float:
    """Benign DDPM with the exact denoiser: worst of |mean - c_y| / 0.05 and
    |var / target - 1| / 0.15 (both must be <= 1)."""
    sched, den, _ = ring_oracles()
    rng = np.random.default_rng(seed)
    y = 2
    x = ddpm_sample(den, np.full(n, y), 0.0, sched, rng.standard_normal((n, 2)), rng.standard_normal((sched.T, n, 2)))
    mean_err = float(np.abs(x.mean(axis=0) - den.centers[y]).max()) / 0.05
    var_err = float(np.abs(x.var(axis=0, ddof=1) / den.gamma**2 - 1.0).max()) / 0.15
    return max(mean_err, var_err)


def run_checks(tighten: float = 1.0, guidance_step: Callable = adversarial_guidance_step) -> list[CheckResult]:
    plan = [
        ("gradient vs finite differences", EXACT, 1e-4, gradient_check),
        ("quadratic grad vs autodiff", EXACT, 1e-10, quadratic_autodiff_check),
        ("two-class direction identity", EXACT, 1e-10, two_class_identity_check),
        ("guidance-off equivalence", EXACT, 0.0, guidance_off_check),
        ("forward marginal moments", MONTE_CARLO, 3.0, forward_marginal_check),
        ("one-step guidance law", MONTE_CARLO, 3.0, lambda: one_step_law_check(guidance_step=guidance_step)),
        ("analytic sampler moments", MONTE_CARLO, 1.0, analytic_sampling_check),
    ]
    out = []
    for name, kind, tol, fn in plan:
        start = time.perf_counter()
        measured = fn()
        out.append(CheckResult(name, kind, measured, tol / tighten, time.perf_counter() - start))
    return out
