"""Synthetic class-conditional data and closed-form oracles.

The ring mixture places K isotropic Gaussians (spread ``gamma``) on a circle.
Because every class conditional is Gaussian, the optimal noise predictor and
the forward marginals are known exactly, which is what the analytic oracles
below expose.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .diffusion import NULL_LABEL, ConfigError, NoiseSchedule


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    centers: np.ndarray
    gamma: float
    seed: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y lengths differ")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def __len__(self) -> int:
        return self.x.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def ring_centers(K: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(K) / K
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def make_ring_mixture(K: int = 8, n: int = 500, radius: float = 2.0, gamma: float = 0.2, seed: int = 0) -> Dataset:
    if K < 2 or n < 1:
        raise ConfigError("need K >= 2 and n >= 1")
    centers = ring_centers(K, radius)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((K, n, 2))
    x = (centers[:, None, :] + gamma * noise).reshape(K * n, 2)
    y = np.repeat(np.arange(K), n)
    return Dataset(x=x, y=y, centers=centers, gamma=gamma, seed=seed)


def save_dataset_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for xi, yi in zip(ds.x, ds.y):
            wr.writerow([repr(float(v)) for v in xi] + [int(yi)])
    meta = {"centers": ds.centers.tolist(), "gamma": ds.gamma, "seed": ds.seed}
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return Dataset(x=x, y=y, centers=np.array(meta["centers"]), gamma=meta["gamma"], seed=meta["seed"])
    # no sidecar: fall back to empirical class moments
    K = int(y.max()) + 1
    centers = np.stack([x[y == k].mean(axis=0) for k in range(K)])
    gamma = float(np.sqrt(np.mean([x[y == k].var(axis=0).mean() for k in range(K)])))
    return Dataset(x=x, y=y, centers=centers, gamma=gamma)


@dataclass
class AnalyticDenoiser:
    """Exact E[eps | x_t, y] for isotropic Gaussian class conditionals.

    ``weights`` are the class priors used for the unconditional prediction
    (uniform by default).
    """

    centers: np.ndarray
    gamma: float
    sched: NoiseSchedule
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        self.centers = np.asarray(self.centers, dtype=np.float64)
        K = self.centers.shape[0]
        self.weights = np.full(K, 1.0 / K) if self.weights is None else np.asarray(self.weights, float)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def _per_class(self, x_t: np.ndarray, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # ab and var broadcast as (B, 1, 1) whether t is a scalar or per row
        ab = np.broadcast_to(self.sched.alpha_bar[np.asarray(t)], (x_t.shape[0],))[:, None, None]
        var = ab * self.gamma**2 + 1.0 - ab
        diff = x_t[:, None, :] - np.sqrt(ab) * self.centers[None, :, :]  # (B, K, D)
        return diff, var, ab

    def epsilon(self, x_t: np.ndarray, t, y: np.ndarray) -> np.ndarray:
        """``t`` is a scalar or one timestep per row."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        y = np.broadcast_to(np.asarray(y), (x_t.shape[0],))
        diff, var, ab = self._per_class(x_t, t)
        eps_k = np.sqrt(1.0 - ab) * diff / var  # (B, K, D)
        out = np.empty_like(x_t)
        cond = y != NULL_LABEL
        if np.any(y >= self.num_classes) or np.any(y < NULL_LABEL):
            raise ValueError("label out of range")
        rows = np.nonzero(cond)[0]
        out[rows] = eps_k[rows, y[rows]]
        if np.any(~cond):
            rows = np.nonzero(~cond)[0]
            logw = np.log(self.weights)[None, :] - 0.5 * (diff[rows] ** 2).sum(axis=2) / var[rows, :, 0]
            logw -= logw.max(axis=1, keepdims=True)
            post = np.exp(logw)
            post /= post.sum(axis=1, keepdims=True)
            out[rows] = np.einsum("bk,bkd->bd", post, eps_k[rows])
        return out


def analytic_epsilon(d: AnalyticDenoiser, x_t, t: int, y) -> np.ndarray:
    return d.epsilon(x_t, t, y)


@dataclass
class QuadraticClassifier:
    """Softmax over logits ``-||x - c_k||^2 / (2 tau)``."""

    centers: np.ndarray
    tau: float = 0.25

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.centers = np.asarray(self.centers, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return -((x[:, None, :] - self.centers[None]) ** 2).sum(axis=2) / (2.0 * self.tau)

    def logits_tensor(self, x: nx.Tensor) -> nx.Tensor:
        """Same logits built from tape primitives (independent gradient route)."""
        K, D = self.centers.shape
        sq = nx.matmul(nx.square(x), np.ones((D, K)))
        cross = nx.matmul(x, self.centers.T)
        dist = nx.add(nx.sub(sq, nx.scale(cross, 2.0)), (self.centers**2).sum(axis=1))
        return nx.scale(dist, -0.5 / self.tau)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def log_prob_grad(self, x: np.ndarray, y) -> np.ndarray:
        return quadratic_logprob_grad(self, x, y)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def quadratic_logprob_grad(q: QuadraticClassifier, x, y) -> np.ndarray:
    """Closed form of d/dx log p(y | x): (-(x - c_y) + sum_k p_k (x - c_k)) / tau."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y), (x.shape[0],))
    p = np.exp(q.log_prob(x))
    diff = x[:, None, :] - q.centers[None]  # (B, K, D)
    own = diff[np.arange(x.shape[0]), y]
    return (-own + np.einsum("bk,bkd->bd", p, diff)) / q.tau


@dataclass
class UniformClassifier:
    """Input-independent classifier: every class equally likely."""

    num_classes: int

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.full((x.shape[0], self.num_classes), -np.log(self.num_classes))

    def log_prob_grad(self, x: np.ndarray, y) -> np.ndarray:
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(np.atleast_2d(x).shape[0], dtype=np.int64)


@dataclass
class NearestCenter:
    """Ground-truth oracle on the toy task: label of the closest class center."""

    centers: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.centers)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d = ((x[:, None, :] - np.asarray(self.centers)[None]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)
