"""MLP noise predictor and target classifier, plus checkpoint files.

Checkpoint layout (all integers little-endian, text is UTF-8)::

    line 1   magic  "diffuae-checkpoint"
    line 2   JSON header, keys sorted:
               format_version  int
               kind            "denoiser" | "classifier"
               arch            architecture descriptor
               meta            training metadata (seed, epochs, final_loss, ...)
               arrays          [{"name": str, "shape": [int, ...]}, ...]
    rest     the arrays in header order, C order, float64 little-endian

A file is rejected if the magic, version, kind, array shapes or payload
length do not match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .diffusion import NULL_LABEL

FORMAT_VERSION = 1
MAGIC = b"diffuae-checkpoint"


class CheckpointError(ValueError):
    pass


def _layer_shapes(widths: list[int]) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"W{i}"] = (a, b)
        shapes[f"b{i}"] = (b,)
    return shapes


def _init_layers(rng: np.random.Generator, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.startswith("W"):
            out[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            out[name] = np.zeros(shape)
    return out


def _mlp(W: dict[str, nx.Tensor], h: nx.Tensor, n_layers: int) -> nx.Tensor:
    for i in range(n_layers):
        h = nx.add(nx.matmul(h, W[f"W{i}"]), W[f"b{i}"])
        if i < n_layers - 1:
            h = nx.silu(h)
    return h


def time_features(t, T: int, n_freqs: int) -> np.ndarray:
    """Sinusoidal features of t/T; returns (len(t), 2 * n_freqs)."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserParams:
    dim: int
    num_classes: int
    T: int
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 16
    time_freqs: int = 8
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    kind = "denoiser"

    @property
    def arch(self) -> dict:
        return {
            "dim": self.dim,
            "num_classes": self.num_classes,
            "T": self.T,
            "hidden": list(self.hidden),
            "emb_dim": self.emb_dim,
            "time_freqs": self.time_freqs,
        }

    def shapes(self) -> dict[str, tuple[int, ...]]:
        widths = [self.dim + 2 * self.time_freqs + self.emb_dim, *self.hidden, self.dim]
        return {"label_emb": (self.num_classes + 1, self.emb_dim), **_layer_shapes(widths)}

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def epsilon(self, x_t, t, y) -> np.ndarray:
        return denoiser_forward(self, x_t, t, y)


@dataclass
class ClassifierParams:
    dim: int
    num_classes: int
    hidden: tuple[int, ...] = (128, 128, 128)
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    kind = "classifier"

    @property
    def arch(self) -> dict:
        return {"dim": self.dim, "num_classes": self.num_classes, "hidden": list(self.hidden)}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return _layer_shapes([self.dim, *self.hidden, self.num_classes])

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def log_prob(self, x) -> np.ndarray:
        return classifier_logprob(self, x)

    def log_prob_grad(self, x, y) -> np.ndarray:
        return classifier_input_grad(self, x, y)

    def predict(self, x) -> np.ndarray:
        return np.argmax(classifier_logprob(self, x), axis=1)


def init_denoiser(dim: int, num_classes: int, T: int, seed: int = 0, **arch) -> DenoiserParams:
    p = DenoiserParams(dim=dim, num_classes=num_classes, T=T, **arch)
    rng = np.random.default_rng(seed)
    shapes = p.shapes()
    emb = rng.standard_normal(shapes.pop("label_emb"))
    p.weights = {"label_emb": emb, **_init_layers(rng, shapes)}
    return p


def init_classifier(dim: int, num_classes: int, seed: int = 0, **arch) -> ClassifierParams:
    p = ClassifierParams(dim=dim, num_classes=num_classes, **arch)
    p.weights = _init_layers(np.random.default_rng(seed), p.shapes())
    return p


def label_rows(y, num_classes: int) -> np.ndarray:
    """Map labels to embedding rows; the null label uses the extra last row."""
    y = np.asarray(y, dtype=np.int64)
    bad = (y < NULL_LABEL) | (y >= num_classes)
    if np.any(bad):
        raise ValueError(f"label {int(y[bad][0])} outside 0..{num_classes - 1} or null")
    return np.where(y == NULL_LABEL, num_classes, y)


def denoiser_graph(p: DenoiserParams, W: dict[str, nx.Tensor], x, t, y) -> nx.Tensor:
    """Build the forward graph; ``t`` may be a scalar or one timestep per row."""
    x = nx.as_tensor(x)
    b = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (b,))
    if np.any(t < 1) or np.any(t > p.T):
        raise ValueError(f"timestep outside [1, {p.T}]")
    feats = time_features(t, p.T, p.time_freqs)
    emb = nx.take_rows(W["label_emb"], label_rows(np.broadcast_to(y, (b,)), p.num_classes))
    return _mlp(W, nx.concat([x, nx.Tensor(feats), emb]), p.n_layers)


def denoiser_forward(p: DenoiserParams, x_t, t, y) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    W = {k: nx.Tensor(v) for k, v in p.weights.items()}
    out = denoiser_graph(p, W, x, t, y).data
    return out if np.ndim(x_t) == 2 else out[0]


def classifier_graph(p: ClassifierParams, W: dict[str, nx.Tensor], x) -> nx.Tensor:
    return nx.log_softmax(_mlp(W, nx.as_tensor(x), p.n_layers))


def classifier_logprob(p: ClassifierParams, x) -> np.ndarray:
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    W = {k: nx.Tensor(v) for k, v in p.weights.items()}
    out = classifier_graph(p, W, x2).data
    return out if np.ndim(x) == 2 else out[0]


def classifier_input_grad(p: ClassifierParams, x, y) -> np.ndarray:
    """d/dx log p(y | x), row by row for a batch (rows do not interact)."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (x2.shape[0],))
    if np.any(y < 0) or np.any(y >= p.num_classes):
        raise ValueError("label out of range")
    W = {k: nx.Tensor(v) for k, v in p.weights.items()}
    g = nx.grad(lambda xt: nx.total(nx.pick(classifier_graph(p, W, xt), y)), x2)
    return g if np.ndim(x) == 2 else g[0]


def save_checkpoint(p: DenoiserParams | ClassifierParams, path) -> None:
    names = list(p.shapes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": p.kind,
        "arch": p.arch,
        "meta": p.meta,
        "arrays": [{"name": n, "shape": list(p.weights[n].shape)} for n in names],
    }
    blobs = [np.ascontiguousarray(p.weights[n], dtype="<f8").tobytes() for n in names]
    Path(path).write_bytes(
        MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    )


def load_checkpoint(path, kind: str | None = None) -> DenoiserParams | ClassifierParams:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 2)
    if len(parts) != 3 or parts[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        header = json.loads(parts[1])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} not supported (expected {FORMAT_VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    arch = dict(header["arch"])
    arch["hidden"] = tuple(arch["hidden"])
    if header["kind"] == "denoiser":
        p = DenoiserParams(**arch)
    elif header["kind"] == "classifier":
        p = ClassifierParams(**arch)
    else:
        raise CheckpointError(f"{path}: unknown kind {header['kind']!r}")
    expected = p.shapes()
    listed = {a["name"]: tuple(a["shape"]) for a in header["arrays"]}
    if listed != expected:
        raise CheckpointError(f"{path}: array shapes do not match architecture {arch}")
    payload = parts[2]
    need = sum(int(np.prod(s)) for s in expected.values()) * 8
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    offset = 0
    for a in header["arrays"]:
        n = int(np.prod(a["shape"])) * 8
        p.weights[a["name"]] = np.frombuffer(payload[offset : offset + n], dtype="<f8").astype(np.float64).reshape(a["shape"])
        offset += n
    p.meta = header.get("meta", {})
    return p
