"""Attack and sample-quality metrics.

ASR on its own hides flipped-label samples (the attack "succeeds" because
the sample now genuinely belongs to the target class). The report therefore
carries the flipped-label rate under an oracle independent of the attacked
classifier, and per-class Gaussian moment statistics against the known
class distributions.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class EvalError(ValueError):
    pass


def attack_success_rate(results) -> float:
    if len(results) == 0:
        raise EvalError("no attack results")
    return sum(bool(r.success) for r in results) / len(results)


def recomputed_success(results, classifier) -> np.ndarray:
    """Success flags re-derived from each final sample."""
    x0 = np.stack([r.x0 for r in results])
    verdict = classifier.predict(x0)
    return np.array(
        [(v == r.y_a) if r.y_a is not None else (v != r.y) for v, r in zip(verdict, results)]
    )


def flipped_label_rate(results, oracle, y=None) -> tuple[float, bool]:
    """Fraction of successful attacks whose oracle label differs from the
    intended label. Returns ``(rate, empty)``; ``empty`` flags that there
    were no successes and the rate was defined as 0.

    ``y`` overrides the intended labels stored in the results.
    """
    wins = [r for r in results if r.success]
    if not wins:
        warnings.warn("no successful attacks; flipped-label rate defined as 0")
        return 0.0, True
    intended = np.array([r.y for r in wins]) if y is None else np.broadcast_to(y, (len(wins),))
    verdict = oracle.predict(np.stack([r.x0 for r in wins]))
    return float(np.mean(verdict != intended)), False


@dataclass
class ClassStats:
    label: int
    n: int
    mean_shift: float
    cov_ratio: float


def class_stats_distance(samples, labels, centers, gamma: float, min_samples: int = 30) -> list[ClassStats]:
    """Per class: distance of the sample mean to the class center and the
    ratio of the sample covariance trace to ``gamma^2 * D``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    labels = np.asarray(labels)
    centers = np.asarray(centers, dtype=np.float64)
    dim = samples.shape[1]
    out = []
    for k in np.unique(labels):
        xs = samples[labels == k]
        if len(xs) < min_samples:
            raise EvalError(f"class {k}: {len(xs)} samples, need at least {min_samples}")
        shift = float(np.linalg.norm(xs.mean(axis=0) - centers[k]))
        cov = np.cov(xs, rowvar=False, ddof=1).reshape(dim, dim)
        out.append(ClassStats(int(k), len(xs), shift, float(np.trace(cov) / (gamma**2 * dim))))
    return out


def mean_shift(stats: list[ClassStats]) -> float:
    return float(np.mean([s.mean_shift for s in stats]))


@dataclass
class EvalReport:
    asr: float
    flipped_label_rate: float
    flipped_label_empty: bool
    n_attacks: int
    class_stats: list[ClassStats]
    restart_histogram: dict[str, int]
    config: dict = field(default_factory=dict)
    flipped_label_rate_classifier: float | None = None
    benign_mean_shift: float | None = None

    def __post_init__(self):
        for name in ("asr", "flipped_label_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"{name}={v} outside [0, 1]")

    @property
    def mean_shift(self) -> float:
        return mean_shift(self.class_stats)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_shift"] = self.mean_shift
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        row = {
            "n_attacks": self.n_attacks,
            "asr": self.asr,
            "flipped_label_rate": self.flipped_label_rate,
            "flipped_label_rate_classifier": self.flipped_label_rate_classifier,
            "mean_shift": self.mean_shift,
            "benign_mean_shift": self.benign_mean_shift,
            "mean_cov_ratio": float(np.mean([s.cov_ratio for s in self.class_stats])),
        }
        for key in sorted(self.config):
            row[f"cfg_{key}"] = self.config[key]
        return row


REPORT_CSV_COLUMNS = [
    "n_attacks",
    "asr",
    "flipped_label_rate",
    "flipped_label_rate_classifier",
    "mean_shift",
    "benign_mean_shift",
    "mean_cov_ratio",
]


def restart_histogram(results) -> dict[str, int]:
    counts = Counter("none" if r.restarts is None else str(r.restarts) for r in results)
    return dict(sorted(counts.items()))


def build_report(
    results,
    oracle,
    centers,
    gamma: float,
    config: dict | None = None,
    second_oracle=None,
    benign_samples=None,
    benign_labels=None,
    min_samples: int = 30,
) -> EvalReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flip, empty = flipped_label_rate(results, oracle)
        flip2 = flipped_label_rate(results, second_oracle)[0] if second_oracle is not None else None
    x0 = np.stack([r.x0 for r in results])
    labels = np.array([r.y for r in results])
    stats = class_stats_distance(x0, labels, centers, gamma, min_samples)
    benign = None
    if benign_samples is not None:
        benign = mean_shift(class_stats_distance(benign_samples, benign_labels, centers, gamma, min_samples))
    return EvalReport(
        asr=attack_success_rate(results),
        flipped_label_rate=flip,
        flipped_label_empty=empty,
        n_attacks=len(results),
        class_stats=stats,
        restart_histogram=restart_histogram(results),
        config=dict(config or {}),
        flipped_label_rate_classifier=flip2,
        benign_mean_shift=benign,
    )


def write_report(report: EvalReport, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "report.json").write_text(report.to_json())
    row = report.csv_row()
    with (out_dir / "report.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(row))
        wr.writeheader()
        wr.writerow({k: ("" if v is None else v) for k, v in row.items()})
