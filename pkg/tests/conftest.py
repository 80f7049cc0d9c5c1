"""Session fixtures: the default-config pipeline is trained and attacked once
and shared by the regression and acceptance tests."""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from diffuae.cli import main
from diffuae.data import make_ring_mixture
from diffuae.models import load_checkpoint
from diffuae.training import PgdConfig, pgd_attack

CRITERIA: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, ok, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{num:2d}] {name}: {detail}")


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line, print it, then assert."""

    def record(num: int, name: str, ok: bool, detail: str):
        CRITERIA.append((num, name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} [{num}] {name}: {detail}")
        assert ok, detail

    return record


def run_cli(*argv) -> float:
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    assert code == 0, f"diffuae {' '.join(map(str, argv))} exited {code}"
    return time.perf_counter() - start


def write_ini(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


@dataclass
class Pipeline:
    root: Path
    times: dict[str, float] = field(default_factory=dict)

    def report(self, name: str) -> dict:
        return json.loads((self.root / name / "report.json").read_text())

    @property
    def denoiser(self):
        return load_checkpoint(self.root / "denoiser.ckpt", "denoiser")

    @property
    def classifier(self):
        return load_checkpoint(self.root / "classifier.ckpt", "classifier")

    @property
    def at_classifier(self):
        return load_checkpoint(self.root / "at" / "classifier.ckpt", "classifier")


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> Pipeline:
    """Default config, seed 0: denoiser and plain classifier."""
    p = Pipeline(tmp_path_factory.mktemp("pipeline"))
    p.times["train-denoiser"] = run_cli("train-denoiser", "--out", p.root, "--seed", 0)
    p.times["train-classifier"] = run_cli("train-classifier", "--out", p.root, "--seed", 0)
    return p


@pytest.fixture(scope="session")
def at_trained(trained) -> Pipeline:
    cfg = write_ini(trained.root / "at.ini", "[classifier]\nadversarial = true\n")
    trained.times["train-classifier-at"] = run_cli(
        "train-classifier", "--config", cfg, "--out", trained.root / "at", "--seed", 0
    )
    return trained


def _attack(p: Pipeline, name: str, extra: str = "", classifier: Path | None = None) -> None:
    clf = classifier or p.root / "classifier.ckpt"
    cfg = write_ini(
        p.root / f"{name}.ini",
        f"[denoiser]\ncheckpoint = {p.root / 'denoiser.ckpt'}\n[classifier]\ncheckpoint = {clf}\n{extra}",
    )
    p.times[name] = run_cli("attack", "--config", cfg, "--out", p.root / name, "--preset", "mnist-paper", "--seed", 0)


@pytest.fixture(scope="session")
def ddpm_attack(trained) -> Pipeline:
    _attack(trained, "ddpm")
    return trained


@pytest.fixture(scope="session")
def ddim_attack(trained) -> Pipeline:
    _attack(trained, "ddim", "[guidance]\nsampler = ddim\nddim_steps = 50\n")
    return trained


@pytest.fixture(scope="session")
def at_attack(at_trained, ddpm_attack) -> Pipeline:
    _attack(at_trained, "ddpm_at", classifier=at_trained.root / "at" / "classifier.ckpt")
    return at_trained


@pytest.fixture(scope="session")
def heldout():
    """Fresh draw from the default ring (different data seed)."""
    return make_ring_mixture(K=8, n=250, radius=2.0, gamma=0.2, seed=2)


@pytest.fixture(scope="session")
def pgd_rate(heldout):
    """Misclassification rate of 20-step L-inf PGD on the held-out set."""
    def rate(clf, epsilon: float = 0.3) -> float:
        cfg = PgdConfig(epsilon, epsilon / 4, 20, random_start=True)
        adv = pgd_attack(clf, heldout.x, heldout.y, cfg, np.random.default_rng(0))
        return float(np.mean(clf.predict(adv) != heldout.y))

    return rate
