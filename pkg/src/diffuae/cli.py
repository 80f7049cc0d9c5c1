"""Command-line front end.

Verbs: ``train-denoiser``, ``train-classifier``, ``sample``, ``attack``,
``eval``, ``verify``. Every verb that produces files writes
``resolved_config.ini`` into its output directory; feeding that file back
with ``--config`` reproduces the run bitwise.

Relative checkpoint paths in the config are resolved against the output
directory.

Exit codes: 0 success, 1 failed checks or attack suite, 2 configuration
error (bad config key or value, missing or mismatched checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_preset, load_config, parse_hidden, write_config
from .data import Dataset, NearestCenter, UniformClassifier, make_ring_mixture, save_dataset_csv
from .diffusion import ConfigError, NoiseSchedule, make_schedule
from .evaluate import EvalError, build_report, recomputed_success, write_report
from .guidance import PRESETS, AttackError, AttackResult, GuidanceConfig, choose_targets, run_attacks
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .training import PgdConfig, TrainConfig, TrainingError, adversarial_train, train_denoiser, write_curve_csv
from .verify import run_checks

log = logging.getLogger("diffuae")

RESULTS_COLUMNS = ["index", "seed", "y", "y_a", "success", "restarts", "verdicts"]
SAMPLES_COLUMNS = ["index", "y", "y_a", "x0", "x1"]


class UsageError(Exception):
    """Configuration problem; maps to exit code 2."""


# ---------------------------------------------------------------- helpers


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return make_ring_mixture(d.classes, d.per_class, d.radius, d.gamma, d.seed)


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.kind, s.T, s.beta_start, s.beta_end)


def guidance_config(cfg: RunConfig) -> GuidanceConfig:
    g = cfg.guidance
    flag = {"auto": None, "on": True, "off": False}.get(g.noise_sigma_bar.lower(), "bad")
    if flag == "bad":
        raise ConfigError(f"[guidance] noise_sigma_bar: expected auto|on|off, got {g.noise_sigma_bar!r}")
    return GuidanceConfig(
        w=g.w, s=g.s, a=g.a, N=g.N, t_star=g.t_star, mode=g.mode,
        sampler=g.sampler, ddim_steps=g.ddim_steps, noise_sigma_bar=flag,
    )


def resolve(cfg: RunConfig, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(cfg.run.out) / p


def load_model(cfg: RunConfig, path: str, kind: str):
    full = resolve(cfg, path)
    if not full.exists():
        raise UsageError(f"missing {kind} checkpoint: {full}")
    try:
        return load_checkpoint(full, kind)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def check_compatible(cfg: RunConfig, denoiser, classifier, sched: NoiseSchedule) -> None:
    K = cfg.data.classes
    if denoiser.num_classes != K or classifier.num_classes != K:
        raise UsageError(
            f"architecture mismatch: config has {K} classes, denoiser {denoiser.num_classes}, "
            f"classifier {classifier.num_classes}"
        )
    if denoiser.T != sched.T:
        raise UsageError(f"architecture mismatch: denoiser trained for T={denoiser.T}, schedule has T={sched.T}")
    if denoiser.dim != classifier.dim:
        raise UsageError("architecture mismatch: denoiser and classifier input dimensions differ")


def chain_labels(count: int, K: int) -> np.ndarray:
    # balanced generation labels: chain i generates class i mod K
    return np.arange(count) % K


def write_results_csv(results: list[AttackResult], seed: int, path: Path) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(RESULTS_COLUMNS)
        for i, r in enumerate(results):
            wr.writerow([
                i, seed, r.y, "" if r.y_a is None else r.y_a, int(r.success),
                "" if r.restarts is None else r.restarts, ";".join(str(v) for v in r.verdicts),
            ])


def write_samples_csv(x0: np.ndarray, y, y_a, path: Path) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SAMPLES_COLUMNS)
        for i, (xi, yi) in enumerate(zip(x0, y)):
            ya = "" if y_a is None else int(y_a[i])
            wr.writerow([i, int(yi), ya] + [repr(float(v)) for v in xi])


def read_run(out: Path) -> list[AttackResult]:
    """Rebuild attack results from ``results.csv`` and ``samples.csv``."""
    try:
        with (out / "results.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        with (out / "samples.csv").open(newline="") as fh:
            samples = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read attack outputs: {exc}") from None
    if len(rows) != len(samples):
        raise UsageError("results.csv and samples.csv have different row counts")
    out_results = []
    for r, s in zip(rows, samples):
        verdicts = [int(v) for v in r["verdicts"].split(";") if v]
        restarts = int(r["restarts"]) if r["restarts"] else None
        out_results.append(AttackResult(
            x0=np.array([float(s["x0"]), float(s["x1"])]),
            success=bool(int(r["success"])),
            first_success=None if restarts is None else restarts - 1,
            verdicts=verdicts,
            y=int(r["y"]),
            y_a=int(r["y_a"]) if r["y_a"] else None,
        ))
    return out_results


def start_run(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "resolved_config.ini")
    return out


def report_config(cfg: RunConfig) -> dict:
    g = cfg.guidance
    return {"w": g.w, "s": g.s, "a": g.a, "N": g.N, "t_star": g.t_star, "mode": g.mode,
            "sampler": g.sampler, "T": cfg.schedule.T, "seed": cfg.run.seed, "targets": cfg.attack.targets}


# ---------------------------------------------------------------- verbs


def cmd_train_denoiser(cfg: RunConfig) -> int:
    out = start_run(cfg)
    ds = build_dataset(cfg)
    sched = build_schedule(cfg)
    d = cfg.denoiser
    tc = TrainConfig(epochs=d.epochs, batch_size=d.batch_size, lr=d.lr, p_uncond=d.p_uncond,
                     seed=cfg.run.seed, loss_threshold=d.loss_threshold)
    curve = []
    p = train_denoiser(tc, ds, sched, curve, hidden=parse_hidden(d.hidden), emb_dim=d.emb_dim, time_freqs=d.time_freqs)
    save_checkpoint(p, resolve(cfg, d.checkpoint))
    write_curve_csv(curve, out / "denoiser_curve.csv")
    save_dataset_csv(ds, out / "dataset.csv")
    print(f"denoiser: final loss {curve[-1].loss:.5f} -> {resolve(cfg, d.checkpoint)}")
    return 0


def cmd_train_classifier(cfg: RunConfig) -> int:
    out = start_run(cfg)
    ds = build_dataset(cfg)
    c = cfg.classifier
    tc = TrainConfig(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, seed=cfg.run.seed)
    pgd = None
    if c.adversarial:
        g = cfg.pgd
        pgd = PgdConfig(epsilon=g.epsilon, step_size=g.step_size, steps=g.steps, random_start=g.random_start)
    curve = []
    p = adversarial_train(tc, pgd, ds, curve, hidden=parse_hidden(c.hidden))
    save_checkpoint(p, resolve(cfg, c.checkpoint))
    write_curve_csv(curve, out / "classifier_curve.csv")
    print(f"classifier: final loss {curve[-1].loss:.5f}, train accuracy {curve[-1].accuracy:.4f} -> {resolve(cfg, c.checkpoint)}")
    return 0


def cmd_sample(cfg: RunConfig) -> int:
    """Benign class-conditional samples (guidance disabled)."""
    out = start_run(cfg)
    sched = build_schedule(cfg)
    den = load_model(cfg, cfg.denoiser.checkpoint, "denoiser")
    if den.T != sched.T:
        raise UsageError(f"architecture mismatch: denoiser trained for T={den.T}, schedule has T={sched.T}")
    g = guidance_config(cfg)
    benign = GuidanceConfig(w=g.w, s=0.0, a=0.0, N=1, sampler=g.sampler, ddim_steps=g.ddim_steps)
    y = chain_labels(cfg.attack.count, den.num_classes)
    x0 = _benign_samples(den, y, benign, sched, cfg)
    write_samples_csv(x0, y, None, out / "samples.csv")
    acc = float(np.mean(NearestCenter(build_dataset(cfg).centers).predict(x0) == y))
    print(f"sample: {len(y)} samples, nearest-center agreement {acc:.4f}")
    return 0


def _benign_samples(den, y, benign: GuidanceConfig, sched, cfg: RunConfig) -> np.ndarray:
    # the classifier is never consulted with s = a = 0; any target other
    # than y keeps the attack spec valid
    results = run_attacks(den, UniformClassifier(den.num_classes), y, (y + 1) % den.num_classes,
                          benign, sched, cfg.run.seed, cfg.attack.chunk, cfg.run.workers)
    return np.stack([r.x0 for r in results])


def cmd_attack(cfg: RunConfig) -> int:
    out = start_run(cfg)
    sched = build_schedule(cfg)
    den = load_model(cfg, cfg.denoiser.checkpoint, "denoiser")
    clf = load_model(cfg, cfg.classifier.checkpoint, "classifier")
    check_compatible(cfg, den, clf, sched)
    g = guidance_config(cfg)
    K = cfg.data.classes
    y = chain_labels(cfg.attack.count, K)
    y_a = choose_targets(y, K, cfg.run.seed, cfg.attack.targets) if g.mode == "targeted" else None
    results = run_attacks(den, clf, y, y_a, g, sched, cfg.run.seed, cfg.attack.chunk, cfg.run.workers)
    x0 = np.stack([r.x0 for r in results])
    write_results_csv(results, cfg.run.seed, out / "results.csv")
    write_samples_csv(x0, y, y_a, out / "samples.csv")

    ds = build_dataset(cfg)
    second = None
    if cfg.attack.oracle_checkpoint:
        second = load_model(cfg, cfg.attack.oracle_checkpoint, "classifier")
    benign_x = None
    if cfg.attack.benign_reference:
        benign = GuidanceConfig(w=g.w, s=0.0, a=0.0, N=1, sampler=g.sampler, ddim_steps=g.ddim_steps)
        benign_x = _benign_samples(den, y, benign, sched, cfg)
        write_samples_csv(benign_x, y, None, out / "benign_samples.csv")
    report = build_report(results, NearestCenter(ds.centers), ds.centers, ds.gamma, report_config(cfg),
                          second, benign_x, y if benign_x is not None else None)
    write_report(report, out)
    print(
        f"attack: ASR {report.asr:.4f} over {report.n_attacks}, flipped-label {report.flipped_label_rate:.4f}, "
        f"mean shift {report.mean_shift:.4f}"
        + (f" (benign {report.benign_mean_shift:.4f})" if report.benign_mean_shift is not None else "")
    )
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    """Recompute the report for an existing attack run and cross-check the
    recorded success flags against the classifier checkpoint."""
    out = Path(cfg.run.out)
    results = read_run(out)
    ds = build_dataset(cfg)
    clf = load_model(cfg, cfg.classifier.checkpoint, "classifier")
    flags = recomputed_success(results, clf)
    mismatched = int(np.sum(flags != np.array([r.success for r in results])))
    benign_x = None
    benign_path = out / "benign_samples.csv"
    if benign_path.exists():
        with benign_path.open(newline="") as fh:
            benign_x = np.array([[float(r["x0"]), float(r["x1"])] for r in csv.DictReader(fh)])
    y = np.array([r.y for r in results])
    second = None
    if cfg.attack.oracle_checkpoint:
        second = load_model(cfg, cfg.attack.oracle_checkpoint, "classifier")
    report = build_report(results, NearestCenter(ds.centers), ds.centers, ds.gamma, report_config(cfg),
                          second, benign_x, y if benign_x is not None else None)
    write_report(report, out)
    print(f"eval: ASR {report.asr:.4f}, flipped-label {report.flipped_label_rate:.4f}, {mismatched} success flags disagree")
    return 1 if mismatched else 0


def cmd_verify(tighten: float) -> int:
    failed = 0
    for res in run_checks(tighten=tighten):
        print(res.line(), flush=True)
        failed += not res.passed
    print(f"verify: {failed} check(s) failed" if failed else "verify: all checks passed")
    return 1 if failed else 0


VERBS = {
    "train-denoiser": cmd_train_denoiser,
    "train-classifier": cmd_train_classifier,
    "sample": cmd_sample,
    "attack": cmd_attack,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffuae", description="Adversarial examples from guided diffusion sampling.")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in [*VERBS, "verify"]:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        sp.add_argument("--out", help="output directory (overrides [run] out)")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="guidance preset")
        sp.add_argument("--workers", type=int, help="attack worker threads")
        sp.add_argument("-v", "--verbose", action="store_true")
        if verb == "verify":
            sp.add_argument("--tighten", type=float, default=1.0, help="divide every tolerance by this factor")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.preset:
        apply_preset(cfg, args.preset)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out = args.out
    if args.workers is not None:
        cfg.run.workers = args.workers
    if cfg.run.workers < 1:
        raise ConfigError("[run] workers must be >= 1")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "verify":
            if args.tighten <= 0:
                raise ConfigError("--tighten must be positive")
            return cmd_verify(args.tighten)
        cfg = resolve_config(args)
        return VERBS[args.verb](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, AttackError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
