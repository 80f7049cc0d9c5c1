import shutil
from pathlib import Path

import pytest

from diffuae.cli import main
from diffuae.config import RunConfig, apply_preset, dump_config, load_config, parse_hidden
from diffuae.diffusion import ConfigError

GOLDEN = Path(__file__).parent / "golden"
TINY = GOLDEN / "tiny.ini"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert run("train-denoiser", "--config", TINY, "--out", out) == 0
    assert run("train-classifier", "--config", TINY, "--out", out) == 0
    return out


def with_checkpoints(src, dst):
    dst.mkdir(parents=True, exist_ok=True)
    for name in ("denoiser.ckpt", "classifier.ckpt"):
        shutil.copy(src / name, dst / name)
    return dst


# ---------------------------------------------------------------- config


def test_defaults_round_trip():
    cfg = RunConfig()
    assert load_config(text=dump_config(cfg)) == cfg


def test_typed_parsing_and_case():
    cfg = load_config(text="[schedule]\nT = 40\n[guidance]\nN = 2\ns = 0.25\n[classifier]\nadversarial = yes\n")
    assert cfg.schedule.T == 40 and cfg.guidance.N == 2 and cfg.guidance.s == 0.25
    assert cfg.classifier.adversarial is True


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[guidance]\nscale = 1\n", "'scale'"),
        ("[guidence]\ns = 1\n", "[guidence]"),
        ("[guidance]\nN = ten\n", "[guidance] N"),
        ("[run]\nseed = 1\nseed = 2\n", "malformed"),
        ("s = 1\n", "malformed"),
    ],
)
def test_bad_config_names_the_problem(text, fragment):
    with pytest.raises(ConfigError) as err:
        load_config(text=text)
    assert fragment in str(err.value)


def test_presets_apply_to_guidance_only():
    cfg = RunConfig()
    apply_preset(cfg, "imagenet-paper")
    assert (cfg.guidance.s, cfg.guidance.a, cfg.guidance.N) == (0.7, 0.5, 5)
    with pytest.raises(ConfigError):
        apply_preset(cfg, "cifar")


def test_parse_hidden():
    assert parse_hidden("64, 32") == (64, 32)
    for bad in ("", "a,b", "0,4"):
        with pytest.raises(ConfigError):
            parse_hidden(bad)


# ---------------------------------------------------------------- verbs


def test_unknown_key_exits_2_and_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[guidance]\nstrength = 3\n")
    assert run("attack", "--config", bad, "--out", tmp_path) == 2
    assert "strength" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    assert run("attack", "--config", TINY, "--out", tmp_path / "empty") == 2
    assert "missing denoiser checkpoint" in capsys.readouterr().err


def test_architecture_mismatch_exits_2(trained, tmp_path, capsys):
    out = with_checkpoints(trained, tmp_path / "mm")
    cfg = tmp_path / "mm.ini"
    cfg.write_text(TINY.read_text().replace("T = 30", "T = 31"))
    assert run("attack", "--config", cfg, "--out", out) == 2
    assert "architecture mismatch" in capsys.readouterr().err


def test_invalid_values_exit_2(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[guidance]\nsampler = euler\n")
    assert run("attack", "--config", cfg, "--out", tmp_path) == 2
    assert run("attack", "--seed", "-1", "--out", tmp_path) == 2


def test_training_outputs(trained):
    for name in ("denoiser.ckpt", "classifier.ckpt", "denoiser_curve.csv", "classifier_curve.csv", "dataset.csv", "resolved_config.ini"):
        assert (trained / name).exists()


def test_training_is_bitwise_reproducible(trained, tmp_path):
    assert run("train-denoiser", "--config", TINY, "--out", tmp_path) == 0
    assert (tmp_path / "denoiser.ckpt").read_bytes() == (trained / "denoiser.ckpt").read_bytes()


def test_golden_csvs(trained, tmp_path):
    out = with_checkpoints(trained, tmp_path / "a")
    assert run("attack", "--config", TINY, "--out", out) == 0
    for line in (GOLDEN / "csv_headers.txt").read_text().splitlines():
        name, header = line.split(": ")
        src = out if (out / name).exists() else trained
        assert (src / name).read_text().splitlines()[0] == header, name
    assert (out / "results.csv").read_text() == (GOLDEN / "tiny_results.csv").read_text()


def test_attack_reproducible_serial_and_parallel(trained, tmp_path):
    a = with_checkpoints(trained, tmp_path / "a")
    b = with_checkpoints(trained, tmp_path / "b")
    assert run("attack", "--config", TINY, "--out", a) == 0
    assert run("attack", "--config", TINY, "--out", b, "--workers", 4) == 0
    for name in ("results.csv", "samples.csv", "benign_samples.csv", "report.json", "report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_resolved_config_reruns_identically(trained, tmp_path):
    a = with_checkpoints(trained, tmp_path / "a")
    assert run("attack", "--config", TINY, "--out", a, "--preset", "mnist-paper", "--seed", 9) == 0
    b = with_checkpoints(trained, tmp_path / "b")
    assert run("attack", "--config", a / "resolved_config.ini", "--out", b) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert "seed = 9" in (a / "resolved_config.ini").read_text()


def test_benign_preset_matches_benign_reference(trained, tmp_path):
    out = with_checkpoints(trained, tmp_path / "benign")
    assert run("attack", "--config", TINY, "--out", out, "--preset", "benign") == 0
    attacked = [l.split(",")[3:] for l in (out / "samples.csv").read_text().splitlines()[1:]]
    benign = [l.split(",")[3:] for l in (out / "benign_samples.csv").read_text().splitlines()[1:]]
    assert attacked == benign


def test_ddim_attack_is_deterministic(trained, tmp_path):
    cfg = tmp_path / "ddim.ini"
    cfg.write_text(TINY.read_text() + "sampler = ddim\n")
    a = with_checkpoints(trained, tmp_path / "a")
    b = with_checkpoints(trained, tmp_path / "b")
    assert run("attack", "--config", cfg, "--out", a) == 0
    assert run("attack", "--config", cfg, "--out", b) == 0
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()


def test_eval_recomputes_report(trained, tmp_path):
    out = with_checkpoints(trained, tmp_path / "e")
    assert run("attack", "--config", TINY, "--out", out) == 0
    before = (out / "report.json").read_text()
    assert run("eval", "--config", TINY, "--out", out) == 0
    assert (out / "report.json").read_text() == before
    # tamper with a success flag: eval must notice
    lines = (out / "results.csv").read_text().splitlines()
    idx, seed, y, y_a, success, restarts, verdicts = lines[1].split(",")
    flipped = "0" if success == "1" else "1"
    lines[1] = ",".join([idx, seed, y, y_a, flipped, "1" if flipped == "1" else "", verdicts])
    (out / "results.csv").write_text("\n".join(lines) + "\n")
    assert run("eval", "--config", TINY, "--out", out) == 1


def test_sample_verb(trained, tmp_path):
    out = with_checkpoints(trained, tmp_path / "s")
    assert run("sample", "--config", TINY, "--out", out) == 0
    rows = (out / "samples.csv").read_text().splitlines()
    assert rows[0] == "index,y,y_a,x0,x1" and len(rows) == 121


def test_verify_tighten_must_be_positive():
    assert run("verify", "--tighten", 0) == 2
