import json
import re

import numpy as np
import pytest

from emohrnet import cli, data, gradcheck, plotting, synthetic, training
from emohrnet import rng as rngmod
from emohrnet.audio import load_wav, mel_spectrogram, fit_frames
from emohrnet.model import HRNetConfig, param_manifest

from conftest import write_config


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tone_corpus):
    """A 3-epoch CLI training run on the tone corpus."""
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root, tone_corpus, epochs=3)
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root / "run"


# ----------------------------------------------------------------- params


def test_params_total(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert out.strip().splitlines()[-1].split() == ["total", "199496"]
    assert len(out.strip().splitlines()) == len(param_manifest(HRNetConfig())) + 1


# --------------------------------------------------------------- manifest


def test_manifest_command(tmp_path, capsys):
    for a in (1, 2, 3, 4):
        for e in range(1, 9):
            (tmp_path / f"03-01-{e:02d}-01-01-01-{a:02d}.wav").write_bytes(b"")
    code, out, _ = run(capsys, "manifest", "--root", tmp_path, "--out", tmp_path / "m.tsv", "--seed", 1)
    assert code == 0
    m = data.read_manifest(tmp_path / "m.tsv")
    assert len(m.rows) == 32 and m.schema.name == "ravdess"
    assert run(capsys, "manifest")[0] == 2


# ------------------------------------------------------------- preprocess


def test_preprocess_cache_matches_in_process(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus)
    code, out, _ = run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "cache")
    assert code == 0
    assert "cached 24 spectrograms" in out
    m = data.read_manifest(tone_corpus)
    row = m.rows[5]
    header, cached = cli.load_cached(tmp_path / "cache" / cli._cache_name(row.path))
    direct = mel_spectrogram(load_wav(tone_corpus.parent / row.path), synthetic.FIXTURE_DSP).values
    assert cached.tobytes() == direct.tobytes()
    assert header["class_id"] == row.class_id and header["dsp"] == synthetic.FIXTURE_DSP.to_dict()

    first = {p.name: p.read_bytes() for p in (tmp_path / "cache").iterdir()}
    assert run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "cache")[0] == 0
    assert {p.name: p.read_bytes() for p in (tmp_path / "cache").iterdir()} == first


def test_preprocess_empty_manifest_exit_2(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("# schema=synthetic\n")
    cfg = write_config(tmp_path, tmp_path / "m.tsv")
    code, _, err = run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "cache")
    assert code == 2
    assert "empty" in err


# -------------------------------------------------------- augment preview


def test_preview_disabled_gives_blank_difference(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus)
    sample = tone_corpus.parent / "wav" / "train_000.wav"
    code, _, _ = run(capsys, "augment-preview", "--config", cfg, "--sample", sample, "--out", tmp_path / "p",
                     "--set", "augment.enabled=false")
    assert code == 0
    assert np.all(plotting.read_pgm(tmp_path / "p" / "difference.pgm") == 0)
    assert (tmp_path / "p" / "preview.png").exists()


def test_preview_is_reproducible(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus)
    sample = tone_corpus.parent / "wav" / "train_001.wav"
    for d in ("a", "b"):
        assert run(capsys, "augment-preview", "--config", cfg, "--sample", sample, "--out", tmp_path / d, "--seed", 4)[0] == 0
    for name in ("original.pgm", "augmented.pgm", "difference.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_preview_difference_marks_exactly_the_masked_cells(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus, augment={"F": 5, "T": 8, "max_shift": 0})
    sample = tone_corpus.parent / "wav" / "train_002.wav"
    assert run(capsys, "augment-preview", "--config", cfg, "--sample", sample, "--out", tmp_path / "p", "--seed", 11)[0] == 0
    # replay the preview stream's draws: freq width/start then time width/start
    gen = rngmod.make_rng(11, rngmod.stream_id(rngmod.PREVIEW))
    f = int(gen.integers(0, 6))
    f0 = int(gen.integers(0, 16 - f + 1))
    t = int(gen.integers(0, 9))
    t0 = int(gen.integers(0, 32 - t + 1))
    expect = np.zeros((16, 32), dtype=bool)
    expect[f0 : f0 + f, :] = True
    expect[:, t0 : t0 + t] = True
    original = fit_frames(mel_spectrogram(load_wav(sample), synthetic.FIXTURE_DSP).values, 32)
    expect &= original != 0
    diff = plotting.read_pgm(tmp_path / "p" / "difference.pgm")[::-1]
    assert expect.any()
    np.testing.assert_array_equal(diff != 0, expect)


def test_preview_missing_sample(tmp_path, capsys):
    assert run(capsys, "augment-preview", "--sample", tmp_path / "nope.wav", "--out", tmp_path)[0] == 2
    assert run(capsys, "augment-preview", "--out", tmp_path)[0] == 2


# ------------------------------------------------------------------ train


def test_train_outputs(trained):
    cfg, out = trained
    for name in ("best.ckpt", "last.ckpt", "history.csv", "resolved-config.json", "history.png"):
        assert (out / name).exists()
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_unweighted_acc"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3"]
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["train"]["epochs"] == 3
    ckpt = training.load_checkpoint(out / "last.ckpt")
    assert ckpt.configs["dsp"] == resolved["dsp"] and ckpt.configs["model"] == resolved["model"]


def test_resolved_config_reproduces_run(tmp_path, trained, capsys):
    _, out = trained
    assert run(capsys, "train", "--config", out / "resolved-config.json", "--out", tmp_path / "again")[0] == 0
    assert (tmp_path / "again" / "history.csv").read_bytes() == (out / "history.csv").read_bytes()
    assert (tmp_path / "again" / "best.ckpt").read_bytes() == (out / "best.ckpt").read_bytes()


def test_zero_epochs(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus)
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "z", "--epochs", 0)[0] == 0
    assert (tmp_path / "z" / "history.csv").read_text() == "epoch,train_loss,val_unweighted_acc\n"
    ckpt = training.load_checkpoint(tmp_path / "z" / "best.ckpt")
    init = training.new_model(HRNetConfig(**ckpt.configs["model"]), 0)
    for k, p in init.params.items():
        assert ckpt.params[k].tobytes() == p.data.tobytes()


def test_resume_with_different_config_exit_2(tmp_path, trained, capsys):
    cfg, out = trained
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path, "--resume", out / "last.ckpt",
                       "--set", "train.lr=0.5")
    assert code == 2
    assert "differs" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(tmp_path, tone_corpus, capsys):
    cfg = write_config(tmp_path, tone_corpus, epochs=3, train={"lr": 1e300})
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "nan")
    assert code == 3
    assert "epoch" in err and "batch" in err


# ------------------------------------------------------------------- eval


def test_eval_json_matches_table(tmp_path, trained, capsys):
    _, out = trained
    code, stdout, _ = run(capsys, "eval", "--checkpoint", out / "best.ckpt", "--split", "val", "--out", tmp_path / "ev")
    assert code == 0
    brace = stdout.index("\n}") + 2
    payload = json.loads(stdout[:brace])
    table = stdout[brace:]
    ua = re.search(r"unweighted_accuracy (\S+)", table).group(1)
    oa = re.search(r"overall_accuracy (\S+)", table).group(1)
    assert float(ua) == payload["unweighted_accuracy"] and float(oa) == payload["overall_accuracy"]
    rows = [ln.split()[1:] for ln in table.strip().splitlines()[3:]]
    assert [[int(v) for v in r] for r in rows] == payload["confusion"]
    assert json.loads((tmp_path / "ev" / "report.json").read_text()) == payload
    assert (tmp_path / "ev" / "confusion.png").exists()
    csv = (tmp_path / "ev" / "confusion.csv").read_text().splitlines()
    assert csv[0] == "true,low,high"


def test_eval_missing_checkpoint_exit_2_without_output(tmp_path, capsys):
    code, stdout, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--out", tmp_path / "ev")
    assert code == 2
    assert stdout == ""
    assert not (tmp_path / "ev").exists()


def test_eval_schema_mismatch_exit_2(tmp_path, trained, capsys):
    _, out = trained
    code, _, err = run(capsys, "eval", "--checkpoint", out / "best.ckpt", "--set", "data.schema=emovo",
                       "--set", f"data.manifest={out}/nothing.tsv")
    assert code == 2


def test_eval_corrupted_checkpoint_exit_2(tmp_path, trained, capsys):
    _, out = trained
    blob = bytearray((out / "best.ckpt").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "bad.ckpt")
    assert code == 2
    assert "crc32 mismatch" in err.lower()


# -------------------------------------------------------------- gradcheck


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert "FAIL" not in out
    listed = {ln.split()[1] for ln in out.splitlines() if ln.startswith("PASS")}
    assert set(gradcheck.OPS) <= listed
    assert {"model", "hrim", "head", "residual_block", "composite"} <= listed


def test_gradcheck_detects_corruption(capsys):
    code, out, _ = run(capsys, "gradcheck", "--corrupt", "conv2d")
    assert code == 1
    assert re.search(r"FAIL\s+conv2d", out)
    assert re.search(r"FAIL\s+model", out)


def test_gradcheck_rejects_unknown_op(capsys):
    assert run(capsys, "gradcheck", "--corrupt", "tanh")[0] == 2


def test_op_registry_covers_the_forward_pass():
    assert gradcheck.recorded_ops() <= set(gradcheck.OPS)
    assert set(gradcheck.OPS) <= set(gradcheck.OP_CASES)


def test_bad_config_key_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 0.1, "epoch": 3}}))
    code, _, err = run(capsys, "params", "--config", tmp_path / "c.json")
    assert code == 2
    assert "epoch" in err
