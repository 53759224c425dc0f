import json
import subprocess
import sys

import pytest

from ctxtts.cli import COMMANDS, build_parser, main

TINY = {
    "toy_corpus": {"n_utterances": 6},
    "schedule": {"T": 6},
    "txt2vec": {"d_model": 16, "heads": 2, "n_blocks": 1, "n_text_blocks": 1},
    "vec2wav": {"d_enc": 8, "mel_channels": 8, "gen_channels": 8, "disc_channels": 4, "warmup_steps": 1,
                "segment_frames": 4},
    "train": {"txt2vec_steps": 2, "vec2wav_steps": 2, "batch_size": 2, "vocoder_batch_size": 2},
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--config", cfg]
    assert main([str(a) for a in ["make-toy-corpus", "--out", root / "corpus", "--seed", 1, *common]]) == 0
    manifest = root / "corpus" / "manifest.jsonl"
    exp = root / "exp"
    for cmd in ("train-txt2vec", "train-vec2wav"):
        assert main([str(a) for a in [cmd, "--manifest", manifest, "--checkpoint", exp, *common]]) == 0
    return {"root": root, "config": cfg, "manifest": manifest, "exp": exp}


def _gen(ws, cmd, out, seed, with_b=False):
    argv = [cmd, "--config", ws["config"], "--manifest", ws["manifest"], "--checkpoint", ws["exp"],
            "--context-a", "toy0000:0:8", "--text", "p1 p2 p3", "--out", out, "--seed", seed]
    if with_b:
        argv += ["--context-b", "toy0000:11:16"]
    return argv


def test_every_subcommand_takes_common_flags():
    parser = build_parser()
    for name in COMMANDS:
        args = parser.parse_args([name, "--config", "c.json", "--seed", "3", "--checkpoint", "d"])
        assert (args.config, args.seed, args.checkpoint) == ("c.json", 3, "d")


def test_unknown_flag_is_a_single_line_error(capsys):
    code, out, err = run(["edit", "--frobnicate"], capsys)
    assert code != 0 and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "usage"


def test_unknown_subcommand(capsys):
    code, _, err = run(["synthesise"], capsys)
    assert code != 0 and json.loads(err)["status"] == "error"


@pytest.mark.parametrize(
    "content",
    ["{not json", json.dumps({"colour": 1}), json.dumps({"toy_corpus": {"n_utterances": 2, "wobble": 1}}),
     json.dumps({"train": {"epochs": 3}}), json.dumps({"preset": "huge"}), json.dumps([1, 2])],
)
def test_invalid_config(tmp_path, capsys, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    code, _, err = run(["make-toy-corpus", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code != 0
    assert json.loads(err)["error"] == "invalid_config"


def test_missing_checkpoint(workspace, tmp_path, capsys):
    argv = _gen(workspace, "continue", tmp_path / "x.wav", 0)
    argv[argv.index("--checkpoint") + 1] = tmp_path / "nowhere"
    code, _, err = run(argv, capsys)
    assert code != 0 and json.loads(err)["error"] == "missing_checkpoint"


def test_bad_context_spec(workspace, tmp_path, capsys):
    argv = _gen(workspace, "continue", tmp_path / "x.wav", 0)
    argv[argv.index("--context-a") + 1] = "toy0000:5:2"
    code, _, err = run(argv, capsys)
    assert code != 0 and json.loads(err)["error"] == "usage"


def test_edit_without_b_matches_continue(workspace, tmp_path, capsys):
    for seed in (0, 7):
        assert run(_gen(workspace, "continue", tmp_path / f"c{seed}.wav", seed), capsys)[0] == 0
        assert run(_gen(workspace, "edit", tmp_path / f"e{seed}.wav", seed), capsys)[0] == 0
        c = (tmp_path / f"c{seed}.wav.tokens").read_bytes()
        assert c == (tmp_path / f"e{seed}.wav.tokens").read_bytes()
        assert (tmp_path / f"c{seed}.wav").read_bytes() == (tmp_path / f"e{seed}.wav").read_bytes()


def test_same_seed_same_tokens(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(_gen(workspace, "edit", tmp_path / f"{name}.wav", 7, with_b=True), capsys)
        assert code == 0 and json.loads(out)["mode"] == "edit"
    assert (tmp_path / "a.wav.tokens").read_text() == (tmp_path / "b.wav.tokens").read_text()


def test_resynth_and_eval_secs(workspace, tmp_path, capsys):
    ws = workspace
    code, out, _ = run(["resynth", "--config", ws["config"], "--manifest", ws["manifest"], "--checkpoint", ws["exp"],
                        "--utt", "toy0001", "--context-a", "toy0003:0:5", "--out", tmp_path / "r.wav"], capsys)
    assert code == 0 and (tmp_path / "r.wav").exists()
    ref = ws["root"] / "corpus" / "wavs" / "toy0001.wav"
    code, out, _ = run(["eval-secs", "--config", ws["config"], "--reference", ref, ref,
                        "--generated", ref, tmp_path / "r.wav", "--out", tmp_path / "secs.jsonl"], capsys)
    assert code == 0
    lines = [json.loads(l) for l in (tmp_path / "secs.jsonl").read_text().splitlines()]
    assert lines[0]["secs"] == pytest.approx(1.0, abs=1e-6)
    assert lines[-1]["summary"] and lines[-1]["n"] == 2


def test_console_entry_point_runs_as_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ctxtts.cli", "eval-secs", "--reference", "a.wav"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["error"] == "usage"
