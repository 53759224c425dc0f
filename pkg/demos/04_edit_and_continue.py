"""
Editing and continuation through one code path
==============================================

Runs the whole command-line pipeline on the toy corpus: make the corpus,
train both models briefly, replace the middle of an utterance, continue
another one and score speaker similarity of the outputs.
"""

import json
import tempfile
from pathlib import Path

from ctxtts.cli import main

root = Path(tempfile.mkdtemp())
config = root / "config.json"
config.write_text(json.dumps({"train": {"txt2vec_steps": 300, "vec2wav_steps": 300},
                              "vec2wav": {"warmup_steps": 250}}))
manifest = root / "corpus" / "manifest.jsonl"
common = ["--config", str(config), "--seed", "7"]


def run(*argv):
    code = main([*argv, *common])
    if code:
        raise SystemExit(code)


run("make-toy-corpus", "--out", str(root / "corpus"))
run("train-txt2vec", "--manifest", str(manifest), "--checkpoint", str(root / "exp"))
run("train-vec2wav", "--manifest", str(manifest), "--checkpoint", str(root / "exp"))

# phonemes 10..13 of toy0002 are regenerated between their real neighbours
run("edit", "--manifest", str(manifest), "--checkpoint", str(root / "exp"),
    "--context-a", "toy0002:0:10", "--context-b", "toy0002:14:24", "--text", "p3 p1 p4 p1",
    "--out", str(root / "edit.wav"))
# without a right context the same request is a continuation
run("edit", "--manifest", str(manifest), "--checkpoint", str(root / "exp"),
    "--context-a", "toy0002:0:10", "--text", "p3 p1 p4 p1", "--out", str(root / "edit_no_b.wav"))
run("continue", "--manifest", str(manifest), "--checkpoint", str(root / "exp"),
    "--context-a", "toy0002:0:10", "--text", "p3 p1 p4 p1", "--out", str(root / "continue.wav"))
same = (root / "edit_no_b.wav.tokens").read_text() == (root / "continue.wav.tokens").read_text()
print("edit without context B equals continue:", same)

reference = str(root / "corpus" / "wavs" / "toy0002.wav")
run("eval-secs", "--reference", reference, reference, "--generated", str(root / "edit.wav"),
    str(root / "continue.wav"), "--out", str(root / "secs.jsonl"))
print((root / "secs.jsonl").read_text())
