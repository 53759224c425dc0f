"""
Vocoding tokens with a mel-spectrogram prompt
=============================================

Train the small vec2wav model on the toy corpus and compare resynthesis
quality before and after training. Also shows that the prompt may have any
length: there are no positions on the prompt side of cross-attention.
Takes a few minutes on one CPU core.
"""

import tempfile

import numpy as np

from ctxtts import pipeline
from ctxtts.data import ToyCorpusConfig, make_toy_corpus
from ctxtts.features import write_wav
from ctxtts.vec2wav import mel_distance, split_for_training

toy = ToyCorpusConfig()
workdir = tempfile.mkdtemp()
_, records = make_toy_corpus(workdir, toy, np.random.default_rng(0))
feats = [pipeline.utterance_features(r, toy.features) for r in records]

cfg = pipeline.toy_vec2wav_config(toy.K, toy.features, warmup_steps=600)
initial, _, _ = pipeline.train_vec2wav(feats, cfg, 0, seed=0)
model, _, history = pipeline.train_vec2wav(feats, cfg, 700, seed=0, log_every=0)
print("adversarial loss during warmup:", {h["adv"] for h in history[: cfg.warmup_steps]})
print("adversarial loss afterwards:   ", round(np.mean([h["adv"] for h in history[cfg.warmup_steps:]]), 3))


def distance(vocoder, u):
    split = split_for_training(len(u["tokens"]), np.random.default_rng(5), cfg)
    wav = vocoder.vocode(u["tokens"][split.target], u["mel"][split.prompt])
    return mel_distance(wav, u["wav"][split.target.start * cfg.hop:], toy.features), wav


before = np.mean([distance(initial, u)[0] for u in feats[:4]])
after = np.mean([distance(model, u)[0] for u in feats[:4]])
print(f"mel distance {before:.3f} -> {after:.3f}")

u = feats[0]
for frames in (1, 50, 300, 2000):
    prompt = np.resize(u["mel"], (frames, u["mel"].shape[1]))
    wav = model.vocode(u["tokens"][:200], prompt)
    print(f"prompt of {frames:4d} frames -> {len(wav)} samples")
write_wav(f"{workdir}/resynth.wav", distance(model, u)[1], 16000)
print("wrote", f"{workdir}/resynth.wav")
