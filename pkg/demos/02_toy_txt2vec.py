"""
Text to semantic tokens on a synthetic corpus
=============================================

Build the two-speaker toy corpus, train a small txt2vec model for a few
hundred steps and continue an utterance from its first 2.5 seconds.
Takes a couple of minutes on one CPU core.
"""

import tempfile

import numpy as np
import torch

from ctxtts import pipeline
from ctxtts.data import ToyCorpusConfig, make_toy_corpus
from ctxtts.txt2vec import infer_continue

toy = ToyCorpusConfig()
workdir = tempfile.mkdtemp()
_, records = make_toy_corpus(workdir, toy, np.random.default_rng(0))
print(f"{len(records)} utterances, K={toy.K}, lengths {min(len(r.tokens) for r in records)}"
      f"-{max(len(r.tokens) for r in records)} frames")

cfg = pipeline.toy_txt2vec_config(toy.K, toy.phoneme_symbols())
model, sched, history = pipeline.train_txt2vec(records, cfg, steps=600, seed=0, log_every=0)
for step in (0, 100, 300, 599):
    h = history[step]
    print(f"step {step:4d}  total {h['total']:.4f}  duration {h['duration']:.4f}  diffusion {h['vq']:.4f}")

rec = records[3]
offsets = np.cumsum([0] + rec.durations)
n_A = int(np.searchsorted(offsets, 250))
ids = model.vocab.encode(rec.phonemes)
out = infer_continue(model, sched, ids[:n_A], ids[n_A:], rec.durations[:n_A], rec.tokens[: offsets[n_A]],
                     torch.Generator().manual_seed(1)).numpy()
gen, truth = out[offsets[n_A]:], np.array(rec.tokens[offsets[n_A]:])
n = min(len(gen), len(truth))
print(f"continued {len(gen)} frames (truth {len(truth)}), token agreement {(gen[:n] == truth[:n]).mean():.3f}")
print("generated:", " ".join(map(str, gen[:40])))
print("truth:    ", " ".join(map(str, truth[:40])))
