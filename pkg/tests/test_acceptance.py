"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The toy models are trained once per session; expect several minutes on one CPU core.
"""

import json
import time

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from ctxtts import pipeline
from ctxtts.cli import main as cli_main
from ctxtts.data import ToyCorpusConfig, make_toy_corpus
from ctxtts.diffusion import backward_step, build_schedule, posterior
from ctxtts.features import extract_mel, read_wav
from ctxtts.txt2vec import (
    Txt2VecConfig,
    infer_continue,
    infer_edit,
    length_regulate,
    make_batch,
    plan_edit,
    round_durations,
    segment_for_training,
    speed_ratio,
    training_loss,
)
from ctxtts.vec2wav import Vec2Wav, make_vocoder_batch, mel_distance, split_for_training, vocoder_loss

from oracles import (
    ACCEPTANCE_KEY,
    binomial_within,
    brute_posterior,
    explicit_products,
    finite_difference_error,
    linear_cumulants,
)
from test_txt2vec import random_utterance, tiny_model
from test_vec2wav import fake_utterance, mini_model

TOY_TXT2VEC_STEPS = 1000
TOY_VEC2WAV_STEPS = 1500
SEED = 0


@pytest.fixture
def report(request):
    def _report(number, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)

    return _report


# ---------------------------------------------------------------------------
# shared toy-scale fixtures


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_corpus")
    cfg = ToyCorpusConfig()
    manifest, records = make_toy_corpus(out, cfg, np.random.default_rng(SEED))
    return cfg, manifest, records


@pytest.fixture(scope="session")
def toy_txt2vec(toy_corpus):
    cfg, _, records = toy_corpus
    t2v_cfg = pipeline.toy_txt2vec_config(cfg.K, cfg.phoneme_symbols())
    start = time.time()
    model, sched, history = pipeline.train_txt2vec(records, t2v_cfg, TOY_TXT2VEC_STEPS, 8, SEED, log_every=0)
    return model, sched, history, time.time() - start


@pytest.fixture(scope="session")
def toy_vec2wav(toy_corpus):
    cfg, _, records = toy_corpus
    feats = [pipeline.utterance_features(r, cfg.features) for r in records]
    v2w_cfg = pipeline.toy_vec2wav_config(cfg.K, cfg.features)
    initial, _, _ = pipeline.train_vec2wav(feats, v2w_cfg, 0, 4, SEED, log_every=0)
    start = time.time()
    model, _, history = pipeline.train_vec2wav(feats, v2w_cfg, TOY_VEC2WAV_STEPS, 4, SEED, log_every=0)
    return initial, model, history, feats, time.time() - start


# ---------------------------------------------------------------------------
# 1. diffusion exactness


def test_criterion_1_diffusion_exactness(report):
    start = time.time()
    worst_cum = worst_post = 0.0
    for K in (2, 3, 4, 8):
        for T in (4, 10, 100):
            sched = build_schedule(T, K)
            ab, gb = linear_cumulants(T)
            mats = explicit_products(K, ab, gb)
            for t in range(T + 1):
                worst_cum = max(worst_cum, np.abs(sched.cumulative_matrix(t) - mats[t]).max())
            for t in range(1, T + 1):
                for x0 in range(1, K + 1):
                    for xt in range(1, K + 2):
                        expected = brute_posterior(K, ab, gb, xt - 1, x0 - 1, t, mats)
                        worst_post = max(worst_post, np.abs(posterior(xt, x0, t, sched) - expected).max())
    elapsed = time.time() - start
    ok = worst_cum < 1e-10 and worst_post < 1e-10 and elapsed < 10
    report(1, ok, f"cumulant err {worst_cum:.2e}, posterior err {worst_post:.2e}, {elapsed:.1f}s (< 1e-10, < 10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. oracle recovery


def test_criterion_2_oracle_recovery(report):
    K, T, L = 16, 100, 50
    sched = build_schedule(T, K)
    start = time.time()
    failures = 0
    for pair in range(100):
        gen = torch.Generator().manual_seed(10_000 + pair)
        x0 = torch.randint(1, K + 1, (L,), generator=gen)
        delta = torch.nn.functional.one_hot(x0 - 1, K).double()
        x = torch.full((L,), sched.mask_index)
        for t in range(T, 0, -1):
            x = backward_step(x, delta, t, sched, gen)
        failures += not torch.equal(x, x0)
    elapsed = time.time() - start
    ok = failures == 0 and elapsed < 30
    report(2, ok, f"{100 - failures}/100 exact recoveries, {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. segmentation statistics


def test_criterion_3_segmentation_statistics(report):
    cfg = Txt2VecConfig()
    rng = np.random.default_rng(SEED)
    n_draws = 100_000
    counts = {1: 0, 2: 0, 3: 0}
    short_x0 = 0
    ctx_lengths = []
    for _ in range(n_draws):
        n = int(rng.integers(400, 1500))
        seg = segment_for_training(np.ones(n, dtype=np.int64), rng, cfg)
        counts[seg.config] += 1
        if seg.config == 1 and len(seg.x0) <= 100:
            short_x0 += 1
        if seg.config == 2:
            ctx_lengths.append(len(seg.c_A))
    props_ok = all(binomial_within(counts[c], n_draws, p, 3.0) for c, p in zip((1, 2, 3), cfg.proportions))
    ctx = np.array(ctx_lengths)
    observed = np.bincount(ctx - 200, minlength=101)
    in_range = ctx.min() >= 200 and ctx.max() <= 300 and len(observed) == 101
    p_uniform = chisquare(observed).pvalue if in_range else 0.0
    ok = props_ok and short_x0 == 0 and in_range and p_uniform > 1e-3
    fractions = ", ".join(f"{counts[c] / n_draws:.4f}" for c in (1, 2, 3))
    report(3, ok, f"proportions ({fractions}) vs (0.6, 0.3, 0.1) at 3 sigma; config-1 |x0|<=100: {short_x0}; "
                  f"context A in [{ctx.min()}, {ctx.max()}] frames, uniformity p={p_uniform:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 4. inference laws


ALPHA_CASES = [
    (([10, 10], [20], [8, 8], [24]), 1.0),
    (([12], [], [6], []), 2.0),
    (([9], [3], [2, 2], [4]), 1.5),
    (([5, 5, 5], [5], [10, 10, 10], [10]), 0.5),
    (([], [], [], []), 1.0),
]


def test_criterion_4_inference_laws(report):
    model, sched = tiny_model(K=16, T=100)
    rng = np.random.default_rng(SEED)

    boundary_fail = 0
    for seed in range(100):
        y = rng.integers(1, 6, size=10).tolist()
        d = rng.integers(2, 6, size=10).tolist()
        c_A = rng.integers(1, 17, size=sum(d[:3]))
        c_B = rng.integers(1, 17, size=sum(d[7:]))
        out = infer_edit(model, sched, y[:3], y[3:7], y[7:], d[:3], d[7:], c_A, c_B,
                         torch.Generator().manual_seed(seed)).numpy()
        plan = plan_edit(model, y[:3], y[3:7], y[7:], d[:3], d[7:])
        boundary_fail += not (
            np.array_equal(out[: len(c_A)], c_A)
            and np.array_equal(out[len(out) - len(c_B):], c_B)
            and len(out) == len(c_A) + plan.durations_D.sum() + len(c_B)
        )

    alpha_fail = sum(speed_ratio(*args) != expected for args, expected in ALPHA_CASES)

    length_fail = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        y = rng.integers(1, 6, size=n).tolist()
        nA, nB = sorted(rng.integers(0, n, size=2))
        nB = n - nB
        if nA + nB >= n:
            nA, nB = 0, 0
        d_A = rng.integers(1, 30, size=nA).tolist()
        d_B = rng.integers(1, 30, size=nB).tolist()
        plan = plan_edit(model, y[:nA], y[nA:n - nB], y[n - nB:], d_A, d_B)
        h = length_regulate(plan.e, plan.durations)
        pred_D = plan.predicted[nA:n - nB]
        expected = sum(d_A) + int(np.floor(plan.alpha * pred_D.sum() + 0.5)) + sum(d_B)
        length_fail += not (len(h) == expected == sum(d_A) + round_durations(plan.alpha * pred_D).sum() + sum(d_B))

    ok = boundary_fail == 0 and alpha_fail == 0 and length_fail == 0
    report(4, ok, f"boundary violations {boundary_fail}/100 seeds; alpha hand cases wrong {alpha_fail}/{len(ALPHA_CASES)}; "
                  f"length-law violations {length_fail}/1000")
    assert ok


# ---------------------------------------------------------------------------
# 5. gradient checks


def test_criterion_5_gradient_checks(report):
    start = time.time()
    rng = np.random.default_rng(SEED)
    model, sched = tiny_model(dtype=torch.float64)
    batch = make_batch([random_utterance(rng) for _ in range(2)], sched, model.cfg, rng,
                       torch.Generator().manual_seed(0), t=4)
    params = [p for p in model.parameters() if p.requires_grad]
    err_t2v = finite_difference_error(lambda: training_loss(model, batch, sched).total, params, 60, rng)

    vocoder, disc = mini_model(dtype=torch.float64)
    vbatch, _ = make_vocoder_batch([fake_utterance(rng) for _ in range(2)], rng, vocoder.cfg, torch.float64)
    step = vocoder.cfg.warmup_steps
    vparams = [p for p in vocoder.parameters() if p.requires_grad]
    err_v2w = finite_difference_error(lambda: vocoder_loss(vocoder, disc, vbatch, step).total, vparams, 60, rng)
    elapsed = time.time() - start
    ok = err_t2v < 1e-3 and err_v2w < 1e-3 and elapsed < 120
    report(5, ok, f"txt2vec full-loss rel err {err_t2v:.2e}, vec2wav generator rel err {err_v2w:.2e}, "
                  f"{elapsed:.1f}s (< 1e-3, < 2 min)")
    assert ok


# ---------------------------------------------------------------------------
# 6. prompt order-invariance


def _relative_change(model, tokens, prompt, permuted):
    a, _ = model.semantic_encode(tokens, prompt)
    b, _ = model.semantic_encode(tokens, permuted)
    return float((a - b).norm() / a.norm())


def test_criterion_6_prompt_order_invariance(report):
    torch.manual_seed(SEED)
    cfg = pipeline.toy_vec2wav_config(16)
    model = Vec2Wav(cfg).double().eval()
    rng = np.random.default_rng(SEED)
    frame_changes, row_changes = [], []
    with torch.no_grad():
        for _ in range(50):
            P = int(rng.integers(2, 300))
            tokens = torch.as_tensor(rng.integers(1, 17, size=(1, int(rng.integers(5, 60)))))
            prompt = torch.as_tensor(rng.normal(-4.0, 2.0, size=(1, P, 80)))
            perm = torch.as_tensor(rng.permutation(P))
            frame_changes.append(_relative_change(model, tokens, prompt, prompt[:, perm]))
            # the same permutation applied to the encoded rows m' that cross-attention reads
            memory = model.encode_prompt(prompt)
            a, _ = model.semantic_encode(tokens, prompt)
            model.encode_prompt = lambda _m, mem=memory[:, perm]: mem
            b, _ = model.semantic_encode(tokens, prompt)
            del model.encode_prompt
            row_changes.append(float((a - b).norm() / a.norm()))

        lengths_ok = True
        for P in (1, 2, 10, 300, 1000, 3000):
            h, _ = model.semantic_encode(torch.tensor([[1, 2, 3, 4]]), torch.randn(1, P, 80, dtype=torch.float64))
            lengths_ok &= bool(torch.isfinite(h).all())

    worst_frame, worst_row = max(frame_changes), max(row_changes)
    ok = worst_frame < 1e-5 and lengths_ok
    report(6, ok, f"mel-frame permutation max rel change {worst_frame:.2e} (< 1e-5 required); "
                  f"encoded-row (m') permutation max rel change {worst_row:.2e}; prompt lengths 1..3000 ok={lengths_ok}. "
                  "The kernel-5 mel encoder mixes neighbouring frames, so only m' is unordered")
    assert worst_row < 1e-5 and lengths_ok
    assert ok, "mel-frame order reaches the output through the kernel-5 prompt convolution"


# ---------------------------------------------------------------------------
# 7. toy end-to-end overfit


def held_in_continuation_accuracy(model, sched, records, n_utts=8, context_frames=250, seed=1):
    accs = []
    for rec in records[:n_utts]:
        ids = model.vocab.encode(rec.phonemes)
        offsets = np.cumsum([0] + rec.durations)
        n_A = int(np.searchsorted(offsets, context_frames))
        out = infer_continue(model, sched, ids[:n_A], ids[n_A:], rec.durations[:n_A], rec.tokens[: offsets[n_A]],
                             torch.Generator().manual_seed(seed)).numpy()
        gen, truth = out[offsets[n_A]:], np.asarray(rec.tokens[offsets[n_A]:])
        n = min(len(gen), len(truth))
        accs.append((gen[:n] == truth[:n]).sum() / max(len(gen), len(truth)))
    return float(np.mean(accs)), accs


def resynthesis_distance(model, feats, features, n_utts=4):
    dists = []
    for u in feats[:n_utts]:
        split = split_for_training(len(u["tokens"]), np.random.default_rng(5), model.cfg)
        wav = model.vocode(np.asarray(u["tokens"])[split.target], u["mel"][split.prompt])
        dists.append(mel_distance(wav, u["wav"][split.target.start * features.hop:], features))
    return float(np.mean(dists))


def test_criterion_7_toy_end_to_end(report, toy_corpus, toy_txt2vec, toy_vec2wav):
    cfg, _, records = toy_corpus
    t2v, sched, _, t2v_seconds = toy_txt2vec
    accuracy, per_utt = held_in_continuation_accuracy(t2v, sched, records)

    initial, vocoder, history, feats, v2w_seconds = toy_vec2wav
    W = vocoder.cfg.warmup_steps
    gate_ok = all(h["adv"] == 0.0 and h["fm"] == 0.0 for h in history[:W])
    adversarial_active = all(h["adv"] > 0.0 for h in history[W:])
    d0 = resynthesis_distance(initial, feats, cfg.features)
    d1 = resynthesis_distance(vocoder, feats, cfg.features)
    reduction = 1.0 - d1 / d0

    ok = accuracy >= 0.9 and t2v_seconds <= 1800 and gate_ok and adversarial_active and reduction >= 0.7
    report(7, ok, f"txt2vec held-in continuation accuracy {accuracy:.3f} (min {min(per_utt):.3f}) after "
                  f"{TOY_TXT2VEC_STEPS} steps in {t2v_seconds:.0f}s; warmup gate exact over {W} steps={gate_ok}, "
                  f"adversarial active afterwards={adversarial_active}; resynthesis mel distance {d0:.3f} -> {d1:.3f} "
                  f"({100 * reduction:.1f}% lower, vec2wav {v2w_seconds:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# 8. unified-path equivalence through the command line


def test_criterion_8_unified_path(report, toy_corpus, toy_txt2vec, toy_vec2wav, tmp_path, capsys):
    _, manifest, records = toy_corpus
    t2v, sched, _, _ = toy_txt2vec
    _, vocoder, _, _, _ = toy_vec2wav
    exp = tmp_path / "exp"
    exp.mkdir()
    pipeline.save_txt2vec(exp / "txt2vec.pt", t2v, sched)
    pipeline.save_vec2wav(exp / "vec2wav.pt", vocoder)
    rec = records[0]
    n_A = int(np.searchsorted(np.cumsum([0] + rec.durations), 250))
    text = " ".join(rec.phonemes[n_A : n_A + 5])
    mismatches = []
    for seed in range(20):
        outs = {}
        for cmd in ("continue", "edit"):
            out = tmp_path / f"{cmd}{seed}.wav"
            code = cli_main([cmd, "--manifest", str(manifest), "--checkpoint", str(exp), "--seed", str(seed),
                             "--context-a", f"{rec.utt_id}:0:{n_A}", "--text", text, "--out", str(out)])
            assert code == 0, capsys.readouterr().err
            outs[cmd] = (out.with_name(out.name + ".tokens").read_bytes(), out.read_bytes())
        if outs["continue"] != outs["edit"]:
            mismatches.append(seed)
    capsys.readouterr()
    ok = not mismatches
    report(8, ok, f"edit without context B vs continue: {20 - len(mismatches)}/20 seeds byte-identical tokens and audio")
    assert ok


# ---------------------------------------------------------------------------
# 9. SECS plumbing


def test_criterion_9_secs_plumbing(report, toy_corpus):
    _, _, records = toy_corpus
    wavs = [read_wav(r.audio_path)[0] for r in records]
    identity = pipeline.compute_secs(wavs, wavs, names=[r.utt_id for r in records])
    worst = max(abs(s - 1.0) for s in identity.similarities)
    lines = [json.loads(l) for l in identity.to_jsonl().splitlines()]
    schema_ok = (
        all(set(l) == {"pair", "secs"} for l in lines[:-1])
        and set(lines[-1]) == {"summary", "mean", "n", "embedder"}
        and set(identity.to_dict()) == {"embedder", "mean", "similarities", "pairs"}
        and identity.embedder == "mel-mean-var"
    )
    spk = [r.speaker_id for r in records]
    same = pipeline.compute_secs([wavs[i] for i in range(0, 20, 2)], [wavs[i + 2] for i in range(0, 20, 2)]).mean
    cross = pipeline.compute_secs([wavs[i] for i in range(0, 20, 2)], [wavs[i + 1] for i in range(0, 20, 2)]).mean
    assert spk[0] == spk[2] != spk[1]
    ok = worst <= 1e-6 and schema_ok
    report(9, ok, f"identity similarity max |s-1| {worst:.1e} over {len(wavs)} clips; schema stable={schema_ok}; "
                  f"same-speaker mean {same:.4f} > cross-speaker {cross:.4f}; published ground-truth SECS 0.818 "
                  "uses a different encoder and corpus and is context only")
    assert ok and same > cross
