"""Training loops, checkpoints, unified edit/continue inference and SECS."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .data import TokenizerSpec, UtteranceRecord, load_audio, tokenize
from .diffusion import TransitionSchedule
from .features import FeatureConfig, extract_aux, extract_mel, read_wav, write_wav
from .txt2vec import PhonemeVocab, Txt2Vec, Txt2VecConfig, infer_edit, make_batch, training_loss
from .vec2wav import Discriminators, Vec2Wav, Vec2WavConfig, discriminator_loss, make_vocoder_batch, vocoder_loss

log = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


def rng_streams(seed: int, n: int = 1):
    """``n`` independent ``(numpy Generator, torch Generator)`` pairs from one root seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for child in children:
        np_rng = np.random.default_rng(child)
        torch_seed = int(child.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)
        out.append((np_rng, torch.Generator().manual_seed(torch_seed)))
    return out


# ---------------------------------------------------------------------------
# presets


def toy_txt2vec_config(K: int, phonemes: Sequence[str], **overrides) -> Txt2VecConfig:
    base = dict(
        K=K, phonemes=tuple(phonemes), n_blocks=2, heads=4, d_model=64, n_text_blocks=2,
        dropout=0.0, lr=1e-3,
    )
    base.update(overrides)
    return Txt2VecConfig(**base)


def toy_vec2wav_config(K: int, features: FeatureConfig = FeatureConfig(), **overrides) -> Vec2WavConfig:
    base = dict(
        K=K, d_enc=64, heads=2, M=1, conv_kernel=7, mel_channels=64, dropout=0.0, gen_channels=128,
        resblock_kernels=(3, 7), resblock_dilations=((1, 3), (1, 3)), disc_channels=8,
        warmup_steps=1400, lr=1e-3, segment_frames=32, features=features,
    )
    base.update(overrides)
    return Vec2WavConfig(**base)


# ---------------------------------------------------------------------------
# checkpoints


def save_txt2vec(path, model: Txt2Vec, sched: TransitionSchedule, extra: dict | None = None) -> None:
    torch.save(
        {
            "kind": "txt2vec",
            "config": model.cfg.to_dict(),
            "schedule": sched.to_text(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_txt2vec(path) -> tuple[Txt2Vec, TransitionSchedule]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "txt2vec":
        raise CheckpointError(f"{path} is not a txt2vec checkpoint")
    cfg = Txt2VecConfig(**ckpt["config"])
    sched = TransitionSchedule.from_text(ckpt["schedule"])
    if sched != cfg.schedule():
        raise CheckpointError(f"{path}: stored schedule does not match the stored configuration")
    model = Txt2Vec(cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, sched


def save_vec2wav(path, model: Vec2Wav, extra: dict | None = None) -> None:
    torch.save(
        {"kind": "vec2wav", "config": model.cfg.to_dict(), "state_dict": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_vec2wav(path) -> Vec2Wav:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "vec2wav":
        raise CheckpointError(f"{path} is not a vec2wav checkpoint")
    model = Vec2Wav(Vec2WavConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def check_compatible(t2v: Txt2Vec, v2w: Vec2Wav) -> None:
    if t2v.cfg.K != v2w.cfg.K:
        raise CheckpointError(f"codebook mismatch: txt2vec K={t2v.cfg.K}, vec2wav K={v2w.cfg.K}")
    rate = v2w.cfg.features.sample_rate / v2w.cfg.hop
    if abs(rate - t2v.cfg.frame_rate) > 1e-9:
        raise CheckpointError(f"frame-rate mismatch: txt2vec {t2v.cfg.frame_rate} Hz, vec2wav {rate} Hz")


# ---------------------------------------------------------------------------
# training


def train_txt2vec(
    records: Sequence[UtteranceRecord],
    cfg: Txt2VecConfig,
    steps: int,
    batch_size: int = 8,
    seed: int = 0,
    log_every: int = 100,
    dtype=torch.float32,
    callback: Callable | None = None,
):
    """AdamW training on ``records``; returns ``(model, schedule, history)``."""
    (np_rng, gen), = rng_streams(seed)
    torch.manual_seed(int(np_rng.integers(2**31)))
    sched = cfg.schedule()
    model = Txt2Vec(cfg).to(dtype)
    vocab = model.vocab
    examples = [(vocab.encode(r.phonemes), r.durations, r.tokens) for r in records]
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    start = time.time()
    model.train()
    for step in range(steps):
        idx = np_rng.choice(len(examples), min(batch_size, len(examples)), replace=False)
        batch = make_batch([examples[i] for i in idx], sched, cfg, np_rng, gen)
        loss = training_loss(model, batch, sched)
        opt.zero_grad()
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        row = {k: float(v.detach()) for k, v in loss._asdict().items()}
        history.append(row)
        if log_every and step % log_every == 0:
            log.info("txt2vec step %d (%.0fs) loss %.4f dur %.4f vq %.4f", step, time.time() - start,
                     row["total"], row["duration"], row["vq"])
        if callback:
            callback(step, model, row)
    model.eval()
    return model, sched, history


def utterance_features(record: UtteranceRecord, features: FeatureConfig) -> dict:
    wav = load_audio(record, features)
    return {"tokens": np.asarray(record.tokens), "aux": extract_aux(wav, features),
            "mel": extract_mel(wav, features), "wav": wav}


def aux_statistics(utterances) -> tuple[np.ndarray, np.ndarray]:
    aux = np.concatenate([u["aux"] for u in utterances]).astype(np.float64)
    feats = np.stack([np.log(np.maximum(aux[:, 0], 1.0)), aux[:, 1], aux[:, 2]], axis=1)
    return feats.mean(0), feats.std(0) + 1e-3


def train_vec2wav(
    records_or_features,
    cfg: Vec2WavConfig,
    steps: int,
    batch_size: int = 4,
    seed: int = 0,
    log_every: int = 100,
    dtype=torch.float32,
    callback: Callable | None = None,
):
    """Alternating generator/discriminator Adam updates; returns ``(model, disc, history)``.

    Discriminators are updated only once ``step >= cfg.warmup_steps``.
    """
    (np_rng, _), = rng_streams(seed)
    torch.manual_seed(int(np_rng.integers(2**31)))
    utts = [
        u if isinstance(u, dict) else utterance_features(u, cfg.features) for u in records_or_features
    ]
    model = Vec2Wav(cfg).to(dtype)
    model.set_aux_stats(*aux_statistics(utts))
    disc = Discriminators(cfg).to(dtype)
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.8, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.8, 0.99))
    sched_g = torch.optim.lr_scheduler.StepLR(opt_g, cfg.lr_halve_every, 0.5)
    sched_d = torch.optim.lr_scheduler.StepLR(opt_d, cfg.lr_halve_every, 0.5)
    history, skipped_total = [], 0
    start = time.time()
    model.train()
    for step in range(steps):
        idx = np_rng.choice(len(utts), min(batch_size, len(utts)), replace=False)
        batch, skipped = make_vocoder_batch([utts[i] for i in idx], np_rng, cfg, dtype)
        skipped_total += skipped
        if batch is None:
            continue
        loss = vocoder_loss(model, disc, batch, step)
        opt_g.zero_grad()
        loss.total.backward()
        opt_g.step()
        sched_g.step()
        row = {k: float(v.detach()) for k, v in loss._asdict().items()}
        if step >= cfg.warmup_steps:
            with torch.no_grad():
                fake, _ = model(batch.tokens, batch.prompt, batch.aux, prompt_pad_mask=batch.prompt_pad)
            d_loss = discriminator_loss(disc, batch.wav, fake)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            sched_d.step()
            row["disc"] = float(d_loss.detach())
        history.append(row)
        if log_every and step % log_every == 0:
            log.info("vec2wav step %d (%.0fs) mel %.3f aux %.3f adv %.3f", step, time.time() - start,
                     row["mel"], row["aux"], row["adv"])
        if callback:
            callback(step, model, row)
    if skipped_total:
        log.warning("skipped %d utterance draws too short for a prompt/target split", skipped_total)
    model.eval()
    return model, disc, history


# ---------------------------------------------------------------------------
# unified edit / continuation


@dataclass
class Context:
    """A stretch of real speech next to the region being generated."""

    audio: np.ndarray
    phonemes: list
    durations: list
    tokens: list | None = None


@dataclass
class EditRequest:
    context_a: Context
    target_phonemes: list
    context_b: Context | None = None
    output_path: str | None = None
    seed: int = 0

    @property
    def is_continuation(self) -> bool:
        return self.context_b is None


@dataclass
class EditResult:
    tokens: np.ndarray
    waveform: np.ndarray
    region: tuple  # frame range of the generated tokens


def _context_tokens(ctx: Context, tokenizer: TokenizerSpec | None) -> np.ndarray:
    if ctx.tokens is not None:
        tokens = np.asarray(ctx.tokens, dtype=np.int64)
    elif tokenizer is not None:
        tokens = tokenize(ctx.audio, tokenizer)
    else:
        raise ValueError("context has no tokens and no tokenizer was given")
    if ctx.durations is None:
        raise ValueError("context durations are required")
    return tokens


def run_edit(
    req: EditRequest,
    txt2vec: Txt2Vec,
    sched: TransitionSchedule,
    vec2wav: Vec2Wav,
    tokenizer: TokenizerSpec | None = None,
) -> EditResult:
    """Generate tokens between the contexts, then vocode ``[c^A, x, c^B]`` prompted by ``[m^A, m^B]``."""
    check_compatible(txt2vec, vec2wav)
    vocab = txt2vec.vocab
    ctx_b = req.context_b or Context(np.zeros(0), [], [], [])
    c_A = _context_tokens(req.context_a, tokenizer)
    c_B = _context_tokens(ctx_b, tokenizer) if req.context_b is not None else np.zeros(0, dtype=np.int64)
    (_, gen), = rng_streams(req.seed)
    tokens = infer_edit(
        txt2vec, sched,
        vocab.encode(req.context_a.phonemes), vocab.encode(req.target_phonemes), vocab.encode(ctx_b.phonemes),
        req.context_a.durations, ctx_b.durations, c_A, c_B, gen,
    ).numpy()
    feats = vec2wav.cfg.features
    mels = [extract_mel(req.context_a.audio, feats)]
    if req.context_b is not None and len(req.context_b.audio):
        mels.append(extract_mel(req.context_b.audio, feats))
    prompt = np.concatenate(mels)
    wav = vec2wav.vocode(tokens, prompt)
    if req.output_path:
        write_wav(req.output_path, wav, feats.sample_rate)
    return EditResult(tokens, wav, (len(c_A), len(tokens) - len(c_B)))


# ---------------------------------------------------------------------------
# speaker similarity


class Embedder(Protocol):
    name: str

    def __call__(self, wav: np.ndarray) -> np.ndarray: ...


class MelStatsEmbedder:
    """Utterance-level mean and variance of log-mel frames."""

    name = "mel-mean-var"

    def __init__(self, features: FeatureConfig = FeatureConfig()):
        self.features = features

    def __call__(self, wav):
        mel = extract_mel(wav, self.features).astype(np.float64)
        return np.concatenate([mel.mean(0), mel.var(0)])


@dataclass
class SecsReport:
    similarities: list
    mean: float
    embedder: str
    pairs: list = field(default_factory=list)

    def to_dict(self):
        return {"embedder": self.embedder, "mean": self.mean, "similarities": self.similarities, "pairs": self.pairs}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"pair": p, "secs": s}) for p, s in zip(self.pairs, self.similarities)]
        lines.append(json.dumps({"summary": True, "mean": self.mean, "n": len(self.similarities), "embedder": self.embedder}))
        return "\n".join(lines) + "\n"


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def compute_secs(references, generated, embedder: Embedder | None = None, names=None) -> SecsReport:
    """Cosine similarity of speaker embeddings for each (reference, generated) pair.

    Accepts single waveforms or equal-length lists of waveforms.
    """
    embedder = embedder or MelStatsEmbedder()
    if isinstance(references, np.ndarray) and references.ndim == 1:
        references, generated = [references], [generated]
    if len(references) != len(generated):
        raise ValueError("reference and generated lists differ in length")
    try:
        sims = [cosine(embedder(r), embedder(g)) for r, g in zip(references, generated)]
    except Exception as exc:
        raise RuntimeError(f"embedder {getattr(embedder, 'name', embedder)!r} failed: {exc}") from exc
    names = list(names) if names is not None else [str(i) for i in range(len(sims))]
    mean = float(np.mean(sims)) if sims else float("nan")
    return SecsReport(sims, mean, getattr(embedder, "name", type(embedder).__name__), names)


def load_wav_checked(path, features: FeatureConfig) -> np.ndarray:
    wav, sr = read_wav(path)
    if sr != features.sample_rate:
        raise ValueError(f"{path}: sample rate {sr} != {features.sample_rate}")
    return wav
