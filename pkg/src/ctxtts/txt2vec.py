"""Text-to-token acoustic model with contextual discrete diffusion.

The model encodes phonemes, predicts per-phoneme durations, expands the
phoneme encodings to frame rate and runs a Transformer denoiser over the
sequence ``[context A, x_t, context B]``. Text enters every denoiser block by
position-aligned addition after self-attention; a binary indicator embedding
marks which positions are context (0) and which are being generated (1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import TransitionSchedule, backward_step, build_schedule, forward_corrupt, posterior_mixture
from .layers import FeedForward, TransformerBlock, sinusoidal_positions

CONTEXT, DATA = 0, 1


@dataclass
class Txt2VecConfig:
    K: int = 128
    phonemes: tuple = ()
    n_blocks: int = 12
    heads: int = 8
    d_model: int = 512
    n_text_blocks: int = 6
    ff_mult: int = 4
    dropout: float = 0.1
    duration_kernel: int = 3
    T: int = 100
    a_T: float = 1e-5
    g_T: float = 0.9
    gamma_loss: float = 1.0
    aux_weight: float = 0.001
    proportions: tuple = (0.6, 0.3, 0.1)
    min_x0_frames: int = 100
    ctxA_seconds: tuple = (2.0, 3.0)
    frame_rate: int = 100
    temperature: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 4.5e-2

    def __post_init__(self):
        self.phonemes = tuple(self.phonemes)
        self.proportions = tuple(float(p) for p in self.proportions)
        self.ctxA_seconds = tuple(float(s) for s in self.ctxA_seconds)
        if len(self.proportions) != 3 or abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) < 0:
            raise ValueError(f"segmentation proportions must be 3 non-negative values summing to 1, got {self.proportions}")
        if self.min_x0_frames <= 0:
            raise ValueError("min_x0_frames must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        lo, hi = self.ctxA_seconds
        if not 0 < lo <= hi:
            raise ValueError(f"bad context-A range {self.ctxA_seconds}")

    def schedule(self) -> TransitionSchedule:
        return build_schedule(self.T, self.K, a_T=self.a_T, g_T=self.g_T)

    def to_dict(self):
        d = asdict(self)
        d["phonemes"] = list(self.phonemes)
        d["proportions"] = list(self.proportions)
        d["ctxA_seconds"] = list(self.ctxA_seconds)
        return d


class PhonemeVocab:
    """Maps phoneme symbols to ids ``1..V``; id 0 is padding."""

    def __init__(self, symbols: Sequence[str]):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate phoneme symbols")
        self.symbols = tuple(symbols)
        self._ids = {s: i + 1 for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, symbols: Sequence[str]) -> list[int]:
        try:
            return [self._ids[s] for s in symbols]
        except KeyError as exc:
            raise KeyError(f"unknown phoneme {exc.args[0]!r}") from None

    @classmethod
    def from_records(cls, records):
        return cls(sorted({p for r in records for p in r.phonemes}))


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, dim, n_blocks, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size + 1, dim, padding_idx=0)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, ff_mult, dropout) for _ in range(n_blocks))
        self.norm = nn.LayerNorm(dim)
        self.scale = math.sqrt(dim)

    def forward(self, ids, pad_mask=None):
        if ids.numel() and (ids.min() < 0 or ids.max() > self.vocab_size):
            raise ValueError("phoneme id outside the vocabulary")
        x = self.embed(ids) * self.scale
        x = x + sinusoidal_positions(ids.shape[1], x.shape[-1], x.dtype)
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.norm(x)


class DurationPredictor(nn.Module):
    """Two conv layers and a linear head; outputs durations in the log(1 + d) domain."""

    def __init__(self, dim, kernel_size=3, dropout=0.0):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2) for _ in range(2))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(2))
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(dim, 1)

    def forward(self, e, pad_mask=None):
        x = e
        for conv, norm in zip(self.convs, self.norms):
            if pad_mask is not None:
                x = x.masked_fill(pad_mask.unsqueeze(-1), 0.0)
            x = self.dropout(norm(F.relu(conv(x.transpose(1, 2)).transpose(1, 2))))
        return self.proj(x).squeeze(-1)


class DenoiserBlock(nn.Module):
    def __init__(self, dim, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.text_proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, h, step_emb, pad_mask=None):
        x = x + step_emb
        y = self.norm1(x)
        y, _ = self.attn(y, y, y, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.dropout(y) + self.text_proj(h)
        return x + self.ff(self.norm2(x))


class Txt2Vec(nn.Module):
    def __init__(self, cfg: Txt2VecConfig):
        super().__init__()
        if not cfg.phonemes:
            raise ValueError("config carries no phoneme vocabulary")
        self.cfg = cfg
        self.vocab = PhonemeVocab(cfg.phonemes)
        d = cfg.d_model
        self.text_encoder = TextEncoder(len(self.vocab), d, cfg.n_text_blocks, cfg.heads, cfg.ff_mult, cfg.dropout)
        self.duration_predictor = DurationPredictor(d, cfg.duration_kernel, cfg.dropout)
        # rows 1..K real tokens, K+1 mask, 0 padding
        self.token_embed = nn.Embedding(cfg.K + 2, d, padding_idx=0)
        self.indicator_embed = nn.Embedding(2, d)
        self.in_proj = nn.Linear(d, d)
        self.step_embed = nn.Embedding(cfg.T + 1, d)
        self.blocks = nn.ModuleList(DenoiserBlock(d, cfg.heads, cfg.ff_mult, cfg.dropout) for _ in range(cfg.n_blocks))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.K)

    @property
    def dtype(self):
        return self.out_proj.weight.dtype

    def encode_text(self, ids, pad_mask=None):
        """Phone-level encodings ``(B, P, d)`` for phoneme ids ``(B, P)``."""
        return self.text_encoder(ids, pad_mask)

    def predict_log_durations(self, e, pad_mask=None):
        return self.duration_predictor(e, pad_mask)

    def predict_durations(self, e, pad_mask=None):
        """Durations in frames as non-negative reals."""
        return torch.expm1(self.predict_log_durations(e, pad_mask)).clamp(min=0.0)

    def decoder_forward(self, tokens, indicator, t, h, pad_mask=None):
        """Logits of ``p(x_0)`` over the K real tokens at every position.

        Args:
            tokens: ``(B, L)`` sequence ``[c^A, x_t, c^B]`` (0 = padding).
            indicator: ``(B, L)`` with 1 on the ``x_t`` segment, 0 on context.
            t: ``(B,)`` diffusion step of each sequence.
            h: ``(B, L, d)`` frame-level text encoding aligned to ``tokens``.

        Returns:
            ``(B, L, K)`` logits; the mask token has no output column, so it
            always gets probability zero. Only rows with ``indicator == 1`` are used.
        """
        if tokens.shape != indicator.shape or tokens.shape != h.shape[:2]:
            raise ValueError(
                f"length mismatch: tokens {tuple(tokens.shape)}, indicator {tuple(indicator.shape)}, h {tuple(h.shape[:2])}"
            )
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() and (t.min() < 1 or t.max() > self.cfg.T):
            raise ValueError(f"step outside [1, {self.cfg.T}]")
        x = self.token_embed(tokens) + self.indicator_embed(indicator)
        x = self.in_proj(x) + sinusoidal_positions(tokens.shape[1], x.shape[-1], x.dtype)
        step = self.step_embed(t).unsqueeze(1)
        for block in self.blocks:
            x = block(x, h, step, pad_mask)
        logits = self.out_proj(self.out_norm(x))
        return logits

    def denoise(self, seq, indicator, t, h, temperature=1.0):
        """Single-sequence convenience: ``p(x_0)`` rows of the data segment only."""
        seq = torch.as_tensor(seq, dtype=torch.long)
        indicator = torch.as_tensor(indicator, dtype=torch.long)
        logits = self.decoder_forward(seq[None], indicator[None], torch.tensor([t]), h[None])[0]
        probs = torch.softmax(logits.double() / temperature, dim=-1)
        return probs[indicator == DATA]


# ---------------------------------------------------------------------------
# durations and length regulation


def length_regulate(e: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of ``e`` ``durations[i]`` times."""
    d = torch.as_tensor(durations, dtype=torch.long)
    if d.shape[0] != e.shape[0]:
        raise ValueError(f"{d.shape[0]} durations for {e.shape[0]} phonemes")
    if d.numel() and d.min() < 0:
        raise ValueError("negative duration")
    return torch.repeat_interleave(e, d, dim=0)


def round_durations(values) -> np.ndarray:
    """Round-half-up on the running sum so the total equals ``round(sum(values))``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.zeros(0, dtype=np.int64)
    cum = np.floor(np.cumsum(values) + 0.5).astype(np.int64)
    return np.diff(cum, prepend=0)


def speed_ratio(d_A, d_B, pred_A, pred_B) -> float:
    """Rescale factor ``(sum d^A + sum d^B) / (sum pred^A + sum pred^B)``; 1 without context."""
    num = float(np.sum(d_A)) + float(np.sum(d_B))
    den = float(np.sum(pred_A)) + float(np.sum(pred_B))
    if num == 0 and den == 0:
        return 1.0
    if den <= 0:
        return 1.0
    return num / den


# ---------------------------------------------------------------------------
# training data


class Segment(NamedTuple):
    c_A: np.ndarray
    x0: np.ndarray
    c_B: np.ndarray
    config: int


def segment_lengths(n_frames: int, rng: np.random.Generator, cfg: Txt2VecConfig, max_tries: int = 1000):
    """Sample ``(len_A, len_x0, len_B, config)`` for an utterance of ``n_frames`` tokens.

    Config 1 keeps both contexts, config 2 only context A, config 3 none. When
    the drawn configuration does not fit the utterance a new one is drawn.
    """
    if n_frames <= cfg.min_x0_frames:
        raise ValueError(f"utterance of {n_frames} frames is not longer than {cfg.min_x0_frames}")
    lo = int(round(cfg.ctxA_seconds[0] * cfg.frame_rate))
    hi = int(round(cfg.ctxA_seconds[1] * cfg.frame_rate))
    for _ in range(max_tries):
        config = int(rng.choice(3, p=cfg.proportions)) + 1
        if config == 1:
            # x0 strictly longer than min_x0_frames and strictly shorter than the utterance
            if n_frames - 1 <= cfg.min_x0_frames:
                continue
            x_len = int(rng.integers(cfg.min_x0_frames + 1, n_frames))
            start = int(rng.integers(0, n_frames - x_len + 1))
            return start, x_len, n_frames - start - x_len, 1
        if config == 2:
            a_len = int(rng.integers(lo, hi + 1))
            if a_len >= n_frames:
                continue
            return a_len, n_frames - a_len, 0, 2
        return 0, n_frames, 0, 3
    raise RuntimeError("could not draw a segmentation")


def segment_for_training(tokens, rng: np.random.Generator, cfg: Txt2VecConfig) -> Segment:
    tokens = np.asarray(tokens)
    a, x, b, config = segment_lengths(len(tokens), rng, cfg)
    return Segment(tokens[:a], tokens[a : a + x], tokens[a + x :], config)


@dataclass
class TrainBatch:
    phonemes: torch.Tensor  # (B, P) ids, 0 = pad
    durations: torch.Tensor  # (B, P) ground-truth frames
    frame_phone: torch.Tensor  # (B, L) phoneme index of every frame
    tokens_in: torch.Tensor  # (B, L) [c^A, x_t, c^B], 0 = pad
    x0: torch.Tensor  # (B, L) clean tokens
    indicator: torch.Tensor  # (B, L)
    t: torch.Tensor  # (B,)
    configs: list = field(default_factory=list)

    @property
    def phone_pad(self):
        return self.phonemes == 0

    @property
    def frame_pad(self):
        return self.x0 == 0


def make_batch(
    examples,
    sched: TransitionSchedule,
    cfg: Txt2VecConfig,
    rng: np.random.Generator,
    generator: torch.Generator,
    t=None,
) -> TrainBatch:
    """Segment, pick a uniform step and corrupt the data segment of every example.

    ``examples`` are ``(phoneme_ids, durations, tokens)`` triples.
    """
    B = len(examples)
    P = max(len(e[0]) for e in examples)
    L = max(len(e[2]) for e in examples)
    phonemes = torch.zeros(B, P, dtype=torch.long)
    durations = torch.zeros(B, P, dtype=torch.long)
    frame_phone = torch.zeros(B, L, dtype=torch.long)
    tokens_in = torch.zeros(B, L, dtype=torch.long)
    x0 = torch.zeros(B, L, dtype=torch.long)
    indicator = torch.zeros(B, L, dtype=torch.long)
    if t is None:
        steps = torch.from_numpy(rng.integers(1, sched.T + 1, size=B))
    else:
        steps = torch.as_tensor(t, dtype=torch.long).expand(B).clone()
    configs = []
    for i, (ph, dur, tok) in enumerate(examples):
        ph, dur, tok = list(ph), list(dur), np.asarray(tok)
        if sum(dur) != len(tok):
            raise ValueError(f"example {i}: durations sum to {sum(dur)} but there are {len(tok)} tokens")
        n = len(tok)
        phonemes[i, : len(ph)] = torch.tensor(ph)
        durations[i, : len(dur)] = torch.tensor(dur)
        frame_phone[i, :n] = torch.repeat_interleave(torch.arange(len(dur)), torch.tensor(dur))
        a, x, _, config = segment_lengths(n, rng, cfg)
        configs.append(config)
        clean = torch.from_numpy(tok.astype(np.int64))
        x0[i, :n] = clean
        tokens_in[i, :n] = clean
        tokens_in[i, a : a + x] = forward_corrupt(clean[a : a + x], int(steps[i]), sched, generator)
        indicator[i, a : a + x] = DATA
    return TrainBatch(phonemes, durations, frame_phone, tokens_in, x0, indicator, steps, configs)


# ---------------------------------------------------------------------------
# loss


class LossTerms(NamedTuple):
    total: torch.Tensor
    duration: torch.Tensor
    vq: torch.Tensor
    vb: torch.Tensor
    aux: torch.Tensor


def diffusion_loss_terms(p_x0, xt, x0, t, sched: TransitionSchedule):
    """Per-position variational term and auxiliary cross-entropy.

    The variational term is ``KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` for
    ``t > 1`` and the decoder NLL ``-log p(x_0|x_1)`` at ``t = 1``. The auxiliary
    term is ``-log p(x~_0 = x_0)``. All arithmetic is float64.
    """
    K = sched.K
    p_x0 = p_x0.to(torch.float64)
    onehot = F.one_hot(x0 - 1, K).to(torch.float64)
    p_model = posterior_mixture(xt, p_x0, t, sched)
    q_true = posterior_mixture(xt, onehot, t, sched)
    log_model = torch.log(p_model.clamp(min=1e-30))
    kl = (torch.xlogy(q_true, q_true) - q_true * log_model).sum(-1)
    nll = -log_model.gather(-1, (x0 - 1).unsqueeze(-1)).squeeze(-1)
    vb = torch.where(torch.as_tensor(t) == 1, nll, kl)
    aux = -torch.log(p_x0.gather(-1, (x0 - 1).unsqueeze(-1)).squeeze(-1).clamp(min=1e-30))
    return vb, aux


def training_loss(model: Txt2Vec, batch: TrainBatch, sched: TransitionSchedule) -> LossTerms:
    """Duration MSE (log domain) plus ``gamma`` times the diffusion loss on the data segment."""
    cfg = model.cfg
    e = model.encode_text(batch.phonemes, batch.phone_pad)
    log_pred = model.predict_log_durations(e, batch.phone_pad)
    target = torch.log1p(batch.durations.to(log_pred.dtype))
    valid = ~batch.phone_pad
    duration = ((log_pred - target) ** 2)[valid].mean()

    idx = batch.frame_phone.unsqueeze(-1).expand(-1, -1, e.shape[-1])
    h = torch.gather(e, 1, idx).masked_fill(batch.frame_pad.unsqueeze(-1), 0.0)
    logits = model.decoder_forward(batch.tokens_in, batch.indicator, batch.t, h, batch.frame_pad)

    data = (batch.indicator == DATA) & ~batch.frame_pad
    p_x0 = torch.softmax(logits.double(), dim=-1)[data]
    t = batch.t.unsqueeze(1).expand_as(data)[data]
    vb, aux = diffusion_loss_terms(p_x0, batch.tokens_in[data], batch.x0[data], t, sched)
    vb, aux = vb.mean(), aux.mean()
    vq = (vb + cfg.aux_weight * aux).to(duration.dtype)
    total = duration + cfg.gamma_loss * vq
    return LossTerms(total, duration, vq, vb.to(duration.dtype), aux.to(duration.dtype))


# ---------------------------------------------------------------------------
# inference


@dataclass
class EditPlan:
    phonemes: torch.Tensor
    e: torch.Tensor
    predicted: np.ndarray
    alpha: float
    durations_D: np.ndarray
    durations: np.ndarray  # [d^A, round(alpha * pred^D), d^B]
    n_A: int
    n_B: int


@torch.no_grad()
def plan_edit(model: Txt2Vec, y_A, y_D, y_B, d_A, d_B) -> EditPlan:
    """Encode ``[y^A, y^D, y^B]``, predict durations and rescale the target ones."""
    y = list(y_A) + list(y_D) + list(y_B)
    ids = torch.tensor([y], dtype=torch.long)
    e = model.encode_text(ids)
    pred = model.predict_durations(e)[0].double().numpy()
    nA, nD = len(y_A), len(y_D)
    pred_A, pred_D, pred_B = pred[:nA], pred[nA : nA + nD], pred[nA + nD :]
    alpha = speed_ratio(d_A, d_B, pred_A, pred_B)
    d_D = round_durations(alpha * pred_D)
    durations = np.concatenate([np.asarray(d_A, dtype=np.int64), d_D, np.asarray(d_B, dtype=np.int64)])
    return EditPlan(ids, e[0], pred, alpha, d_D, durations, int(np.sum(d_A)), int(np.sum(d_B)))


def _check_edit_inputs(model, y_A, y_D, y_B, d_A, d_B, c_A, c_B):
    if len(y_D) == 0:
        raise ValueError("nothing to generate: y^D is empty")
    if len(y_A) != len(d_A) or len(y_B) != len(d_B):
        raise ValueError("context phonemes and durations differ in length")
    if int(np.sum(d_A)) != len(c_A) or int(np.sum(d_B)) != len(c_B):
        raise ValueError("context durations do not sum to the context token counts")
    K = model.cfg.K
    for name, c in (("c^A", c_A), ("c^B", c_B)):
        c = np.asarray(c)
        if c.size and (c.min() < 1 or c.max() > K):
            raise ValueError(f"{name} must contain only real tokens 1..{K}")


@torch.no_grad()
def infer_edit(
    model: Txt2Vec,
    sched: TransitionSchedule,
    y_A,
    y_D,
    y_B,
    d_A,
    d_B,
    c_A,
    c_B,
    generator: torch.Generator | None = None,
    temperature: float | None = None,
    max_frames: int | None = None,
) -> torch.Tensor:
    """Generate the tokens between two contexts; returns ``[c^A, x_0, c^B]``.

    ``y_*`` are phoneme ids, ``d_A``/``d_B`` ground-truth context durations and
    ``c_A``/``c_B`` context tokens. Continuation is the case of empty B.
    Generation is refused when the rescaled target exceeds ``max_frames``
    (default one minute of frames).
    """
    _check_edit_inputs(model, y_A, y_D, y_B, d_A, d_B, c_A, c_B)
    if sched.K != model.cfg.K or sched.T != model.cfg.T:
        raise ValueError("schedule does not match the model configuration")
    temperature = model.cfg.temperature if temperature is None else temperature
    was_training = model.training
    model.eval()
    try:
        plan = plan_edit(model, y_A, y_D, y_B, d_A, d_B)
        c_A = torch.as_tensor(np.asarray(c_A, dtype=np.int64))
        c_B = torch.as_tensor(np.asarray(c_B, dtype=np.int64))
        n_x = int(plan.durations_D.sum())
        limit = 60 * model.cfg.frame_rate if max_frames is None else max_frames
        if n_x > limit:
            raise ValueError(f"target of {n_x} frames exceeds the {limit}-frame limit (alpha={plan.alpha:.3g})")
        h = length_regulate(plan.e, plan.durations)
        indicator = torch.cat([
            torch.full((len(c_A),), CONTEXT), torch.full((n_x,), DATA), torch.full((len(c_B),), CONTEXT)
        ])
        x = torch.full((n_x,), sched.mask_index, dtype=torch.long)
        if n_x:
            for t in range(sched.T, 0, -1):
                seq = torch.cat([c_A, x, c_B])
                p_x0 = model.denoise(seq, indicator, t, h, temperature)
                x = backward_step(x, p_x0, t, sched, generator)
        return torch.cat([c_A, x, c_B])
    finally:
        model.train(was_training)


def infer_continue(model, sched, y_A, y_D, d_A, c_A, generator=None, temperature=None, max_frames=None) -> torch.Tensor:
    """Continuation is editing with an empty context B."""
    return infer_edit(model, sched, y_A, y_D, [], d_A, [], c_A, [], generator, temperature, max_frames)
