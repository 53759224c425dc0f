"""Token-to-waveform vocoder prompted by a mel-spectrogram.

Semantic tokens pass two Conformer encoders whose blocks cross-attend to an
encoded mel prompt. Between the encoders an auxiliary adaptor predicts
per-frame (pitch, energy, voicing) and adds an embedding of them (ground truth
during training, predictions at inference). A HiFi-GAN generator upsamples the
result to audio.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .features import FeatureConfig, log_mel
from .layers import CrossConformerBlock, sinusoidal_positions

log = logging.getLogger(__name__)


@dataclass
class Vec2WavConfig:
    K: int = 128
    d_enc: int = 184
    heads: int = 2
    M: int = 2
    conv_kernel: int = 31
    ff_mult: int = 4
    mel_kernel: int = 5
    mel_channels: int = 184
    dropout: float = 0.1
    gen_channels: int = 512
    upsample_factors: tuple = (5, 4, 4, 2)
    resblock_kernels: tuple = (3, 7, 11)
    resblock_dilations: tuple = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    mpd_periods: tuple = (2, 3, 5, 7, 11)
    msd_scales: int = 3
    disc_channels: int = 32
    warmup_steps: int = 20000
    lambda_mel: float = 45.0
    lambda_fm: float = 2.0
    lambda_aux: float = 1.0
    lambda_adv: float = 1.0
    lr: float = 2e-4
    lr_halve_every: int = 200_000
    segment_frames: int = 32
    prompt_seconds: tuple = (2.0, 3.0)
    min_target_frames: int = 32
    aux_mean: tuple = (5.0, 0.0, 0.5)
    aux_std: tuple = (0.5, 3.0, 0.3)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if isinstance(self.features, dict):
            self.features = FeatureConfig(**self.features)
        self.upsample_factors = tuple(int(u) for u in self.upsample_factors)
        self.resblock_kernels = tuple(self.resblock_kernels)
        self.resblock_dilations = tuple(tuple(d) for d in self.resblock_dilations)
        self.mpd_periods = tuple(self.mpd_periods)
        self.prompt_seconds = tuple(self.prompt_seconds)
        self.aux_mean = tuple(float(v) for v in self.aux_mean)
        self.aux_std = tuple(float(v) for v in self.aux_std)
        if math.prod(self.upsample_factors) != self.features.hop:
            raise ValueError(
                f"upsampling factors {self.upsample_factors} multiply to {math.prod(self.upsample_factors)}, "
                f"not the hop size {self.features.hop}"
            )
        if self.d_enc % self.heads:
            raise ValueError("d_enc must be divisible by heads")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise ValueError("one dilation tuple per resblock kernel")

    @property
    def hop(self):
        return self.features.hop

    def to_dict(self):
        d = asdict(self)
        d["features"] = self.features.to_dict()
        return d


# ---------------------------------------------------------------------------
# generator


class ResBlock(nn.Module):
    def __init__(self, channels, kernel_size, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2) for d in dilations
        )
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=(kernel_size - 1) // 2) for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, 0.1)), 0.1))
            x = x + xt
        return x


class HiFiGANGenerator(nn.Module):
    """Transposed-conv upsampling with multi-receptive-field residual blocks."""

    def __init__(self, in_channels, channels, upsample_factors, resblock_kernels, resblock_dilations):
        super().__init__()
        self.input_conv = nn.Conv1d(in_channels, channels, 7, padding=3)
        self.upsamples = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = channels
        for u in upsample_factors:
            out = max(ch // 2, 1)
            self.upsamples.append(
                nn.ConvTranspose1d(ch, out, 2 * u, u, padding=u // 2 + u % 2, output_padding=u % 2)
            )
            for k, d in zip(resblock_kernels, resblock_dilations):
                self.blocks.append(ResBlock(out, k, d))
            ch = out
        self.output_conv = nn.Conv1d(ch, 1, 7, padding=3)
        self.num_kernels = len(resblock_kernels)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
                m.weight.data.normal_(0.0, 0.01)

    def forward(self, c):
        """``(B, C, L)`` -> ``(B, L * prod(upsample_factors))``."""
        x = self.input_conv(c)
        for i, up in enumerate(self.upsamples):
            x = up(F.leaky_relu(x, 0.1))
            blocks = self.blocks[i * self.num_kernels : (i + 1) * self.num_kernels]
            x = sum(b(x) for b in blocks) / self.num_kernels
        return torch.tanh(self.output_conv(F.leaky_relu(x))).squeeze(1)


# ---------------------------------------------------------------------------
# full model


class Vec2Wav(nn.Module):
    def __init__(self, cfg: Vec2WavConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_enc
        self.token_embed = nn.Embedding(cfg.K + 1, d, padding_idx=0)
        self.mel_encoder = nn.Conv1d(cfg.features.n_mels, cfg.mel_channels, cfg.mel_kernel, padding=cfg.mel_kernel // 2)
        self.mel_proj = nn.Identity() if cfg.mel_channels == d else nn.Linear(cfg.mel_channels, d)

        def blocks():
            return nn.ModuleList(
                CrossConformerBlock(d, cfg.heads, cfg.conv_kernel, cfg.ff_mult, cfg.dropout) for _ in range(cfg.M)
            )

        self.encoder1 = blocks()
        self.aux_proj = nn.Linear(d, 3)
        self.aux_embed = nn.Linear(3, d)
        self.encoder2 = blocks()
        self.generator = HiFiGANGenerator(
            d, cfg.gen_channels, cfg.upsample_factors, cfg.resblock_kernels, cfg.resblock_dilations
        )
        self.register_buffer("aux_mean", torch.tensor(cfg.aux_mean))
        self.register_buffer("aux_std", torch.tensor(cfg.aux_std))

    def set_aux_stats(self, mean, std):
        self.aux_mean.copy_(torch.as_tensor(mean, dtype=self.aux_mean.dtype))
        self.aux_std.copy_(torch.as_tensor(std, dtype=self.aux_std.dtype))
        self.cfg.aux_mean = tuple(float(v) for v in mean)
        self.cfg.aux_std = tuple(float(v) for v in std)

    def normalize_aux(self, aux):
        """Raw ``(pitch_hz, log_energy, pov)`` -> standardised ``(log pitch, energy, pov)``."""
        feats = torch.stack([torch.log(aux[..., 0].clamp(min=1.0)), aux[..., 1], aux[..., 2]], dim=-1)
        return (feats - self.aux_mean.to(feats.dtype)) / self.aux_std.to(feats.dtype)

    def denormalize_aux(self, aux_n):
        feats = aux_n * self.aux_std.to(aux_n.dtype) + self.aux_mean.to(aux_n.dtype)
        return torch.stack([torch.exp(feats[..., 0]), feats[..., 1], feats[..., 2]], dim=-1)

    def encode_prompt(self, prompt_mel):
        """``(B, P, n_mels)`` -> unordered prompt memory ``(B, P, d)``; no positions are added."""
        m = self.mel_encoder(prompt_mel.transpose(1, 2)).transpose(1, 2)
        return self.mel_proj(m)

    def semantic_encode(self, tokens, prompt_mel, aux=None, pad_mask=None, prompt_pad_mask=None):
        """Hidden states and standardised auxiliary predictions.

        Args:
            tokens: ``(B, L)`` real tokens ``1..K`` (0 = padding).
            prompt_mel: ``(B, P, n_mels)`` log-mel prompt, ``P >= 1``.
            aux: optional ``(B, L, 3)`` raw auxiliary features to condition on;
                when omitted the model's own predictions are used.

        Returns:
            ``(hidden (B, L, d), aux_pred (B, L, 3))`` with ``aux_pred`` standardised.
        """
        if prompt_mel.shape[1] < 1:
            raise ValueError("empty mel prompt")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() > self.cfg.K):
            raise ValueError(f"tokens must lie in 1..{self.cfg.K}")
        memory = self.encode_prompt(prompt_mel)
        x = self.token_embed(tokens)
        x = x + sinusoidal_positions(tokens.shape[1], x.shape[-1], x.dtype)
        for block in self.encoder1:
            x = block(x, memory, pad_mask, prompt_pad_mask)
        aux_pred = self.aux_proj(x)
        cond = aux_pred if aux is None else self.normalize_aux(aux)
        x = x + self.aux_embed(cond)
        for block in self.encoder2:
            x = block(x, memory, pad_mask, prompt_pad_mask)
        return x, aux_pred

    def generate_waveform(self, hidden):
        """``(B, L, d)`` -> ``(B, L * hop)`` in ``[-1, 1]``."""
        return self.generator(hidden.transpose(1, 2))

    def forward(self, tokens, prompt_mel, aux=None, pad_mask=None, prompt_pad_mask=None):
        hidden, aux_pred = self.semantic_encode(tokens, prompt_mel, aux, pad_mask, prompt_pad_mask)
        return self.generate_waveform(hidden), aux_pred

    @torch.no_grad()
    def vocode(self, tokens, prompt_mel, aux=None) -> np.ndarray:
        """Single-utterance inference on 1-D tokens and a ``(P, n_mels)`` prompt."""
        was_training = self.training
        self.eval()
        try:
            dtype = self.aux_mean.dtype
            tokens = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
            prompt = torch.as_tensor(np.asarray(prompt_mel), dtype=dtype)[None]
            aux_t = None if aux is None else torch.as_tensor(np.asarray(aux), dtype=dtype)[None]
            wav, _ = self(tokens, prompt, aux_t)
            return wav[0].double().numpy()
        finally:
            self.train(was_training)


# ---------------------------------------------------------------------------
# discriminators


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels=32, n_layers=4):
        super().__init__()
        self.period = period
        chans = [1] + [min(channels * 2**i, 1024) for i in range(n_layers)]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (5, 1), (3, 1), padding=(2, 0)) for i in range(n_layers)
        )
        self.post = nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, x):
        B, n = x.shape
        if n % self.period:
            pad = self.period - n % self.period
            x = F.pad(x.unsqueeze(1), (0, pad), mode="reflect" if n > pad else "constant").squeeze(1)
        x = x.reshape(B, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels=32):
        super().__init__()
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv1d(1, c, 15, padding=7),
            nn.Conv1d(c, 2 * c, 41, 4, groups=math.gcd(4, c), padding=20),
            nn.Conv1d(2 * c, 4 * c, 41, 4, groups=math.gcd(16, 2 * c), padding=20),
            nn.Conv1d(4 * c, 4 * c, 5, padding=2),
        ])
        self.post = nn.Conv1d(4 * c, 1, 3, padding=1)

    def forward(self, x):
        x = x.unsqueeze(1)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


class Discriminators(nn.Module):
    """Multi-period plus multi-scale discriminator families."""

    def __init__(self, cfg: Vec2WavConfig):
        super().__init__()
        self.period = nn.ModuleList(PeriodDiscriminator(p, cfg.disc_channels) for p in cfg.mpd_periods)
        self.scale = nn.ModuleList(ScaleDiscriminator(cfg.disc_channels) for _ in range(cfg.msd_scales))
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, wav):
        outs = [d(wav) for d in self.period]
        x = wav
        for i, d in enumerate(self.scale):
            if i:
                x = self.pool(x.unsqueeze(1)).squeeze(1)
            outs.append(d(x))
        return outs


# ---------------------------------------------------------------------------
# training


class Split(NamedTuple):
    prompt: slice
    target: slice


def split_for_training(n_frames: int, rng: np.random.Generator, cfg: Vec2WavConfig) -> Split | None:
    """First 2-3 s of the utterance prompt the vocoder, the rest is the target.

    Returns None when the utterance cannot fit the longest prompt plus
    ``min_target_frames``.
    """
    rate = cfg.features.sample_rate / cfg.hop
    lo = int(round(cfg.prompt_seconds[0] * rate))
    hi = int(round(cfg.prompt_seconds[1] * rate))
    if n_frames < hi + cfg.min_target_frames:
        return None
    p = int(rng.integers(lo, hi + 1))
    return Split(slice(0, p), slice(p, n_frames))


@dataclass
class VocoderBatch:
    tokens: torch.Tensor  # (B, S)
    aux: torch.Tensor  # (B, S, 3) raw
    wav: torch.Tensor  # (B, S * hop)
    prompt: torch.Tensor  # (B, P, n_mels)
    prompt_pad: torch.Tensor  # (B, P) True at padding


class VocoderLoss(NamedTuple):
    total: torch.Tensor
    mel: torch.Tensor
    aux: torch.Tensor
    adv: torch.Tensor
    fm: torch.Tensor


def make_vocoder_batch(utterances, rng: np.random.Generator, cfg: Vec2WavConfig, dtype=torch.float32):
    """``utterances`` hold dicts with ``tokens``, ``aux``, ``mel`` and ``wav``.

    Returns ``(batch, skipped)``; utterances too short to split are skipped.
    """
    hop, S = cfg.hop, cfg.segment_frames
    rows, skipped = [], 0
    for u in utterances:
        n = len(u["tokens"])
        split = split_for_training(n, rng, cfg)
        if split is None:
            skipped += 1
            continue
        t0, t1 = split.target.start, split.target.stop
        start = int(rng.integers(t0, t1 - S + 1)) if t1 - t0 >= S else t0
        seg = slice(start, start + S)
        rows.append((
            np.asarray(u["tokens"])[seg],
            np.asarray(u["aux"])[seg],
            np.asarray(u["wav"])[seg.start * hop : seg.stop * hop],
            np.asarray(u["mel"])[split.prompt],
        ))
    if skipped:
        log.info("skipped %d utterances too short for a prompt/target split", skipped)
    if not rows:
        return None, skipped
    P = max(len(r[3]) for r in rows)
    B = len(rows)
    prompt = torch.zeros(B, P, cfg.features.n_mels, dtype=dtype)
    prompt_pad = torch.ones(B, P, dtype=torch.bool)
    for i, r in enumerate(rows):
        prompt[i, : len(r[3])] = torch.as_tensor(r[3], dtype=dtype)
        prompt_pad[i, : len(r[3])] = False
    batch = VocoderBatch(
        tokens=torch.as_tensor(np.stack([r[0] for r in rows]).astype(np.int64)),
        aux=torch.as_tensor(np.stack([r[1] for r in rows]), dtype=dtype),
        wav=torch.as_tensor(np.stack([r[2] for r in rows]), dtype=dtype),
        prompt=prompt,
        prompt_pad=prompt_pad,
    )
    return batch, skipped


def _adv_g(outs):
    return sum(torch.mean((score - 1.0) ** 2) for score, _ in outs)


def _feature_matching(real_outs, fake_outs):
    total = 0.0
    for (_, fr), (_, ff) in zip(real_outs, fake_outs):
        for a, b in zip(fr, ff):
            total = total + torch.mean(torch.abs(a.detach() - b))
    return total


def vocoder_loss(model: Vec2Wav, disc: Discriminators | None, batch: VocoderBatch, step: int) -> VocoderLoss:
    """Generator-side loss; adversarial and feature-matching terms are 0 during warmup."""
    cfg = model.cfg
    fake, aux_pred = model(batch.tokens, batch.prompt, batch.aux, prompt_pad_mask=batch.prompt_pad)
    mel = torch.mean(torch.abs(log_mel(fake, cfg.features) - log_mel(batch.wav, cfg.features)))
    aux = torch.mean(torch.abs(aux_pred - model.normalize_aux(batch.aux)))
    zero = torch.zeros((), dtype=mel.dtype)
    if step < cfg.warmup_steps or disc is None:
        adv, fm = zero, zero
    else:
        fake_outs = disc(fake)
        with torch.no_grad():
            real_outs = disc(batch.wav)
        adv = _adv_g(fake_outs)
        fm = _feature_matching(real_outs, fake_outs)
    total = cfg.lambda_mel * mel + cfg.lambda_aux * aux + cfg.lambda_adv * adv + cfg.lambda_fm * fm
    return VocoderLoss(total, mel, aux, adv, fm)


def discriminator_loss(disc: Discriminators, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    loss = 0.0
    for (sr, _), (sf, _) in zip(disc(real), disc(fake.detach())):
        loss = loss + torch.mean((sr - 1.0) ** 2) + torch.mean(sf**2)
    return loss


def mel_distance(wav_a, wav_b, features: FeatureConfig) -> float:
    """Mean absolute log-mel difference over the common frames."""
    a = log_mel(torch.as_tensor(np.asarray(wav_a), dtype=torch.float64), features)
    b = log_mel(torch.as_tensor(np.asarray(wav_b), dtype=torch.float64), features)
    n = min(len(a), len(b))
    return float(torch.mean(torch.abs(a[:n] - b[:n])))
