"""Audio feature extraction: log-mel frames, pitch/energy/voicing, WAV I/O.

Every extractor produces exactly ``ceil(num_samples / hop)`` frames, frame ``i``
centred on sample ``i * hop`` (reflection padding at the edges), so mel,
auxiliary features and semantic tokens share one 10 ms time axis.
"""

from __future__ import annotations

import math
import wave
from dataclasses import asdict, dataclass

import numpy as np
import torch


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    hop: int = 160
    win: int = 400
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5
    pitch_min: float = 50.0
    pitch_max: float = 500.0

    def to_dict(self):
        return asdict(self)

    def num_frames(self, num_samples: int) -> int:
        return -(-num_samples // self.hop)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin=0.0, fmax=None) -> np.ndarray:
    """HTK-scale triangular filters, shape ``(n_mels, n_fft // 2 + 1)``, area-normalised."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lower) / (centre - lower)
    down = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb * (2.0 / (upper - lower))


_FB_CACHE: dict = {}


def _filterbank(cfg: FeatureConfig, dtype, device):
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax, dtype, device)
    if key not in _FB_CACHE:
        fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        _FB_CACHE[key] = torch.as_tensor(fb, dtype=dtype, device=device)
    return _FB_CACHE[key]


def log_mel(wav: torch.Tensor, cfg: FeatureConfig = FeatureConfig()) -> torch.Tensor:
    """Differentiable log-mel of ``(..., samples)`` audio, shape ``(..., frames, n_mels)``."""
    shape = wav.shape[:-1]
    n = wav.shape[-1]
    x = wav.reshape(-1, n)
    pad = cfg.n_fft // 2
    mode = "reflect" if n > pad else "constant"
    x = torch.nn.functional.pad(x.unsqueeze(1), (pad, pad), mode=mode).squeeze(1)
    window = torch.hann_window(cfg.win, dtype=wav.dtype, device=wav.device)
    spec = torch.stft(x, cfg.n_fft, cfg.hop, cfg.win, window, center=False, return_complex=True)
    power = spec.real**2 + spec.imag**2
    mag = torch.sqrt(power + 1e-12)
    mel = torch.matmul(_filterbank(cfg, wav.dtype, wav.device), mag)
    frames = cfg.num_frames(n)
    mel = torch.log(mel.clamp(min=cfg.log_floor))[..., :frames]
    return mel.transpose(-1, -2).reshape(*shape, frames, cfg.n_mels)


def _check_audio(wav):
    wav = np.asarray(wav, dtype=np.float64)
    if wav.ndim != 1:
        raise FeatureError(f"expected mono audio, got shape {wav.shape}")
    if wav.size == 0:
        raise FeatureError("empty audio")
    if not np.all(np.isfinite(wav)):
        raise FeatureError("audio contains non-finite samples")
    return wav


def extract_mel(wav, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log-mel frames ``(ceil(n / hop), n_mels)`` as float32."""
    wav = _check_audio(wav)
    with torch.no_grad():
        mel = log_mel(torch.from_numpy(wav), cfg)
    return mel.numpy().astype(np.float32)


def _frames(wav, cfg: FeatureConfig, length: int):
    """Windows of ``length`` samples starting at ``i * hop - win // 2``, zero padded."""
    n = len(wav)
    count = cfg.num_frames(n)
    left = cfg.win // 2
    padded = np.zeros(left + count * cfg.hop + length + 1)
    padded[left : left + n] = wav
    idx = np.arange(count)[:, None] * cfg.hop + np.arange(length)[None, :]
    return padded[idx]


def extract_aux(wav, cfg: FeatureConfig = FeatureConfig(), smooth: float = 2.0) -> np.ndarray:
    """Per-frame ``(pitch_hz, log_energy, pov)``, shape ``(frames, 3)``.

    Pitch comes from the normalised cross-correlation (NCCF) over lags covering
    ``[pitch_min, pitch_max]``, tracked with a Viterbi pass whose transition cost
    is ``smooth * |log(lag_i / lag_j)|``; the chosen lag is refined by parabolic
    interpolation. ``pov`` is the NCCF at the chosen lag clipped to ``[0, 1]``.
    """
    wav = _check_audio(wav)
    sr = cfg.sample_rate
    min_lag = max(2, int(math.floor(sr / cfg.pitch_max)))
    max_lag = int(math.ceil(sr / cfg.pitch_min))
    W = cfg.win
    seg = _frames(wav, cfg, W + max_lag + 1)
    head = seg[:, :W]
    energy = np.log(np.sum(head**2, axis=1) + 1e-10)

    nfft = 1 << int(math.ceil(math.log2(seg.shape[1] + W)))
    corr = np.fft.irfft(np.conj(np.fft.rfft(head, nfft)) * np.fft.rfft(seg, nfft), nfft)
    lags = np.arange(min_lag - 1, max_lag + 2)
    corr = corr[:, lags]
    csum = np.concatenate([np.zeros((seg.shape[0], 1)), np.cumsum(seg**2, axis=1)], axis=1)
    e0 = csum[:, W][:, None]
    e_lag = csum[:, lags + W] - csum[:, lags]
    denom = np.sqrt(e0 * e_lag)
    scale = np.maximum(e0, 1e-12) * 1e-6
    nccf = np.where(denom > scale, corr / np.maximum(denom, 1e-300), 0.0)

    inner = nccf[:, 1:-1]  # lags min_lag..max_lag
    cand = lags[1:-1].astype(np.float64)
    # prefer shorter lags slightly to avoid sub-octave picks on near-periodic input
    local = 1.0 - inner + 0.1 * cand / max_lag
    log_lag = np.log(cand)
    trans = smooth * np.abs(log_lag[:, None] - log_lag[None, :])
    F_, C = local.shape
    cost = local[0].copy()
    back = np.zeros((F_, C), dtype=np.int64)
    for i in range(1, F_):
        total = cost[:, None] + trans  # [prev, cur]
        back[i] = np.argmin(total, axis=0)
        cost = total[back[i], np.arange(C)] + local[i]
    path = np.zeros(F_, dtype=np.int64)
    path[-1] = int(np.argmin(cost))
    for i in range(F_ - 1, 0, -1):
        path[i - 1] = back[i, path[i]]

    rows = np.arange(F_)
    k = path + 1  # index into nccf (with the one-lag margin)
    y0, y1, y2 = nccf[rows, k - 1], nccf[rows, k], nccf[rows, k + 1]
    curv = y0 - 2 * y1 + y2
    offset = np.where(curv < 0, 0.5 * (y0 - y2) / np.where(curv < 0, curv, -1.0), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    lag = cand[path] + offset
    pitch = sr / lag
    pov = np.clip(y1, 0.0, 1.0)
    return np.stack([pitch, energy, pov], axis=1).astype(np.float32)


# ---------------------------------------------------------------------------
# 16-bit PCM WAV


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise FeatureError(f"{path}: only 16-bit PCM is supported")
        sr, channels, n = f.getframerate(), f.getnchannels(), f.getnframes()
        data = np.frombuffer(f.readframes(n), dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return data, sr


def write_wav(path, wav, sample_rate: int) -> None:
    wav = np.asarray(wav, dtype=np.float64)
    pcm = np.clip(np.round(wav * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(pcm.tobytes())
