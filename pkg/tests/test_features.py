import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ctxtts.features import (
    FeatureConfig,
    FeatureError,
    extract_aux,
    extract_mel,
    log_mel,
    mel_filterbank,
    read_wav,
    write_wav,
)

CFG = FeatureConfig()


def sine(freq, seconds=0.5, amp=0.5, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5000))
def test_frame_count_law(n):
    wav = np.random.default_rng(n).normal(size=n) * 0.1
    frames = -(-n // CFG.hop)
    assert extract_mel(wav).shape == (frames, CFG.n_mels)
    assert extract_aux(wav).shape == (frames, 3)


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(16000, 512, 80)
    assert fb.shape == (80, 257)
    assert (fb >= 0).all()
    peaks = fb.argmax(1)
    assert (np.diff(peaks) >= 0).all()


@pytest.mark.parametrize("freq", [100.0, 150.0, 220.0, 330.0])
def test_pitch_of_a_sine(freq):
    aux = extract_aux(sine(freq))
    inner = aux[3:-3]
    assert np.median(inner[:, 0]) == pytest.approx(freq, rel=5e-3)
    assert inner[:, 2].min() > 0.95


def test_silence_is_unvoiced():
    aux = extract_aux(np.zeros(8000))
    assert (aux[:, 2] == 0).all()
    assert np.allclose(aux[:, 1], np.log(1e-10))
    assert np.allclose(extract_mel(np.zeros(8000)), np.log(CFG.log_floor))


def test_energy_tracks_amplitude():
    quiet = extract_aux(sine(200, amp=0.1))[5:-5, 1]
    loud = extract_aux(sine(200, amp=0.4))[5:-5, 1]
    assert np.allclose(loud - quiet, 2 * np.log(4.0), atol=1e-3)


def test_mel_peak_follows_frequency():
    low = extract_mel(sine(300)).mean(0).argmax()
    high = extract_mel(sine(3000)).mean(0).argmax()
    assert high > low


def test_log_mel_is_differentiable():
    wav = torch.tensor(sine(200, 0.1), requires_grad=True)
    log_mel(wav).sum().backward()
    assert torch.isfinite(wav.grad).all() and wav.grad.abs().sum() > 0


def test_batched_log_mel_matches_single():
    a, b = sine(200, 0.2), sine(500, 0.2)
    both = log_mel(torch.tensor(np.stack([a, b])))
    assert torch.allclose(both[1], log_mel(torch.tensor(b)))


def test_bad_audio_rejected():
    with pytest.raises(FeatureError):
        extract_mel(np.zeros(0))
    with pytest.raises(FeatureError):
        extract_mel(np.zeros((2, 100)))
    with pytest.raises(FeatureError):
        extract_aux(np.array([0.0, np.nan, 0.0]))


def test_wav_round_trip(tmp_path):
    wav = sine(440, 0.1)
    path = tmp_path / "x.wav"
    write_wav(path, wav, 16000)
    back, sr = read_wav(path)
    assert sr == 16000 and len(back) == len(wav)
    assert np.abs(back - wav).max() < 1.0 / 32767 + 1e-9
