"""Corpus manifests, semantic tokenizers and a synthetic toy corpus."""

from __future__ import annotations

import json
import logging
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FeatureConfig, extract_mel, read_wav, write_wav

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    utt_id: str
    audio_path: str
    phonemes: list
    durations: list
    tokens: list
    speaker_id: str | None = None

    def __post_init__(self):
        self.phonemes = [str(p) for p in self.phonemes]
        self.durations = [int(d) for d in self.durations]
        self.tokens = [int(t) for t in self.tokens]

    def validate(self):
        if not self.utt_id:
            raise ManifestError("empty utt_id")
        if len(self.phonemes) != len(self.durations):
            raise ManifestError(f"{self.utt_id}: {len(self.phonemes)} phonemes but {len(self.durations)} durations")
        if any(d < 0 for d in self.durations):
            raise ManifestError(f"{self.utt_id}: negative duration")
        if sum(self.durations) != len(self.tokens):
            raise ManifestError(
                f"{self.utt_id}: durations sum to {sum(self.durations)} but there are {len(self.tokens)} tokens"
            )

    def phoneme_span(self, start: int, end: int) -> tuple[int, int]:
        """Frame range covered by phonemes ``start..end-1``."""
        offsets = np.concatenate([[0], np.cumsum(self.durations)])
        return int(offsets[start]), int(offsets[end])


def _parse_ints(value, base: Path, what: str):
    if isinstance(value, list):
        return [int(v) for v in value]
    if not isinstance(value, str):
        raise ManifestError(f"{what} must be a string or list")
    parts = value.split()
    if all(p.lstrip("-").isdigit() for p in parts):
        return [int(p) for p in parts]
    path = Path(value) if Path(value).is_absolute() else base / value
    try:
        return [int(line) for line in path.read_text().split()]
    except OSError as exc:
        raise ManifestError(f"cannot read {what} file {path}: {exc}") from None


def _audio_frames(path: Path, feats: FeatureConfig) -> int:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getframerate() != feats.sample_rate:
                raise ManifestError(f"{path}: sample rate {f.getframerate()} != {feats.sample_rate}")
            return feats.num_frames(f.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise ManifestError(f"unreadable audio {path}: {exc}") from None


def load_manifest(path, features: FeatureConfig | None = FeatureConfig(), check_audio: bool = True) -> list[UtteranceRecord]:
    """Read and validate a JSON-lines manifest.

    Audio paths are resolved relative to the manifest. With ``check_audio``
    the WAV header must exist and yield as many frames as there are tokens.
    """
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                missing = [k for k in ("utt_id", "audio", "phonemes", "durations", "tokens") if k not in obj]
                if missing:
                    raise ManifestError(f"missing fields {missing}")
                audio = Path(obj["audio"])
                audio = audio if audio.is_absolute() else base / audio
                rec = UtteranceRecord(
                    utt_id=str(obj["utt_id"]),
                    audio_path=str(audio),
                    phonemes=obj["phonemes"].split() if isinstance(obj["phonemes"], str) else obj["phonemes"],
                    durations=_parse_ints(obj["durations"], base, "durations"),
                    tokens=_parse_ints(obj["tokens"], base, "tokens"),
                    speaker_id=obj.get("speaker"),
                )
                rec.validate()
                if check_audio and features is not None:
                    frames = _audio_frames(audio, features)
                    if frames != len(rec.tokens):
                        raise ManifestError(f"{rec.utt_id}: audio has {frames} frames but {len(rec.tokens)} tokens")
            except (ManifestError, json.JSONDecodeError, ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return records


def write_manifest(path, records: Sequence[UtteranceRecord], token_dir=None) -> None:
    """Write records as JSON lines; with ``token_dir`` tokens go to one-int-per-line files."""
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            audio = Path(r.audio_path)
            try:
                audio = audio.relative_to(base)
            except ValueError:
                pass
            if token_dir is not None:
                tdir = Path(token_dir)
                tdir.mkdir(parents=True, exist_ok=True)
                tpath = tdir / f"{r.utt_id}.tokens"
                tpath.write_text("".join(f"{t}\n" for t in r.tokens))
                try:
                    tokens = str(tpath.relative_to(base))
                except ValueError:
                    tokens = str(tpath)
            else:
                tokens = " ".join(map(str, r.tokens))
            obj = {
                "utt_id": r.utt_id,
                "audio": str(audio),
                "phonemes": " ".join(r.phonemes),
                "durations": " ".join(map(str, r.durations)),
                "tokens": tokens,
                "speaker": r.speaker_id,
            }
            f.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# tokenizers


@dataclass
class TokenizerSpec:
    kind: str = "external-precomputed"
    K: int = 128
    features: FeatureConfig = field(default_factory=FeatureConfig)
    centroids: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("external-precomputed", "kmeans-on-features"):
            raise ValueError(f"unknown tokenizer kind {self.kind!r}")
        if isinstance(self.features, dict):
            self.features = FeatureConfig(**self.features)

    def to_dict(self):
        return {
            "kind": self.kind,
            "K": self.K,
            "features": self.features.to_dict(),
            "centroids": None if self.centroids is None else np.asarray(self.centroids).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("centroids") is not None:
            d["centroids"] = np.asarray(d["centroids"], dtype=np.float64)
        return cls(**d)


def kmeans(data: np.ndarray, K: int, rng: np.random.Generator, iters: int = 50, tol: float = 0.0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, inertia_history)``; the history is non-increasing.
    """
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if n < K:
        raise ValueError(f"need at least K={K} vectors, got {n}")
    centroids = np.empty((K, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = ((data - centroids[0]) ** 2).sum(1)
    for k in range(1, K):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[k] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((data - centroids[k]) ** 2).sum(1))
    history = []
    for _ in range(iters):
        dist = _sq_dist(data, centroids)
        assign = dist.argmin(1)
        history.append(float(dist[np.arange(n), assign].sum()))
        for k in range(K):
            members = data[assign == k]
            if len(members):
                centroids[k] = members.mean(0)
        if len(history) > 1 and history[-2] - history[-1] <= tol * history[-2]:
            break
    dist = _sq_dist(data, centroids)
    history.append(float(dist.min(1).sum()))
    return centroids, history


def _sq_dist(a, b):
    return (a**2).sum(1)[:, None] - 2 * a @ b.T + (b**2).sum(1)[None, :]


def fit_kmeans_tokenizer(waveforms, K: int, features: FeatureConfig, rng: np.random.Generator, iters: int = 50):
    feats = np.concatenate([extract_mel(w, features) for w in waveforms])
    centroids, history = kmeans(feats, K, rng, iters)
    return TokenizerSpec("kmeans-on-features", K, features, centroids), history


def tokenize(wav, spec: TokenizerSpec) -> np.ndarray:
    """Nearest-centroid token per frame, values ``1..K``."""
    if spec.kind != "kmeans-on-features" or spec.centroids is None:
        raise ValueError("tokenizer has no trained centroids; tokens must be supplied externally")
    mel = extract_mel(wav, spec.features).astype(np.float64)
    return _sq_dist(mel, np.asarray(spec.centroids)).argmin(1) + 1


# ---------------------------------------------------------------------------
# toy corpus

# (F1, F2) pairs loosely shaped after vowels; unused slots repeat with a shift
_FORMANTS = [(300, 2300), (700, 1200), (500, 1900), (350, 800), (600, 2600), (800, 1600), (450, 1000), (250, 1700)]


@dataclass
class ToyCorpusConfig:
    n_utterances: int = 50
    n_phonemes: int = 8
    n_speakers: int = 2
    phonemes_per_utt: tuple = (28, 36)
    base_duration: tuple = (10, 18)
    speaker_f0: tuple = (120.0, 200.0)
    speaker_rate: tuple = (1.0, 1.3)
    duration_jitter: int = 0
    n_harmonics: int = 20
    amplitude: float = 0.3
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if isinstance(self.features, dict):
            self.features = FeatureConfig(**self.features)
        if len(self.speaker_f0) < self.n_speakers or len(self.speaker_rate) < self.n_speakers:
            raise ValueError("need an f0 and a rate per speaker")

    @property
    def K(self):
        return self.n_phonemes * self.n_speakers

    def phoneme_symbols(self):
        return [f"p{i}" for i in range(self.n_phonemes)]

    def token(self, phoneme: int, speaker: int) -> int:
        return speaker * self.n_phonemes + phoneme + 1


def _template(cfg: ToyCorpusConfig, phoneme: int, speaker: int, n: int, t0: int) -> np.ndarray:
    sr = cfg.features.sample_rate
    f0 = cfg.speaker_f0[speaker]
    f1, f2 = _FORMANTS[phoneme % len(_FORMANTS)]
    shift = 1.0 + 0.15 * (phoneme // len(_FORMANTS))
    t = (t0 + np.arange(n)) / sr
    out = np.zeros(n)
    for k in range(1, cfg.n_harmonics + 1):
        f = k * f0
        if f >= sr / 2:
            break
        amp = np.exp(-0.5 * ((f - f1 * shift) / 120.0) ** 2) + 0.7 * np.exp(-0.5 * ((f - f2 * shift) / 200.0) ** 2)
        out += (amp + 0.02 / k) * np.sin(2 * np.pi * f * t)
    return out / (np.abs(out).max() + 1e-9)


def make_toy_corpus(out_dir, cfg: ToyCorpusConfig = ToyCorpusConfig(), rng: np.random.Generator | None = None):
    """Synthesise utterances whose tokens are exact by construction.

    Every (phoneme, speaker) pair is a stationary harmonic tone with its own
    token ``speaker * n_phonemes + phoneme + 1``. Speakers differ in pitch and
    speaking rate. Returns ``(manifest_path, records)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    hop = cfg.features.hop
    base = rng.integers(cfg.base_duration[0], cfg.base_duration[1] + 1, size=cfg.n_phonemes)
    symbols = cfg.phoneme_symbols()
    records = []
    for u in range(cfg.n_utterances):
        speaker = u % cfg.n_speakers
        n_ph = int(rng.integers(cfg.phonemes_per_utt[0], cfg.phonemes_per_utt[1] + 1))
        phon = rng.integers(0, cfg.n_phonemes, size=n_ph)
        durs = np.maximum(1, np.round(base[phon] * cfg.speaker_rate[speaker]).astype(int))
        if cfg.duration_jitter:
            durs = np.maximum(1, durs + rng.integers(-cfg.duration_jitter, cfg.duration_jitter + 1, size=n_ph))
        pieces, tokens, pos = [], [], 0
        for p, d in zip(phon, durs):
            n = int(d) * hop
            pieces.append(_template(cfg, int(p), speaker, n, pos))
            tokens += [cfg.token(int(p), speaker)] * int(d)
            pos += n
        wav = cfg.amplitude * np.concatenate(pieces)
        utt = f"toy{u:04d}"
        wav_path = out / "wavs" / f"{utt}.wav"
        write_wav(wav_path, wav, cfg.features.sample_rate)
        records.append(UtteranceRecord(utt, str(wav_path), [symbols[i] for i in phon], durs.tolist(), tokens, f"spk{speaker}"))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    (out / "corpus.json").write_text(json.dumps({**asdict(cfg), "K": cfg.K}, indent=2))
    log.info("wrote %d toy utterances to %s", len(records), out)
    return manifest, records


def load_audio(record: UtteranceRecord, features: FeatureConfig) -> np.ndarray:
    wav, sr = read_wav(record.audio_path)
    if sr != features.sample_rate:
        raise ManifestError(f"{record.audio_path}: sample rate {sr} != {features.sample_rate}")
    return wav
