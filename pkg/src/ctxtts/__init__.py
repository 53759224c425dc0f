"""Contextual discrete-diffusion text-to-speech on semantic tokens.

``txt2vec`` maps phonemes to semantic tokens with a context-aware masked
diffusion decoder; ``vec2wav`` turns tokens into audio, taking speaker identity
from a mel-spectrogram prompt. Continuation is editing without right context.
"""

from .diffusion import (
    Codebook,
    DegeneratePosteriorError,
    ScheduleError,
    TransitionSchedule,
    backward_step,
    build_schedule,
    forward_corrupt,
    posterior,
    posterior_mixture,
)
from .features import FeatureConfig, extract_aux, extract_mel, read_wav, write_wav
from .data import (
    ManifestError,
    TokenizerSpec,
    ToyCorpusConfig,
    UtteranceRecord,
    fit_kmeans_tokenizer,
    load_manifest,
    make_toy_corpus,
    tokenize,
    write_manifest,
)
from .txt2vec import Txt2Vec, Txt2VecConfig, infer_continue, infer_edit, segment_for_training, training_loss
from .vec2wav import Discriminators, Vec2Wav, Vec2WavConfig, vocoder_loss
from .pipeline import EditRequest, SecsReport, compute_secs, run_edit

__version__ = "0.1.0"
