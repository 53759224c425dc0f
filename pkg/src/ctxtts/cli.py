"""Command-line entry point.

Every subcommand takes ``--config`` (a JSON file), ``--seed`` and
``--checkpoint`` (an experiment directory holding ``txt2vec.pt`` and
``vec2wav.pt``). Failures exit with status 1 and print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .data import ToyCorpusConfig, TokenizerSpec, load_manifest, make_toy_corpus
from .features import FeatureConfig, extract_mel, write_wav
from .txt2vec import Txt2VecConfig
from .vec2wav import Vec2WavConfig

log = logging.getLogger("ctxtts")

CONFIG_SECTIONS = {"preset", "features", "txt2vec", "vec2wav", "tokenizer", "schedule", "toy_corpus", "train"}
TRAIN_KEYS = {"txt2vec_steps", "vec2wav_steps", "batch_size", "vocoder_batch_size"}
TRAIN_DEFAULTS = {"txt2vec_steps": 1000, "vec2wav_steps": 1500, "batch_size": 8, "vocoder_batch_size": 4}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"status": "error", "error": kind, "message": message}), file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("invalid_config", f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError("invalid_config", f"{path}: top level must be an object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise CliError("invalid_config", f"{path}: unknown sections {sorted(unknown)}")
    if set(cfg.get("train", {})) - TRAIN_KEYS:
        raise CliError("invalid_config", f"{path}: unknown train keys {sorted(set(cfg['train']) - TRAIN_KEYS)}")
    if cfg.get("preset", "toy") not in ("toy", "full"):
        raise CliError("invalid_config", f"{path}: preset must be 'toy' or 'full'")
    return cfg


def _build(kind, factory, section: dict, what: str):
    try:
        return factory(**section)
    except (TypeError, ValueError) as exc:
        raise CliError("invalid_config", f"{what}: {exc}") from exc


def _features(cfg) -> FeatureConfig:
    return _build("features", FeatureConfig, cfg.get("features", {}), "features")


def _txt2vec_config(cfg, records) -> Txt2VecConfig:
    section = dict(cfg.get("txt2vec", {}))
    for key in ("T", "a_T", "g_T"):
        if key in cfg.get("schedule", {}):
            section[key] = cfg["schedule"][key]
    section.setdefault("K", max(max(r.tokens) for r in records))
    section.setdefault("phonemes", sorted({p for r in records for p in r.phonemes}))
    if cfg.get("preset", "toy") == "toy":
        return _build("txt2vec", lambda **kw: pipeline.toy_txt2vec_config(**kw), section, "txt2vec")
    return _build("txt2vec", Txt2VecConfig, section, "txt2vec")


def _vec2wav_config(cfg, records) -> Vec2WavConfig:
    section = dict(cfg.get("vec2wav", {}))
    section.setdefault("K", max(max(r.tokens) for r in records))
    section["features"] = _features(cfg)
    if cfg.get("preset", "toy") == "toy":
        return _build("vec2wav", lambda **kw: pipeline.toy_vec2wav_config(**kw), section, "vec2wav")
    return _build("vec2wav", Vec2WavConfig, section, "vec2wav")


def _train(cfg, key):
    return cfg.get("train", {}).get(key, TRAIN_DEFAULTS[key])


# ---------------------------------------------------------------------------
# helpers


def _records(args, cfg):
    if not args.manifest:
        raise CliError("usage", "--manifest is required")
    try:
        return load_manifest(args.manifest, _features(cfg))
    except ValueError as exc:
        raise CliError("invalid_manifest", str(exc)) from exc


def _checkpoint_dir(args) -> Path:
    if not args.checkpoint:
        raise CliError("usage", "--checkpoint is required")
    return Path(args.checkpoint)


def _load_models(args):
    d = _checkpoint_dir(args)
    try:
        t2v, sched = pipeline.load_txt2vec(d / "txt2vec.pt")
        v2w = pipeline.load_vec2wav(d / "vec2wav.pt")
        pipeline.check_compatible(t2v, v2w)
    except FileNotFoundError as exc:
        raise CliError("missing_checkpoint", str(exc)) from exc
    except pipeline.CheckpointError as exc:
        raise CliError("checkpoint_mismatch", str(exc)) from exc
    return t2v, sched, v2w


def _tokenizer(cfg):
    section = cfg.get("tokenizer")
    if not section:
        return None
    try:
        return TokenizerSpec.from_dict(section)
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("invalid_config", f"tokenizer: {exc}") from exc


def parse_context(spec: str, by_id: dict, features: FeatureConfig) -> pipeline.Context:
    """``UTT`` or ``UTT:START:END`` (phoneme indices, END exclusive) -> Context."""
    parts = spec.split(":")
    if len(parts) not in (1, 3):
        raise CliError("usage", f"bad context {spec!r}; expected UTT or UTT:START:END")
    rec = by_id.get(parts[0])
    if rec is None:
        raise CliError("usage", f"unknown utterance {parts[0]!r}")
    if len(parts) == 3:
        try:
            start, end = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise CliError("usage", f"bad phoneme range in {spec!r}") from exc
    else:
        start, end = 0, len(rec.phonemes)
    if not 0 <= start < end <= len(rec.phonemes):
        raise CliError("usage", f"phoneme range {start}:{end} outside {rec.utt_id} ({len(rec.phonemes)} phonemes)")
    f0, f1 = rec.phoneme_span(start, end)
    wav = pipeline.load_wav_checked(rec.audio_path, features)
    return pipeline.Context(
        audio=wav[f0 * features.hop : f1 * features.hop],
        phonemes=rec.phonemes[start:end],
        durations=rec.durations[start:end],
        tokens=rec.tokens[f0:f1],
    )


def _write_tokens(out: str, tokens) -> None:
    Path(out + ".tokens").write_text(" ".join(str(int(t)) for t in tokens) + "\n")


def _ok(**payload) -> int:
    print(json.dumps({"status": "ok", **payload}))
    return 0


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_toy_corpus(args, cfg):
    if not args.out:
        raise CliError("usage", "--out is required")
    section = dict(cfg.get("toy_corpus", {}))
    section.setdefault("features", _features(cfg))
    toy = _build("toy_corpus", ToyCorpusConfig, section, "toy_corpus")
    (rng, _), = pipeline.rng_streams(args.seed)
    manifest, records = make_toy_corpus(args.out, toy, rng)
    return _ok(manifest=str(manifest), utterances=len(records), K=toy.K)


def cmd_train_txt2vec(args, cfg):
    records = _records(args, cfg)
    tcfg = _txt2vec_config(cfg, records)
    d = _checkpoint_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    steps = args.steps if args.steps is not None else _train(cfg, "txt2vec_steps")
    model, sched, history = pipeline.train_txt2vec(records, tcfg, steps, _train(cfg, "batch_size"), args.seed)
    pipeline.save_txt2vec(d / "txt2vec.pt", model, sched, {"seed": args.seed, "steps": steps})
    (d / "txt2vec_history.jsonl").write_text("".join(json.dumps(h) + "\n" for h in history))
    return _ok(checkpoint=str(d / "txt2vec.pt"), steps=steps, final_loss=history[-1]["total"] if history else None)


def cmd_train_vec2wav(args, cfg):
    records = _records(args, cfg)
    vcfg = _vec2wav_config(cfg, records)
    d = _checkpoint_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    steps = args.steps if args.steps is not None else _train(cfg, "vec2wav_steps")
    model, _, history = pipeline.train_vec2wav(records, vcfg, steps, _train(cfg, "vocoder_batch_size"), args.seed)
    pipeline.save_vec2wav(d / "vec2wav.pt", model, {"seed": args.seed, "steps": steps})
    (d / "vec2wav_history.jsonl").write_text("".join(json.dumps(h) + "\n" for h in history))
    return _ok(checkpoint=str(d / "vec2wav.pt"), steps=steps, final_mel=history[-1]["mel"] if history else None)


def cmd_resynth(args, cfg):
    """Vocode an utterance's own tokens, prompted by ``--context-a`` (default: the utterance itself)."""
    records = _records(args, cfg)
    by_id = {r.utt_id: r for r in records}
    if not args.utt or not args.out:
        raise CliError("usage", "--utt and --out are required")
    _, _, v2w = _load_models(args)
    feats = v2w.cfg.features
    target = parse_context(args.utt, by_id, feats)
    prompt = parse_context(args.context_a, by_id, feats) if args.context_a else target
    wav = v2w.vocode(target.tokens, extract_mel(prompt.audio, feats))
    write_wav(args.out, wav, feats.sample_rate)
    _write_tokens(args.out, target.tokens)
    return _ok(out=args.out, frames=len(target.tokens))


def _generate(args, cfg, allow_b: bool):
    records = _records(args, cfg)
    by_id = {r.utt_id: r for r in records}
    if not args.context_a or args.text is None or not args.out:
        raise CliError("usage", "--context-a, --text and --out are required")
    t2v, sched, v2w = _load_models(args)
    feats = v2w.cfg.features
    ctx_a = parse_context(args.context_a, by_id, feats)
    ctx_b = parse_context(args.context_b, by_id, feats) if allow_b and args.context_b else None
    target = args.text.split()
    if not target:
        raise CliError("usage", "--text must name at least one phoneme")
    req = pipeline.EditRequest(ctx_a, target, ctx_b, args.out, args.seed)
    try:
        result = pipeline.run_edit(req, t2v, sched, v2w, _tokenizer(cfg))
    except KeyError as exc:
        raise CliError("unknown_phoneme", str(exc)) from exc
    _write_tokens(args.out, result.tokens)
    return _ok(out=args.out, frames=len(result.tokens), region=list(result.region),
               mode="continue" if req.is_continuation else "edit")


def cmd_continue(args, cfg):
    return _generate(args, cfg, allow_b=False)


def cmd_edit(args, cfg):
    return _generate(args, cfg, allow_b=True)


def cmd_eval_secs(args, cfg):
    if not args.reference or not args.generated:
        raise CliError("usage", "--reference and --generated are required")
    if len(args.reference) != len(args.generated):
        raise CliError("usage", "--reference and --generated need the same number of files")
    feats = _features(cfg)
    try:
        refs = [pipeline.load_wav_checked(p, feats) for p in args.reference]
        gens = [pipeline.load_wav_checked(p, feats) for p in args.generated]
    except (OSError, EOFError, ValueError) as exc:
        raise CliError("bad_audio", str(exc)) from exc
    names = [f"{r}|{g}" for r, g in zip(args.reference, args.generated)]
    try:
        report = pipeline.compute_secs(refs, gens, pipeline.MelStatsEmbedder(feats), names)
    except RuntimeError as exc:
        raise CliError("embedder_failure", str(exc)) from exc
    if args.out:
        Path(args.out).write_text(report.to_jsonl())
    return _ok(mean=report.mean, n=len(report.similarities), embedder=report.embedder, out=args.out)


COMMANDS = {
    "train-txt2vec": cmd_train_txt2vec,
    "train-vec2wav": cmd_train_vec2wav,
    "resynth": cmd_resynth,
    "continue": cmd_continue,
    "edit": cmd_edit,
    "eval-secs": cmd_eval_secs,
    "make-toy-corpus": cmd_make_toy_corpus,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxtts", description="Contextual discrete-diffusion TTS on semantic tokens.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
        if name.startswith("train"):
            p.add_argument("--steps", type=int)
        if name in ("continue", "edit", "resynth"):
            p.add_argument("--context-a")
        if name in ("continue", "edit"):
            p.add_argument("--text", help="space-separated target phonemes")
        if name == "edit":
            p.add_argument("--context-b")
        if name == "resynth":
            p.add_argument("--utt", help="UTT or UTT:START:END to resynthesise")
        if name == "eval-secs":
            p.add_argument("--reference", nargs="+")
            p.add_argument("--generated", nargs="+")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
