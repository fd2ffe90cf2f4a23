"""Operator command line: corpus ingestion, three-stage training,
encode/decode, inspection, and evaluation.

Exit codes: 0 success, 2 usage, 3 data error, 4 file-format error.
Every command starts by printing its fully resolved configuration as a
one-line JSON object, so runs are reproducible from the log alone.
Commands never mutate their input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agrvq import STAGE_INDEX_SPAN, utilization_report
from .audio import AudioBuffer, read_wav, resample, slice_seconds, write_wav
from .bitstream import bitrate_kbps, pack, unpack
from .decoder import (LOOKAHEAD_FRAMES, LOOKAHEAD_MS, StreamState, WaveformSynthesizer,
                      decode_batch, refit, stream_flush, stream_push)
from .dsp import ENCODER_SAMPLE_RATE
from .errors import DataError, FormatError
from .metrics import evaluate_codec, mr_mel
from .model import (MODEL_MAGIC, CodecConfig, CodecModel, analyze, load_model,
                    save_model, section_hashes, serialize_model, tokenize, train_encoder)

MAX_INPUT_SECONDS = 30.0  # longer inputs are processed in slices
_AQC_MAGIC = b"AQC1"


def _print_config(command: str, resolved: dict) -> None:
    payload = {"command": command, **resolved}
    print("config: " + json.dumps(payload, sort_keys=True, separators=(", ", ": ")))


# --- corpus ingestion ------------------------------------------------------

def scan_corpus(root: Path) -> list[Path]:
    """All .wav files under root, ordered by relative POSIX path."""
    if not root.is_dir():
        raise DataError(f"corpus directory not found: {root}")
    paths = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav"]
    paths.sort(key=lambda p: p.relative_to(root).as_posix())
    if not paths:
        raise DataError(f"no .wav files under {root}")
    return paths


def _load_sliced(path: Path) -> list[AudioBuffer]:
    audio = resample(read_wav(path), ENCODER_SAMPLE_RATE)
    if audio.duration > MAX_INPUT_SECONDS:
        pieces = slice_seconds(audio, MAX_INPUT_SECONDS)
        print(f"notice: {path.name} is {audio.duration:.1f} s; "
              f"processing in {len(pieces)} slices of <= {MAX_INPUT_SECONDS:.0f} s")
        return pieces
    return [audio]


def load_corpus(root: Path) -> tuple[list[AudioBuffer], str]:
    """Read every WAV under root (resampled, 30 s slices) plus a fingerprint.

    Unreadable files abort the run with one listed line per file; partial
    corpora would silently change what a fingerprint names.
    """
    paths = scan_corpus(root)
    digest = hashlib.sha256()
    utterances: list[AudioBuffer] = []
    failures: list[str] = []
    for path in paths:
        rel = path.relative_to(root).as_posix()
        try:
            raw = path.read_bytes()
            pieces = _load_sliced(path)
        except (DataError, FormatError, OSError, ValueError) as exc:
            failures.append(f"  {rel}: {exc}")
            continue
        digest.update(rel.encode())
        digest.update(b"\x00")
        digest.update(raw)
        utterances.extend(pieces)
    if failures:
        raise DataError("unreadable corpus files:\n" + "\n".join(failures))
    fingerprint = f"{root.name}:{digest.hexdigest()[:12]}:{len(paths)}files"
    print(f"corpus: {root} files={len(paths)} utterances={len(utterances)} "
          f"fingerprint={fingerprint}")
    return utterances, fingerprint


def _refit_pairs(model: CodecModel, utterances: list[AudioBuffer], use: int) -> list[tuple]:
    pairs = []
    for utt in utterances:
        frames = tokenize(model, utt, use_stages=use)
        mel, _ = analyze(model.config, utt)
        pairs.append((frames, mel))
    return pairs


def _eval_mr_mel(model: CodecModel, utterances: list[AudioBuffer], use: int) -> float:
    scores = []
    for utt in utterances:
        decoded = decode_batch(model, tokenize(model, utt, use_stages=use))
        reference = resample(utt, decoded.sample_rate)
        n = min(len(reference), len(decoded))
        scores.append(mr_mel(AudioBuffer(reference.samples[:n], decoded.sample_rate),
                             AudioBuffer(decoded.samples[:n], decoded.sample_rate)))
    return float(np.mean(scores))


def _report_refit(label: str, before: float, after: float) -> None:
    print(f"{label} mr_mel before={before:.6f} after={after:.6f} "
          f"improved={after <= before}")


# --- commands --------------------------------------------------------------

def cmd_train_stage1(args) -> int:
    config = CodecConfig(
        output_rate=args.output_rate,
        num_bands=args.num_bands,
        k_sem=args.k_sem,
        num_stages=args.num_stages,
        reduced_dim=args.reduced_dim,
        use_stages=args.num_stages if args.use_stages is None else args.use_stages,
        ridge_lambda=args.ridge_lambda,
        gl_iterations=args.gl_iterations,
        seed=args.seed,
    )
    _print_config("train-stage1", {"corpus": str(args.corpus), "output": str(args.output),
                                   **config.to_dict()})
    utterances, fingerprint = load_corpus(args.corpus)
    model = train_encoder(config, utterances, trained_on=fingerprint)
    save_model(model, args.output)

    log = model.semantic.distortion_log
    print(f"semantic k-means: iterations={len(log)} "
          f"distortion first={log[0]:.6g} last={log[-1]:.6g} "
          f"non_increasing={all(b <= a + 1e-9 for a, b in zip(log, log[1:]))}")
    sem_idx = []
    ac_idx = []
    for utt in utterances:
        frames = tokenize(model, utt)
        sem_idx.extend(f.semantic for f in frames)
        ac_idx.extend(f.acoustic for f in frames)
    counts = np.bincount(np.asarray(sem_idx), minlength=config.k_sem)
    print(f"semantic utilization: used={int((counts > 0).sum())}/{config.k_sem}")
    if config.num_stages and ac_idx:
        report = utilization_report(model.acoustic, np.asarray(ac_idx))
        for s, stage in enumerate(report.stages, start=1):
            print(f"acoustic stage {s}: perplexity_a={stage.perplexity_a:.3f} "
                  f"perplexity_b={stage.perplexity_b:.3f} "
                  f"combined={stage.perplexity_combined:.3f}")
    print(f"wrote {args.output}")
    return 0


def _train_decoder_stage(args, command: str,
                         need_decoder: bool = False) -> tuple[CodecModel, CodecModel, int]:
    """Shared stage-2/3 mechanics: load, maybe re-pin use_stages, refit."""
    model = load_model(args.model)
    if need_decoder:
        model.require_decoder()
    use = model.config.use_stages if args.use_stages is None else args.use_stages
    if use > model.config.num_stages:
        raise DataError(
            f"--use-stages {use} exceeds the model's {model.config.num_stages} "
            "trained acoustic stages"
        )
    lam = model.config.ridge_lambda if args.ridge_lambda is None else args.ridge_lambda
    _print_config(command, {"corpus": str(args.corpus), "model": str(args.model),
                            "output": str(args.output), "use_stages": use,
                            "ridge_lambda": lam, **model.config.to_dict()})
    utterances, _ = load_corpus(args.corpus)
    if use != model.config.use_stages or lam != model.config.ridge_lambda:
        config = dataclasses.replace(model.config, use_stages=use, ridge_lambda=lam)
        model = dataclasses.replace(model, config=config)
    refitted = refit(model, _refit_pairs(model, utterances, use), ridge_lambda=lam)
    return model, refitted, use


def _print_freeze_check(before: CodecModel, after_path: Path) -> None:
    old = section_hashes(serialize_model(before))
    new = section_hashes(after_path.read_bytes())
    frozen = old["SEMC"] == new["SEMC"] and old["AGRV"] == new["AGRV"]
    print(f"encoder sections frozen: {frozen} (SEMC {new['SEMC'][:12]}, "
          f"AGRV {new['AGRV'][:12]})")


def cmd_train_stage2(args) -> int:
    model, refitted, use = _train_decoder_stage(args, "train-stage2")
    save_model(refitted, args.output)
    _print_freeze_check(model, args.output)
    if args.eval is not None:
        held_out, _ = load_corpus(args.eval)
        _report_refit("held-out", _eval_mr_mel(model, held_out, use),
                      _eval_mr_mel(refitted, held_out, use))
    print(f"wrote {args.output}")
    return 0


def cmd_train_stage3(args) -> int:
    model, refitted, use = _train_decoder_stage(args, "train-stage3", need_decoder=True)
    save_model(refitted, args.output)
    _print_freeze_check(model, args.output)
    if args.eval_target is not None:
        target, _ = load_corpus(args.eval_target)
        _report_refit("target-speaker", _eval_mr_mel(model, target, use),
                      _eval_mr_mel(refitted, target, use))
    if args.eval_other is not None:
        other, _ = load_corpus(args.eval_other)
        _report_refit("non-target", _eval_mr_mel(model, other, use),
                      _eval_mr_mel(refitted, other, use))
    print(f"wrote {args.output}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.model)
    use = model.config.use_stages if args.stages is None else args.stages
    _print_config("encode", {"input": str(args.input), "model": str(args.model),
                             "output": str(args.output), "use_stages": use})
    audio = read_wav(args.input)
    if audio.sample_rate != model.config.sample_rate:
        raise DataError(
            f"{args.input} is {audio.sample_rate} Hz but the tokenizer expects "
            f"{model.config.sample_rate} Hz; resample the file first"
        )
    frames = []
    for piece in _load_sliced(Path(args.input)):
        frames.extend(tokenize(model, piece, use_stages=use))
    blob = pack(frames, k_sem=model.config.k_sem, sample_rate=model.config.sample_rate)
    Path(args.output).write_bytes(blob)
    header, _ = unpack(blob)
    print(f"frames: {header.num_frames}")
    print(f"duration: {header.duration:.2f} s")
    print(f"bitrate: {bitrate_kbps(header):.2f} kbps")
    print(f"wrote {args.output} ({len(blob)} bytes)")
    return 0


def cmd_decode(args) -> int:
    model = load_model(args.model)
    _print_config("decode", {"input": str(args.input), "model": str(args.model),
                             "output": str(args.output), "streaming": bool(args.streaming)})
    header, frames = unpack(Path(args.input).read_bytes())
    if header.sample_rate != model.config.sample_rate:
        raise DataError(
            f"stream was tokenized at {header.sample_rate} Hz but the model expects "
            f"{model.config.sample_rate} Hz; re-encode with a matching model"
        )
    if args.streaming:
        state = StreamState()
        synth = WaveformSynthesizer(model.config.num_bands, model.config.gl_iterations,
                                    model.config.seed)
        chunks = []
        first_emit_push = None
        for i, frame in enumerate(frames):
            mel = stream_push(state, model, frame)
            if mel is not None:
                if first_emit_push is None:
                    first_emit_push = i + 1
                chunks.append(synth.push(mel))
        for mel in stream_flush(state, model):
            chunks.append(synth.push(mel))
        chunks.append(synth.finish())
        wav = np.concatenate(chunks) if chunks else np.zeros(0)
        wav = np.clip(wav, -1.0, 1.0)
        audio = AudioBuffer(wav, ENCODER_SAMPLE_RATE)
        if model.config.output_rate != audio.sample_rate:
            audio = resample(audio, model.config.output_rate)
            audio = AudioBuffer(np.clip(audio.samples, -1.0, 1.0), audio.sample_rate)
        print(f"algorithmic latency: {LOOKAHEAD_MS} ms "
              f"({LOOKAHEAD_FRAMES}-frame look-ahead); first emission after push "
              f"{first_emit_push if first_emit_push is not None else 'flush'}")
    else:
        audio = decode_batch(model, frames)
    write_wav(args.output, audio)
    print(f"decoded {header.num_frames} frames -> {len(audio)} samples "
          f"at {audio.sample_rate} Hz")
    print(f"wrote {args.output}")
    return 0


def _inspect_stream(blob: bytes) -> None:
    header, frames = unpack(blob)
    print("type: token stream (.aqc)")
    print(f"sample_rate: {header.sample_rate}")
    print(f"frame_micros: {header.frame_micros}")
    print(f"sem_bits: {header.sem_bits}")
    print(f"num_acoustic: {header.num_acoustic}")
    print(f"ac_bits: {header.ac_bits}")
    print(f"num_frames: {header.num_frames}")
    print(f"duration: {header.duration:.2f} s")
    print(f"bitrate: {bitrate_kbps(header):.2f} kbps")
    if frames:
        sem = {f.semantic for f in frames}
        print(f"semantic indices used: {len(sem)}/{1 << header.sem_bits}")
        for s in range(header.num_acoustic):
            used = {f.acoustic[s] for f in frames}
            print(f"acoustic stage {s + 1} indices used: {len(used)}/{STAGE_INDEX_SPAN}")


def _inspect_model(blob: bytes) -> None:
    from .model import deserialize_model
    model = deserialize_model(blob)
    print("type: model container (.aqm)")
    print("config: " + json.dumps(model.config.to_dict(), sort_keys=True,
                                  separators=(", ", ": ")))
    print(f"semantic: {model.semantic.size} x {model.semantic.dim} "
          f"trained_on={model.semantic.trained_on or '(unset)'}")
    print(f"acoustic stages: {model.acoustic.num_stages} "
          f"(reduced_dim={model.acoustic.reduced_dim})")
    print(f"decoder: {'present' if model.decoder is not None else 'absent (encode-only)'}")
    for tag, digest in section_hashes(blob).items():
        print(f"section {tag}: sha256={digest}")


def cmd_inspect(args) -> int:
    _print_config("inspect", {"input": str(args.input)})
    blob = Path(args.input).read_bytes()
    if blob[:4] == _AQC_MAGIC:
        _inspect_stream(blob)
    elif blob[:4] == MODEL_MAGIC:
        _inspect_model(blob)
    else:
        raise FormatError(
            f"unrecognized magic {blob[:4]!r}; expected {_AQC_MAGIC!r} or {MODEL_MAGIC!r}"
        )
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    use = model.config.use_stages if args.stages is None else args.stages
    _print_config("eval", {"corpus": str(args.corpus), "model": str(args.model),
                           "use_stages": use, "json": bool(args.json)})
    utterances, _ = load_corpus(args.corpus)
    report = evaluate_codec(model, utterances, use_stages=use)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        print(report.to_text())
    return 0


# --- parser ----------------------------------------------------------------

def _add_model_arg(sub, required: bool = True) -> None:
    sub.add_argument("-m", "--model", type=Path, required=required,
                     help="trained .aqm model file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aqcodec",
        description="Low-bitrate speech token codec: train, encode, decode, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s1 = sub.add_parser("train-stage1", help="train semantic + acoustic codebooks")
    s1.add_argument("corpus", type=Path, help="directory of training WAV files")
    s1.add_argument("-o", "--output", type=Path, required=True, help="output .aqm path")
    s1.add_argument("--k-sem", type=int, default=256, help="semantic codebook size")
    s1.add_argument("--num-stages", type=int, default=3, help="acoustic stages to train (0-3)")
    s1.add_argument("--use-stages", type=int, default=None,
                    help="default stages used at encode time (default: all trained)")
    s1.add_argument("--reduced-dim", type=int, default=8, help="per-branch projection width")
    s1.add_argument("--num-bands", type=int, default=80, help="mel bands per 10 ms frame")
    s1.add_argument("--output-rate", type=int, default=16000, choices=(16000, 24000),
                    help="decoder output sample rate")
    s1.add_argument("--ridge-lambda", type=float, default=0.3)
    s1.add_argument("--gl-iterations", type=int, default=32)
    s1.add_argument("--seed", type=int, default=0)
    s1.set_defaults(func=cmd_train_stage1)

    s2 = sub.add_parser("train-stage2", help="refit the decoder, encoder frozen")
    s2.add_argument("corpus", type=Path, help="high-quality decoder training corpus")
    _add_model_arg(s2)
    s2.add_argument("-o", "--output", type=Path, required=True)
    s2.add_argument("--use-stages", type=int, default=None,
                    help="acoustic depth the decoder is fit for")
    s2.add_argument("--ridge-lambda", type=float, default=None)
    s2.add_argument("--eval", type=Path, default=None,
                    help="held-out corpus for a before/after MR-MEL report")
    s2.set_defaults(func=cmd_train_stage2)

    s3 = sub.add_parser("train-stage3", help="specialize the decoder on one speaker")
    s3.add_argument("corpus", type=Path, help="target-speaker corpus")
    _add_model_arg(s3)
    s3.add_argument("-o", "--output", type=Path, required=True)
    s3.add_argument("--use-stages", type=int, default=None)
    s3.add_argument("--ridge-lambda", type=float, default=None)
    s3.add_argument("--eval-target", type=Path, default=None,
                    help="held-out target-speaker corpus for before/after MR-MEL")
    s3.add_argument("--eval-other", type=Path, default=None,
                    help="non-target corpus; specialization may degrade it")
    s3.set_defaults(func=cmd_train_stage3)

    enc = sub.add_parser("encode", help="WAV -> .aqc token stream")
    enc.add_argument("input", type=Path, help="16 kHz mono/stereo WAV")
    _add_model_arg(enc)
    enc.add_argument("-o", "--output", type=Path, required=True)
    enc.add_argument("--stages", type=int, default=None,
                     help="acoustic stages to emit (default: model config)")
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help=".aqc token stream -> WAV")
    dec.add_argument("input", type=Path)
    _add_model_arg(dec)
    dec.add_argument("-o", "--output", type=Path, required=True)
    dec.add_argument("--streaming", action="store_true",
                     help="drive the incremental decoder and report latency")
    dec.set_defaults(func=cmd_decode)

    ins = sub.add_parser("inspect", help="dump header/metadata of a .aqc or .aqm file")
    ins.add_argument("input", type=Path)
    ins.set_defaults(func=cmd_inspect)

    ev = sub.add_parser("eval", help="encode+decode a corpus and report metrics")
    ev.add_argument("corpus", type=Path)
    _add_model_arg(ev)
    ev.add_argument("--stages", type=int, default=None)
    ev.add_argument("--json", action="store_true", help="machine-readable report")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
