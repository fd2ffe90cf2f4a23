"""Detokenizer: token frames -> mel -> waveform, batch and streaming.

Mel prediction is a windowed linear (ridge) regression over the
dequantized latents of a symmetric 7-frame context (radius 3, edges
replicated), so the mel for frame t depends on tokens t-3..t+3 and the
algorithmic latency is 3 frames = 180 ms.  Batch decoding drives the
same per-frame path as streaming, which makes the two mel outputs
bit-identical by construction.

Waveform synthesis runs Griffin-Lim per emitted frame on the causal
window of the last 7 mel frames, locks the realized band energies to
the predicted mel, and crossfades 10 ms between consecutive chunks;
one token frame always yields exactly 960 samples at 16 kHz (1440
after the optional resample to 24 kHz).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .audio import AudioBuffer, resample
from .bitstream import TokenFrame
from .dsp import (DEFAULT_FFT_SIZE, ENCODER_SAMPLE_RATE, FRAMES_PER_TOKEN, HOP_MS,
                  LOG_FLOOR, TOKEN_MS, WINDOW_MS, FbankFrames, SpectralFrames,
                  _cached_filterbank_inverse, FBANK_FMAX, griffin_lim, istft,
                  log_mel_to_magnitude, mel_filterbank, stack_to_tokens, stft)
from .errors import DataError, StreamStateError
from .model import (CONTEXT_RADIUS, CodecModel, DecoderWeights, decoder_input_dim,
                    frame_latents)

LOOKAHEAD_FRAMES = CONTEXT_RADIUS
LOOKAHEAD_MS = LOOKAHEAD_FRAMES * TOKEN_MS  # 180 ms algorithmic latency
CROSSFADE_MS = 10
_GL_WINDOW_FRAMES = 2 * CONTEXT_RADIUS + 1  # mel frames per synthesis window
# Band-gain clamp for the post-Griffin-Lim energy lock: +-12 dB, so
# near-silent bands cannot be amplified into audible noise.
_LOCK_GAIN_MIN = 0.25
_LOCK_GAIN_MAX = 4.0


def _context_feature(latents: Sequence[np.ndarray], index: int, last: int) -> np.ndarray:
    """Feature vector for one frame: 7 edge-clamped latents plus a bias."""
    picks = [latents[min(max(index + off, 0), last)]
             for off in range(-CONTEXT_RADIUS, CONTEXT_RADIUS + 1)]
    return np.concatenate(picks + [np.ones(1)])


def fit_context_regression(latent_seqs: Sequence[np.ndarray],
                           target_seqs: Sequence[np.ndarray],
                           ridge_lambda: float = 0.3,
                           anchor: np.ndarray | None = None) -> np.ndarray:
    """Ridge-fit the windowed mel regressor.

    latent_seqs: per-utterance (N_u, D_lat) rows; target_seqs matching
    (N_u, D_out) rows.  Context windows never cross utterance
    boundaries (edges replicate instead).  With an anchor matrix the
    penalty is on the deviation from it rather than on the weights
    themselves, so directions the corpus does not constrain stay at the
    anchor; that is what keeps a refit on a small corpus from tearing
    up the previous decoder.  Solved in whichever of the primal/dual
    forms is smaller; both give the exact ridge solution.
    """
    if len(latent_seqs) != len(target_seqs) or not latent_seqs:
        raise DataError("need matching, non-empty latent and target sequence lists")
    if ridge_lambda <= 0:
        raise DataError("ridge_lambda must be positive")
    feats = []
    outs = []
    for lat, tgt in zip(latent_seqs, target_seqs):
        lat = np.asarray(lat, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        if lat.ndim != 2 or tgt.ndim != 2 or lat.shape[0] != tgt.shape[0]:
            raise DataError(
                f"latents {lat.shape} and targets {tgt.shape} are not aligned per frame"
            )
        if lat.shape[0] == 0:
            continue
        last = lat.shape[0] - 1
        rows = [lat[i] for i in range(lat.shape[0])]
        feats.extend(_context_feature(rows, i, last) for i in range(lat.shape[0]))
        outs.append(tgt)
    if not feats:
        raise DataError("no frames available to fit the decoder")
    x = np.vstack(feats)
    y = np.vstack(outs)
    n, p = x.shape
    if anchor is not None:
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (p, y.shape[1]):
            raise DataError(
                f"anchor matrix must be ({p}, {y.shape[1]}), got {anchor.shape}"
            )
        y = y - x @ anchor
    # ridge_lambda is dimensionless: the effective penalty scales with the
    # mean feature energy, so one value behaves the same across corpus
    # sizes and feature magnitudes.
    lam = ridge_lambda * float(np.einsum("ij,ij->", x, x)) / p
    lam = max(lam, 1e-12)
    if n <= p:
        gram = x @ x.T
        gram.flat[::n + 1] += lam
        delta = x.T @ np.linalg.solve(gram, y)
    else:
        normal = x.T @ x
        normal.flat[::p + 1] += lam
        delta = np.linalg.solve(normal, x.T @ y)
    return delta if anchor is None else anchor + delta


def refit(model: CodecModel, corpus: Sequence[tuple],
          ridge_lambda: float | None = None) -> CodecModel:
    """Re-train only the decoder weights on (token frames, reference mel) pairs.

    corpus: iterable of (list[TokenFrame], FbankFrames or stacked target
    rows).  Each mel reference must align 1 token : 6 mel rows.  The
    semantic codebook and acoustic stages are untouched, so serialized
    SEMC/AGRV sections stay byte-identical across refits.  The ridge
    penalty anchors at the model's current decoder (fine-tuning
    semantics), so a refit on a narrow corpus specializes the weights
    instead of re-deriving them from scratch.
    """
    lam = model.config.ridge_lambda if ridge_lambda is None else ridge_lambda
    latent_seqs = []
    target_seqs = []
    for frames, reference in corpus:
        if isinstance(reference, FbankFrames):
            targets = stack_to_tokens(reference)
        else:
            targets = np.asarray(reference, dtype=np.float64)
        if targets.ndim != 2 or targets.shape[1] != model.config.latent_dim:
            raise DataError(
                f"decoder targets must be (N, {model.config.latent_dim}) stacked mel rows"
            )
        if len(frames) != targets.shape[0]:
            raise DataError(
                f"{len(frames)} token frames vs {targets.shape[0]} target rows; "
                "references must align 1 token : 6 mel rows"
            )
        if not frames:
            continue
        latent_seqs.append(frame_latents(model, frames))
        target_seqs.append(targets)
    if not latent_seqs:
        raise DataError("refit corpus contains no usable utterances")
    anchor = model.decoder.matrix if model.decoder is not None else None
    matrix = fit_context_regression(latent_seqs, target_seqs, ridge_lambda=lam,
                                    anchor=anchor)
    return model.with_decoder(DecoderWeights(matrix=matrix, context_radius=CONTEXT_RADIUS,
                                             ridge_lambda=lam))


@dataclass
class StreamState:
    """Mutable state of one streaming decode session."""

    pending: deque = field(default_factory=lambda: deque(maxlen=_GL_WINDOW_FRAMES))
    frames_in: int = 0
    frames_out: int = 0
    finished: bool = False


def _emit(state: StreamState, model: CodecModel, weights: DecoderWeights,
          emit_index: int) -> np.ndarray:
    base = state.frames_in - len(state.pending)
    rows = list(state.pending)
    last = state.frames_in - 1

    def fetch(i: int) -> np.ndarray:
        return rows[min(max(i, 0), last) - base]

    picks = [fetch(emit_index + off) for off in range(-CONTEXT_RADIUS, CONTEXT_RADIUS + 1)]
    feat = np.concatenate(picks + [np.ones(1)])
    mel_row = feat @ weights.matrix
    state.frames_out += 1
    return mel_row.reshape(FRAMES_PER_TOKEN, model.config.num_bands)


def stream_push(state: StreamState, model: CodecModel,
                frame: TokenFrame) -> np.ndarray | None:
    """Feed one token frame; returns a (6, num_bands) mel emission or None.

    The first emission (for frame 0) appears with the 4th push; emission
    t depends only on frames <= t + 3.
    """
    if state.finished:
        raise StreamStateError("stream_push after stream_flush")
    weights = model.require_decoder()
    state.pending.append(frame_latents(model, [frame])[0])
    state.frames_in += 1
    if state.frames_in > CONTEXT_RADIUS:
        return _emit(state, model, weights, state.frames_in - CONTEXT_RADIUS - 1)
    return None


def stream_flush(state: StreamState, model: CodecModel) -> list:
    """Emit the final look-ahead frames (right edge replicated) and finish."""
    if state.finished:
        raise StreamStateError("stream already flushed")
    weights = model.require_decoder()
    state.finished = True
    start = max(0, state.frames_in - CONTEXT_RADIUS)
    return [_emit(state, model, weights, e) for e in range(start, state.frames_in)]


class WaveformSynthesizer:
    """Incremental mel -> waveform via per-frame windowed Griffin-Lim.

    Each pushed mel frame is synthesized from the causal window of the
    last 7 frames (left edge replicated) and overlap-added with a 10 ms
    crossfade into the previous chunk.  After phase recovery the window
    is reanalyzed and every band's energy is scaled back to the
    predicted mel (gains clamped to +-12 dB), so the realized spectrum
    tracks the prediction instead of the phase-recovery residue.
    Phases warm-start from the previous window's locked spectrum
    (shifted by one token frame), which keeps consecutive chunks
    coherent; only the newest 60 ms gets a seeded random draw.  The
    final 10 ms of every chunk is withheld until the next push (or
    finish) so the crossfade never revises emitted samples.  Total
    output is exactly 960 samples per frame at 16 kHz.
    """

    def __init__(self, num_bands: int, gl_iterations: int, seed: int):
        self._num_bands = num_bands
        self._iters = gl_iterations
        self._seed = seed
        self._window: deque = deque(maxlen=_GL_WINDOW_FRAMES)
        self._index = 0
        self._tail: np.ndarray | None = None
        self._angles: np.ndarray | None = None
        self._bins = DEFAULT_FFT_SIZE // 2 + 1
        hop = ENCODER_SAMPLE_RATE * HOP_MS // 1000
        self._hop = hop
        self._win_len = ENCODER_SAMPLE_RATE * WINDOW_MS // 1000
        self._chunk = hop * FRAMES_PER_TOKEN  # 960 samples per token frame
        self._fade = hop  # 10 ms crossfade
        ramp = (np.arange(self._fade) + 1.0) / (self._fade + 1.0)
        self._fade_in = ramp
        self._fade_out = 1.0 - ramp
        self._mel_inverse = _cached_filterbank_inverse(
            num_bands, DEFAULT_FFT_SIZE, ENCODER_SAMPLE_RATE, 0.0, FBANK_FMAX)
        bank = mel_filterbank(num_bands, DEFAULT_FFT_SIZE, ENCODER_SAMPLE_RATE,
                              0.0, FBANK_FMAX)
        coverage = bank.sum(axis=0)
        self._bank = bank
        self._bank_norm = bank / np.maximum(coverage, 1e-12)
        self._uncovered = coverage <= 1e-12

    def _initial_phase(self) -> np.ndarray:
        rng = np.random.default_rng((self._seed, self._index))
        fresh = rng.uniform(0.0, 2.0 * np.pi,
                            (_GL_WINDOW_FRAMES * FRAMES_PER_TOKEN, self._bins))
        if self._angles is None:
            return fresh
        return np.vstack([self._angles[FRAMES_PER_TOKEN:], fresh[-FRAMES_PER_TOKEN:]])

    def _lock_band_energies(self, wav: AudioBuffer, mel_log: np.ndarray) -> np.ndarray:
        """Rescale the realized spectrum so band energies match the target.

        Phase recovery honours the lifted FFT-bin magnitudes, not the mel
        bands themselves, and overlap-add smears whatever inconsistency is
        left; both errors grow with spectral detail.  One analysis pass,
        a per-band gain (clamped), and one resynthesis pin the output to
        the predicted mel.  Also refreshes the warm-start phase state.
        """
        spec = stft(wav, fft_size=DEFAULT_FFT_SIZE, hop=self._hop, window=self._win_len)
        realized = np.abs(spec.frames) ** 2 @ self._bank.T
        target = np.maximum(np.exp(mel_log) - LOG_FLOOR, 0.0)
        gain = np.sqrt((target + LOG_FLOOR) / (realized + LOG_FLOOR))
        gain = np.clip(gain, _LOCK_GAIN_MIN, _LOCK_GAIN_MAX)
        bin_gain = gain @ self._bank_norm
        bin_gain[:, self._uncovered] = 1.0
        locked = spec.frames * bin_gain
        self._angles = np.angle(locked)
        out = istft(SpectralFrames(locked, fft_size=spec.fft_size, hop=spec.hop,
                                   window=spec.window, sample_rate=spec.sample_rate))
        return out.samples

    def push(self, mel_frame: np.ndarray) -> np.ndarray:
        mel_frame = np.asarray(mel_frame, dtype=np.float64)
        if mel_frame.shape != (FRAMES_PER_TOKEN, self._num_bands):
            raise DataError(
                f"expected a ({FRAMES_PER_TOKEN}, {self._num_bands}) mel emission, "
                f"got {mel_frame.shape}"
            )
        self._window.append(mel_frame)
        rows = list(self._window)
        while len(rows) < _GL_WINDOW_FRAMES:
            rows.insert(0, rows[0])
        mel = np.vstack(rows)
        raw = griffin_lim(log_mel_to_magnitude(mel), iterations=self._iters,
                          seed=(self._seed, self._index),
                          initial_phase=self._initial_phase(),
                          mel_inverse=self._mel_inverse)
        wav = self._lock_band_energies(raw, mel)
        if self._index == 0:
            seg = wav[-self._chunk:]
            out = seg[:-self._fade]
        else:
            seg = wav[-(self._chunk + self._fade):]
            blended = self._tail * self._fade_out + seg[:self._fade] * self._fade_in
            out = np.concatenate([blended, seg[self._fade:-self._fade]])
        self._tail = seg[-self._fade:]
        self._index += 1
        return out

    def finish(self) -> np.ndarray:
        tail = self._tail if self._tail is not None else np.zeros(0)
        self._tail = None
        return tail


def decode_mel(model: CodecModel, frames: Sequence[TokenFrame]) -> np.ndarray:
    """Batch mel decode: (6 * num_frames, num_bands) log-mel matrix.

    Implemented by streaming every frame through the push/flush path, so
    the result is bit-identical to a live stream of the same tokens.
    """
    state = StreamState()
    emissions = []
    for frame in frames:
        mel = stream_push(state, model, frame)
        if mel is not None:
            emissions.append(mel)
    emissions.extend(stream_flush(state, model))
    if not emissions:
        return np.zeros((0, model.config.num_bands))
    return np.vstack(emissions)


def synthesize(model: CodecModel, mel_emissions: Sequence[np.ndarray]) -> np.ndarray:
    """Run the chunked Griffin-Lim policy over per-frame mel emissions."""
    synth = WaveformSynthesizer(model.config.num_bands, model.config.gl_iterations,
                                model.config.seed)
    chunks = [synth.push(m) for m in mel_emissions]
    chunks.append(synth.finish())
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def decode_batch(model: CodecModel, frames: Sequence[TokenFrame]) -> AudioBuffer:
    """Tokens -> waveform at the configured output rate.

    Exactly 960 samples per token at 16 kHz; 1440 after resampling to
    24 kHz.  Values are clipped to [-1, 1].
    """
    state = StreamState()
    emissions = []
    for frame in frames:
        mel = stream_push(state, model, frame)
        if mel is not None:
            emissions.append(mel)
    emissions.extend(stream_flush(state, model))
    wav = synthesize(model, emissions)
    audio = AudioBuffer(np.clip(wav, -1.0, 1.0), ENCODER_SAMPLE_RATE)
    if model.config.output_rate != ENCODER_SAMPLE_RATE:
        audio = resample(audio, model.config.output_rate)
        audio = AudioBuffer(np.clip(audio.samples, -1.0, 1.0), audio.sample_rate)
    return audio
