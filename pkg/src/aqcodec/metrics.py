"""Model-free quality metrics: STOI, gross pitch error, multi-resolution
spectral distances, and whole-codec evaluation.

STOI follows the published short-time objective intelligibility recipe
(10 kHz, silent-frame removal, 15 one-third-octave bands from 150 Hz,
384 ms segments, clipped normalized correlation).  It tracks the
standard implementation closely enough for trend work but absolute
parity with any particular scorer is not claimed.  Scores outside any
external model (PESQ, WER, speaker/emotion similarity) are reported as
unavailable rather than approximated.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import agrvq as agrvq_mod
from .audio import AudioBuffer, resample
from .bitstream import bitrate_kbps
from .decoder import decode_batch
from .dsp import _hann_window, mel_filterbank, stft
from .errors import DataError
from .model import CodecModel, stream_header, tokenize
from .pitch import estimate_pitch

# STOI constants (standard values)
_STOI_RATE = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_FFT = 512
_STOI_BANDS = 15
_STOI_LOWEST_CF = 150.0
_STOI_SEG = 30          # 384 ms of 12.8 ms hops
_STOI_DYN_RANGE = 40.0  # silent-frame threshold, dB below the loudest frame
_STOI_BETA_CLIP = 10.0 ** (15.0 / 20.0)  # -15 dB SDR lower bound

MR_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
MR_LOG_EPS = 1e-7
_MR_MEL_BANDS = 80
UNAVAILABLE_METRICS = ("pesq", "wer", "speaker_similarity", "emotion_similarity")


def _as_pair(reference: AudioBuffer, degraded: AudioBuffer) -> tuple[np.ndarray, np.ndarray, int]:
    if reference.sample_rate != degraded.sample_rate:
        raise DataError(
            f"sample rates differ ({reference.sample_rate} vs {degraded.sample_rate}); "
            "resample one side first"
        )
    n = min(len(reference), len(degraded))
    if n == 0:
        raise DataError("cannot compare empty signals")
    return reference.samples[:n], degraded.samples[:n], reference.sample_rate


@functools.lru_cache(maxsize=1)
def _third_octave_bands() -> np.ndarray:
    """(15, 257) binary band matrix over the 10 kHz half-spectrum."""
    freqs = np.fft.rfftfreq(_STOI_FFT, d=1.0 / _STOI_RATE)
    centers = _STOI_LOWEST_CF * 2.0 ** (np.arange(_STOI_BANDS) / 3.0)
    bands = np.zeros((_STOI_BANDS, len(freqs)))
    for k, cf in enumerate(centers):
        lo, hi = cf / 2 ** (1 / 6), cf * 2 ** (1 / 6)
        bands[k] = (freqs >= lo) & (freqs < hi)
        if not bands[k].any():
            bands[k, int(np.argmin(np.abs(freqs - cf)))] = 1.0
    bands.setflags(write=False)
    return bands


def _remove_silent_frames(ref: np.ndarray, deg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames whose reference energy sits >40 dB below the loudest frame."""
    w = _hann_window(_STOI_FRAME)
    if len(ref) < _STOI_FRAME:
        raise DataError("signal shorter than one analysis frame")
    ref_frames = sliding_window_view(ref, _STOI_FRAME)[::_STOI_HOP] * w
    deg_frames = sliding_window_view(deg, _STOI_FRAME)[::_STOI_HOP] * w
    energy_db = 20.0 * np.log10(np.linalg.norm(ref_frames, axis=1) + 1e-12)
    keep = energy_db > energy_db.max() - _STOI_DYN_RANGE
    ref_frames, deg_frames = ref_frames[keep], deg_frames[keep]

    def rebuild(frames: np.ndarray) -> np.ndarray:
        total = (len(frames) - 1) * _STOI_HOP + _STOI_FRAME
        out = np.zeros(total)
        for i, frame in enumerate(frames):
            out[i * _STOI_HOP:i * _STOI_HOP + _STOI_FRAME] += frame
        return out

    if not len(ref_frames):
        raise DataError("reference is entirely silent")
    return rebuild(ref_frames), rebuild(deg_frames)


def stoi(reference: AudioBuffer, degraded: AudioBuffer) -> float:
    """Short-time objective intelligibility in roughly [0, 1].

    Identical signals score 1.0; unrelated signals land near 0.  The
    score is invariant to the degraded signal's gain.  Raises DataError
    when fewer than 30 active frames (~0.4 s of speech) remain.
    """
    ref, deg, rate = _as_pair(reference, degraded)
    ref = resample(AudioBuffer(ref, rate), _STOI_RATE).samples
    deg = resample(AudioBuffer(deg, rate), _STOI_RATE).samples
    ref, deg = _remove_silent_frames(ref, deg)

    spec_r = stft(AudioBuffer(ref, _STOI_RATE), _STOI_FFT, hop=_STOI_HOP, window=_STOI_FRAME)
    spec_d = stft(AudioBuffer(deg, _STOI_RATE), _STOI_FFT, hop=_STOI_HOP, window=_STOI_FRAME)
    bands = _third_octave_bands()
    x = np.sqrt(np.abs(spec_r.frames) ** 2 @ bands.T)  # (T, 15)
    y = np.sqrt(np.abs(spec_d.frames) ** 2 @ bands.T)
    if x.shape[0] < _STOI_SEG:
        raise DataError(
            f"too short for STOI: {x.shape[0]} active frames, need {_STOI_SEG}"
        )
    # sliding 30-frame segments: (num_segments, bands, 30)
    xs = sliding_window_view(x, _STOI_SEG, axis=0)
    ys = sliding_window_view(y, _STOI_SEG, axis=0)
    norm_x = np.linalg.norm(xs, axis=2, keepdims=True)
    norm_y = np.linalg.norm(ys, axis=2, keepdims=True)
    alpha = norm_x / np.maximum(norm_y, 1e-12)
    ys = np.minimum(ys * alpha, xs * (1.0 + _STOI_BETA_CLIP))
    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    denom = np.linalg.norm(xs, axis=2) * np.linalg.norm(ys, axis=2)
    corr = (xs * ys).sum(axis=2) / np.maximum(denom, 1e-12)
    return float(corr.mean())


def gpe(reference: AudioBuffer, degraded: AudioBuffer,
        threshold: float = 0.2) -> float | None:
    """Gross pitch error: % of mutually voiced frames off by more than 20 %.

    Returns None (undefined, distinct from 0.0) when no frame is voiced
    in both tracks.
    """
    ref, deg, rate = _as_pair(reference, degraded)
    track_r = estimate_pitch(AudioBuffer(ref, rate))
    track_d = estimate_pitch(AudioBuffer(deg, rate))
    n = min(len(track_r), len(track_d))
    voiced = track_r.voiced[:n] & track_d.voiced[:n]
    if not voiced.any():
        return None
    f_r = track_r.f0[:n][voiced]
    f_d = track_d.f0[:n][voiced]
    gross = np.abs(f_d - f_r) / f_r > threshold
    return float(100.0 * gross.mean())


def _mr_distance(reference: AudioBuffer, degraded: AudioBuffer,
                 mel_bands: int | None) -> float:
    ref, deg, rate = _as_pair(reference, degraded)
    total = 0.0
    for fft_size, hop in MR_RESOLUTIONS:
        mag_r = np.abs(stft(AudioBuffer(ref, rate), fft_size, hop=hop, window=fft_size).frames)
        mag_d = np.abs(stft(AudioBuffer(deg, rate), fft_size, hop=hop, window=fft_size).frames)
        if mel_bands is not None:
            bank = mel_filterbank(mel_bands, fft_size, rate, 0.0, rate / 2.0)
            mag_r = mag_r @ bank.T
            mag_d = mag_d @ bank.T
        sc = np.linalg.norm(mag_r - mag_d) / max(np.linalg.norm(mag_r), 1e-12)
        log_l1 = np.mean(np.abs(np.log(mag_r + MR_LOG_EPS) - np.log(mag_d + MR_LOG_EPS)))
        total += sc + log_l1
    return total / len(MR_RESOLUTIONS)


def mr_stft(reference: AudioBuffer, degraded: AudioBuffer) -> float:
    """Multi-resolution STFT distance: mean over (512,128), (1024,256),
    (2048,512) of spectral convergence + L1 log-magnitude."""
    return _mr_distance(reference, degraded, mel_bands=None)


def mr_mel(reference: AudioBuffer, degraded: AudioBuffer) -> float:
    """mr_stft's mel-domain variant: an 80-band filterbank is applied to
    the magnitudes before both distance terms."""
    return _mr_distance(reference, degraded, mel_bands=_MR_MEL_BANDS)


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate codec evaluation over a corpus; means across utterances."""

    n_utterances: int
    use_stages: int
    bitrate_kbps: float
    stoi: float
    gpe_percent: float | None
    gpe_defined: int
    mr_stft: float
    mr_mel: float
    semantic_used_fraction: float | None = None
    semantic_perplexity: float | None = None
    acoustic_perplexity: tuple = ()

    def to_dict(self) -> dict:
        out = {
            "n_utterances": self.n_utterances,
            "use_stages": self.use_stages,
            "bitrate_kbps": self.bitrate_kbps,
            "stoi": self.stoi,
            "gpe_percent": self.gpe_percent,
            "gpe_defined": self.gpe_defined,
            "mr_stft": self.mr_stft,
            "mr_mel": self.mr_mel,
            "semantic_used_fraction": self.semantic_used_fraction,
            "semantic_perplexity": self.semantic_perplexity,
            "acoustic_perplexity": list(self.acoustic_perplexity),
        }
        for name in UNAVAILABLE_METRICS:
            out[name] = None
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if key in UNAVAILABLE_METRICS:
                lines.append(f"{key}=unavailable (requires an external pretrained scorer)")
            elif key == "gpe_percent" and value is None:
                lines.append("gpe_percent=undefined (no mutually voiced frames)")
            elif isinstance(value, float):
                lines.append(f"{key}={value:.6g}")
            else:
                lines.append(f"{key}={value}")
        return "\n".join(lines)


def evaluate_codec(model: CodecModel, corpus, use_stages: int | None = None,
                   transform=None) -> MetricsReport:
    """Encode+decode every utterance and average the reference metrics.

    `transform` replaces the codec round-trip when given (it maps one
    AudioBuffer to another), in which case token statistics are not
    collected.  References are resampled to the decoded rate and both
    sides truncated to the shorter before scoring.
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("evaluation corpus is empty")
    use = model.config.use_stages if use_stages is None else use_stages

    sem_indices = []
    ac_indices = []

    def _roundtrip(utt: AudioBuffer) -> AudioBuffer:
        frames = tokenize(model, utt, use_stages=use)
        sem_indices.extend(f.semantic for f in frames)
        if use:
            ac_indices.extend(f.acoustic for f in frames)
        return decode_batch(model, frames)

    run = transform if transform is not None else _roundtrip
    stoi_vals, gpe_vals, mrs_vals, mrm_vals = [], [], [], []
    for utt in corpus:
        decoded = run(utt)
        reference = resample(utt, decoded.sample_rate)
        n = min(len(reference), len(decoded))
        reference = AudioBuffer(reference.samples[:n], decoded.sample_rate)
        decoded_cut = AudioBuffer(decoded.samples[:n], decoded.sample_rate)
        stoi_vals.append(stoi(reference, decoded_cut))
        g = gpe(reference, decoded_cut)
        if g is not None:
            gpe_vals.append(g)
        mrs_vals.append(mr_stft(reference, decoded_cut))
        mrm_vals.append(mr_mel(reference, decoded_cut))

    used_frac = perplexity = None
    ac_perp: tuple = ()
    if transform is None and sem_indices:
        counts = np.bincount(np.asarray(sem_indices), minlength=model.semantic.size)
        used_frac = float((counts > 0).mean())
        perplexity = agrvq_mod._normalized_perplexity(counts, model.semantic.size)
        if ac_indices:
            report = agrvq_mod.utilization_report(model.acoustic, np.asarray(ac_indices))
            ac_perp = tuple(st.perplexity_combined for st in report.stages)

    header = stream_header(model, num_frames=0, use_stages=use)
    return MetricsReport(
        n_utterances=len(corpus),
        use_stages=use,
        bitrate_kbps=bitrate_kbps(header),
        stoi=float(np.mean(stoi_vals)),
        gpe_percent=float(np.mean(gpe_vals)) if gpe_vals else None,
        gpe_defined=len(gpe_vals),
        mr_stft=float(np.mean(mrs_vals)),
        mr_mel=float(np.mean(mrm_vals)),
        semantic_used_fraction=used_frac,
        semantic_perplexity=perplexity,
        acoustic_perplexity=ac_perp,
    )
