"""STFT/mel frontend, Griffin-Lim phase recovery, and token-rate framing.

The codec path is pinned: 16 kHz input, 10 ms hop, 25 ms Hann window,
natural-log mel energies over 80 triangular bands spanning 0-8 kHz.
Six consecutive mel frames are stacked into one 60 ms token-rate latent
row.  Frame count is always ceil(samples / hop) via reflection padding,
so 1 s of 16 kHz audio is exactly 100 mel frames and 16 token rows
(the trailing remainder is dropped).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import check_NOLA
from scipy.signal.windows import hann

from .audio import AudioBuffer
from .errors import DataError

ENCODER_SAMPLE_RATE = 16000
HOP_MS = 10
WINDOW_MS = 25
FRAMES_PER_TOKEN = 6
TOKEN_MS = HOP_MS * FRAMES_PER_TOKEN  # 60 ms per token frame
DEFAULT_NUM_BANDS = 80
FBANK_FMAX = 8000.0
DEFAULT_FFT_SIZE = 512
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class SpectralFrames:
    """Complex STFT frames (num_frames x num_bins) plus their geometry."""

    frames: np.ndarray
    fft_size: int
    hop: int
    window: int
    sample_rate: int


@dataclass(frozen=True)
class FbankFrames:
    """Log-mel energy frames (num_frames x num_bands) at the codec geometry."""

    features: np.ndarray
    sample_rate: int
    hop: int
    window: int

    @property
    def num_bands(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def token_rate(sample_rate: int = ENCODER_SAMPLE_RATE) -> float:
    """Token frames per second: one token per 6 hops of 10 ms."""
    hop = sample_rate * HOP_MS // 1000
    return sample_rate / (hop * FRAMES_PER_TOKEN)


def samples_per_token(sample_rate: int) -> int:
    """Waveform samples covered by one 60 ms token frame."""
    return sample_rate * TOKEN_MS // 1000


@functools.lru_cache(maxsize=16)
def _hann_window(length: int) -> np.ndarray:
    w = hann(length, sym=False)
    w.setflags(write=False)
    return w


def _frame_count(num_samples: int, hop: int) -> int:
    return math.ceil(num_samples / hop)


def _validate_geometry(fft_size: int, hop: int, window: int) -> None:
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise DataError(f"fft_size must be a power of two, got {fft_size}")
    if hop < 1:
        raise DataError(f"hop must be >= 1, got {hop}")
    if hop > window:
        raise DataError(f"hop ({hop}) must not exceed window ({window})")
    if window > fft_size:
        raise DataError(f"window ({window}) must not exceed fft_size ({fft_size})")


def stft(audio: AudioBuffer, fft_size: int = DEFAULT_FFT_SIZE,
         hop: int | None = None, window: int | None = None) -> SpectralFrames:
    """Short-time Fourier transform with reflection padding.

    Produces ceil(len / hop) frames; frame t is the Hann-windowed slice
    centred near sample t*hop (left pad of window//2), zero-padded to
    fft_size before the real FFT.
    """
    window = fft_size if window is None else window
    hop = window // 4 if hop is None else hop
    _validate_geometry(fft_size, hop, window)
    x = audio.samples
    if len(x) == 0:
        raise DataError("cannot STFT empty audio")
    num_frames = _frame_count(len(x), hop)
    pad_left = window // 2
    needed = (num_frames - 1) * hop + window
    pad_right = max(0, needed - pad_left - len(x))
    padded = np.pad(x, (pad_left, pad_right), mode="reflect")
    frames = sliding_window_view(padded, window)[::hop][:num_frames]
    frames = frames * _hann_window(window)
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return SpectralFrames(spec, fft_size=fft_size, hop=hop, window=window,
                          sample_rate=audio.sample_rate)


def _overlap_add(frames_time: np.ndarray, window_fn: np.ndarray, hop: int) -> np.ndarray:
    """Least-squares overlap-add: sum w*frame / sum w^2."""
    num_frames, window = frames_time.shape
    total = (num_frames - 1) * hop + window
    acc = np.zeros(total)
    wsum = np.zeros(total)
    wsq = window_fn * window_fn
    for t in range(num_frames):
        start = t * hop
        acc[start:start + window] += window_fn * frames_time[t]
        wsum[start:start + window] += wsq
    return acc / np.maximum(wsum, 1e-12)


def istft(spec: SpectralFrames) -> AudioBuffer:
    """Inverse STFT via least-squares overlap-add.

    Returns exactly num_frames * hop samples, aligned so that
    istft(stft(x)) reconstructs x (up to rounding at the edges).
    Raises if the window/hop pair is not invertible (NOLA violated).
    """
    _validate_geometry(spec.fft_size, spec.hop, spec.window)
    w = _hann_window(spec.window)
    if not check_NOLA(w, spec.window, spec.window - spec.hop):
        raise DataError(
            f"window {spec.window} / hop {spec.hop} violates the nonzero "
            "overlap-add condition; overlap-add inversion is undefined"
        )
    frames = np.asarray(spec.frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError("SpectralFrames must hold a non-empty (frames x bins) matrix")
    seg = np.fft.irfft(frames, n=spec.fft_size, axis=1)[:, :spec.window]
    recon = _overlap_add(seg, w, spec.hop)
    pad_left = spec.window // 2
    out_len = frames.shape[0] * spec.hop
    out = recon[pad_left:pad_left + out_len]
    if len(out) < out_len:
        out = np.concatenate([out, np.zeros(out_len - len(out))])
    return AudioBuffer(out, spec.sample_rate)


def _hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(num_bands: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, peak 1 per band, shape (num_bands, bins).

    Bands are spaced uniformly on the mel scale between fmin and fmax;
    every band is guaranteed nonzero support on the FFT grid.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    if not (0 <= fmin < fmax <= sample_rate / 2.0 + 1e-9):
        raise DataError(f"invalid band range [{fmin}, {fmax}] at rate {sample_rate}")
    if num_bands < 1:
        raise DataError("num_bands must be >= 1")
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), num_bands + 2)
    hz_points = _mel_to_hz(mel_points)
    bank = np.zeros((num_bands, len(freqs)))
    for b in range(num_bands):
        lo, center, hi = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
        if not bank[b].any():
            raise DataError(
                f"mel band {b} has no FFT-bin support; fft_size {fft_size} "
                f"is too coarse for {num_bands} bands"
            )
    bank.setflags(write=False)
    return bank


@functools.lru_cache(maxsize=16)
def _cached_filterbank_inverse(num_bands: int, fft_size: int, sample_rate: int,
                               fmin: float, fmax: float | None) -> np.ndarray:
    fb = mel_filterbank(num_bands, fft_size, sample_rate, fmin, fmax)
    inv = filterbank_pseudo_inverse(fb)
    inv.setflags(write=False)
    return inv


def filterbank_pseudo_inverse(bank: np.ndarray, reg: float = 1e-8) -> np.ndarray:
    """Regularized pseudo-inverse mapping mel energies back to FFT bins.

    Returns shape (num_bands, bins): linear = mel @ inverse.
    """
    bank = np.asarray(bank, dtype=np.float64)
    gram = bank @ bank.T
    scale = np.trace(gram) / bank.shape[0]
    return np.linalg.solve(gram + reg * scale * np.eye(bank.shape[0]), bank)


def fbank(audio: AudioBuffer, num_bands: int = DEFAULT_NUM_BANDS) -> FbankFrames:
    """Log-mel energies at the codec geometry (10 ms hop, 25 ms window).

    Input must already be at 16 kHz; callers resample first.  Energies
    are natural log of (mel power + 1e-10), so digital silence maps to
    log(1e-10) in every band.
    """
    if audio.sample_rate != ENCODER_SAMPLE_RATE:
        raise DataError(
            f"fbank requires {ENCODER_SAMPLE_RATE} Hz input, got {audio.sample_rate} Hz; "
            "resample first"
        )
    if len(audio) == 0:
        raise DataError("cannot compute fbank of empty audio")
    hop = ENCODER_SAMPLE_RATE * HOP_MS // 1000
    window = ENCODER_SAMPLE_RATE * WINDOW_MS // 1000
    spec = stft(audio, fft_size=DEFAULT_FFT_SIZE, hop=hop, window=window)
    power = np.abs(spec.frames) ** 2
    bank = mel_filterbank(num_bands, DEFAULT_FFT_SIZE, ENCODER_SAMPLE_RATE, 0.0, FBANK_FMAX)
    feats = np.log(power @ bank.T + LOG_FLOOR)
    return FbankFrames(feats, sample_rate=ENCODER_SAMPLE_RATE, hop=hop, window=window)


def stack_to_tokens(frames: FbankFrames, frames_per_token: int = FRAMES_PER_TOKEN) -> np.ndarray:
    """Concatenate groups of consecutive mel frames into token-rate rows.

    A trailing remainder shorter than one group is dropped.  Returns
    shape (num_tokens, frames_per_token * num_bands).
    """
    if frames_per_token < 1:
        raise DataError("frames_per_token must be >= 1")
    feats = frames.features
    num_tokens = feats.shape[0] // frames_per_token
    if num_tokens == 0:
        raise DataError(
            f"need at least {frames_per_token} mel frames to form one token, got {feats.shape[0]}"
        )
    used = feats[:num_tokens * frames_per_token]
    return used.reshape(num_tokens, frames_per_token * feats.shape[1]).copy()


def unstack_tokens(rows: np.ndarray, num_bands: int) -> np.ndarray:
    """Inverse of stack_to_tokens: (N, k*B) token rows -> (N*k, B) mel frames."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] % num_bands:
        raise DataError(f"token rows of width {rows.shape} do not split into {num_bands} bands")
    return rows.reshape(-1, num_bands)


def log_mel_to_magnitude(log_mel: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """Undo the fbank log: magnitude-domain mel values, silence -> exact zero."""
    energy = np.maximum(np.exp(np.asarray(log_mel, dtype=np.float64)) - floor, 0.0)
    return np.sqrt(energy)


def griffin_lim(mel: np.ndarray, iterations: int = 32, seed=0, *,
                sample_rate: int = ENCODER_SAMPLE_RATE,
                fft_size: int = DEFAULT_FFT_SIZE,
                hop: int | None = None, window: int | None = None,
                fmin: float = 0.0, fmax: float | None = FBANK_FMAX,
                mel_inverse: np.ndarray | None = None,
                initial_phase: np.ndarray | None = None,
                return_phase: bool = False,
                error_log: list | None = None):
    """Phase recovery from a mel magnitude matrix (num_frames x num_bands).

    The mel spectrogram is lifted back to FFT-bin magnitudes through the
    filterbank's regularized pseudo-inverse, phases start from a seeded
    uniform draw (or from `initial_phase`, shape (num_frames, bins), for
    warm starts), and the classic alternating projection runs for
    `iterations` rounds.  Output is deterministic given the seed and has
    exactly num_frames * hop samples.  With return_phase the final
    per-bin phase angles come back alongside the audio, so a streaming
    caller can warm-start the next overlapping window.  If `error_log`
    is given, the STFT-consistency error of each iteration is appended
    to it; the sequence is non-increasing.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise DataError("mel must be a non-empty (frames x bands) matrix")
    if not np.all(np.isfinite(mel)) or np.any(mel < 0):
        raise DataError("mel magnitudes must be finite and non-negative")
    if not isinstance(iterations, (int, np.integer)) or iterations < 1:
        raise DataError(f"iterations must be a positive integer, got {iterations!r}")
    hop = sample_rate * HOP_MS // 1000 if hop is None else hop
    window = sample_rate * WINDOW_MS // 1000 if window is None else window
    _validate_geometry(fft_size, hop, window)

    num_frames, num_bands = mel.shape
    if mel_inverse is None:
        mel_inverse = _cached_filterbank_inverse(num_bands, fft_size, sample_rate, fmin, fmax)
    target = np.sqrt(np.maximum((mel * mel) @ mel_inverse, 0.0))

    bins = fft_size // 2 + 1
    if initial_phase is not None:
        initial_phase = np.asarray(initial_phase, dtype=np.float64)
        if initial_phase.shape != (num_frames, bins):
            raise DataError(
                f"initial_phase must be ({num_frames}, {bins}), got {initial_phase.shape}"
            )

    out_len = num_frames * hop
    if not target.any():
        silent = AudioBuffer(np.zeros(out_len), sample_rate)
        if return_phase:
            phase = initial_phase if initial_phase is not None else np.zeros((num_frames, bins))
            return silent, phase
        return silent

    w = _hann_window(window)
    total = (num_frames - 1) * hop + window
    wsum = np.zeros(total)
    wsq = w * w
    for t in range(num_frames):
        wsum[t * hop:t * hop + window] += wsq
    wsum = np.maximum(wsum, 1e-12)

    def synth(spec_mat):
        seg = np.fft.irfft(spec_mat, n=fft_size, axis=1)[:, :window]
        acc = np.zeros(total)
        for t in range(num_frames):
            acc[t * hop:t * hop + window] += w * seg[t]
        return acc / wsum

    def analyze(signal):
        frames = sliding_window_view(signal, window)[::hop][:num_frames] * w
        return np.fft.rfft(frames, n=fft_size, axis=1)

    if initial_phase is None:
        rng = np.random.default_rng(seed)
        initial_phase = rng.uniform(0.0, 2.0 * np.pi, target.shape)
    spec = target * np.exp(1j * initial_phase)
    for _ in range(iterations):
        x = synth(spec)
        reanalysis = analyze(x)
        if error_log is not None:
            error_log.append(float(np.linalg.norm(np.abs(reanalysis) - target)))
        spec = target * np.exp(1j * np.angle(reanalysis))
    x = synth(spec)

    pad_left = window // 2
    out = x[pad_left:pad_left + out_len]
    if len(out) < out_len:
        out = np.concatenate([out, np.zeros(out_len - len(out))])
    audio = AudioBuffer(out, sample_rate)
    if return_phase:
        return audio, np.angle(spec)
    return audio
