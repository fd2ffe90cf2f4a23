"""Autocorrelation pitch tracking at the 10 ms codec hop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .dsp import HOP_MS, _frame_count
from .errors import DataError

F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3  # normalized autocorrelation peak
ANALYSIS_MS = 40  # two periods of the lowest trackable pitch
SUPPORTED_RATES = (16000, 24000)
_SILENCE_RMS = 1e-5


@dataclass(frozen=True)
class PitchTrack:
    """Per-hop fundamental frequency estimates; 0.0 marks unvoiced frames."""

    f0: np.ndarray
    hop: int
    sample_rate: int

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0.0

    def __len__(self) -> int:
        return len(self.f0)


def estimate_pitch(audio: AudioBuffer, fmin: float = F0_MIN, fmax: float = F0_MAX,
                   voicing_threshold: float = VOICING_THRESHOLD) -> PitchTrack:
    """Track f0 once per 10 ms via the normalized autocorrelation peak.

    A frame is voiced when the strongest autocorrelation peak in the lag
    range for [fmin, fmax] exceeds the voicing threshold and the frame
    carries non-negligible energy.  Voiced estimates are refined with
    parabolic interpolation of the peak and always land inside
    [fmin, fmax].  Gain and polarity changes do not affect the track.
    """
    if audio.sample_rate not in SUPPORTED_RATES:
        raise DataError(
            f"pitch tracking supports {SUPPORTED_RATES} Hz, got {audio.sample_rate} Hz"
        )
    if len(audio) == 0:
        raise DataError("cannot track pitch of empty audio")
    if not (0 < fmin < fmax):
        raise DataError(f"need 0 < fmin < fmax, got [{fmin}, {fmax}]")
    sr = audio.sample_rate
    hop = sr * HOP_MS // 1000
    window = sr * ANALYSIS_MS // 1000
    lag_lo = max(2, int(np.ceil(sr / fmax)))
    lag_hi = min(window - 2, int(np.floor(sr / fmin)))
    if lag_hi <= lag_lo:
        raise DataError(f"analysis window too short for fmin {fmin} Hz at {sr} Hz")

    num_frames = _frame_count(len(audio), hop)
    padded = np.concatenate([audio.samples,
                             np.zeros(max(0, (num_frames - 1) * hop + window - len(audio)))])
    nfft = 1 << int(np.ceil(np.log2(2 * window)))
    f0 = np.zeros(num_frames)
    for t in range(num_frames):
        seg = padded[t * hop:t * hop + window]
        seg = seg - seg.mean()
        energy = float(seg @ seg)
        if energy <= window * _SILENCE_RMS ** 2:
            continue
        spectrum = np.fft.rfft(seg, nfft)
        acf = np.fft.irfft(spectrum * np.conj(spectrum), nfft)[:window]
        acf = acf / acf[0]
        search = acf[lag_lo:lag_hi + 1]
        peak = int(np.argmax(search))
        if search[peak] < voicing_threshold:
            continue
        lag = lag_lo + peak
        # parabolic refinement around the winning lag
        if 1 <= lag < window - 1:
            left, mid, right = acf[lag - 1], acf[lag], acf[lag + 1]
            denom = left - 2.0 * mid + right
            if abs(denom) > 1e-12:
                shift = 0.5 * (left - right) / denom
                if abs(shift) <= 1.0:
                    lag = lag + shift
        f0[t] = float(np.clip(sr / lag, fmin, fmax))
    return PitchTrack(f0=f0, hop=hop, sample_rate=sr)
