"""Audio ingestion and egress: WAV files, channel mixdown, resampling.

All audio inside the toolkit is a mono float64 vector in [-1, 1] plus a
sample rate, wrapped in :class:`AudioBuffer`.  Readers normalize to that
currency; writers convert back out.  Only plain RIFF/WAVE files with
PCM16 or IEEE float32 samples are supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DataError, FormatError


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform plus its sample rate.

    samples: 1-D float64 array, nominally in [-1, 1] (decoded audio is
    clipped to that range; files are normalized into it on read).
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"AudioBuffer requires a 1-D sample vector, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise DataError("AudioBuffer samples must be finite")
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate <= 0:
            raise DataError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def _mixdown(data: np.ndarray) -> np.ndarray:
    # Multichannel content is averaged to mono; order of channels is
    # irrelevant to the mean so any layout is handled the same way.
    if data.ndim == 2:
        return data.mean(axis=1)
    return data


def read_wav(path) -> AudioBuffer:
    """Read a WAV file into an AudioBuffer.

    PCM16 is scaled by 1/32768; float32 is taken as-is.  Multichannel
    input is mixed down by averaging.  Other sample formats raise
    FormatError.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = _mixdown(data.astype(np.float64)) / 32768.0
    elif data.dtype == np.float32:
        samples = _mixdown(data.astype(np.float64))
    else:
        raise FormatError(
            f"{path}: unsupported WAV sample format {data.dtype}; use PCM16 or float32"
        )
    return AudioBuffer(samples=samples, sample_rate=int(rate))


def write_wav(path, audio: AudioBuffer, *, float32: bool = False) -> None:
    """Write an AudioBuffer as PCM16 (default) or IEEE float32."""
    if float32:
        wavfile.write(path, audio.sample_rate, audio.samples.astype(np.float32))
        return
    clipped = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, audio.sample_rate, pcm)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase resample to target_rate.

    Output length is exactly round(len * target_rate / sample_rate).
    Resampling to the current rate returns the input unchanged.
    """
    if not isinstance(target_rate, (int, np.integer)) or target_rate <= 0:
        raise DataError(f"target_rate must be a positive integer, got {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == audio.sample_rate:
        return audio
    if len(audio) == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    ratio = Fraction(target_rate, audio.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    out = resample_poly(audio.samples, up, down)
    want = round(len(audio) * target_rate / audio.sample_rate)
    if len(out) < want:  # resample_poly yields ceil(n*up/down) >= round(...), but stay safe
        out = np.concatenate([out, np.zeros(want - len(out))])
    out = np.asarray(out[:want], dtype=np.float64)
    # Polyphase filtering can overshoot slightly near transients; that is
    # fine for internal use, but keep values finite.
    return AudioBuffer(out, target_rate)


def slice_seconds(audio: AudioBuffer, max_seconds: float) -> list[AudioBuffer]:
    """Split a buffer into consecutive slices of at most max_seconds."""
    step = int(round(max_seconds * audio.sample_rate))
    if step <= 0:
        raise DataError("max_seconds must cover at least one sample")
    if len(audio) <= step:
        return [audio]
    n = math.ceil(len(audio) / step)
    return [AudioBuffer(audio.samples[i * step:(i + 1) * step], audio.sample_rate) for i in range(n)]
