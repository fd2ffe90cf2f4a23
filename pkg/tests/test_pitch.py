"""Autocorrelation pitch tracker."""

import numpy as np
import pytest

from aqcodec.audio import AudioBuffer
from aqcodec.errors import DataError
from aqcodec.pitch import PitchTrack, estimate_pitch

from synth import pink_noise, tone


def test_pure_tone_tracked_within_two_percent():
    for freq in (110.0, 220.0, 330.0):
        track = estimate_pitch(tone(freq, 1.0))
        voiced = track.f0[track.voiced]
        assert voiced.size > 0.8 * len(track)
        assert abs(np.median(voiced) - freq) / freq < 0.02


def test_track_fields_and_len():
    track = estimate_pitch(tone(200.0, 0.5))
    assert isinstance(track, PitchTrack)
    assert track.hop == 160 and track.sample_rate == 16000
    assert len(track) == len(track.f0) == int(np.ceil(0.5 * 16000 / 160))
    assert np.array_equal(track.voiced, track.f0 > 0.0)


def test_white_noise_mostly_unvoiced():
    rng = np.random.default_rng(42)
    noise = AudioBuffer(0.3 * rng.standard_normal(16000), 16000)
    track = estimate_pitch(noise)
    assert track.voiced.mean() <= 0.10


def test_silence_is_unvoiced():
    track = estimate_pitch(AudioBuffer(np.zeros(8000), 16000))
    assert not track.voiced.any()


def test_gain_and_polarity_invariance():
    sig = tone(180.0, 0.5)
    base = estimate_pitch(sig)
    scaled = estimate_pitch(AudioBuffer(-0.31 * sig.samples, 16000))
    assert np.array_equal(base.voiced, scaled.voiced)
    assert np.allclose(base.f0, scaled.f0, rtol=1e-4)


def test_pitch_glide_stays_in_range():
    sr = 16000
    t = np.arange(sr) / sr
    f0 = 120.0 * 2.0 ** t  # one octave over a second
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    glide = AudioBuffer(0.5 * np.sin(phase), sr)
    track = estimate_pitch(glide)
    voiced = track.f0[track.voiced]
    assert voiced.size > 0.7 * len(track)
    assert voiced.min() >= 50.0 and voiced.max() <= 500.0


def test_24k_supported():
    track = estimate_pitch(tone(220.0, 0.5, sample_rate=24000))
    assert track.sample_rate == 24000 and track.hop == 240
    voiced = track.f0[track.voiced]
    assert abs(np.median(voiced) - 220.0) / 220.0 < 0.02


def test_input_validation():
    with pytest.raises(DataError):
        estimate_pitch(tone(220.0, 0.5, sample_rate=8000))
    with pytest.raises(DataError):
        estimate_pitch(AudioBuffer(np.zeros(0), 16000))
    with pytest.raises(DataError):
        estimate_pitch(tone(220.0, 0.5), fmin=300.0, fmax=100.0)


def test_pink_noise_mostly_unvoiced():
    track = estimate_pitch(pink_noise(1.0, seed=3))
    assert track.voiced.mean() <= 0.25
