"""Decoder: windowed ridge regression, streaming schedule, waveform synthesis."""

from dataclasses import replace

import numpy as np
import pytest

from aqcodec.bitstream import TokenFrame
from aqcodec.decoder import (CONTEXT_RADIUS, LOOKAHEAD_MS, StreamState,
                             WaveformSynthesizer, decode_batch, decode_mel,
                             fit_context_regression, refit, stream_flush,
                             stream_push, synthesize)
from aqcodec.errors import DataError, StreamStateError
from aqcodec.model import analyze, section_hashes, serialize_model, tokenize
from synth import pseudo_speech


def _features(latents):
    """Edge-clamped context windows plus bias, mirroring the fit layout."""
    last = len(latents) - 1
    rows = []
    for i in range(len(latents)):
        picks = [latents[min(max(i + off, 0), last)]
                 for off in range(-CONTEXT_RADIUS, CONTEXT_RADIUS + 1)]
        rows.append(np.concatenate(picks + [np.ones(1)]))
    return np.vstack(rows)


def test_latency_constants():
    assert LOOKAHEAD_MS == 180
    assert CONTEXT_RADIUS == 3


# --- regression oracles ------------------------------------------------------

def test_fit_recovers_planted_weights():
    # y is exactly linear in the context features, so a near-zero ridge
    # must return the planted matrix
    rng = np.random.default_rng(7)
    latents = rng.normal(size=(500, 6))
    w_true = rng.normal(size=(7 * 6 + 1, 4))
    y = _features(latents) @ w_true
    w_fit = fit_context_regression([latents], [y], ridge_lambda=1e-9)
    assert np.allclose(w_fit, w_true, atol=1e-5)


def test_fit_anchored_noop():
    # targets produced by the anchor itself: the anchored fit must not move
    rng = np.random.default_rng(8)
    latents = rng.normal(size=(60, 5))
    anchor = rng.normal(size=(7 * 5 + 1, 3))
    y = _features(latents) @ anchor
    w_fit = fit_context_regression([latents], [y], ridge_lambda=0.3, anchor=anchor)
    assert np.allclose(w_fit, anchor, atol=1e-9)


def test_fit_respects_utterance_boundaries():
    # two utterances fit separately differ from their concatenation, because
    # context windows clamp at each utterance edge
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(40, 5)), rng.normal(size=(40, 5))
    ya, yb = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    split = fit_context_regression([a, b], [ya, yb], ridge_lambda=0.1)
    joined = fit_context_regression([np.vstack([a, b])], [np.vstack([ya, yb])],
                                    ridge_lambda=0.1)
    assert not np.allclose(split, joined)


def test_fit_validation():
    lat = np.zeros((10, 5))
    tgt = np.zeros((10, 3))
    with pytest.raises(DataError):
        fit_context_regression([], [])
    with pytest.raises(DataError):
        fit_context_regression([lat], [tgt, tgt])
    with pytest.raises(DataError, match="aligned"):
        fit_context_regression([lat], [np.zeros((9, 3))])
    with pytest.raises(DataError, match="positive"):
        fit_context_regression([lat], [tgt], ridge_lambda=0.0)
    with pytest.raises(DataError, match="anchor"):
        fit_context_regression([lat], [tgt], anchor=np.zeros((3, 3)))
    with pytest.raises(DataError, match="no frames"):
        fit_context_regression([np.zeros((0, 5))], [np.zeros((0, 3))])


# --- refit -------------------------------------------------------------------

def test_refit_noop_on_own_output(tiny_model):
    # references equal to the current decoder's output: anchored ridge
    # leaves the weights in place
    frames = tokenize(tiny_model, pseudo_speech(2.0, seed=31))
    targets = decode_mel(tiny_model, frames).reshape(len(frames), -1)
    refitted = refit(tiny_model, [(frames, targets)])
    assert np.allclose(refitted.decoder.matrix, tiny_model.decoder.matrix, atol=1e-9)


def test_refit_touches_only_decoder_weights(tiny_model):
    audio = pseudo_speech(3.0, seed=32, speaker=2)
    frames = tokenize(tiny_model, audio)
    mel, _ = analyze(tiny_model.config, audio)
    before = section_hashes(serialize_model(tiny_model))
    refitted = refit(tiny_model, [(frames, mel)])
    after = section_hashes(serialize_model(refitted))
    assert after["SEMC"] == before["SEMC"]
    assert after["AGRV"] == before["AGRV"]
    assert after["CONF"] == before["CONF"]
    assert after["DECW"] != before["DECW"]
    assert not np.array_equal(refitted.decoder.matrix, tiny_model.decoder.matrix)


def test_refit_accepts_mel_frames_or_stacked_rows(tiny_model):
    from aqcodec.dsp import stack_to_tokens

    audio = pseudo_speech(2.0, seed=33)
    frames = tokenize(tiny_model, audio)
    mel, _ = analyze(tiny_model.config, audio)
    via_frames = refit(tiny_model, [(frames, mel)])
    via_rows = refit(tiny_model, [(frames, stack_to_tokens(mel))])
    assert np.array_equal(via_frames.decoder.matrix, via_rows.decoder.matrix)


def test_refit_validation(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=34))
    with pytest.raises(DataError, match="stacked mel rows"):
        refit(tiny_model, [(frames, np.zeros((len(frames), 79)))])
    with pytest.raises(DataError, match="align"):
        refit(tiny_model, [(frames, np.zeros((len(frames) + 1, 480)))])
    with pytest.raises(DataError, match="no usable"):
        refit(tiny_model, [])
    with pytest.raises(DataError, match="no usable"):
        refit(tiny_model, [([], np.zeros((0, 480)))])


# --- streaming schedule ------------------------------------------------------

def test_stream_emission_schedule(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=35))[:10]
    state = StreamState()
    emissions = []
    for i, frame in enumerate(frames):
        out = stream_push(state, tiny_model, frame)
        if i < CONTEXT_RADIUS:
            assert out is None  # look-ahead still filling
        else:
            assert out is not None and out.shape == (6, 80)
            emissions.append(out)
    tail = stream_flush(state, tiny_model)
    assert len(tail) == CONTEXT_RADIUS
    assert len(emissions) + len(tail) == len(frames)
    assert state.frames_out == len(frames)


def test_stream_short_session(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=36))[:2]
    state = StreamState()
    assert all(stream_push(state, tiny_model, f) is None for f in frames)
    assert len(stream_flush(state, tiny_model)) == 2

    empty = StreamState()
    assert stream_flush(empty, tiny_model) == []


def test_stream_lifecycle_errors(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=37))[:4]
    state = StreamState()
    for frame in frames:
        stream_push(state, tiny_model, frame)
    stream_flush(state, tiny_model)
    with pytest.raises(StreamStateError):
        stream_push(state, tiny_model, frames[0])
    with pytest.raises(StreamStateError):
        stream_flush(state, tiny_model)


def test_decode_mel_equals_manual_stream(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.5, seed=38))
    state = StreamState()
    emissions = []
    for frame in frames:
        out = stream_push(state, tiny_model, frame)
        if out is not None:
            emissions.append(out)
    emissions.extend(stream_flush(state, tiny_model))
    assert np.array_equal(decode_mel(tiny_model, frames), np.vstack(emissions))
    assert decode_mel(tiny_model, []).shape == (0, 80)


# --- waveform synthesis ------------------------------------------------------

def test_synthesizer_chunk_lengths(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=39))[:4]
    mel = decode_mel(tiny_model, frames)
    emissions = np.split(mel, len(frames))
    synth = WaveformSynthesizer(80, gl_iterations=4, seed=0)
    lengths = [len(synth.push(m)) for m in emissions]
    assert lengths == [800, 960, 960, 960]  # 10 ms tail withheld per chunk
    assert len(synth.finish()) == 160
    assert sum(lengths) + 160 == 960 * len(frames)


def test_synthesizer_rejects_bad_shape():
    synth = WaveformSynthesizer(80, gl_iterations=1, seed=0)
    with pytest.raises(DataError, match="mel emission"):
        synth.push(np.zeros((5, 80)))


def test_synthesize_is_deterministic(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=40))[:5]
    mel = decode_mel(tiny_model, frames)
    emissions = np.split(mel, len(frames))
    assert np.array_equal(synthesize(tiny_model, emissions),
                          synthesize(tiny_model, emissions))


def test_decode_batch_sample_accounting(tiny_model):
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=41))[:5]
    audio = decode_batch(tiny_model, frames)
    assert audio.sample_rate == 16000
    assert len(audio) == 960 * len(frames)
    assert np.all(np.abs(audio.samples) <= 1.0)
    assert len(decode_batch(tiny_model, [])) == 0


def test_decode_batch_high_rate_output(tiny_model):
    wide = replace(tiny_model,
                   config=replace(tiny_model.config, output_rate=24000))
    frames = tokenize(wide, pseudo_speech(1.0, seed=42))[:4]
    audio = decode_batch(wide, frames)
    assert audio.sample_rate == 24000
    assert len(audio) == 1440 * len(frames)
    assert np.all(np.abs(audio.samples) <= 1.0)
