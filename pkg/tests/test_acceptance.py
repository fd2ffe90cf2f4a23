"""System-level acceptance checks, one test per shipping requirement.

Each test records a one-line PASS/FAIL verdict (echoed in the terminal
summary) before asserting, so a red run still reports every criterion.
"""

import struct
from dataclasses import replace
from pathlib import Path
from time import perf_counter

import numpy as np

from aqcodec.agrvq import (GROUP_SIZE, STAGE_INDEX_SPAN, AgrvqStage, _nearest,
                           _ridge_lift, combine_index, quantize_stage,
                           split_index, train_quantizer, train_stage)
from aqcodec.audio import AudioBuffer
from aqcodec.bitstream import (FRAME_MICROS, HEADER_BYTES, MAGIC, VERSION,
                               TokenFrame, bitrate_kbps, pack, semantic_bits,
                               unpack)
from aqcodec.decoder import (LOOKAHEAD_MS, StreamState, WaveformSynthesizer,
                             decode_batch, decode_mel, refit, stream_flush,
                             stream_push)
from aqcodec.dsp import FRAMES_PER_TOKEN, samples_per_token, token_rate
from aqcodec.errors import FormatError
from aqcodec.metrics import evaluate_codec, gpe, mr_mel, mr_stft, stoi
from aqcodec.model import (CodecConfig, analyze, section_hashes,
                           serialize_model, tokenize, train_encoder)
from aqcodec.semantic import kmeans
from conftest import record_criterion
from synth import correlated_features, pseudo_speech, speech_corpus, tone
from test_metrics import _impulse_oracle

GOLDEN = Path(__file__).parent / "golden"


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _run_stream(model, frames):
    state = StreamState()
    emissions = []
    for frame in frames:
        out = stream_push(state, model, frame)
        if out is not None:
            emissions.append(out)
    emissions.extend(stream_flush(state, model))
    return emissions


# -----------------------------------------------------------------------------

def test_criterion_01_bitrate_table():
    t0 = perf_counter()
    rng = np.random.default_rng(11)
    results = []
    ok = True
    for use, expect in ((1, 0.43), (2, 0.65), (3, 0.87)):
        frames = [TokenFrame(semantic=int(rng.integers(0, 8192)),
                             acoustic=tuple(int(a) for a in rng.integers(0, 8100, use)))
                  for _ in range(1000)]
        blob = pack(frames, k_sem=8192, sample_rate=16000)
        header, _ = unpack(blob)
        declared = bitrate_kbps(header)
        measured = round((len(blob) - HEADER_BYTES) * 8 / header.duration / 1000.0, 2)
        results.append(f"S{use}={declared:.2f}/{measured:.2f}")
        ok = ok and declared == expect and measured == expect
    elapsed = perf_counter() - t0
    ok = ok and elapsed < 1.0
    record_criterion(
        f"criterion 1 (bitrate table): {_verdict(ok)} declared/measured kbps "
        f"{' '.join(results)} in {elapsed:.2f} s"
    )
    assert ok, results


def test_criterion_02_frame_arithmetic(tiny_model):
    checks = [
        round(token_rate(16000), 2) == 16.67,
        round(token_rate(24000), 2) == 16.67,
        samples_per_token(16000) == 960,
        samples_per_token(24000) == 1440,
        FRAME_MICROS == 60000,
        FRAMES_PER_TOKEN * 10 == 60,  # six 10 ms hops per token
    ]
    frames = tokenize(tiny_model, pseudo_speech(1.0, seed=201))[:5]
    wav16 = decode_batch(tiny_model, frames)
    model24 = replace(tiny_model,
                      config=replace(tiny_model.config, output_rate=24000))
    wav24 = decode_batch(model24, frames)
    checks += [len(wav16) == 5 * 960, len(wav24) == 5 * 1440]
    ok = all(checks)
    record_criterion(
        f"criterion 2 (frame arithmetic): {_verdict(ok)} token rate "
        f"{token_rate():.4f} Hz; {len(wav16) // 5} samples/token at 16 kHz, "
        f"{len(wav24) // 5} at 24 kHz"
    )
    assert ok, checks


def test_criterion_03_streaming_latency(tiny_model):
    # a dense decoder, so every tap of the +-3 window is actually live
    audio = pseudo_speech(2.0, seed=202)
    all_frames = tokenize(tiny_model, audio)
    mel, _ = analyze(tiny_model.config, audio)
    dense = refit(tiny_model, [(all_frames, mel)])
    frames = all_frames[:12]

    state = StreamState()
    schedule_ok = True
    for i, frame in enumerate(frames):
        out = stream_push(state, dense, frame)
        schedule_ok &= (out is None) == (i < 3)  # first emission at push 4
    stream_flush(state, dense)

    base = _run_stream(dense, frames)
    k = tiny_model.config.k_sem
    invariant = 0
    for t in range(8):
        mutated = list(frames)
        f = frames[t + 4]
        mutated[t + 4] = TokenFrame(semantic=(f.semantic + 1) % k, acoustic=f.acoustic)
        if np.array_equal(_run_stream(dense, mutated)[t], base[t]):
            invariant += 1
    sensitive = 0
    for t in (0, 4):
        mutated = list(frames)
        f = frames[t + 3]
        mutated[t + 3] = TokenFrame(semantic=(f.semantic + 1) % k, acoustic=f.acoustic)
        if not np.array_equal(_run_stream(dense, mutated)[t], base[t]):
            sensitive += 1

    ok = schedule_ok and invariant == 8 and sensitive == 2 and LOOKAHEAD_MS == 180
    record_criterion(
        f"criterion 3 (streaming latency): {_verdict(ok)} first emission at "
        f"push 4; frame t+4 never reaches emission t ({invariant}/8), frame "
        f"t+3 does ({sensitive}/2); look-ahead {LOOKAHEAD_MS} ms"
    )
    assert ok


def test_criterion_04_streaming_equals_batch(tiny_model):
    t0 = perf_counter()
    rng = np.random.default_rng(2024)
    mel_equal = 0
    worst_rms = 0.0
    streams = 20
    for _ in range(streams):
        n = int(rng.integers(1, 9))
        frames = [TokenFrame(semantic=int(rng.integers(0, 16)),
                             acoustic=tuple(int(a) for a in rng.integers(0, 8100, 3)))
                  for _ in range(n)]
        emissions = _run_stream(tiny_model, frames)
        if np.array_equal(decode_mel(tiny_model, frames), np.vstack(emissions)):
            mel_equal += 1
        batch = decode_batch(tiny_model, frames).samples
        synth = WaveformSynthesizer(tiny_model.config.num_bands,
                                    tiny_model.config.gl_iterations,
                                    tiny_model.config.seed)
        chunks = [synth.push(m) for m in emissions]
        chunks.append(synth.finish())
        live = np.clip(np.concatenate(chunks), -1.0, 1.0)
        worst_rms = max(worst_rms, float(np.sqrt(np.mean((batch - live) ** 2))))
    elapsed = perf_counter() - t0
    ok = mel_equal == streams and worst_rms < 1e-3 and elapsed < 30.0
    record_criterion(
        f"criterion 4 (streaming equals batch): {_verdict(ok)} {streams} random "
        f"streams, mel bit-identical {mel_equal}/{streams}, worst waveform rms "
        f"diff {worst_rms:.2e} in {elapsed:.1f} s"
    )
    assert ok


def _coordinate_split_stage(rows: np.ndarray, reduced_dim: int, seed,
                            kmeans_iters: int = 60) -> AgrvqStage:
    """Ablation twin of train_stage: fixed coordinate selectors instead of
    data-adaptive directions; everything else (lifts, k-means, residual
    chaining between branches) identical."""
    rng = np.random.default_rng(seed)
    dim = rows.shape[1]
    half = dim // 2

    def selector(lo: int, hi: int) -> np.ndarray:
        cols = np.linspace(lo, hi - 1, reduced_dim).round().astype(int)
        proj = np.zeros((dim, reduced_dim))
        proj[cols, np.arange(reduced_dim)] = 1.0
        return proj

    proj_a = selector(0, half)
    coords_a = rows @ proj_a
    lift_a = _ridge_lift(coords_a, rows)
    codebook_a, _ = kmeans(coords_a, GROUP_SIZE, rng, max_iters=kmeans_iters)
    leftover = rows - codebook_a[_nearest(coords_a, codebook_a)] @ lift_a
    proj_b = selector(half, dim)
    coords_b = leftover @ proj_b
    lift_b = _ridge_lift(coords_b, leftover)
    codebook_b, _ = kmeans(coords_b, GROUP_SIZE, rng, max_iters=kmeans_iters)
    return AgrvqStage(proj_a=proj_a, lift_a=lift_a, codebook_a=codebook_a,
                      proj_b=proj_b, lift_b=lift_b, codebook_b=codebook_b)


def test_criterion_05_adaptive_grouping():
    # index arithmetic is a bijection over the full stage span
    seen = set()
    bijective = True
    for a in range(GROUP_SIZE):
        for b in range(GROUP_SIZE):
            c = combine_index(a, b)
            bijective &= split_index(c) == (a, b)
            seen.add(c)
    bijective &= seen == set(range(STAGE_INDEX_SPAN))

    # residual energy falls monotonically across stages on one hour of
    # token-rate features (60000 frames x 60 ms)
    feats = correlated_features(60000, 480, seed=1234, rank=24, noise=0.15)
    quantizer = train_quantizer(feats[:20000], num_stages=3, reduced_dim=8, seed=9)
    energies = np.zeros(4)
    for start in range(0, feats.shape[0], 10000):
        current = feats[start:start + 10000].copy()
        energies[0] += float(np.sum(current ** 2))
        for s, stage in enumerate(quantizer.stages, start=1):
            _, recon = quantize_stage(stage, current)
            current -= recon
            energies[s] += float(np.sum(current ** 2))
    monotone = bool(energies[0] > energies[1] > energies[2] > energies[3])

    # the learned directions must beat fixed coordinate splits, every seed
    wins = 0
    seeds = 10
    for s in range(seeds):
        data = correlated_features(2000, 480, seed=700 + s, rank=24, noise=0.15)
        ours = train_stage(data, reduced_dim=8, seed=[71, s])
        _, recon = quantize_stage(ours, data)
        err_ours = float(np.mean((data - recon) ** 2))
        base = _coordinate_split_stage(data, 8, seed=[72, s])
        _, recon_b = quantize_stage(base, data)
        err_base = float(np.mean((data - recon_b) ** 2))
        wins += err_ours < err_base

    ok = bijective and monotone and wins == seeds
    ratios = "/".join(f"{e / energies[0]:.3f}" for e in energies)
    record_criterion(
        f"criterion 5 (adaptive grouping): {_verdict(ok)} index bijection over "
        f"{STAGE_INDEX_SPAN}; residual energy ratios {ratios} strictly "
        f"decreasing; adaptive beats coordinate split {wins}/{seeds}"
    )
    assert ok


def test_criterion_06_extra_training_stages_never_hurt():
    t0 = perf_counter()
    seeds = 5
    agree = 0
    mels = []
    for s in range(seeds):
        train = speech_corpus(12, 4.0, seed=400 + s)
        held = speech_corpus(30, 2.0, seed=500 + s)
        cfg3 = CodecConfig(k_sem=32, num_stages=3, use_stages=1,
                           gl_iterations=4, seed=s)
        cfg1 = CodecConfig(k_sem=32, num_stages=1, use_stages=1,
                           gl_iterations=4, seed=s)
        m3 = train_encoder(cfg3, train, trained_on="tmul")
        m1 = train_encoder(cfg1, train, trained_on="tmul")

        # stage 0 of the 3-stage chain is the 1-stage chain, bit for bit
        stage_equal = np.array_equal(m3.semantic.centroids, m1.semantic.centroids)
        s3, s1 = m3.acoustic.stages[0], m1.acoustic.stages[0]
        for field in ("proj_a", "lift_a", "codebook_a", "proj_b", "lift_b",
                      "codebook_b"):
            stage_equal &= np.array_equal(getattr(s3, field), getattr(s1, field))

        tokens_equal = True
        scores = []
        for utt in held:
            tok3 = tokenize(m3, utt, use_stages=1)
            tokens_equal &= tok3 == tokenize(m1, utt, use_stages=1)
            decoded = decode_batch(m3, tok3)
            n = min(len(utt), len(decoded))
            scores.append(mr_mel(AudioBuffer(utt.samples[:n], 16000),
                                 AudioBuffer(decoded.samples[:n], 16000)))
        waves_equal = all(
            np.array_equal(decode_batch(m3, tokenize(m3, utt, use_stages=1)).samples,
                           decode_batch(m1, tokenize(m1, utt, use_stages=1)).samples)
            for utt in held[:2])
        # identical tokens and waveforms: train-3-use-1 scores exactly equal
        # train-1-use-1, so "not worse" holds with zero margin
        agree += stage_equal and tokens_equal and waves_equal
        mels.append(float(np.mean(scores)))
    elapsed = perf_counter() - t0
    ok = agree == seeds and elapsed < 600.0
    record_criterion(
        f"criterion 6 (extra stages never hurt): {_verdict(ok)} {agree}/{seeds} "
        f"seeds with 30 held-out utterances each: train-3-use-1 tokens and "
        f"waveforms identical to train-1-use-1 (mr_mel diff 0, mean "
        f"{np.mean(mels):.3f}) in {elapsed:.0f} s"
    )
    assert ok


def test_criterion_07_quality_ladder(accept_model, accept_held):
    reports = {s: evaluate_codec(accept_model, accept_held, use_stages=s)
               for s in (1, 2, 3)}
    stoi_vals = [reports[s].stoi for s in (1, 2, 3)]
    mel_vals = [reports[s].mr_mel for s in (1, 2, 3)]
    stoi_ok = stoi_vals[0] <= stoi_vals[1] <= stoi_vals[2]
    mel_ok = mel_vals[0] > mel_vals[1] > mel_vals[2]
    ok = stoi_ok and mel_ok
    record_criterion(
        f"criterion 7 (quality ladder): {_verdict(ok)} held-out stoi "
        f"{stoi_vals[0]:.4f} <= {stoi_vals[1]:.4f} <= {stoi_vals[2]:.4f}; "
        f"mr_mel {mel_vals[0]:.4f} > {mel_vals[1]:.4f} > {mel_vals[2]:.4f}"
    )
    assert ok, (stoi_vals, mel_vals)


def test_criterion_08_bitstream_robustness():
    rng = np.random.default_rng(8888)
    trips = 10_000
    exact = 0
    for _ in range(trips):
        k_sem = 1 << int(rng.integers(1, 14))
        num_ac = int(rng.integers(0, 4))
        n = int(rng.integers(0, 13))
        rate = int(rng.choice([8000, 16000, 24000, 48000]))
        frames = [TokenFrame(semantic=int(rng.integers(0, k_sem)),
                             acoustic=tuple(int(a) for a in rng.integers(0, 8100, num_ac)))
                  for _ in range(n)]
        header, back = unpack(pack(frames, k_sem=k_sem, sample_rate=rate))
        exact += back == frames and (header.sample_rate, header.num_frames) == (rate, n)

    healthy = pack([TokenFrame(semantic=i % 64, acoustic=(i, i * 7 % 8100))
                    for i in range(10)], k_sem=64, sample_rate=16000)

    def mutate(offset, value):
        blob = bytearray(healthy)
        blob[offset] = value
        return bytes(blob)

    crafted = (MAGIC + bytes([VERSION]) + struct.pack("<I", 16000)
               + struct.pack("<I", FRAME_MICROS) + bytes([13, 1, 13])
               + struct.pack("<I", 1)
               + int("0" * 13 + format(8100, "013b") + "0" * 6, 2).to_bytes(4, "big"))
    pad_poisoned = bytearray(pack([TokenFrame(semantic=1)], k_sem=64,
                                  sample_rate=16000))
    pad_poisoned[-1] |= 0x01
    corruptions = [
        ("truncated header", healthy[:HEADER_BYTES - 1]),
        ("bad magic", b"XQC1" + healthy[4:]),
        ("bad version", mutate(4, VERSION + 1)),
        ("bad frame length", mutate(9, 0x01)),
        ("semantic width 0", mutate(13, 0)),
        ("semantic width 32", mutate(13, 32)),
        ("4 acoustic stages", mutate(14, 4)),
        ("acoustic width 12", mutate(15, 12)),
        ("payload short", healthy[:-1]),
        ("payload long", healthy + b"\x00"),
        ("nonzero padding", bytes(pad_poisoned)),
        ("acoustic index 8100", crafted),
    ]
    rejected = 0
    for _, blob in corruptions:
        try:
            unpack(blob)
        except FormatError:
            rejected += 1

    golden_ok = (
        (GOLDEN / "reference_s2.aqc").read_bytes() == pack(
            [TokenFrame(semantic=0, acoustic=(0, 8099)),
             TokenFrame(semantic=8191, acoustic=(8099, 0)),
             TokenFrame(semantic=4096, acoustic=(4050, 1)),
             TokenFrame(semantic=1, acoustic=(2, 3)),
             TokenFrame(semantic=2730, acoustic=(1365, 5461))],
            k_sem=8192, sample_rate=16000)
        and (GOLDEN / "reference_s0.aqc").read_bytes() == pack(
            [TokenFrame(semantic=x) for x in (0, 15, 7, 8, 3, 12, 1)],
            k_sem=13, sample_rate=24000)
    )

    ok = exact == trips and rejected == len(corruptions) and golden_ok
    record_criterion(
        f"criterion 8 (bitstream robustness): {_verdict(ok)} {exact}/{trips} "
        f"fuzz roundtrips bit-exact; {rejected}/{len(corruptions)} corruption "
        f"classes rejected with FormatError; golden fixture bytes stable"
    )
    assert ok


def test_criterion_09_metric_oracles():
    stoi_scores = [stoi(s, s) for s in (pseudo_speech(2.0, seed=x)
                                        for x in (101, 103, 104))]
    stoi_ok = all(score >= 0.99 for score in stoi_scores)

    gpe_small = gpe(tone(220.0, 1.0), tone(220.0 * 1.05, 1.0))
    gpe_large = gpe(tone(220.0, 1.0), tone(220.0 * 1.30, 1.0))
    gpe_ok = gpe_small == 0.0 and gpe_large == 100.0

    samples = np.zeros(2560)
    samples[1111] = 1.0
    got = mr_stft(AudioBuffer(samples, 16000), AudioBuffer(samples * 0.5, 16000))
    err = abs(got - _impulse_oracle(1111, 2560, 0.5))
    mr_ok = err <= 1e-6

    ok = stoi_ok and gpe_ok and mr_ok
    record_criterion(
        f"criterion 9 (metric oracles): {_verdict(ok)} stoi(x,x) min "
        f"{min(stoi_scores):.4f} >= 0.99; gpe 5% dev -> {gpe_small}, 30% dev "
        f"-> {gpe_large}; mr_stft impulse vs closed form |err| {err:.2e}"
    )
    assert ok


def test_criterion_10_staged_training(accept_model, accept_train, target_train,
                                      target_held):
    def pairs(model, corpus):
        out = []
        for utt in corpus:
            frames = tokenize(model, utt, use_stages=1)
            mel, _ = analyze(model.config, utt)
            out.append((frames, mel))
        return out

    def held_out_mr(model):
        scores = []
        for utt in target_held:
            decoded = decode_batch(model, tokenize(model, utt, use_stages=1))
            n = min(len(utt), len(decoded))
            scores.append(mr_mel(AudioBuffer(utt.samples[:n], 16000),
                                 AudioBuffer(decoded.samples[:n], 16000)))
        return float(np.mean(scores))

    stage2 = refit(accept_model, pairs(accept_model, accept_train),
                   ridge_lambda=0.3)
    stage3 = refit(stage2, pairs(stage2, target_train), ridge_lambda=0.1)

    hashes = [section_hashes(serialize_model(m))
              for m in (accept_model, stage2, stage3)]
    frozen = all(h["SEMC"] == hashes[0]["SEMC"] and h["AGRV"] == hashes[0]["AGRV"]
                 and h["CONF"] == hashes[0]["CONF"] for h in hashes)
    decoders_move = (hashes[0]["DECW"] != hashes[1]["DECW"]
                     and hashes[1]["DECW"] != hashes[2]["DECW"])

    before = held_out_mr(stage2)
    after = held_out_mr(stage3)
    improved = after < before

    ok = frozen and decoders_move and improved
    record_criterion(
        f"criterion 10 (staged training): {_verdict(ok)} SEMC/AGRV sections "
        f"byte-identical across stages 1->2->3; target-speaker held-out "
        f"mr_mel {before:.4f} -> {after:.4f}"
    )
    assert ok
