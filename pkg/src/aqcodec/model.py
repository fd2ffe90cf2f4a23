"""Codec configuration, the trained-model container, and the encode pipeline.

A CodecModel bundles the semantic codebook, the acoustic residual
quantizer and (optionally) decoder weights under one immutable config.
Serialization (.aqm) is a tagged, length-prefixed, CRC-checked section
container; numeric payloads round-trip bit-exactly, so training with a
fixed seed produces byte-identical files.

Container layout (integers little-endian):

    magic    4 bytes  b"AQM1"
    version  u8       1
    sections, each:  tag (4 bytes) | payload_len u32 | payload | crc32 u32

Section order: CONF (config JSON), SEMC (semantic centroids),
AGRV (acoustic stages), DECW (decoder weights, optional).  A model
without DECW can encode but not decode.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import agrvq as agrvq_mod
from . import semantic as semantic_mod
from .agrvq import AgrvqQuantizer, AgrvqStage, GROUP_SIZE
from .audio import AudioBuffer
from .bitstream import BitstreamHeader, TokenFrame, semantic_bits
from .dsp import ENCODER_SAMPLE_RATE, FRAMES_PER_TOKEN, FbankFrames, fbank, stack_to_tokens
from .errors import DataError, FormatError, MissingSectionError
from .semantic import SemanticCodebook

MODEL_MAGIC = b"AQM1"
MODEL_VERSION = 1
CONTEXT_RADIUS = 3  # fixed by the 180 ms look-ahead contract
_SECTION_HEAD = struct.Struct("<4sI")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class CodecConfig:
    """Resolved hyperparameters; validated on construction."""

    sample_rate: int = ENCODER_SAMPLE_RATE
    output_rate: int = 16000
    num_bands: int = 80
    k_sem: int = 256
    num_stages: int = 3
    reduced_dim: int = 8
    use_stages: int = 3
    ridge_lambda: float = 0.3
    gl_iterations: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.sample_rate != ENCODER_SAMPLE_RATE:
            raise DataError(
                f"the tokenizer is pinned to {ENCODER_SAMPLE_RATE} Hz input, "
                f"got sample_rate={self.sample_rate}"
            )
        if self.output_rate not in (16000, 24000):
            raise DataError(f"output_rate must be 16000 or 24000, got {self.output_rate}")
        if self.num_bands < 8:
            raise DataError(f"num_bands must be >= 8, got {self.num_bands}")
        if self.k_sem < 2:
            raise DataError(f"k_sem must be >= 2, got {self.k_sem}")
        if not 0 <= self.num_stages <= agrvq_mod.MAX_STAGES:
            raise DataError(f"num_stages must lie in [0, {agrvq_mod.MAX_STAGES}]")
        if not 0 <= self.use_stages <= self.num_stages:
            raise DataError(
                f"use_stages must lie in [0, num_stages={self.num_stages}], "
                f"got {self.use_stages}"
            )
        if not 1 <= self.reduced_dim <= self.latent_dim:
            raise DataError(f"reduced_dim must lie in [1, {self.latent_dim}]")
        if self.ridge_lambda <= 0:
            raise DataError("ridge_lambda must be positive")
        if self.gl_iterations < 1:
            raise DataError("gl_iterations must be >= 1")

    @property
    def latent_dim(self) -> int:
        """Width of one token-rate latent row: 6 stacked mel frames."""
        return FRAMES_PER_TOKEN * self.num_bands

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "output_rate": self.output_rate,
            "num_bands": self.num_bands,
            "k_sem": self.k_sem,
            "num_stages": self.num_stages,
            "reduced_dim": self.reduced_dim,
            "use_stages": self.use_stages,
            "ridge_lambda": self.ridge_lambda,
            "gl_iterations": self.gl_iterations,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class DecoderWeights:
    """Windowed linear mel regressor.

    matrix: (latent_dim*(2*context_radius+1) + 1) x (6*num_bands),
    last input row is the bias term.
    """

    matrix: np.ndarray
    context_radius: int = CONTEXT_RADIUS
    ridge_lambda: float = 0.3


@dataclass(frozen=True)
class CodecModel:
    config: CodecConfig
    semantic: SemanticCodebook
    acoustic: AgrvqQuantizer
    decoder: DecoderWeights | None = None

    def require_decoder(self) -> DecoderWeights:
        if self.decoder is None:
            raise MissingSectionError(
                "model has no decoder weights (encode-only container); "
                "train stage 2 or load a model with a DECW section"
            )
        return self.decoder

    def with_decoder(self, decoder: DecoderWeights) -> "CodecModel":
        return replace(self, decoder=decoder)


def decoder_input_dim(config: CodecConfig) -> int:
    """Feature width of the decoder: 7 frames of reconstructed latents + bias."""
    return config.latent_dim * (2 * CONTEXT_RADIUS + 1) + 1


def default_decoder(config: CodecConfig) -> DecoderWeights:
    """Untrained fallback: pass the center frame's reconstructed latent through.

    The quantized latents already live in stacked log-mel space, so the
    identity selector is a sensible decoder before any refit.
    """
    dim = config.latent_dim
    matrix = np.zeros((decoder_input_dim(config), dim))
    center = CONTEXT_RADIUS * dim
    matrix[center:center + dim] = np.eye(dim)
    return DecoderWeights(matrix=matrix, context_radius=CONTEXT_RADIUS,
                          ridge_lambda=config.ridge_lambda)


def analyze(config: CodecConfig, audio: AudioBuffer) -> tuple[FbankFrames, np.ndarray]:
    """Mel frames and token-rate latent rows for one utterance."""
    if audio.sample_rate != config.sample_rate:
        raise DataError(
            f"expected {config.sample_rate} Hz input, got {audio.sample_rate} Hz; "
            f"resample to {config.sample_rate} Hz first"
        )
    frames = fbank(audio, num_bands=config.num_bands)
    return frames, stack_to_tokens(frames)


def train_encoder(config: CodecConfig, corpus: Sequence[AudioBuffer],
                  trained_on: str = "") -> CodecModel:
    """Stage-1 training: semantic codebook plus acoustic residual stages.

    The decoder is initialized to the additive-selector default so the
    model can decode immediately; stage 2 replaces it.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    rows = [analyze(config, utt)[1] for utt in corpus]
    latents = np.vstack(rows)
    if latents.shape[0] < config.k_sem:
        raise DataError(
            f"corpus yields {latents.shape[0]} token frames; training k_sem={config.k_sem} "
            f"clusters requires at least {config.k_sem}"
        )
    codebook = semantic_mod.train_kmeans(latents, k=config.k_sem, seed=config.seed,
                                         trained_on=trained_on)
    residuals = latents - semantic_mod.dequantize(codebook,
                                                  semantic_mod.assign(codebook, latents))
    quantizer = agrvq_mod.train_quantizer(residuals, num_stages=config.num_stages,
                                          reduced_dim=config.reduced_dim, seed=config.seed)
    return CodecModel(config=config, semantic=codebook, acoustic=quantizer,
                      decoder=default_decoder(config))


def tokenize(model: CodecModel, audio: AudioBuffer,
             use_stages: int | None = None) -> list:
    """Audio -> one TokenFrame per 60 ms: semantic index + acoustic chain."""
    use = model.config.use_stages if use_stages is None else use_stages
    _, latents = analyze(model.config, audio)
    sem = semantic_mod.assign(model.semantic, latents)
    residuals = latents - semantic_mod.dequantize(model.semantic, sem)
    acoustic = agrvq_mod.encode(model.acoustic, residuals, use_stages=use)
    return [TokenFrame(semantic=int(s), acoustic=tuple(int(a) for a in row))
            for s, row in zip(sem, acoustic)]


def frame_latents(model: CodecModel, frames: Sequence[TokenFrame]) -> np.ndarray:
    """Dequantized token frames, (N, latent_dim): semantic plus acoustic recon."""
    if not frames:
        return np.zeros((0, model.config.latent_dim))
    stage_counts = {len(f.acoustic) for f in frames}
    if len(stage_counts) != 1:
        raise DataError(f"token frames carry mixed acoustic depths: {sorted(stage_counts)}")
    sem_idx = np.array([f.semantic for f in frames], dtype=np.int64)
    latents = semantic_mod.dequantize(model.semantic, sem_idx)
    if stage_counts.pop():
        ac_idx = np.array([f.acoustic for f in frames], dtype=np.int64)
        latents = latents + agrvq_mod.decode(model.acoustic, ac_idx)
    return latents


def stream_header(model: CodecModel, num_frames: int,
                  use_stages: int | None = None) -> BitstreamHeader:
    """Header the encoder would write for a stream from this model."""
    use = model.config.use_stages if use_stages is None else use_stages
    return BitstreamHeader(sample_rate=model.config.sample_rate,
                           sem_bits=semantic_bits(model.config.k_sem),
                           num_acoustic=use, num_frames=num_frames)


# --- serialization -------------------------------------------------------

def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.float64).tobytes()


def _take(blob: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(blob):
        raise FormatError(f"model container truncated while reading {what}")
    return blob[offset:offset + count], offset + count


def _read_array(payload: bytes, offset: int, shape: tuple, what: str) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) * 8
    raw, offset = _take(payload, offset, count, what)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), offset


def _conf_payload(config: CodecConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def _semc_payload(codebook: SemanticCodebook) -> bytes:
    name = codebook.trained_on.encode()
    head = struct.pack("<IIH", codebook.size, codebook.dim, len(name))
    return head + name + _array_bytes(codebook.centroids)


def _agrv_payload(quantizer: AgrvqQuantizer) -> bytes:
    head = struct.pack("<BII", quantizer.num_stages, quantizer.latent_dim,
                       quantizer.reduced_dim)
    parts = [head]
    for stage in quantizer.stages:
        for arr in (stage.proj_a, stage.lift_a, stage.codebook_a,
                    stage.proj_b, stage.lift_b, stage.codebook_b):
            parts.append(_array_bytes(arr))
    return b"".join(parts)


def _decw_payload(decoder: DecoderWeights) -> bytes:
    rows, cols = decoder.matrix.shape
    head = struct.pack("<IIBd", rows, cols, decoder.context_radius, decoder.ridge_lambda)
    return head + _array_bytes(decoder.matrix)


def serialize_model(model: CodecModel) -> bytes:
    """Deterministic byte serialization of a model (same model -> same bytes)."""
    out = bytearray(MODEL_MAGIC)
    out.append(MODEL_VERSION)
    sections = [(b"CONF", _conf_payload(model.config)),
                (b"SEMC", _semc_payload(model.semantic)),
                (b"AGRV", _agrv_payload(model.acoustic))]
    if model.decoder is not None:
        sections.append((b"DECW", _decw_payload(model.decoder)))
    for tag, payload in sections:
        out += _SECTION_HEAD.pack(tag, len(payload))
        out += payload
        out += _CRC.pack(zlib.crc32(payload))
    return bytes(out)


def deserialize_model(blob: bytes) -> CodecModel:
    """Parse and validate a model container; see module docstring for errors."""
    if len(blob) < 5:
        raise FormatError("model container truncated: missing magic/version")
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad model magic {blob[:4]!r}, expected {MODEL_MAGIC!r}")
    if blob[4] != MODEL_VERSION:
        raise FormatError(f"unsupported model version {blob[4]}, expected {MODEL_VERSION}")
    offset = 5
    payloads: dict = {}
    order = []
    while offset < len(blob):
        raw, offset = _take(blob, offset, _SECTION_HEAD.size, "section header")
        tag, length = _SECTION_HEAD.unpack(raw)
        payload, offset = _take(blob, offset, length, f"section {tag!r}")
        crc_raw, offset = _take(blob, offset, 4, f"checksum of section {tag!r}")
        if zlib.crc32(payload) != _CRC.unpack(crc_raw)[0]:
            raise FormatError(f"checksum mismatch in section {tag.decode('ascii', 'replace')}")
        if tag not in (b"CONF", b"SEMC", b"AGRV", b"DECW"):
            raise FormatError(f"unknown section tag {tag!r}")
        if tag in payloads:
            raise FormatError(f"duplicate section {tag!r}")
        payloads[tag] = payload
        order.append(tag)
    for required in (b"CONF", b"SEMC", b"AGRV"):
        if required not in payloads:
            raise FormatError(f"model container lacks required section {required!r}")
    if order[:3] != [b"CONF", b"SEMC", b"AGRV"]:
        raise FormatError(f"sections out of order: {order}")

    try:
        conf = json.loads(payloads[b"CONF"].decode())
        config = CodecConfig(**conf)
    except (ValueError, TypeError, DataError) as exc:
        raise FormatError(f"invalid CONF section: {exc}") from exc

    payload = payloads[b"SEMC"]
    raw, off = _take(payload, 0, struct.calcsize("<IIH"), "SEMC header")
    size, dim, name_len = struct.unpack("<IIH", raw)
    if size != config.k_sem or dim != config.latent_dim:
        raise FormatError(
            f"SEMC shape ({size}, {dim}) contradicts config "
            f"({config.k_sem}, {config.latent_dim})"
        )
    name_raw, off = _take(payload, off, name_len, "SEMC fingerprint")
    centroids, off = _read_array(payload, off, (size, dim), "semantic centroids")
    if off != len(payload):
        raise FormatError("trailing bytes in SEMC section")
    centroids.setflags(write=False)
    codebook = SemanticCodebook(centroids=centroids, trained_on=name_raw.decode())

    payload = payloads[b"AGRV"]
    raw, off = _take(payload, 0, struct.calcsize("<BII"), "AGRV header")
    num_stages, latent_dim, reduced_dim = struct.unpack("<BII", raw)
    if num_stages != config.num_stages or latent_dim != config.latent_dim \
            or reduced_dim != config.reduced_dim:
        raise FormatError("AGRV geometry contradicts config")
    stages = []
    for s in range(num_stages):
        proj_a, off = _read_array(payload, off, (latent_dim, reduced_dim), f"stage {s} proj_a")
        lift_a, off = _read_array(payload, off, (reduced_dim, latent_dim), f"stage {s} lift_a")
        cb_a, off = _read_array(payload, off, (GROUP_SIZE, reduced_dim), f"stage {s} codebook_a")
        proj_b, off = _read_array(payload, off, (latent_dim, reduced_dim), f"stage {s} proj_b")
        lift_b, off = _read_array(payload, off, (reduced_dim, latent_dim), f"stage {s} lift_b")
        cb_b, off = _read_array(payload, off, (GROUP_SIZE, reduced_dim), f"stage {s} codebook_b")
        stages.append(AgrvqStage(proj_a=proj_a, lift_a=lift_a, codebook_a=cb_a,
                                 proj_b=proj_b, lift_b=lift_b, codebook_b=cb_b))
    if off != len(payload):
        raise FormatError("trailing bytes in AGRV section")
    quantizer = AgrvqQuantizer(stages=tuple(stages), latent_dim=latent_dim,
                               reduced_dim=reduced_dim)

    decoder = None
    if b"DECW" in payloads:
        payload = payloads[b"DECW"]
        raw, off = _take(payload, 0, struct.calcsize("<IIBd"), "DECW header")
        rows, cols, radius, lam = struct.unpack("<IIBd", raw)
        expected_rows = config.latent_dim * (2 * radius + 1) + 1
        if rows != expected_rows or cols != config.latent_dim:
            raise FormatError(
                f"DECW shape ({rows}, {cols}) inconsistent with config; "
                f"expected ({expected_rows}, {config.latent_dim})"
            )
        matrix, off = _read_array(payload, off, (rows, cols), "decoder matrix")
        if off != len(payload):
            raise FormatError("trailing bytes in DECW section")
        decoder = DecoderWeights(matrix=matrix, context_radius=radius, ridge_lambda=lam)

    return CodecModel(config=config, semantic=codebook, acoustic=quantizer, decoder=decoder)


def save_model(model: CodecModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> CodecModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


def section_hashes(blob: bytes) -> dict:
    """sha256 of each section payload, keyed by tag string ("CONF", ...)."""
    if len(blob) < 5 or blob[:4] != MODEL_MAGIC:
        raise FormatError("not a model container")
    offset = 5
    out = {}
    while offset < len(blob):
        raw, offset = _take(blob, offset, _SECTION_HEAD.size, "section header")
        tag, length = _SECTION_HEAD.unpack(raw)
        payload, offset = _take(blob, offset, length, f"section {tag!r}")
        _, offset = _take(blob, offset, 4, "checksum")
        out[tag.decode("ascii", "replace")] = hashlib.sha256(payload).hexdigest()
    return out
