"""aqcodec: a low-bitrate speech token codec.

Encodes 16 kHz speech into one semantic token plus up to three acoustic
tokens per 60 ms frame (0.43-0.87 kbps at the full-scale codebook
sizes), and decodes them back with a streaming, 180 ms look-ahead
detokenizer.  See README.md for the pipeline walkthrough.
"""

from .audio import AudioBuffer, read_wav, resample, slice_seconds, write_wav
from .bitstream import BitstreamHeader, TokenFrame, bitrate_kbps, pack, unpack
from .decoder import (LOOKAHEAD_MS, StreamState, WaveformSynthesizer, decode_batch,
                      decode_mel, refit, stream_flush, stream_push, synthesize)
from .errors import (CodecError, DataError, FormatError, MissingSectionError,
                     StreamStateError)
from .metrics import MetricsReport, evaluate_codec, gpe, mr_mel, mr_stft, stoi
from .model import (CodecConfig, CodecModel, analyze, load_model, save_model,
                    tokenize, train_encoder)

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "read_wav", "write_wav", "resample", "slice_seconds",
    "TokenFrame", "BitstreamHeader", "pack", "unpack", "bitrate_kbps",
    "CodecConfig", "CodecModel", "train_encoder", "tokenize", "analyze",
    "save_model", "load_model",
    "refit", "decode_mel", "decode_batch", "synthesize",
    "StreamState", "stream_push", "stream_flush", "WaveformSynthesizer",
    "LOOKAHEAD_MS",
    "stoi", "gpe", "mr_stft", "mr_mel", "evaluate_codec", "MetricsReport",
    "CodecError", "DataError", "FormatError", "MissingSectionError",
    "StreamStateError",
    "__version__",
]
