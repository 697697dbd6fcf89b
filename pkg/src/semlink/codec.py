"""Split a trained classifier into encoder and decoder halves.

The encoder runs the input layer and emits the hidden ReLU activations as a
``FeatureVector``; the decoder finishes the classification and maps the
class to a roadblock ``(lane, position)``. Feature vectors travel in the
SFF1 container::

    "SFF1" | flags u8 | dtype u8 | ndim u8 | dim0 u32 | frame_id u32 |
    crc32 u32 | payload

all little-endian, 19 header bytes. The trailing "1" of the magic is the
format version. Flag bit 0 means the payload is raw DEFLATE; the CRC always
covers the uncompressed float32 bytes.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError, FormatError, MappingError, ShapeError
from .nn import Activation

SFF_MAGIC = b"SFF1"
FLAG_DEFLATE = 0x01
DTYPE_F32 = 0
_SFF_HEADER = struct.Struct("<4sBBBIII")
SFF_HEADER_SIZE = _SFF_HEADER.size  # 19


@dataclass(frozen=True, eq=False)
class ClassMap:
    """class index -> (roadblock lane, roadblock position)."""

    entries: dict = field(default_factory=dict)

    def __getitem__(self, cls):
        try:
            return self.entries[int(cls)]
        except KeyError:
            raise MappingError(f"class {cls} has no roadblock mapping") from None

    def __len__(self):
        return len(self.entries)

    def roadblocks(self):
        """Distinct (lane, position) pairs, in class order."""
        seen = []
        for k in sorted(self.entries):
            if self.entries[k] not in seen:
                seen.append(self.entries[k])
        return seen


def default_class_map(class_count, highway_length=100):
    """Spread classes over lanes ``k % 3`` and positions in ``[20, length - 20]``."""
    if class_count < 1:
        raise ValueError("class_count must be >= 1")
    groups = max(1, math.ceil(class_count / 3) - 1)
    step = (highway_length - 40) / groups
    hi = max(20, highway_length - 20)
    entries = {}
    for k in range(class_count):
        pos = int(math.floor(20 + (k // 3) * step))
        entries[k] = (k % 3, min(max(pos, 20), hi))
    return ClassMap(entries)


def read_class_map(path):
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
                raise FormatError(f"class map line must be 'class<TAB>lane<TAB>position': {line!r}", lineno)
            cls, lane, pos = (int(p) for p in parts)
            if lane > 2:
                raise FormatError(f"lane {lane} out of range", lineno)
            entries[cls] = (lane, pos)
    return ClassMap(entries)


def write_class_map(class_map, path):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(class_map.entries):
            lane, pos = class_map.entries[k]
            fh.write(f"{k}\t{lane}\t{pos}\n")


@dataclass(frozen=True, eq=False)
class EncoderHalf:
    model: nn.ModelWeights

    def __post_init__(self):
        if self.model.output_activation != Activation.RELU:
            raise ContractError("encoder must end in a ReLU layer")

    @property
    def n_in(self):
        return self.model.layers[0].n_in

    @property
    def n_out(self):
        return self.model.layers[-1].n_out


@dataclass(frozen=True, eq=False)
class DecoderHalf:
    model: nn.ModelWeights
    class_map: ClassMap = None

    def __post_init__(self):
        if self.model.output_activation != Activation.SOFTMAX:
            raise ContractError("decoder must end in a softmax layer")

    @property
    def n_in(self):
        return self.model.layers[0].n_in


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray  # (H,) float32, post-ReLU
    frame_id: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "frame_id", int(self.frame_id) & 0xFFFFFFFF)

    def equals(self, other):
        return self.frame_id == other.frame_id and self.values.tobytes() == other.values.tobytes()


def split_model(model, split_index=1, class_map=None):
    """Cut after layer ``split_index``; the cut must follow a ReLU layer."""
    n = len(model.layers)
    if not 1 <= split_index < n:
        raise ContractError(f"split_index must be in [1, {n - 1}], got {split_index}")
    if model.layers[split_index - 1].activation != Activation.RELU:
        raise ContractError("can only split after a ReLU layer")
    enc = EncoderHalf(model.replace_layers(model.layers[:split_index]))
    if class_map is None:
        class_map = default_class_map(model.layers[-1].n_out)
    dec = DecoderHalf(model.replace_layers(model.layers[split_index:]), class_map)
    return enc, dec


def join_halves(encoder, decoder):
    return encoder.model.replace_layers(encoder.model.layers + decoder.model.layers)


def encode_features(encoder, pixels, frame_id=0):
    pixels = np.asarray(pixels, dtype=np.float32).reshape(-1)
    if pixels.shape[0] != encoder.n_in:
        raise ShapeError(f"encoder expects {encoder.n_in} inputs, got {pixels.shape[0]}")
    out, _ = nn.forward(encoder.model, pixels)
    return FeatureVector(out, frame_id)


def decoder_probabilities(decoder, fv):
    values = fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float32)
    if values.shape[-1] != decoder.n_in:
        raise ShapeError(f"decoder expects {decoder.n_in} features, got {values.shape[-1]}")
    out, _ = nn.forward(decoder.model, values)
    return out


def classify_features(decoder, fv):
    """``(class_index, confidence, (lane, position))`` for one feature vector."""
    cls, conf = nn.argmax_confidence(decoder_probabilities(decoder, fv))
    if decoder.class_map is None:
        raise MappingError("decoder has no class map")
    return cls, conf, decoder.class_map[cls]


def write_sff(fv, flags=0):
    raw = fv.values.astype("<f4").tobytes()
    payload = raw
    if flags & FLAG_DEFLATE:
        c = zlib.compressobj(9, zlib.DEFLATED, -15)
        payload = c.compress(raw) + c.flush()
    header = _SFF_HEADER.pack(SFF_MAGIC, flags & 0xFF, DTYPE_F32, 1,
                              fv.values.shape[0], fv.frame_id, zlib.crc32(raw))
    return header + payload


def read_sff(data):
    data = bytes(data)
    if len(data) < SFF_HEADER_SIZE:
        raise FormatError(f"truncated SFF1 header: {len(data)} of {SFF_HEADER_SIZE} bytes", len(data))
    magic, flags, dtype, ndim, dim0, frame_id, crc = _SFF_HEADER.unpack_from(data, 0)
    if magic != SFF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SFF_MAGIC!r}", 0)
    if flags & ~FLAG_DEFLATE:
        raise FormatError(f"unknown flag bits 0x{flags:02x}", 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype} (only 0 = f32)", 5)
    if ndim != 1:
        raise FormatError(f"unsupported ndim {ndim}", 6)
    expected = dim0 * 4
    payload = data[SFF_HEADER_SIZE:]
    if flags & FLAG_DEFLATE:
        try:
            d = zlib.decompressobj(-15)
            raw = d.decompress(payload, expected + 1)
        except zlib.error as exc:
            raise FormatError(f"corrupt DEFLATE payload: {exc}", SFF_HEADER_SIZE) from exc
        if not d.eof or d.unused_data or len(raw) != expected:
            raise FormatError(f"DEFLATE payload inflates to {len(raw)} bytes, expected {expected}", SFF_HEADER_SIZE)
    else:
        if len(payload) != expected:
            raise FormatError(f"payload length {len(payload)} != expected {expected}", SFF_HEADER_SIZE)
        raw = payload
    if zlib.crc32(raw) != crc:
        raise FormatError("payload CRC mismatch", 15)
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return FeatureVector(values, frame_id)


def sff_header(data):
    """Header fields as a dict, for inspection tools."""
    if len(data) < SFF_HEADER_SIZE:
        raise FormatError("truncated SFF1 header", len(data))
    names = ("magic", "flags", "dtype", "ndim", "dim0", "frame_id", "crc32")
    return dict(zip(names, _SFF_HEADER.unpack_from(bytes(data), 0)))
