"""Image preprocessing, 1025-element records, dataset loading and a synthetic sign generator.

Images become 32x32 grayscale vectors of 1024 floats in [0, 1]. On disk a
dataset is a directory of binary PGM/PPM files plus a tab-separated
manifest (``relative/path<TAB>label``).
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .rng import Rng

log = logging.getLogger(__name__)

SIDE = 32
N_PIXELS = SIDE * SIDE
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Sample:
    pixels: np.ndarray  # (1024,) float32 in [0, 1]
    label: int

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32).reshape(-1)
        if p.shape[0] != N_PIXELS:
            raise ValueError(f"sample needs {N_PIXELS} pixels, got {p.shape[0]}")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ValueError("pixel values must lie in [0, 1]")
        if int(self.label) < 0 or int(self.label) > 0xFFFF:
            raise ValueError(f"label {self.label} out of u16 range")
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray  # (n, 1024) float32
    labels: np.ndarray  # (n,) int64
    class_count: int
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float32).reshape(-1, N_PIXELS)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} images but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i):
        return Sample(self.X[i], int(self.labels[i]))

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.labels[idx], self.class_count, name or self.name)

    def equals(self, other):
        return (self.class_count == other.class_count
                and self.X.tobytes() == other.X.tobytes()
                and self.labels.tobytes() == other.labels.tobytes())


def _box_matrix(n_in, n_out):
    """(n_out, n_in) matrix averaging input cells by their overlap with each output cell."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_in)[None, :] + 1)
    overlap = np.clip(hi - lo, 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def to_grayscale(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        if raw.shape[2] == 1:
            return raw[:, :, 0]
        if raw.shape[2] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {raw.shape[2]}")
        return raw @ LUMA
    if raw.ndim != 2:
        raise ValueError(f"expected a 2-D grid or HxWxC array, got shape {raw.shape}")
    return raw


def resize_box(gray, side=SIDE):
    h, w = gray.shape
    return _box_matrix(h, side) @ gray @ _box_matrix(w, side).T


def preprocess_image(raw):
    """u8 intensity grid (HxW or HxWx3) -> 1024 float32 values in [0, 1].

    Grayscale by ITU-R 601 luminance, area-averaging resize to 32x32,
    scale by 1/255, flatten row-major.
    """
    raw = np.asarray(raw)
    if raw.size == 0 or raw.shape[0] < 1 or raw.ndim < 2 or raw.shape[1] < 1:
        raise ValueError("empty image")
    small = resize_box(to_grayscale(raw))
    return np.clip(small / 255.0, 0.0, 1.0).astype(np.float32).reshape(-1)


def encode_record(sample):
    """1024 pixels followed by the label as element 1025."""
    return np.concatenate([sample.pixels, np.float32([sample.label])]).astype(np.float32)


def decode_record(vec):
    vec = np.asarray(vec, dtype=np.float32).reshape(-1)
    if vec.shape[0] != N_PIXELS + 1:
        raise FormatError(f"record must have {N_PIXELS + 1} elements, got {vec.shape[0]}", 0)
    label = float(vec[N_PIXELS])
    if not np.isfinite(label) or label < 0 or label != int(label):
        raise FormatError(f"label element {label} is not a non-negative integer", N_PIXELS)
    try:
        return Sample(vec[:N_PIXELS], int(label))
    except ValueError as exc:
        raise FormatError(str(exc), 0) from exc


# Netpbm ---------------------------------------------------------------------

def _pnm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 2
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("truncated netpbm header", pos)
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tok = data[start:pos]
            if not tok.isdigit():
                raise FormatError(f"bad netpbm header token {tok!r}", start)
            tokens.append(int(tok))
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(data):
    """Decode a binary PGM (P5) or PPM (P6) into a u8/u16 array (HxW or HxWx3)."""
    data = bytes(data)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r} (need P5 or P6)", 0)
    (w, h, maxval), pos = _pnm_tokens(data, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid netpbm dimensions {w}x{h} maxval {maxval}", 2)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated raster: need {need} bytes, have {len(data) - pos}", pos)
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    arr = arr.astype(np.float64) * (255.0 / maxval)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        header = b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0])
    else:
        header = b"P6\n%d %d\n255\n" % (image.shape[1], image.shape[0])
    with open(path, "wb") as fh:
        fh.write(header + image.tobytes())


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip().isdigit():
                raise FormatError(f"manifest line must be 'path<TAB>label': {line!r}", lineno)
            entries.append((parts[0], int(parts[1])))
    return entries


def load_dataset(dir_path, manifest="manifest.tsv", name=None):
    """Load every image listed in the manifest, in manifest order."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest_path = manifest if os.path.isabs(manifest) else os.path.join(dir_path, manifest)
        entries = read_manifest(manifest_path)
    else:
        entries = list(manifest)
    if not entries:
        raise ValueError("manifest is empty")
    X, labels = [], []
    for rel, label in entries:
        full = os.path.join(dir_path, rel)
        if not os.path.exists(full):
            raise FileNotFoundError(f"missing image {full}")
        with open(full, "rb") as fh:
            X.append(preprocess_image(read_pnm(fh.read())))
        labels.append(label)
    class_count = max(labels) + 1
    missing = sorted(set(range(class_count)) - set(labels))
    if missing:
        log.warning("labels %s have no samples", missing)
    return Dataset(np.stack(X), np.array(labels), class_count, name or os.path.basename(dir_path))


def shuffle_split(dataset, test_fraction, seed):
    """Seeded shuffle, then split off ``test_fraction`` of the samples as a held-out set."""
    order = Rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


# SDS1 cache -------------------------------------------------------------------

_SDS_HEADER = struct.Struct("<4sIH")


def dump_dataset(dataset):
    parts = [_SDS_HEADER.pack(b"SDS1", len(dataset), dataset.class_count)]
    for x, y in zip(dataset.X, dataset.labels):
        parts.append(x.astype("<f4").tobytes())
        parts.append(struct.pack("<H", int(y)))
    return b"".join(parts)


def parse_dataset(data, name=""):
    data = bytes(data)
    if len(data) < _SDS_HEADER.size:
        raise FormatError("truncated SDS1 header", len(data))
    magic, count, class_count = _SDS_HEADER.unpack_from(data, 0)
    if magic != b"SDS1":
        raise FormatError(f"bad magic {magic!r}", 0)
    rec = N_PIXELS * 4 + 2
    if len(data) != _SDS_HEADER.size + count * rec:
        raise FormatError(f"expected {count} records of {rec} bytes", _SDS_HEADER.size)
    body = np.frombuffer(data, dtype=np.uint8, offset=_SDS_HEADER.size).reshape(count, rec)
    X = body[:, :N_PIXELS * 4].copy().view("<f4").astype(np.float32)
    labels = body[:, N_PIXELS * 4:].copy().view("<u2").reshape(-1).astype(np.int64)
    return Dataset(X, labels, class_count, name)


# Synthetic signs --------------------------------------------------------------

def _strokes():
    """Eight disjoint strokes: a bar and a diagonal in each 16x16 quadrant, >= 64 px each."""
    strokes = []
    for q in range(4):
        r0, c0 = 16 * (q // 2), 16 * (q % 2)
        bar = np.zeros((SIDE, SIDE), bool)
        bar[r0 + 1:r0 + 5, c0:c0 + 16] = True
        diag = np.zeros((SIDE, SIDE), bool)
        for r in range(6, 16):
            start = r - 6 if q % 2 == 0 else 15 - (r - 6) - 6
            diag[r0 + r, c0 + start:c0 + start + 7] = True
        strokes.extend([bar, diag])
    return strokes


# Each class lights two strokes; distinct pairs differ in >= 2 whole strokes.
_STROKE_PAIRS = [(0, 7), (1, 6), (2, 5), (3, 4), (0, 3), (1, 2), (4, 7), (5, 6),
                 (0, 5), (2, 7), (1, 4), (3, 6), (0, 1), (2, 3), (4, 5), (6, 7)]
MAX_CLASSES = len(_STROKE_PAIRS)
BACKGROUND = 0.1
FOREGROUND = 0.9


def prototypes(class_count):
    """(class_count, 1024) glyph prototypes: bright strokes on a dark background."""
    if not 2 <= class_count <= MAX_CLASSES:
        raise ValueError(f"class_count must be in [2, {MAX_CLASSES}], got {class_count}")
    strokes = _strokes()
    out = np.full((class_count, SIDE, SIDE), BACKGROUND, np.float32)
    for k in range(class_count):
        a, b = _STROKE_PAIRS[k]
        out[k][strokes[a] | strokes[b]] = FOREGROUND
    return out.reshape(class_count, N_PIXELS)


def synth_generate(class_count, per_class, noise_sigma, seed):
    """Label-balanced synthetic dataset: prototype + N(0, sigma) noise, clipped to [0, 1].

    Samples are ordered class by class.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    protos = prototypes(class_count)
    labels = np.repeat(np.arange(class_count), per_class)
    X = protos[labels].astype(np.float64)
    if noise_sigma > 0:
        X = X + noise_sigma * Rng(seed).normal(X.size).reshape(X.shape)
    X = np.clip(X, 0.0, 1.0).astype(np.float32)
    return Dataset(X, labels, class_count, f"synth{class_count}")


def to_u8(pixels):
    """Inverse of the 1/255 scaling, as stored in raw-image frames."""
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
