import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from semlink import codec, nn
from semlink.codec import ClassMap, DecoderHalf, FeatureVector
from semlink.errors import ContractError, FormatError, MappingError, ShapeError
from semlink.nn import Activation, DenseLayer, ModelWeights
from semlink.rng import Rng

R, S, L = Activation.RELU, Activation.SOFTMAX, Activation.LINEAR


def classifier(seed=0, hidden=10, classes=10):
    return nn.init_weights([1024, hidden, classes], [R, S], seed=seed)


# split ---------------------------------------------------------------------------

def test_split_default_model():
    enc, dec = codec.split_model(classifier())
    assert len(enc.model.layers) == 1 and enc.n_out == 10
    assert len(dec.model.layers) == 1 and dec.n_in == 10


def test_rejoin_is_bitwise_identity():
    m = nn.init_weights([8, 6, 5, 3], [R, R, S], seed=4)
    for k in (1, 2):
        enc, dec = codec.split_model(m, k)
        joined = codec.join_halves(enc, dec)
        assert joined.equals(m)
        x = Rng(k).random_f32(8)
        assert nn.forward(joined, x)[0].tobytes() == nn.forward(m, x)[0].tobytes()


@pytest.mark.parametrize("k", [0, 2, 5])
def test_bad_split_index(k):
    with pytest.raises(ContractError):
        codec.split_model(classifier(), k)


def test_half_contracts():
    with pytest.raises(ContractError):
        codec.EncoderHalf(nn.init_weights([4, 2], [S], seed=0))
    with pytest.raises(ContractError):
        DecoderHalf(nn.init_weights([4, 2], [L], seed=0))


# encode / classify -------------------------------------------------------------------

def test_zero_input_zero_bias_gives_zero_features():
    w = Rng(0).random_f32(40).reshape(10, 4)
    enc = codec.EncoderHalf(ModelWeights((DenseLayer(w, np.zeros(10), R),)))
    fv = codec.encode_features(enc, np.zeros(4), frame_id=3)
    assert not fv.values.any() and fv.frame_id == 3


@given(st.integers(0, 2**32))
@settings(max_examples=30, deadline=None)
def test_split_equivalence(seed):
    m = classifier(seed % 50)
    enc, dec = codec.split_model(m)
    x = Rng(seed).random_f32(1024)
    fv = codec.encode_features(enc, x)
    assert fv.values.min() >= 0
    cls, conf, _ = codec.classify_features(dec, fv)
    full_cls, full_conf = nn.predict(m, x)
    assert cls == full_cls
    assert np.allclose(codec.decoder_probabilities(dec, fv), nn.forward(m, x)[0], atol=1e-6)


def test_hundred_inputs_agree():
    m = classifier(5)
    enc, dec = codec.split_model(m)
    X = Rng(1).random_f32(100 * 1024).reshape(100, 1024)
    split = [codec.classify_features(dec, codec.encode_features(enc, x))[0] for x in X]
    assert split == np.argmax(nn.forward(m, X)[0], axis=1).tolist()


def test_encode_shape_error():
    enc, dec = codec.split_model(classifier())
    with pytest.raises(ShapeError):
        codec.encode_features(enc, np.zeros(1000))
    with pytest.raises(ShapeError):
        codec.classify_features(dec, FeatureVector(np.zeros(9)))


def test_identity_decoder():
    dec = DecoderHalf(ModelWeights((DenseLayer(np.eye(3) * 5, np.zeros(3), S),)),
                      ClassMap({0: (0, 20), 1: (1, 20), 2: (2, 20)}))
    cls, conf, rb = codec.classify_features(dec, FeatureVector([0, 0, 1]))
    assert cls == 2 and rb == (2, 20) and conf > 0.9


def test_class_map_lookup_and_missing():
    cmap = codec.default_class_map(10, 100)
    assert cmap[7] == (1, 60)
    dec = DecoderHalf(ModelWeights((DenseLayer(np.eye(2), np.zeros(2), S),)), ClassMap({0: (0, 20)}))
    with pytest.raises(MappingError):
        codec.classify_features(dec, FeatureVector([0, 1]))


def class_map_formula(k, count, length):
    step = (length - 40) / max(1, math.ceil(count / 3) - 1)
    return k % 3, min(max(20 + math.floor(k // 3 * step), 20), length - 20)


@given(st.integers(1, 16), st.integers(40, 300))
def test_default_class_map_formula(count, length):
    cmap = codec.default_class_map(count, length)
    assert len(cmap) == count
    for k in range(count):
        assert cmap[k] == class_map_formula(k, count, length)
        assert 20 <= cmap[k][1] <= length - 20


def test_default_class_map_examples():
    cmap = codec.default_class_map(3, 100)
    assert [cmap[k] for k in range(3)] == [(0, 20), (1, 20), (2, 20)]
    assert codec.default_class_map(16)[0] == (0, 20)


def test_class_map_file_round_trip(tmp_path):
    cmap = codec.default_class_map(10)
    codec.write_class_map(cmap, tmp_path / "c.map")
    assert codec.read_class_map(tmp_path / "c.map").entries == cmap.entries
    (tmp_path / "bad.map").write_text("0\t1\n")
    with pytest.raises(FormatError):
        codec.read_class_map(tmp_path / "bad.map")


# SFF1 ---------------------------------------------------------------------------

def test_sff_size_h10():
    fv = FeatureVector(np.arange(10, dtype=np.float32), 1)
    data = codec.write_sff(fv)
    header = 4 + 1 + 1 + 1 + 4 + 4 + 4  # magic, flags, dtype, ndim, dim0, frame_id, crc
    assert header == codec.SFF_HEADER_SIZE == 19
    assert len(data) == header + 40 == 59
    assert 40 * 25 <= 1024  # payload is at least 25x smaller than a raw image


def test_sff_header_layout():
    values = np.float32([1.5, 0, 2])
    data = codec.write_sff(FeatureVector(values, 0xDEAD))
    assert data[:4] == b"SFF1"
    assert struct.unpack_from("<BBBIII", data, 4) == (0, 0, 1, 3, 0xDEAD, zlib.crc32(values.tobytes()))
    assert data[19:] == values.astype("<f4").tobytes()


@given(st.lists(st.floats(0, 1e6, width=32), min_size=1, max_size=64),
       st.integers(0, 2**32 - 1), st.sampled_from([0, codec.FLAG_DEFLATE]))
@settings(max_examples=60, deadline=None)
def test_sff_round_trip(values, frame_id, flags):
    fv = FeatureVector(values, frame_id)
    data = codec.write_sff(fv, flags)
    assert codec.read_sff(data).equals(fv)
    assert codec.write_sff(codec.read_sff(data), flags) == data


def test_sff_deflate_payload_is_raw_deflate():
    fv = FeatureVector(np.zeros(64, np.float32))
    data = codec.write_sff(fv, codec.FLAG_DEFLATE)
    assert len(data) < 19 + 256
    assert zlib.decompress(data[19:], -15) == bytes(256)


def _err(data):
    with pytest.raises(FormatError) as info:
        codec.read_sff(data)
    return info.value


def test_sff_errors_with_offsets():
    good = codec.write_sff(FeatureVector(np.arange(10, dtype=np.float32)))
    assert _err(b"XFF1" + good[4:]).offset == 0
    assert _err(good[:4] + b"\x02" + good[5:]).offset == 4
    assert _err(good[:5] + b"\x01" + good[6:]).offset == 5
    assert _err(good[:6] + b"\x02" + good[7:]).offset == 6
    short = _err(good[:-4])
    assert short.offset == 19 and "36" in str(short) and "40" in str(short)
    assert _err(good[:10]).offset == 10
    flipped = bytearray(good); flipped[30] ^= 1
    assert _err(bytes(flipped)).offset == 15
    comp = bytearray(codec.write_sff(FeatureVector(np.zeros(10)), codec.FLAG_DEFLATE))
    assert _err(bytes(comp[:19]) + b"\xff\xff\xff").offset == 19


@given(st.binary(max_size=80))
@settings(max_examples=200, deadline=None)
def test_sff_fuzz(blob):
    try:
        codec.read_sff(blob)
    except FormatError:
        pass


@given(st.integers(0, 58), st.integers(0, 255), st.booleans())
@example(26, 237, True)  # equivalent DEFLATE stream
@settings(max_examples=200, deadline=None)
def test_sff_header_mutation(pos, value, deflate):
    data = bytearray(codec.write_sff(FeatureVector(np.arange(10, dtype=np.float32)),
                                     codec.FLAG_DEFLATE if deflate else 0))
    if pos >= len(data):
        return
    original = data[pos]
    data[pos] = value
    try:
        fv = codec.read_sff(bytes(data))
    except FormatError:
        return
    if deflate and pos >= codec.SFF_HEADER_SIZE:
        # an equivalent DEFLATE encoding is fine, silently different values are not
        assert np.array_equal(fv.values, np.arange(10, dtype=np.float32))
    else:
        assert value == original or 11 <= pos < 15  # only the frame_id field is unchecked
    assert fv.values.shape == (10,)
