import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import clouds, same_rows
from octsqueeze import codec
from octsqueeze.entropy import init_model
from octsqueeze.errors import CorruptStreamError, ModelMismatchError
from octsqueeze.octree import Mode

MODELS = ["uniform", "histogram", "parent-histogram"]


@pytest.fixture(scope="module")
def deep():
    return init_model(K=2, k_max=12, seed=11)


def roundtrip_ok(pts, model, depth, mode, deep=None):
    data, stats = codec.encode_cloud(pts, model, depth, mode)
    rec = codec.decode_cloud(data, deep)
    return same_rows(rec, np.unique(codec.roundtrip_reference(pts, depth), axis=0)), data, stats


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("model", MODELS + ["deep"])
def test_roundtrip(rng, deep, model, mode):
    m = deep if model == "deep" else model
    for depth in (1, 4, 9):
        pts = rng.normal(size=(300, 3)) * [10, 10, 1]
        ok, _, _ = roundtrip_ok(pts, m, depth, mode, deep)
        assert ok


@given(clouds(max_points=40), st.integers(1, 12), st.sampled_from(MODELS), st.sampled_from(list(Mode)))
def test_roundtrip_property(pts, depth, model, mode):
    assert roundtrip_ok(pts, model, depth, mode)[0]


def test_header_fields(rng):
    pts = rng.normal(size=(100, 3))
    data, stats = codec.encode_cloud(pts, "parent-histogram", 7, Mode.EARLY)
    head = struct.unpack_from("<4sBBBBI3ddIIQ", data)
    assert head[:6] == (b"OCSQ", 1, 1, 7, 2, 0)
    assert head[6:9] == tuple(pts.min(axis=0))
    assert head[10] == 100 and head[11] == stats.symbols
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_stats_accounting(rng):
    pts = rng.normal(size=(500, 3))
    data, stats = codec.encode_cloud(pts, "uniform", 10, Mode.FULL)
    assert stats.bpp == 8 * len(data) / 500
    # a uniform model costs 8 bits per symbol plus the header and flush
    overhead = 8 * (len(data) - stats.payload_bytes) / 500
    assert abs(stats.bpp - 8 * stats.symbols / 500 - overhead) < 64 / 500
    assert stats.model_bits == pytest.approx(8 * stats.symbols)
    assert stats.line().startswith(f"bpp={stats.bpp:.6f} symbols={stats.symbols} bytes={len(data)}")


def test_bpp_uses_predup_count():
    pts = np.repeat(np.array([[0.0, 0, 0], [1, 1, 1]]), 50, axis=0)
    data, stats = codec.encode_cloud(pts, "histogram", 4)
    assert stats.points == 100 and stats.unique_points == 2
    qc, header = codec.decode_container(data)
    assert header.point_count == 100 and len(qc) == 2


def test_crc_bit_flip(rng):
    data, _ = codec.encode_cloud(rng.normal(size=(200, 3)), "histogram", 8)
    # header field, payload, crc itself (flips in length fields read as truncation)
    for pos in (5, 20, len(data) // 2, len(data) - 2):
        bad = bytearray(data)
        bad[pos] ^= 0x10
        with pytest.raises(codec.ChecksumError):
            codec.decode_cloud(bytes(bad))


def test_truncation(rng):
    data, _ = codec.encode_cloud(rng.normal(size=(200, 3)), "histogram", 8)
    for n in (3, 20, 70, len(data) - 1):
        with pytest.raises(CorruptStreamError):
            codec.decode_cloud(data[:n])
    with pytest.raises(codec.TruncatedError):
        codec.decode_cloud(data[:70])


def test_wrong_model(rng, deep):
    pts = rng.normal(size=(100, 3))
    data, _ = codec.encode_cloud(pts, deep, 6)
    other = init_model(K=2, k_max=12, seed=12)
    with pytest.raises(codec.WrongModelError):
        codec.decode_cloud(data, other)
    with pytest.raises(ModelMismatchError):
        codec.decode_cloud(data)


def test_depth_beyond_model(deep, rng):
    with pytest.raises(ValueError, match="k_max"):
        codec.encode_cloud(rng.normal(size=(10, 3)), init_model(K=0, k_max=6), 8)


def test_empty_rejected():
    with pytest.raises(ValueError):
        codec.encode_cloud(np.zeros((0, 3)), "uniform", 5)


def test_reencode_is_bit_exact(rng, deep):
    pts = rng.normal(size=(300, 3))
    for model in MODELS + [deep]:
        data, _ = codec.encode_cloud(pts, model, 9)
        qc, header = codec.decode_container(data, deep)
        from octsqueeze.octree import build_octree
        tree = build_octree(qc, header.mode)
        tree.params = header.params
        again, _ = codec.encode_tree_container(tree, model, header.point_count)
        assert again == data


def test_deterministic_files(rng, deep):
    pts = rng.normal(size=(300, 3))
    assert codec.encode_cloud(pts, deep, 8)[0] == codec.encode_cloud(pts, deep, 8)[0]


def test_resolve_model(tmp_path, deep):
    from octsqueeze.entropy import save_checkpoint
    save_checkpoint(deep, tmp_path / "m.ckpt")
    assert codec.resolve_model(str(tmp_path / "m.ckpt")).model_hash == deep.model_hash
    assert codec.resolve_model("uniform").kind == 0
    assert codec.resolve_model("parent-histogram").kind == 2
