import struct
import zlib

import numpy as np
import pytest

import slider_quant.core.datafiles.packio as packio
import slider_quant.quant.quantizer as qz
import slider_quant.quant.schedule as sch
from slider_quant.calib.engine import run_pipeline
from slider_quant.core.errors import (ChecksumError, ContractError, MagicError, PackError, TruncatedError,
                                      VersionError)


@pytest.fixture
def artifact(tiny_checkpoint, calibset, fast_cfg):
    schedule = sch.generate_schedule(fast_cfg.schedule_config(4))
    return run_pipeline(tiny_checkpoint, schedule, calibset, fast_cfg, optimize=False).model


@pytest.fixture
def packed(artifact):
    return packio.pack(artifact)


def test_pack_codes_nibbles():
    payload = packio.pack_codes(np.arange(1, 9), 4)
    assert payload == bytes([0x21, 0x43, 0x65, 0x87])


def test_pack_codes_crosses_byte_boundaries():
    payload = packio.pack_codes(np.full(5, 7), 3)
    assert payload == bytes([0xFF, 0x7F])
    np.testing.assert_array_equal(packio.unpack_codes(payload, 5, 3), [7] * 5)


def test_pack_codes_rejects_wide_codes():
    with pytest.raises(ContractError):
        packio.pack_codes(np.array([8]), 3)
    with pytest.raises(TruncatedError):
        packio.unpack_codes(b"\x00", 5, 3)


def test_artifact_round_trip(artifact, packed):
    restored = packio.unpack(packed)
    assert packio.pack(restored) == packed
    assert restored.config == artifact.config
    assert restored.a_bits == artifact.a_bits
    original = artifact.dequantized_weights()
    for name, value in restored.dequantized_weights().items():
        np.testing.assert_array_equal(value, original[name])
    tokens = np.arange(12) % 11
    np.testing.assert_array_equal(restored.to_model().logits(tokens), artifact.to_model().logits(tokens))


def test_artifact_files(artifact, tmp_path):
    path = packio.save_artifact(artifact, tmp_path / "out" / "model.slq")
    assert path.read_bytes() == packio.pack(artifact)
    assert packio.load_artifact(path).quantized_layers() == [0, 1, 2, 3]
    with pytest.raises(FileNotFoundError):
        packio.load_artifact(tmp_path / "missing.slq")


def test_bad_magic(packed):
    with pytest.raises(MagicError):
        packio.unpack(b"SLQM" + packed[4:])


def test_flipped_byte_fails_checksum(packed):
    corrupted = bytearray(packed)
    corrupted[len(packed) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        packio.unpack(bytes(corrupted))


def test_newer_version(packed):
    body = bytearray(packed[:-4])
    struct.pack_into("<H", body, 4, 2)
    resealed = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(VersionError):
        packio.unpack(resealed)


@pytest.mark.parametrize("extra", [1, -1])
def test_slice_count_must_match_shape(artifact, extra):
    name = sorted(artifact.quantized)[0]
    q = artifact.quantized[name]
    count = q.params.num_slices + extra
    step = np.resize(q.params.step, count)
    beta = np.resize(q.params.beta, count)
    artifact.quantized[name] = qz.QuantizedTensor(
        codes=q.codes, params=qz.QuantParams(step=step, beta=beta, shape=q.params.shape, spec=q.params.spec))
    with pytest.raises(PackError, match="parameter slices"):
        packio.unpack(packio.pack(artifact))


def test_truncated(packed):
    with pytest.raises(TruncatedError):
        packio.unpack(packed[:-10])


def test_fuzzed_buffers_never_parse(packed):
    rng = np.random.default_rng(0)
    for _ in range(100):
        corrupted = bytearray(packed)
        corrupted[int(rng.integers(len(packed)))] ^= int(rng.integers(1, 256))
        with pytest.raises(PackError):
            packio.unpack(bytes(corrupted))
    for _ in range(100):
        with pytest.raises(PackError):
            packio.unpack(packed[:int(rng.integers(len(packed)))])


def test_incomplete_model_is_not_packed(tiny_checkpoint, calibset, fast_cfg):
    partial = run_pipeline(tiny_checkpoint, sch.single_layer_schedule(4, [2]), calibset, fast_cfg,
                           optimize=False).model
    with pytest.raises(ContractError):
        packio.pack(partial)


def test_storage_report(artifact):
    report = packio.storage_report(artifact)
    rows = {row.name: row for row in report.rows}
    assert len(rows) == 28
    # 4-bit codes plus one f32 step and one i32 offset per output column.
    assert rows["blocks.0.q"].packed_bytes == 16 * 16 // 2 + 8 * 16
    assert rows["blocks.0.down"].packed_bytes == 32 * 16 // 2 + 8 * 16
    assert rows["blocks.0.up"].fp32_bytes == 4 * 16 * 32
    assert report.ratio == report.fp32_bytes / report.packed_bytes
    assert report.format_table().splitlines()[-1].startswith("total")
    assert report.to_dict()["packed_bytes"] == report.packed_bytes


def test_storage_report_needs_quantized_tensors(tiny_checkpoint, calibset, fast_cfg):
    empty = run_pipeline(tiny_checkpoint, sch.WindowSchedule((), num_layers=4), calibset, fast_cfg).model
    with pytest.raises(ContractError):
        packio.storage_report(empty)


def test_checkpoint_round_trip(tiny_checkpoint, tmp_path):
    path = packio.save_checkpoint(tiny_checkpoint, tmp_path / "model.slqm")
    restored = packio.load_checkpoint(path)
    assert restored.config == tiny_checkpoint.config
    for name, value in tiny_checkpoint.weights.items():
        np.testing.assert_array_equal(restored.weights[name], value)
    with pytest.raises(MagicError):
        packio.unpack_checkpoint(b"SLQ1" + path.read_bytes()[4:])
    with pytest.raises(ChecksumError):
        data = path.read_bytes()
        packio.unpack_checkpoint(data[:-1] + bytes([data[-1] ^ 0x01]))


def test_token_files(tmp_path, corpus_ids):
    path = packio.save_tokens(corpus_ids, tmp_path / "test.npy")
    np.testing.assert_array_equal(packio.load_tokens(path), corpus_ids)
    grid = tmp_path / "grid.npy"
    np.save(grid, np.zeros((2, 3), dtype=np.int32))
    with pytest.raises(PackError):
        packio.load_tokens(grid)


def test_calibset_files(tmp_path, calibset):
    restored = packio.load_calibset(packio.save_calibset(calibset, tmp_path / "calib.npz"))
    np.testing.assert_array_equal(restored.tokens, calibset.tokens)
    np.testing.assert_array_equal(restored.offsets, calibset.offsets)
    assert restored.seed == calibset.seed
