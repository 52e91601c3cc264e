"""
Binary file formats. Little-endian throughout.

SLQ1 quantized artifact:
    magic "SLQ1" | u16 version | u64 total length | u8 wbits | u8 abits | u8 granularity
    | i8 axis | u32 group size | u32 config length | config JSON | u32 record count
    | records... | u32 CRC32 of everything before it

    record: u16 name length | name | u8 ndim | u32 dims... | u8 kind
        kind 1 (quantized): u32 slices | f32 steps... | i32 betas... | u32 payload length | codes,
            bit-packed LSB-first in row-major element order, final byte zero-padded
        kind 0 (float): f32 values in row-major order

SLQM FP checkpoint:
    magic "SLQM" | u16 version | u32 config length | config JSON | f32 tensors in declared
    order | u32 CRC32
"""
from pathlib import Path
import dataclasses as dc
import json
import struct
import typing as t
import zlib

import numpy as np

import slider_quant.core.logging as logging
import slider_quant.core.datafiles.serialization as ser
import slider_quant.quant.quantizer as qz
from slider_quant.core.errors import (ChecksumError, ContractError, MagicError, PackError, TruncatedError,
                                      VersionError)
from slider_quant.model.corpus import CalibSet
from slider_quant.model.quantized import QuantizedModel
from slider_quant.model.tinymodel import Checkpoint, ModelConfig, weight_names, weight_shape

logger = logging.get_logger(__name__)

ARTIFACT_MAGIC = b"SLQ1"
CHECKPOINT_MAGIC = b"SLQM"
FORMAT_VERSION = 1

KIND_FLOAT = 0
KIND_QUANTIZED = 1

FLOAT_BYTES = 4
SLICE_PARAM_BYTES = 8  # f32 step + i32 beta

_PREAMBLE = struct.Struct("<4sHQ")
_SPEC = struct.Struct("<BBBbI")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

INT32_MIN, INT32_MAX = np.iinfo(np.int32).min, np.iinfo(np.int32).max


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Stream each code's ``bits`` bits LSB-first; ceil(n·bits / 8) bytes."""
    flat = codes.reshape(-1).astype(np.uint32)
    if flat.size and int(flat.max()) >= 1 << bits:
        raise ContractError(f"Code {int(flat.max())} does not fit in {bits} bits")
    bit_matrix = ((flat[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    needed = (count * bits + 7) // 8
    if len(payload) != needed:
        raise TruncatedError(f"Code payload of {len(payload)} bytes, expected {needed}")
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:count * bits]
    weights = (np.uint32(1) << np.arange(bits, dtype=np.uint32))
    return (stream.reshape(count, bits).astype(np.uint32) * weights).sum(axis=1, dtype=np.uint32)


class _Reader:
    """Cursor over a byte buffer; every overrun is a truncation."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise TruncatedError(f"Need {size} bytes at offset {self.offset}, have {len(self.data) - self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> t.Tuple[t.Any, ...]:
        return fmt.unpack(self.take(fmt.size))

    def u8(self) -> int:
        return self.unpack(_U8)[0]

    def u16(self) -> int:
        return self.unpack(_U16)[0]

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * np.dtype(dtype).itemsize), dtype=dtype).copy()


def _config_bytes(config: ModelConfig) -> bytes:
    return ser.canonical_json(ser.serialize_dataclass(config))


def _read_config(reader: _Reader) -> ModelConfig:
    raw = reader.take(reader.u32())
    try:
        return ser.deserialize_dataclass(ModelConfig, json.loads(raw.decode("utf-8")), strict=True)
    except (UnicodeDecodeError, ValueError) as e:
        raise PackError(f"Unreadable model config in header: {e}") from e


def _record_header(name: str, shape: t.Tuple[int, ...], kind: int) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_U16.pack(len(encoded)), encoded, _U8.pack(len(shape))]
    parts += [_U32.pack(dim) for dim in shape]
    parts.append(_U8.pack(kind))
    return b"".join(parts)


def _quantized_record(name: str, q: qz.QuantizedTensor) -> bytes:
    params = q.params
    if params.beta.size and (params.beta.min() < INT32_MIN or params.beta.max() > INT32_MAX):
        raise PackError(f"{name}: offset beta does not fit in 32 bits")
    payload = pack_codes(q.codes, params.spec.bits)
    return b"".join([
        _record_header(name, params.shape, KIND_QUANTIZED),
        _U32.pack(params.num_slices),
        params.step.astype("<f4").tobytes(),
        params.beta.astype("<i4").tobytes(),
        _U32.pack(len(payload)),
        payload,
    ])


def _float_record(name: str, value: np.ndarray) -> bytes:
    return _record_header(name, value.shape, KIND_FLOAT) + np.ascontiguousarray(value, dtype="<f4").tobytes()


def _seal(body: bytes) -> bytes:
    return body + _U32.pack(zlib.crc32(body))


def pack(model: QuantizedModel) -> bytes:
    """
    Serialize a fully quantized model. Output is a pure function of the content.

    :raises ContractError: If any block is not quantized
    """
    if not model.is_complete:
        missing = sorted(set(range(model.config.n_layers)) - set(model.quantized_layers()))
        raise ContractError(f"pack needs every block committed; unquantized blocks: {missing}")
    spec = model.w_spec
    config = _config_bytes(model.config)
    head = _SPEC.pack(spec.bits, model.a_bits, spec.granularity.value, spec.axis, spec.group_size)
    records = []
    for name in weight_names(model.config):
        if name in model.quantized:
            records.append(_quantized_record(name, model.quantized[name]))
        else:
            records.append(_float_record(name, model.fp[name]))
    tail = b"".join([head, _U32.pack(len(config)), config, _U32.pack(len(records))] + records)
    total = _PREAMBLE.size + len(tail) + _U32.size
    return _seal(_PREAMBLE.pack(ARTIFACT_MAGIC, FORMAT_VERSION, total) + tail)


def _check_envelope(data: bytes, magic: bytes) -> None:
    """Magic, then CRC."""
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise MagicError(f"Bad magic: expected {magic!r}, got {bytes(data[:len(magic)])!r}")
    if len(data) < len(magic) + _U32.size:
        raise TruncatedError(f"File of {len(data)} bytes is too short")
    body, stored = data[:-_U32.size], _U32.unpack(data[-_U32.size:])[0]
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {zlib.crc32(body):#010x}")


def _check_version(version: int) -> None:
    if version > FORMAT_VERSION:
        raise VersionError(f"Format version {version} is newer than supported version {FORMAT_VERSION}")
    if version < 1:
        raise VersionError(f"Invalid format version {version}")


def unpack(data: bytes) -> QuantizedModel:
    """
    Parse an SLQ1 artifact.

    :raises MagicError, TruncatedError, ChecksumError, VersionError: On a malformed buffer
    """
    data = bytes(data)
    if len(data) < len(ARTIFACT_MAGIC) or data[:len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise MagicError(f"Bad magic: expected {ARTIFACT_MAGIC!r}, got {data[:len(ARTIFACT_MAGIC)]!r}")
    if len(data) < _PREAMBLE.size + _U32.size:
        raise TruncatedError(f"Artifact of {len(data)} bytes is shorter than its preamble")
    _, version, total = _PREAMBLE.unpack(data[:_PREAMBLE.size])
    if len(data) < total:
        raise TruncatedError(f"Artifact declares {total} bytes but only {len(data)} are present")
    if len(data) > total:
        raise PackError(f"Artifact declares {total} bytes but {len(data)} are present")
    _check_envelope(data, ARTIFACT_MAGIC)
    _check_version(version)

    try:
        reader = _Reader(data[:-_U32.size], _PREAMBLE.size)
        wbits, abits, granularity, axis, group_size = reader.unpack(_SPEC)
        spec = qz.QuantSpec(wbits, qz.Granularity(granularity), axis=axis, group_size=group_size)
        config = _read_config(reader)
        quantized, fp = {}, {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u16()).decode("utf-8")
            shape = tuple(reader.u32() for _ in range(reader.u8()))
            kind = reader.u8()
            numel = int(np.prod(shape, dtype=np.int64))
            if kind == KIND_QUANTIZED:
                slices = reader.u32()
                expected = qz.slice_count(shape, spec)
                if slices != expected:
                    raise PackError(f"{name}: {slices} parameter slices, but shape {shape} under "
                                    f"{spec.granularity.value} needs {expected}")
                step = reader.array("<f4", slices).astype(np.float32)
                beta = reader.array("<i4", slices).astype(np.int64)
                codes = unpack_codes(reader.take(reader.u32()), numel, wbits).reshape(shape)
                params = qz.QuantParams(step=step, beta=beta, shape=shape, spec=spec)
                quantized[name] = qz.QuantizedTensor(codes=codes, params=params)
            elif kind == KIND_FLOAT:
                fp[name] = reader.array("<f4", numel).astype(np.float32).reshape(shape)
            else:
                raise PackError(f"{name}: unknown record kind {kind}")
        if reader.offset != len(reader.data):
            raise PackError(f"{len(reader.data) - reader.offset} unread bytes after the last record")
        return QuantizedModel(config=config, w_spec=spec, a_bits=abits, quantized=quantized, fp=fp)
    except PackError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise PackError(f"Malformed artifact: {e}") from e


def save_artifact(model: QuantizedModel, artifact_path: t.Union[str, Path]) -> Path:
    artifact_path = Path(artifact_path)
    artifact_path.parent.mkdir(parents=True, exist_ok=True)
    data = pack(model)
    artifact_path.write_bytes(data)
    logger.info(f"Wrote quantized artifact: {artifact_path} ({len(data)} bytes)")
    return artifact_path


def load_artifact(artifact_path: t.Union[str, Path]) -> QuantizedModel:
    artifact_path = Path(artifact_path)
    if not artifact_path.exists():
        raise FileNotFoundError(f"Artifact not found: {artifact_path}")
    return unpack(artifact_path.read_bytes())


@dc.dataclass(frozen=True)
class StorageRow:
    name: str
    numel: int
    packed_bytes: int
    fp32_bytes: int

    @property
    def ratio(self) -> float:
        return self.fp32_bytes / self.packed_bytes


@dc.dataclass(frozen=True)
class StorageReport:
    rows: t.Tuple[StorageRow, ...]

    @property
    def packed_bytes(self) -> int:
        return sum(row.packed_bytes for row in self.rows)

    @property
    def fp32_bytes(self) -> int:
        return sum(row.fp32_bytes for row in self.rows)

    @property
    def ratio(self) -> float:
        return self.fp32_bytes / self.packed_bytes

    def format_table(self) -> str:
        lines = [f"{'tensor':<24} {'elements':>10} {'packed':>10} {'fp32':>10} {'ratio':>7}"]
        for row in self.rows:
            lines.append(f"{row.name:<24} {row.numel:>10} {row.packed_bytes:>10} {row.fp32_bytes:>10} "
                         f"{row.ratio:>7.3f}")
        lines.append(f"{'total':<24} {sum(r.numel for r in self.rows):>10} {self.packed_bytes:>10} "
                     f"{self.fp32_bytes:>10} {self.ratio:>7.3f}")
        return "\n".join(lines)

    def to_dict(self) -> t.Dict[str, t.Any]:
        return {"tensors": [dc.asdict(row) | {"ratio": row.ratio} for row in self.rows],
                "packed_bytes": self.packed_bytes, "fp32_bytes": self.fp32_bytes, "ratio": self.ratio}


def storage_report(model: QuantizedModel) -> StorageReport:
    """
    Packed bytes (codes plus per-slice step and offset) against FP32 bytes for every
    quantized tensor.

    :raises ContractError: If the model holds no quantized tensors
    """
    rows = []
    for name in weight_names(model.config):
        if name not in model.quantized:
            continue
        q = model.quantized[name]
        numel = int(np.prod(q.shape))
        packed = (numel * q.params.spec.bits + 7) // 8 + SLICE_PARAM_BYTES * q.params.num_slices
        rows.append(StorageRow(name=name, numel=numel, packed_bytes=packed, fp32_bytes=FLOAT_BYTES * numel))
    if not rows:
        raise ContractError("storage_report needs at least one quantized tensor")
    return StorageReport(tuple(rows))


def pack_checkpoint(checkpoint: Checkpoint) -> bytes:
    config = _config_bytes(checkpoint.config)
    parts = [CHECKPOINT_MAGIC, _U16.pack(FORMAT_VERSION), _U32.pack(len(config)), config]
    parts += [np.ascontiguousarray(checkpoint.weights[name], dtype="<f4").tobytes()
              for name in weight_names(checkpoint.config)]
    return _seal(b"".join(parts))


def unpack_checkpoint(data: bytes) -> Checkpoint:
    data = bytes(data)
    _check_envelope(data, CHECKPOINT_MAGIC)
    try:
        reader = _Reader(data[:-_U32.size], len(CHECKPOINT_MAGIC))
        _check_version(reader.u16())
        config = _read_config(reader)
        weights = {}
        for name in weight_names(config):
            shape = weight_shape(config, name)
            weights[name] = reader.array("<f4", int(np.prod(shape))).astype(np.float32).reshape(shape)
        if reader.offset != len(reader.data):
            raise PackError(f"{len(reader.data) - reader.offset} unread bytes after the last tensor")
        return Checkpoint(config, weights)
    except PackError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise PackError(f"Malformed checkpoint: {e}") from e


def save_checkpoint(checkpoint: Checkpoint, checkpoint_path: t.Union[str, Path]) -> Path:
    checkpoint_path = Path(checkpoint_path)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_path.write_bytes(pack_checkpoint(checkpoint))
    logger.info(f"Wrote checkpoint: {checkpoint_path}")
    return checkpoint_path


def load_checkpoint(checkpoint_path: t.Union[str, Path]) -> Checkpoint:
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint_path}")
    return unpack_checkpoint(checkpoint_path.read_bytes())


def save_tokens(ids: np.ndarray, tokens_path: t.Union[str, Path]) -> Path:
    tokens_path = Path(tokens_path)
    tokens_path.parent.mkdir(parents=True, exist_ok=True)
    with tokens_path.open("wb") as f:
        np.save(f, np.asarray(ids, dtype="<i4"), allow_pickle=False)
    logger.debug(f"Wrote {len(ids)} tokens: {tokens_path}")
    return tokens_path


def load_tokens(tokens_path: t.Union[str, Path]) -> np.ndarray:
    tokens_path = Path(tokens_path)
    if not tokens_path.exists():
        raise FileNotFoundError(f"Token file not found: {tokens_path}")
    try:
        ids = np.load(tokens_path, allow_pickle=False)
    except ValueError as e:
        raise PackError(f"Unreadable token file {tokens_path}: {e}") from e
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise PackError(f"{tokens_path}: expected a 1-d integer array, got {ids.dtype} {ids.shape}")
    return ids.astype(np.int32)


def save_calibset(calibset: CalibSet, calib_path: t.Union[str, Path]) -> Path:
    calib_path = Path(calib_path)
    calib_path.parent.mkdir(parents=True, exist_ok=True)
    with calib_path.open("wb") as f:
        np.savez(f, tokens=calibset.tokens, offsets=calibset.offsets, seed=np.int64(calibset.seed))
    logger.debug(f"Wrote calibration set: {calib_path}")
    return calib_path


def load_calibset(calib_path: t.Union[str, Path]) -> CalibSet:
    calib_path = Path(calib_path)
    if not calib_path.exists():
        raise FileNotFoundError(f"Calibration set not found: {calib_path}")
    with np.load(calib_path, allow_pickle=False) as archive:
        return CalibSet(tokens=archive["tokens"].astype(np.int32), offsets=archive["offsets"].astype(np.int64),
                        seed=int(archive["seed"]))
