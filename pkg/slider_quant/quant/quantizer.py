"""
Uniform affine quantizer.

    quantizer(Z) = clamp(round(Z / step) − β, 0, 2^b − 1)
    step = (Z_max − Z_min) / (2^b − 1),  β = round(Z_min / step)

Params are computed per slice; the slice layout is set by the granularity. Rounding is
half away from zero everywhere.
"""
from enum import Enum
import dataclasses as dc
import typing as t

import numpy as np

import slider_quant.core.logging as logging
import slider_quant.core.numkit as nk
from slider_quant.core.errors import ConfigError, ContractError, DimensionError

logger = logging.get_logger(__name__)

SUPPORTED_BITS = (2, 3, 4, 8, 16)
DEFAULT_EPSILON_STEP = 1e-8
# Slices within this many steps of a grid are checked against the float32 steps that could have made it.
GRID_TOLERANCE = 0.25
MAX_STEP_CANDIDATES = 64
MAX_OFFSET_CANDIDATES = 128


class Granularity(Enum):
    PER_TENSOR = 0
    PER_CHANNEL = 1
    PER_TOKEN = 2
    GROUP_WISE = 3


@dc.dataclass(frozen=True)
class QuantSpec:
    """Bit width and slice layout of a quantizer."""
    bits: int
    granularity: Granularity = Granularity.PER_TENSOR
    axis: int = -1
    group_size: int = 0
    epsilon_step: float = DEFAULT_EPSILON_STEP

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.granularity is Granularity.GROUP_WISE and self.group_size < 1:
            raise ConfigError(f"group_size >= 1 violated: group_size={self.group_size}")
        if self.epsilon_step <= 0:
            raise ConfigError(f"epsilon_step > 0 violated: {self.epsilon_step}")

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1

    @classmethod
    def per_tensor(cls, bits: int) -> "QuantSpec":
        return cls(bits, Granularity.PER_TENSOR)

    @classmethod
    def per_channel(cls, bits: int, axis: int = 1) -> "QuantSpec":
        return cls(bits, Granularity.PER_CHANNEL, axis=axis)

    @classmethod
    def per_token(cls, bits: int, axis: int = -1) -> "QuantSpec":
        return cls(bits, Granularity.PER_TOKEN, axis=axis)

    @classmethod
    def group_wise(cls, bits: int, group_size: int, axis: int = 0) -> "QuantSpec":
        return cls(bits, Granularity.GROUP_WISE, axis=axis, group_size=group_size)


@dc.dataclass(frozen=True)
class QuantParams:
    """Per-slice step (float32) and offset β (int64) for a tensor of ``shape``."""
    step: np.ndarray
    beta: np.ndarray
    shape: t.Tuple[int, ...]
    spec: QuantSpec

    def __post_init__(self):
        if self.step.shape != self.beta.shape:
            raise ContractError(f"step/beta slice counts differ: {self.step.shape} vs {self.beta.shape}")
        if np.any(self.step <= 0):
            raise ContractError("QuantParams: every step must be > 0")

    @property
    def num_slices(self) -> int:
        return int(self.step.shape[0])


@dc.dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes in [0, 2^b − 1], one per element, with their params."""
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> t.Tuple[int, ...]:
        return self.params.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def to_slices(z: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Rearrange ``z`` into a [slices × slice_length] matrix for ``spec``'s granularity."""
    if spec.granularity is Granularity.PER_TENSOR:
        return z.reshape(1, -1)
    axis = _normalize_axis(spec.axis, z.ndim)
    extent = z.shape[axis]
    if spec.granularity is Granularity.PER_CHANNEL:
        return np.moveaxis(z, axis, 0).reshape(extent, -1)
    moved = np.moveaxis(z, axis, -1)
    if spec.granularity is Granularity.PER_TOKEN:
        return moved.reshape(-1, extent)
    if extent % spec.group_size != 0:
        raise ConfigError(f"group_size {spec.group_size} must divide axis extent {extent}")
    return moved.reshape(-1, spec.group_size)


def from_slices(sliced: np.ndarray, shape: t.Tuple[int, ...], spec: QuantSpec) -> np.ndarray:
    """Inverse of ``to_slices``."""
    if spec.granularity is Granularity.PER_TENSOR:
        return sliced.reshape(shape)
    axis = _normalize_axis(spec.axis, len(shape))
    if spec.granularity is Granularity.PER_CHANNEL:
        moved_shape = (shape[axis],) + tuple(s for i, s in enumerate(shape) if i != axis)
        return np.moveaxis(sliced.reshape(moved_shape), 0, axis)
    moved_shape = tuple(s for i, s in enumerate(shape) if i != axis) + (shape[axis],)
    return np.moveaxis(sliced.reshape(moved_shape), -1, axis)


def slice_count(shape: t.Tuple[int, ...], spec: QuantSpec) -> int:
    """Number of parameter slices ``spec`` cuts a tensor of ``shape`` into."""
    if spec.granularity is Granularity.PER_TENSOR:
        return 1
    numel = int(np.prod(shape, dtype=np.int64))
    extent = shape[_normalize_axis(spec.axis, len(shape))]
    if spec.granularity is Granularity.PER_CHANNEL:
        return extent
    if spec.granularity is Granularity.PER_TOKEN:
        return numel // extent if extent else 0
    if extent % spec.group_size != 0:
        raise ConfigError(f"group_size {spec.group_size} must divide axis extent {extent}")
    return numel // spec.group_size


def _min_max_params(z_min: np.ndarray, z_max: np.ndarray, spec: QuantSpec) -> t.Tuple[np.ndarray, np.ndarray]:
    step = np.maximum((z_max - z_min) / spec.qmax, spec.epsilon_step).astype(np.float32)
    beta = round_half_away(z_min / step.astype(np.float64)).astype(np.int64)
    return step, beta


def _grid_distance(sliced: np.ndarray, z_min: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Largest distance, in steps, from any element of a slice to the grid anchored at its minimum."""
    ratio = (sliced - z_min[:, None]) / step.astype(np.float64)[:, None]
    return np.abs(ratio - round_half_away(ratio)).max(axis=1)


def _reconstruct(sliced: np.ndarray, step: np.ndarray, beta: np.ndarray, qmax: int) -> np.ndarray:
    step = step.astype(np.float64)[:, None]
    codes = np.clip(round_half_away(sliced / step) - beta[:, None], 0, qmax)
    return ((codes + beta[:, None]) * step).astype(nk.DTYPE)


def _float32_between(lo: float, hi: float) -> np.ndarray:
    value = np.float32(lo)
    if value < lo:
        value = np.nextafter(value, np.float32(np.inf))
    found = []
    while value <= hi and len(found) < MAX_STEP_CANDIDATES:
        found.append(value)
        value = np.nextafter(value, np.float32(np.inf))
    return np.array(found, dtype=np.float32)


def _steps_rounding_to(value: float, multiple: int) -> t.Tuple[float, float]:
    """Steps s for which multiple·s rounds to the float32 ``value``."""
    half_ulp = float(np.abs(np.spacing(np.float32(value)))) / 2
    a, b = (value - half_ulp) / multiple, (value + half_ulp) / multiple
    return min(a, b), max(a, b)


def _step_candidates(z_min: float, z_max: float, spec: QuantSpec) -> np.ndarray:
    """
    float32 steps whose grid can hold z_min at code 0 and z_max at code 2^b − 1 or 2^b − 2,
    plus the epsilon floor. Offsets are tried over the range the min-max step's rounding allows.
    """
    floor = float(np.float32(spec.epsilon_step))
    candidates = []
    span = z_max - z_min
    if span > 0:
        slack = min(2.0 ** -22 * ((abs(z_min) + abs(z_max)) / span + 1), 0.5)
        for levels in (spec.qmax, spec.qmax - 1):
            center = max(span / levels, floor)
            ends = (z_min / (center * (1 - slack)), z_min / (center * (1 + slack)))
            guess = int(round_half_away(np.array(z_min / center)))
            first = max(int(np.floor(min(ends))) - 1, guess - MAX_OFFSET_CANDIDATES)
            last = min(int(np.ceil(max(ends))) + 1, guess + MAX_OFFSET_CANDIDATES)
            for beta in range(first, last + 1):
                lo, hi = floor, np.inf
                for value, multiple in ((z_min, beta), (z_max, beta + levels)):
                    if multiple != 0:
                        a, b = _steps_rounding_to(value, multiple)
                        lo, hi = max(lo, a), min(hi, b)
                if lo <= hi:
                    candidates.append(_float32_between(lo, hi))
    candidates.append(np.array([floor], dtype=np.float32))
    return np.concatenate(candidates)


def _snap_to_grid(values: np.ndarray, spec: QuantSpec) -> t.Optional[t.Tuple[np.float32, int]]:
    """Step and offset of a grid that reproduces ``values`` exactly, if there is one."""
    steps = _step_candidates(float(values.min()), float(values.max()), spec)
    betas = round_half_away(values.min() / steps.astype(np.float64)).astype(np.int64)
    rows = np.broadcast_to(values, (steps.size, values.size))
    exact = np.all(_reconstruct(rows, steps, betas, spec.qmax) == values, axis=1)
    if not exact.any():
        return None
    found = int(np.argmax(exact))
    return steps[found], int(betas[found])


def calc_params(z: t.Union[nk.Tensor, np.ndarray], spec: QuantSpec) -> QuantParams:
    """
    Min-max params per slice: step = max(range / (2^b − 1), epsilon_step), β = round(z_min / step).

    A slice that already lies on a quantization grid keeps that grid, so re-quantizing a
    fake-quantized tensor returns it unchanged. The min-max step of such a slice can differ
    from the step that produced it in its last float32 bits.

    :raises ContractError: On an empty tensor or non-finite values
    """
    data = z.data if isinstance(z, nk.Tensor) else np.asarray(z, dtype=nk.DTYPE)
    if data.size == 0:
        raise ContractError("calc_params: empty slice")
    if not np.all(np.isfinite(data)):
        raise ContractError("calc_params: non-finite input")
    sliced = to_slices(data, spec).astype(np.float64)
    z_min = sliced.min(axis=1)
    z_max = sliced.max(axis=1)
    step, beta = _min_max_params(z_min, z_max, spec)

    alt_step = np.maximum((z_max - z_min) / (spec.qmax - 1), spec.epsilon_step).astype(np.float32)
    near_grid = ((_grid_distance(sliced, z_min, step) < GRID_TOLERANCE)
                 | (_grid_distance(sliced, z_min, alt_step) < GRID_TOLERANCE))
    for row in np.flatnonzero(near_grid):
        values = sliced[row]
        if np.array_equal(_reconstruct(values[None, :], step[row:row + 1], beta[row:row + 1], spec.qmax)[0], values):
            continue
        snapped = _snap_to_grid(values, spec)
        if snapped is not None:
            step[row], beta[row] = snapped
    return QuantParams(step=step, beta=beta, shape=tuple(data.shape), spec=spec)


def _raw_codes(data: np.ndarray, params: QuantParams) -> np.ndarray:
    sliced = to_slices(data, params.spec).astype(np.float64)
    step = params.step.astype(np.float64)[:, None]
    return round_half_away(sliced / step) - params.beta[:, None]


def quantize(z: t.Union[nk.Tensor, np.ndarray], params: QuantParams,
             spec: t.Optional[QuantSpec] = None) -> QuantizedTensor:
    """codes = clamp(round(z / step) − β, 0, 2^b − 1) per slice."""
    spec = spec or params.spec
    data = z.data if isinstance(z, nk.Tensor) else np.asarray(z, dtype=nk.DTYPE)
    if tuple(data.shape) != params.shape:
        raise DimensionError(f"quantize: tensor shape {data.shape} != params shape {params.shape}")
    raw = _raw_codes(data, params)
    codes = np.clip(raw, 0, spec.qmax).astype(np.uint32)
    return QuantizedTensor(codes=from_slices(codes, params.shape, spec), params=params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """ẑ = (code + β) · step per slice, returned as float32."""
    params = q.params
    sliced = to_slices(q.codes, params.spec).astype(np.float64)
    values = (sliced + params.beta[:, None]) * params.step.astype(np.float64)[:, None]
    return from_slices(values, params.shape, params.spec).astype(nk.DTYPE)


def fake_quant(z: nk.Tensor, spec: QuantSpec) -> nk.Tensor:
    """
    Quantize-dequantize with dynamic min-max params. Backward is the clipped
    straight-through estimator: gradient passes where the pre-clamp code is in range.
    """
    params = calc_params(z, spec)
    raw = _raw_codes(z.data, params)
    in_range = from_slices((raw >= 0) & (raw <= spec.qmax), params.shape, spec)
    codes = np.clip(raw, 0, spec.qmax)
    values = (codes + params.beta[:, None]) * params.step.astype(np.float64)[:, None]
    out = from_slices(values, params.shape, spec).astype(nk.DTYPE)
    return nk.Tensor.from_op(out, (z,), lambda g: (g * in_range,), op="fake_quant")


def fake_quant_columns(w: nk.Tensor, spec: QuantSpec, fraction: float) -> nk.Tensor:
    """
    Fake-quantize the first round(fraction·m) output columns of an n×m weight and keep
    the remaining columns in full precision.
    """
    columns = w.shape[-1]
    quantized = int(round_half_away(np.array(fraction * columns)))
    if quantized >= columns:
        return fake_quant(w, spec)
    if quantized <= 0:
        return w
    head = fake_quant(w[:, :quantized], spec)
    return nk.concat([head, w[:, quantized:]], axis=1)
