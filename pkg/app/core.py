"""
共享领域类型、维度约定和校验。

维度约定在整个仓库内固定: 通道优先, 然后是时间帧, 最后是频点, 即 (I, T, F)。
通道索引在内部为 0-based; 文件和命令行使用 1-based 编号, 只在 load/dump 处转换。
"""
import enum
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.constants import DEFAULT_MIC_SPACING_M, DEFAULT_NUM_MICS, DEFAULT_PAIRS_ONE_BASED

logger = logging.getLogger(__name__)


# --- 异常 ---

class SeparationError(Exception):
    """所有领域错误的基类。"""


class DataError(SeparationError):
    """输入数据或文件不满足约束。"""


class NumericalError(SeparationError):
    """数值求解失败 (PSD 奇异、掩码能量下溢等)。"""


class MissingInput(SeparationError):
    """所选方法缺少必需的输入。"""


class DimensionMismatch(DataError):
    def __init__(self, expected, actual, what: str = 'dimensions'):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} 不匹配: 期望 {expected}, 实际 {actual}")


class InvalidValue(DataError):
    pass


class InputTooShort(DataError):
    pass


class InvalidPair(DataError):
    pass


class InvalidAngle(DataError):
    pass


class EmptyGrid(DataError):
    pass


class NoPairs(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroReference(DataError):
    pass


class SilentSource(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class CorruptFile(DataError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (字节偏移 {offset})")


class BadMagic(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class DimsMismatch(DataError):
    pass


class Truncated(DataError):
    pass


class _BinError(NumericalError):
    reason = ''

    def __init__(self, f: int, context: str = ''):
        self.bin = f
        self.context = context
        prefix = f"{context}: " if context else ''
        super().__init__(f"{prefix}{self.reason} (频点 {f})")


class DegenerateMask(_BinError):
    reason = '掩码能量下溢'


class SingularPsd(_BinError):
    reason = 'PSD 矩阵在对角加载后仍不可逆'


class DegenerateTrace(_BinError):
    reason = 'Trace((Φn)^-1 Φs) 接近零'


# --- 校验工具 ---

def _frozen(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


def _require_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise InvalidValue(f"{what} 包含 NaN 或 Inf")


# --- 配置 ---

@dataclass(frozen=True, eq=False)
class SignalConfig:
    sample_rate_hz: int = 16000
    window_len_samples: int = 512
    hop_len_samples: int = 256
    sound_speed_m_per_s: float = 343.0

    def __post_init__(self):
        for name in ('sample_rate_hz', 'window_len_samples', 'hop_len_samples'):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise InvalidValue(f"{name} 必须是正整数, 实际为 {value}")
        if self.window_len_samples % 2:
            raise InvalidValue(f"窗长必须为偶数, 实际为 {self.window_len_samples}")
        if self.hop_len_samples > self.window_len_samples:
            raise InvalidValue("帧移不能大于窗长")
        if not self.sound_speed_m_per_s > 0:
            raise InvalidValue("声速必须为正数")

    @property
    def n_freq_bins(self) -> int:
        return self.window_len_samples // 2 + 1

    @classmethod
    def from_mapping(cls, config: Mapping[str, Any]) -> 'SignalConfig':
        """从 Flask 配置 (或任意映射) 中读取信号参数, 缺省项使用默认值。"""
        defaults = cls()
        return cls(
            sample_rate_hz=int(config.get('SAMPLE_RATE_HZ', defaults.sample_rate_hz)),
            window_len_samples=int(config.get('WINDOW_LEN_SAMPLES', defaults.window_len_samples)),
            hop_len_samples=int(config.get('HOP_LEN_SAMPLES', defaults.hop_len_samples)),
            sound_speed_m_per_s=float(config.get('SOUND_SPEED_M_PER_S', defaults.sound_speed_m_per_s)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'sample_rate_hz': self.sample_rate_hz,
            'window_len_samples': self.window_len_samples,
            'hop_len_samples': self.hop_len_samples,
            'n_freq_bins': self.n_freq_bins,
            'sound_speed_m_per_s': self.sound_speed_m_per_s,
        }


# --- 时域信号 ---

@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = _frozen(self.samples, np.float64)
        if samples.ndim != 1:
            raise DimensionMismatch(1, samples.ndim, 'Waveform 维数')
        _require_finite(samples, 'Waveform')
        if self.sample_rate_hz <= 0:
            raise InvalidValue("采样率必须为正数")
        object.__setattr__(self, 'samples', samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class MultiChannelWaveform:
    """(I, L) 的多通道信号, 所有通道等长且采样率相同。"""
    data: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim == 1:
            data = _frozen(data[None, :], np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise DimensionMismatch('(I, L) 且 I >= 1', data.shape, 'MultiChannelWaveform 形状')
        _require_finite(data, 'MultiChannelWaveform')
        if self.sample_rate_hz <= 0:
            raise InvalidValue("采样率必须为正数")
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_channels(cls, channels: Sequence[Waveform]) -> 'MultiChannelWaveform':
        if not channels:
            raise DimensionMismatch('I >= 1', 0, '通道数')
        rates = {c.sample_rate_hz for c in channels}
        lengths = {len(c) for c in channels}
        if len(rates) != 1:
            raise DimensionMismatch('相同采样率', sorted(rates), '采样率')
        if len(lengths) != 1:
            raise LengthMismatch(f"通道长度不一致: {sorted(lengths)}")
        return cls(np.stack([c.samples for c in channels]), channels[0].sample_rate_hz)

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    def channel(self, index: int) -> Waveform:
        if not 0 <= index < self.num_channels:
            raise DimensionMismatch(f"[0, {self.num_channels})", index, '通道索引')
        return Waveform(self.data[index], self.sample_rate_hz)

    @property
    def channels(self) -> Tuple[Waveform, ...]:
        return tuple(self.channel(i) for i in range(self.num_channels))


# --- 时频域 ---

@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """复数谱 x_{i,tf}, 形状 (I, T, F)。单通道 (I=1) 用于分离输出 y_{tf}。"""
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.complex128)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionMismatch('(I, T, F) 且各维 >= 1', data.shape, 'ComplexSpectrogram 形状')
        _require_finite(data, 'ComplexSpectrogram')
        object.__setattr__(self, 'data', data)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]

    def channel(self, index: int) -> 'ComplexSpectrogram':
        if not 0 <= index < self.num_channels:
            raise DimensionMismatch(f"[0, {self.num_channels})", index, '通道索引')
        return ComplexSpectrogram(self.data[index:index + 1])

    def to_flat(self) -> np.ndarray:
        # 扁平存储: C 顺序, 下标 ((i * T) + t) * F + f
        return self.data.ravel(order='C').copy()

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: Tuple[int, int, int]) -> 'ComplexSpectrogram':
        flat = np.asarray(flat)
        if flat.size != int(np.prod(dims)):
            raise DimensionMismatch(int(np.prod(dims)), flat.size, '扁平数据长度')
        return cls(flat.reshape(dims, order='C'))


@dataclass(frozen=True, eq=False)
class TimeFrequencyMask:
    """复数时频掩码 m_{tf}, 形状 (T, F); 实数掩码以零虚部存储。"""
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.complex128)
        if data.ndim != 2:
            raise DimensionMismatch('(T, F)', data.shape, 'TimeFrequencyMask 形状')
        _require_finite(data, 'TimeFrequencyMask')
        object.__setattr__(self, 'data', data)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


class WeightKind(enum.Enum):
    TIME_INVARIANT = 'time_invariant'
    TIME_VARYING = 'time_varying'


@dataclass(frozen=True, eq=False)
class BeamformerWeights:
    """时不变权重为 (I, F), 时变权重为 (I, T, F)。"""
    kind: WeightKind
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.complex128)
        expected_ndim = 2 if self.kind is WeightKind.TIME_INVARIANT else 3
        if data.ndim != expected_ndim:
            raise DimensionMismatch(expected_ndim, data.ndim, f"{self.kind.value} 权重维数")
        _require_finite(data, 'BeamformerWeights')
        object.__setattr__(self, 'data', data)

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]


# --- 阵列几何 ---

@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    mic_positions_m: np.ndarray
    pairs: Tuple[Tuple[int, int], ...] = ()
    reference_channel: int = 0

    def __post_init__(self):
        positions = _frozen(self.mic_positions_m, np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
            raise DimensionMismatch('(I, 3)', positions.shape, '麦克风坐标形状')
        _require_finite(positions, '麦克风坐标')
        num_mics = positions.shape[0]
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        for i, j in pairs:
            if not (0 <= i < num_mics and 0 <= j < num_mics) or i == j:
                raise InvalidPair(f"无效的麦克风对 ({i}, {j}), 麦克风数 {num_mics}")
        if not 0 <= self.reference_channel < num_mics:
            raise DimensionMismatch(f"[0, {num_mics})", self.reference_channel, '参考通道')
        object.__setattr__(self, 'mic_positions_m', positions)
        object.__setattr__(self, 'pairs', pairs)

    @property
    def num_mics(self) -> int:
        return self.mic_positions_m.shape[0]

    def displacement(self, i: int, j: int) -> np.ndarray:
        return self.mic_positions_m[i] - self.mic_positions_m[j]

    def distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.displacement(i, j)))

    def with_pairs(self, pairs: Iterable[Tuple[int, int]]) -> 'ArrayGeometry':
        return ArrayGeometry(self.mic_positions_m, tuple(pairs), self.reference_channel)

    def with_reference(self, reference_channel: int) -> 'ArrayGeometry':
        return ArrayGeometry(self.mic_positions_m, self.pairs, reference_channel)

    @classmethod
    def uniform_linear(cls, num_mics: int, spacing_m: float,
                       pairs: Iterable[Tuple[int, int]] = (), reference_channel: int = 0) -> 'ArrayGeometry':
        """沿 x 轴的均匀线阵, 第一个麦克风位于原点。"""
        positions = np.zeros((num_mics, 3))
        positions[:, 0] = np.arange(num_mics) * spacing_m
        return cls(positions, tuple(pairs), reference_channel)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> 'ArrayGeometry':
        """文件格式使用 1-based 的麦克风对和参考通道。"""
        try:
            positions = np.asarray(payload['mic_positions_m'], dtype=np.float64)
        except KeyError:
            raise InvalidValue("几何文件缺少 'mic_positions_m'")
        except (TypeError, ValueError) as e:
            raise InvalidValue(f"无法解析 'mic_positions_m': {e}")
        try:
            pairs = [(int(i) - 1, int(j) - 1) for i, j in payload.get('pairs', [])]
        except (TypeError, ValueError) as e:
            raise InvalidPair(f"无法解析 'pairs', 每个麦克风对应为两个 1-based 下标: {e}")
        try:
            reference = int(payload.get('reference_channel', 1)) - 1
        except (TypeError, ValueError) as e:
            raise InvalidValue(f"无法解析 'reference_channel': {e}")
        return cls(positions, tuple(pairs), reference)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mic_positions_m': self.mic_positions_m.tolist(),
            'pairs': [[i + 1, j + 1] for i, j in self.pairs],
            'reference_channel': self.reference_channel + 1,
        }


def default_geometry() -> ArrayGeometry:
    """15 麦克风、4 cm 间距的 x 轴线阵, 9 个默认麦克风对, 参考通道 1。"""
    pairs = [(i - 1, j - 1) for i, j in DEFAULT_PAIRS_ONE_BASED]
    return ArrayGeometry.uniform_linear(DEFAULT_NUM_MICS, DEFAULT_MIC_SPACING_M, pairs, 0)


def load_geometry(path: Optional[str]) -> ArrayGeometry:
    if path is None:
        return default_geometry()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidValue(f"解析几何文件 '{path}' 失败: {e}")
    geometry = ArrayGeometry.from_dict(payload)
    logger.debug(f"从 '{path}' 加载了 {geometry.num_mics} 个麦克风, {len(geometry.pairs)} 个麦克风对。")
    return geometry


def dump_geometry(geometry: ArrayGeometry, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(geometry.to_dict(), f, indent=2)


def validate_dims(spec: ComplexSpectrogram, geometry: ArrayGeometry) -> None:
    if spec.num_channels != geometry.num_mics:
        raise DimensionMismatch(geometry.num_mics, spec.num_channels, '通道数')
