"""
理想 (oracle) 时频掩码的构造与应用 (TF masking 前端)。
"""
import enum
import logging
from dataclasses import dataclass

import numpy as np

from app.constants import MAGNITUDE_FLOOR
from app.core import ComplexSpectrogram, DimensionMismatch, InvalidValue, TimeFrequencyMask

logger = logging.getLogger(__name__)


class MaskKind(enum.Enum):
    COMPLEX_IDEAL = 'cm'
    RATIO_IDEAL = 'irm'
    EXTERNAL = 'external'


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind = MaskKind.COMPLEX_IDEAL
    clip: float = 10.0

    def __post_init__(self):
        if not self.clip > 0:
            raise InvalidValue(f"掩码幅度上限必须为正数, 实际为 {self.clip}")

    def build(self, target_ref: ComplexSpectrogram, mix_ref: ComplexSpectrogram,
              interferer_ref: ComplexSpectrogram) -> TimeFrequencyMask:
        """按掩码类型构造理想掩码; 外部掩码只能从 BTF 文件加载。"""
        if self.kind is MaskKind.COMPLEX_IDEAL:
            return ideal_complex_mask(target_ref, mix_ref, self.clip)
        if self.kind is MaskKind.RATIO_IDEAL:
            return ideal_ratio_mask(target_ref, interferer_ref)
        raise InvalidValue("外部掩码不能由参考信号构造")


def _single_channel(spec: ComplexSpectrogram, what: str) -> np.ndarray:
    if spec.num_channels != 1:
        raise DimensionMismatch(1, spec.num_channels, f"{what} 通道数")
    return spec.data[0]


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(a.shape, b.shape, '(T, F)')


def ideal_complex_mask(target_ref: ComplexSpectrogram, mix_ref: ComplexSpectrogram,
                       clip: float = 10.0) -> TimeFrequencyMask:
    """m = s / x, 幅度裁剪到 clip 以内 (保留相位); |x| < 1e-12 的频点 m = 0。"""
    if not clip > 0:
        raise InvalidValue(f"掩码幅度上限必须为正数, 实际为 {clip}")
    s =_single_channel(target_ref, '目标参考')
    x = _single_channel(mix_ref, '混合参考')
    _same_shape(s, x)

    valid = np.abs(x) >= MAGNITUDE_FLOOR
    mask = np.zeros_like(x)
    mask[valid] = s[valid] / x[valid]
    magnitude = np.abs(mask)
    clipped = magnitude > clip
    if clipped.any():
        logger.debug(f"复数掩码有 {int(clipped.sum())} 个频点被裁剪到 {clip}。")
        mask[clipped] *= clip / magnitude[clipped]
    return TimeFrequencyMask(mask)


def ideal_ratio_mask(target_ref: ComplexSpectrogram, interferer_ref: ComplexSpectrogram) -> TimeFrequencyMask:
    """m = |s| / (|s| + |n|), 取值 [0, 1], 以零虚部的复数存储; 0/0 定义为 0。"""
    s = np.abs(_single_channel(target_ref, '目标参考'))
    n = np.abs(_single_channel(interferer_ref, '干扰参考'))
    _same_shape(s, n)
    denominator = s + n
    mask = np.divide(s, denominator, out=np.zeros_like(s), where=denominator > 0)
    return TimeFrequencyMask(mask.astype(np.complex128))


def apply_mask(mask: TimeFrequencyMask, mix_ref: ComplexSpectrogram) -> ComplexSpectrogram:
    """y_{tf} = m_{tf} * x_{R,tf} (逐点复数乘法)。"""
    x = _single_channel(mix_ref, '混合参考')
    _same_shape(mask.data, x)
    return ComplexSpectrogram((mask.data * x)[None])


def complement_mask(mask: TimeFrequencyMask) -> TimeFrequencyMask:
    """外部目标掩码没有配套噪声掩码时使用 1 - m。"""
    return TimeFrequencyMask(1.0 - mask.data)
