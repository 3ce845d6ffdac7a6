"""
短时傅里叶变换 (STFT) 及其逆变换。

约定: 周期 Hann 窗, 不做中心填充, 分析从第 0 个样本开始, 末尾不完整的帧被丢弃;
单边谱 F = N/2 + 1 个频点, 第 f 个频点对应 f * fs / N Hz。
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.fft
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from app.core import (ComplexSpectrogram, DimensionMismatch, InputTooShort, InvalidValue,
                      MultiChannelWaveform, SignalConfig)

logger = logging.getLogger(__name__)

# 包络低于该比例 (相对最大值) 的样本视为未被任何帧覆盖
_ENVELOPE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class StftPlan:
    config: SignalConfig
    window: np.ndarray

    def __post_init__(self):
        window = np.array(self.window, dtype=np.float64, copy=True)
        n = self.config.window_len_samples
        hop = self.config.hop_len_samples
        if window.shape != (n,):
            raise DimensionMismatch((n,), window.shape, '窗函数长度')
        # Hann 在 50% 重叠下满足 COLA; Σw² 包络需处处非零才能做加权重叠相加
        if not scipy.signal.check_COLA(window, n, n - hop, tol=1e-6):
            raise InvalidValue(f"窗函数在帧移 {hop} 下不满足 COLA")
        if not scipy.signal.check_NOLA(window, n, n - hop):
            raise InvalidValue(f"窗函数平方在帧移 {hop} 下的重叠相加包络存在零点")
        window.flags.writeable = False
        object.__setattr__(self, 'window', window)

    @classmethod
    def from_config(cls, config: SignalConfig) -> 'StftPlan':
        window = scipy.signal.get_window('hann', config.window_len_samples, fftbins=True)
        return cls(config, window)

    @property
    def window_len(self) -> int:
        return self.config.window_len_samples

    @property
    def hop(self) -> int:
        return self.config.hop_len_samples

    @property
    def n_freq_bins(self) -> int:
        return self.config.n_freq_bins

    def num_frames(self, length: int) -> int:
        return 1 + (length - self.window_len) // self.hop

    def bin_frequencies_hz(self) -> np.ndarray:
        return np.arange(self.n_freq_bins) * self.config.sample_rate_hz / self.window_len


def stft(wave: MultiChannelWaveform, plan: StftPlan) -> ComplexSpectrogram:
    length = wave.num_samples
    if length < plan.window_len:
        raise InputTooShort(f"输入长度 {length} 小于窗长 {plan.window_len}")
    # (I, T, N)
    frames = sliding_window_view(wave.data, plan.window_len, axis=-1)[:, ::plan.hop, :]
    spectrum = scipy.fft.rfft(frames * plan.window, n=plan.window_len, axis=-1)
    logger.debug(f"STFT: {wave.num_channels} 通道, {frames.shape[1]} 帧, {spectrum.shape[-1]} 频点")
    return ComplexSpectrogram(spectrum)


def istft(spec: ComplexSpectrogram, plan: StftPlan, out_len: Optional[int] = None) -> MultiChannelWaveform:
    """
    加权重叠相加合成: 每帧逆变换后乘以窗函数, 累加后除以 Σw² 包络。
    包络为零的样本 (首样本、末尾未覆盖部分) 输出 0。
    """
    if spec.num_bins != plan.n_freq_bins:
        raise DimensionMismatch(plan.n_freq_bins, spec.num_bins, '频点数')
    num_channels, num_frames, _ = spec.shape
    n, hop = plan.window_len, plan.hop
    frames = scipy.fft.irfft(spec.data, n=n, axis=-1) * plan.window

    total = (num_frames - 1) * hop + n
    signal = np.zeros((num_channels, total))
    envelope = np.zeros(total)
    window_sq = plan.window ** 2
    for t in range(num_frames):
        start = t * hop
        signal[:, start:start + n] += frames[:, t, :]
        envelope[start:start + n] += window_sq

    covered = envelope > _ENVELOPE_FLOOR * envelope.max()
    signal[:, covered] /= envelope[covered]
    signal[:, ~covered] = 0.0

    if out_len is not None:
        if out_len <= total:
            signal = signal[:, :out_len]
        else:
            signal = np.pad(signal, ((0, 0), (0, out_len - total)))
    return MultiChannelWaveform(signal, plan.config.sample_rate_hz)


# --- 分离流程用的填充/裁剪 ---

def synthesis_padding(length: int, plan: StftPlan) -> Tuple[int, int]:
    """
    返回 (左填充, 右填充), 使原信号每个样本都落在完整重叠的帧内,
    填充后的长度恰好是整数帧。
    """
    pad_left = plan.window_len - plan.hop
    needed = pad_left + length + (plan.window_len - plan.hop)
    extra_frames = max(0, -(-(needed - plan.window_len) // plan.hop))
    padded = plan.window_len + extra_frames * plan.hop
    return pad_left, padded - pad_left - length


def stft_padded(wave: MultiChannelWaveform, plan: StftPlan) -> Tuple[ComplexSpectrogram, int]:
    pad_left, pad_right = synthesis_padding(wave.num_samples, plan)
    padded = MultiChannelWaveform(np.pad(wave.data, ((0, 0), (pad_left, pad_right))), wave.sample_rate_hz)
    return stft(padded, plan), pad_left


def istft_trimmed(spec: ComplexSpectrogram, plan: StftPlan, offset: int, length: int) -> MultiChannelWaveform:
    full = istft(spec, plan, out_len=offset + length)
    return MultiChannelWaveform(full.data[:, offset:offset + length], full.sample_rate_hz)
