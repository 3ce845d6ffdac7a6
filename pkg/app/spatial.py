"""
空间特征: 麦克风间相位差 (IPD)、远场相位延迟、角度特征 (AF) 和导向矢量。

角度约定: θ 从 x 轴正方向 (阵列轴) 起算, 位于水平面内, 90° 为阵列法线方向。
符号约定: 麦克风对 (i, j) 的相位延迟取 (p_i - p_j) 在来波方向上的投影,
对来自 θ 的平面波, 观测到的 IPD^{(i,j)} 在每个频点上等于 pd^{(i,j)}_θ (卷绕后),
因此 AF 在真实 DOA 处取最大值。仿真器、导向矢量和特征提取都遵循这一约定。
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from app.constants import MAGNITUDE_FLOOR
from app.core import (ArrayGeometry, ComplexSpectrogram, DimensionMismatch, EmptyGrid,
                      InvalidAngle, InvalidPair, NoPairs, SignalConfig, validate_dims)

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_GRID_DEG = tuple(float(a) for a in range(0, 181))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray
    label: str = ''

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise DimensionMismatch('(T, F)', data.shape, 'FeatureMap 形状')
        data.flags.writeable = False
        object.__setattr__(self, 'data', data)


def check_angle(theta_deg: float) -> float:
    theta = float(theta_deg)
    if not np.isfinite(theta) or not 0.0 <= theta <= 180.0:
        raise InvalidAngle(f"角度必须在 [0, 180] 度内, 实际为 {theta_deg}")
    return theta


def arrival_direction(theta_deg: float) -> np.ndarray:
    theta = np.deg2rad(check_angle(theta_deg))
    return np.array([np.cos(theta), np.sin(theta), 0.0])


def _bin_omega(config: SignalConfig) -> np.ndarray:
    # 2π f fs / (2(F-1)), f 为整数频点下标
    f = np.arange(config.n_freq_bins)
    return 2.0 * np.pi * f * config.sample_rate_hz / (2.0 * (config.n_freq_bins - 1))


def phase_delay(geometry: ArrayGeometry, pair: Tuple[int, int], theta_deg: float,
                config: SignalConfig) -> np.ndarray:
    """pd[f] = 2π f fs d_ij cos(θ) / (2(F-1) c), 与时间无关。"""
    i, j = pair
    if not (0 <= i < geometry.num_mics and 0 <= j < geometry.num_mics) or i == j:
        raise InvalidPair(f"无效的麦克风对 ({i}, {j})")
    projected = float(geometry.displacement(i, j) @ arrival_direction(theta_deg))
    return _bin_omega(config) * projected / config.sound_speed_m_per_s


def compute_ipd(spec: ComplexSpectrogram, pair: Tuple[int, int]) -> FeatureMap:
    """IPD = ∠(x_i / x_j), 取值 (-π, π]; 任一通道幅度低于 1e-12 的频点定义为 0。"""
    i, j = pair
    for index in (i, j):
        if not 0 <= index < spec.num_channels:
            raise DimensionMismatch(f"[0, {spec.num_channels})", index, '麦克风对通道索引')
    x_i = spec.data[i]
    x_j = spec.data[j]
    ipd = np.angle(x_i * np.conj(x_j))
    ipd[ipd <= -np.pi] = np.pi
    degenerate = (np.abs(x_i) < MAGNITUDE_FLOOR) | (np.abs(x_j) < MAGNITUDE_FLOOR)
    if degenerate.any():
        logger.debug(f"麦克风对 ({i}, {j}) 有 {int(degenerate.sum())} 个退化频点, IPD 置 0。")
    ipd[degenerate] = 0.0
    return FeatureMap(ipd, label=f"ipd_{i + 1}_{j + 1}")


def compute_angle_feature(spec: ComplexSpectrogram, geometry: ArrayGeometry, theta_deg: float,
                          config: Optional[SignalConfig] = None) -> FeatureMap:
    """AF_θ = Σ_pairs <e^{pd}, e^{IPD}> = Σ_pairs cos(pd - IPD), 取值 [-M, M]。"""
    if not geometry.pairs:
        raise NoPairs("几何中没有麦克风对, 无法计算角度特征")
    validate_dims(spec, geometry)
    config = config or _config_for(spec)
    af = np.zeros((spec.num_frames, spec.num_bins))
    for pair in geometry.pairs:
        pd = phase_delay(geometry, pair, theta_deg, config)
        ipd = compute_ipd(spec, pair).data
        af += np.cos(pd[None, :] - ipd)
    return FeatureMap(af, label=f"af_{theta_deg:g}")


def steering_vector(geometry: ArrayGeometry, theta_deg: float, config: SignalConfig) -> np.ndarray:
    """
    (I, F) 导向矢量, 元素为 e^{-j τ_i ω_f}, τ_i 为通道 i 相对参考通道的远场传播延迟。
    参考通道一行恒为 1。
    """
    direction = arrival_direction(theta_deg)
    relative = geometry.mic_positions_m - geometry.mic_positions_m[geometry.reference_channel]
    tau = -(relative @ direction) / config.sound_speed_m_per_s
    steering = np.exp(-1j * np.outer(tau, _bin_omega(config)))
    steering[geometry.reference_channel] = 1.0 + 0.0j
    return steering


def estimate_doa(spec: ComplexSpectrogram, geometry: ArrayGeometry,
                 grid_deg: Optional[Iterable[float]] = None,
                 config: Optional[SignalConfig] = None) -> float:
    """
    在角度网格上取平均 AF 最大的角度, 并列时取较小角度。
    平均只在所有通道幅度 >= 1e-12 的频点上进行; 输入全零时返回网格最小值。
    """
    grid = sorted({check_angle(a) for a in (DEFAULT_ANGLE_GRID_DEG if grid_deg is None else grid_deg)})
    if not grid:
        raise EmptyGrid("DOA 角度网格为空")
    if not geometry.pairs:
        raise NoPairs("几何中没有麦克风对, 无法估计 DOA")
    validate_dims(spec, geometry)
    config = config or _config_for(spec)

    active = np.all(np.abs(spec.data) >= MAGNITUDE_FLOOR, axis=0)
    num_active = int(active.sum())
    scores = np.zeros(len(grid))
    if num_active == 0:
        logger.warning(f"输入没有有效频点, DOA 估计退化为网格最小值 {grid[0]}°。")
        return grid[0]

    # cos(pd - ipd) = cos pd cos ipd + sin pd sin ipd, 先在时间上求和
    for pair in geometry.pairs:
        ipd = compute_ipd(spec, pair).data
        cos_sum = np.sum(np.where(active, np.cos(ipd), 0.0), axis=0)
        sin_sum = np.sum(np.where(active, np.sin(ipd), 0.0), axis=0)
        pd = np.stack([phase_delay(geometry, pair, theta, config) for theta in grid])
        scores += np.cos(pd) @ cos_sum + np.sin(pd) @ sin_sum
    scores /= num_active
    best = int(np.argmax(scores))
    logger.debug(f"DOA 估计: {grid[best]}° (平均 AF {scores[best]:.3f})")
    return grid[best]


def _config_for(spec: ComplexSpectrogram) -> SignalConfig:
    # 未显式给出配置时, 按频点数推断窗长, 其余使用默认值
    return SignalConfig(window_len_samples=2 * (spec.num_bins - 1),
                        hop_len_samples=spec.num_bins - 1)
