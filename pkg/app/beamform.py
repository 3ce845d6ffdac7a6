"""
通道整合: 延迟求和 (delay&sum)、频域 filter&sum、基于掩码的 MVDR。

共轭约定: filter&sum 按 y = Σ_i w_{i,tf} x_{i,tf} 不取共轭; MVDR 按 y = w^H x 取共轭。
两者的换算关系为 w_filter_sum = conj(w_mvdr) (见 broadcast_time_invariant)。
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from app.constants import MASK_ENERGY_FLOOR, TRACE_FLOOR
from app.core import (BeamformerWeights, ComplexSpectrogram, DegenerateMask, DegenerateTrace,
                      DimensionMismatch, InvalidValue, SingularPsd,
                      TimeFrequencyMask, WeightKind)
from app.masking import ideal_complex_mask

logger = logging.getLogger(__name__)

HERMITIAN_TOLERANCE = 1e-9
PSD_EIGEN_TOLERANCE = 1e-7


@dataclass(frozen=True, eq=False)
class PsdSet:
    """目标和干扰的逐频点空间协方差矩阵, 形状均为 (F, I, I)。"""
    target: np.ndarray
    interference: np.ndarray

    def __post_init__(self):
        for name in ('target', 'interference'):
            matrices = np.array(getattr(self, name), dtype=np.complex128, copy=True)
            if matrices.ndim != 3 or matrices.shape[1] != matrices.shape[2]:
                raise DimensionMismatch('(F, I, I)', matrices.shape, f"{name} PSD 形状")
            check_hermitian_psd(matrices, name)
            matrices.flags.writeable = False
            object.__setattr__(self, name, matrices)
        if self.target.shape != self.interference.shape:
            raise DimensionMismatch(self.target.shape, self.interference.shape, 'PSD 形状')

    @property
    def num_channels(self) -> int:
        return self.target.shape[1]


def check_hermitian_psd(matrices: np.ndarray, name: str = 'PSD') -> None:
    if not np.all(np.isfinite(matrices)):
        raise InvalidValue(f"{name} 包含 NaN 或 Inf")
    asymmetry = np.abs(matrices - np.conj(np.swapaxes(matrices, -1, -2)))
    if asymmetry.max(initial=0.0) > HERMITIAN_TOLERANCE:
        raise InvalidValue(f"{name} 不是 Hermitian 矩阵 (偏差 {asymmetry.max():.3e})")
    smallest = np.linalg.eigvalsh(matrices).min(initial=np.inf)
    if smallest < -PSD_EIGEN_TOLERANCE:
        raise InvalidValue(f"{name} 不是半正定矩阵 (最小特征值 {smallest:.3e})")


def _check_channels(spec: ComplexSpectrogram, num_channels: int) -> None:
    if spec.num_channels != num_channels:
        raise DimensionMismatch(num_channels, spec.num_channels, '通道数')


def delay_and_sum(spec: ComplexSpectrogram, steering: np.ndarray) -> ComplexSpectrogram:
    """y_{tf} = (1/I) Σ_i conj(steering_{i,f}) x_{i,tf}"""
    steering = np.asarray(steering, dtype=np.complex128)
    _check_channels(spec, steering.shape[0])
    if steering.shape != (spec.num_channels, spec.num_bins):
        raise DimensionMismatch((spec.num_channels, spec.num_bins), steering.shape, '导向矢量形状')
    output = np.einsum('if,itf->tf', np.conj(steering), spec.data) / spec.num_channels
    return ComplexSpectrogram(output[None])


def filter_and_sum(spec: ComplexSpectrogram, weights: BeamformerWeights) -> ComplexSpectrogram:
    """y_{tf} = Σ_i w_{i,tf} * x_{i,tf}, 不取共轭。"""
    if weights.kind is not WeightKind.TIME_VARYING:
        raise InvalidValue("filter&sum 需要时变权重 (I, T, F)")
    if weights.data.shape != spec.shape:
        raise DimensionMismatch(spec.shape, weights.data.shape, '权重形状')
    output = np.einsum('itf,itf->tf', weights.data, spec.data)
    return ComplexSpectrogram(output[None])


def estimate_psd(spec: ComplexSpectrogram, mask: TimeFrequencyMask, context: str = '') -> np.ndarray:
    """
    Φ_f = Σ_t (m_{tf} x_{tf})(m_{tf} x_{tf})^H / Σ_t |m_{tf}|^2

    分母按 m * m^H 取 |m|^2。逐频点的求和顺序固定, 结果与调度无关。
    """
    if mask.shape != (spec.num_frames, spec.num_bins):
        raise DimensionMismatch((spec.num_frames, spec.num_bins), mask.shape, '掩码形状')
    energy = np.sum(np.abs(mask.data) ** 2, axis=0)
    degenerate = np.flatnonzero(energy < MASK_ENERGY_FLOOR)
    if degenerate.size:
        raise DegenerateMask(int(degenerate[0]), context)

    masked = mask.data[None] * spec.data
    psd = np.einsum('itf,jtf->fij', masked, np.conj(masked)) / energy[:, None, None]
    # 消除舍入误差带来的非 Hermitian 部分
    return 0.5 * (psd + np.conj(np.swapaxes(psd, -1, -2)))


def mvdr_weights(psd: PsdSet, reference_channel: int = 0,
                 diagonal_loading: float = 1e-6) -> BeamformerWeights:
    """
    w_f = (Φn_f)^{-1} Φs_f / Trace((Φn_f)^{-1} Φs_f) u, u 为参考通道的 one-hot 向量。

    求逆前对 Φn 做对角加载 δ * trace(Φn)/I * Identity, 逐频点用 Cholesky 分解求解。
    """
    num_bins, num_channels, _ = psd.target.shape
    if not 0 <= reference_channel < num_channels:
        raise DimensionMismatch(f"[0, {num_channels})", reference_channel, '参考通道')
    identity = np.eye(num_channels)
    weights = np.zeros((num_channels, num_bins), dtype=np.complex128)

    for f in range(num_bins):
        phi_n = psd.interference[f]
        load = float(np.real(np.trace(phi_n)))
        if not load > 0:
            raise SingularPsd(f)
        loaded = phi_n + diagonal_loading * load / num_channels * identity
        try:
            factor = scipy.linalg.cho_factor(loaded, lower=True, check_finite=False)
            numerator = scipy.linalg.cho_solve(factor, psd.target[f], check_finite=False)
        except np.linalg.LinAlgError:
            raise SingularPsd(f)
        trace = np.trace(numerator)
        if abs(trace) < TRACE_FLOOR:
            raise DegenerateTrace(f)
        weights[:, f] = numerator[:, reference_channel] / trace

    return BeamformerWeights(WeightKind.TIME_INVARIANT, weights)


def apply_beamformer(weights: BeamformerWeights, spec: ComplexSpectrogram) -> ComplexSpectrogram:
    """y_{tf} = (w_f)^H x_{tf}"""
    if weights.kind is not WeightKind.TIME_INVARIANT:
        raise InvalidValue("apply_beamformer 需要时不变权重 (I, F)")
    if weights.data.shape != (spec.num_channels, spec.num_bins):
        raise DimensionMismatch((spec.num_channels, spec.num_bins), weights.data.shape, '权重形状')
    output = np.einsum('if,itf->tf', np.conj(weights.data), spec.data)
    return ComplexSpectrogram(output[None])


def mvdr_pipeline(spec: ComplexSpectrogram, mask_s: TimeFrequencyMask, mask_n: TimeFrequencyMask,
                  reference: int = 0, diagonal_loading: float = 1e-6) -> ComplexSpectrogram:
    weights = mvdr_pipeline_weights(spec, mask_s, mask_n, reference, diagonal_loading)
    return apply_beamformer(weights, spec)


def mvdr_pipeline_weights(spec: ComplexSpectrogram, mask_s: TimeFrequencyMask, mask_n: TimeFrequencyMask,
                          reference: int = 0, diagonal_loading: float = 1e-6) -> BeamformerWeights:
    """目标/干扰两次掩码加权 PSD 估计加 MVDR 权重求解, 错误信息中注明失败的 PSD 和频点。"""
    psd = PsdSet(estimate_psd(spec, mask_s, context='目标 PSD'),
                 estimate_psd(spec, mask_n, context='干扰 PSD'))
    try:
        return mvdr_weights(psd, reference, diagonal_loading)
    except (SingularPsd, DegenerateTrace) as e:
        logger.error(f"MVDR 权重求解失败: {e}")
        raise type(e)(e.bin, 'MVDR 权重') from e


def broadcast_time_invariant(weights: BeamformerWeights, num_frames: int) -> BeamformerWeights:
    """把 (I, F) 的 MVDR 权重换算成 filter&sum 的时变权重 conj(w), 沿时间复制。"""
    if weights.kind is not WeightKind.TIME_INVARIANT:
        raise InvalidValue("只能换算时不变权重")
    data = np.broadcast_to(np.conj(weights.data)[:, None, :],
                           (weights.num_channels, num_frames, weights.data.shape[1]))
    return BeamformerWeights(WeightKind.TIME_VARYING, data)


def oracle_filter_sum_weights(spec: ComplexSpectrogram, target_ref: ComplexSpectrogram,
                              weights: BeamformerWeights, clip: float = 10.0) -> BeamformerWeights:
    """
    理想时变 filter&sum 权重: w_{i,tf} = m_{tf} conj(w_{i,f}),
    其中 m 是把 MVDR 输出映射到参考通道目标信号的复数掩码。
    """
    beamformed = apply_beamformer(weights, spec)
    post_mask = ideal_complex_mask(target_ref, beamformed, clip)
    base = broadcast_time_invariant(weights, spec.num_frames).data
    return BeamformerWeights(WeightKind.TIME_VARYING, post_mask.data[None] * base)
