"""
信号级评估指标: 尺度不变信噪比 (Si-SNR) 和普通信噪比 (SNR)。
所有指标都在时域波形上计算, 结果限制在 [-80, 80] dB。
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from app.constants import METRIC_CLAMP_DB, METRIC_EPSILON
from app.core import LengthMismatch, Waveform, ZeroReference

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    si_snr_db: float
    snr_db: float
    length_samples: int

    def to_dict(self) -> Dict[str, Any]:
        # 字段顺序即单行记录的输出顺序
        return {
            'si_snr_db': self.si_snr_db,
            'snr_db': self.snr_db,
            'length_samples': self.length_samples,
        }


def _clamp(value_db: float) -> float:
    return float(np.clip(value_db, -METRIC_CLAMP_DB, METRIC_CLAMP_DB))


def _check_lengths(estimate: Waveform, reference: Waveform) -> None:
    if len(estimate) != len(reference):
        raise LengthMismatch(f"估计信号长度 {len(estimate)} 与参考信号长度 {len(reference)} 不一致")


def si_snr(estimate: Waveform, reference: Waveform) -> float:
    """
    去均值后把估计投影到参考上:
        s_t = <est, ref> / <ref, ref> * ref,  e = est - s_t
        Si-SNR = 10 log10((||s_t||^2 + eps) / (||e||^2 + eps))
    """
    _check_lengths(estimate, reference)
    est = estimate.samples - estimate.samples.mean()
    ref = reference.samples - reference.samples.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ZeroReference("参考信号 (去均值后) 全为零")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    error = est - target
    ratio = (float(np.dot(target, target)) + METRIC_EPSILON) / (float(np.dot(error, error)) + METRIC_EPSILON)
    return _clamp(10.0 * np.log10(ratio))


def snr(estimate: Waveform, reference: Waveform) -> float:
    """SNR = 10 log10(||ref||^2 / ||est - ref||^2), 分子分母各加 eps。"""
    _check_lengths(estimate, reference)
    error = estimate.samples - reference.samples
    ratio = (float(np.dot(reference.samples, reference.samples)) + METRIC_EPSILON) / \
            (float(np.dot(error, error)) + METRIC_EPSILON)
    return _clamp(10.0 * np.log10(ratio))


def evaluate(estimate: Waveform, reference: Waveform) -> MetricReport:
    report = MetricReport(si_snr_db=si_snr(estimate, reference),
                          snr_db=snr(estimate, reference),
                          length_samples=len(reference))
    logger.debug(f"评估结果: Si-SNR {report.si_snr_db:.2f} dB, SNR {report.snr_db:.2f} dB")
    return report
