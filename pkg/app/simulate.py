"""
远场多通道场景仿真: 平面波渲染、按 SIR 混合、传感器噪声, 以及场景目录的读写。

场景目录结构:
    mixture.wav      混合信号 (I 通道)
    target.wav       目标在阵列处的接收信号 (已按 SIR 缩放前的原始幅度)
    interferer.wav   干扰在阵列处的接收信号 (已乘以增益 g)
    noise.wav        传感器噪声, 仅在场景配置了 noise_snr_db 时存在
    meta.json        场景配置回显及实际达到的 SIR、重叠区间
    geometry.json    仿真所用的阵列几何

所有分量先取整到 float32 再以 float32 相加, 因此写入磁盘后
mixture == target + interferer (+ noise) 在 float32 运算下逐样本精确成立。
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.fft
import scipy.signal

from app.constants import (GEOMETRY_FILE, INTERFERER_WAV, META_FILE, MIXTURE_WAV, NOISE_WAV,
                           TARGET_WAV, TOOL_VERSION)
from app.core import (ArrayGeometry, DimensionMismatch, InvalidValue, LengthMismatch,
                      MultiChannelWaveform, SignalConfig, SilentSource, Waveform, dump_geometry,
                      load_geometry)
from app.spatial import check_angle, arrival_direction
from app.tensorio import read_wav, write_wav

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    target_wav_path: str
    interferer_wav_path: str
    theta_target_deg: float
    theta_interferer_deg: float
    sir_db: float = 1.5
    overlap_ratio: float = 0.8
    noise_snr_db: Optional[float] = None
    seed: int = 0
    geometry_path: Optional[str] = None
    sample_rate_hz: int = 16000
    target_rir_path: Optional[str] = None
    interferer_rir_path: Optional[str] = None

    def __post_init__(self):
        check_angle(self.theta_target_deg)
        check_angle(self.theta_interferer_deg)
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise InvalidValue(f"overlap_ratio 必须在 [0, 1] 内, 实际为 {self.overlap_ratio}")
        if not math.isfinite(self.sir_db):
            raise InvalidValue(f"sir_db 必须是有限值, 实际为 {self.sir_db}")
        if self.noise_snr_db is not None and not math.isfinite(self.noise_snr_db):
            raise InvalidValue(f"noise_snr_db 必须是有限值, 实际为 {self.noise_snr_db}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidValue(f"seed 必须是非负整数, 实际为 {self.seed}")
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise InvalidValue(f"sample_rate_hz 必须是正整数, 实际为 {self.sample_rate_hz}")

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any], base_dir: str = '.') -> 'Scenario':
        """文件中的相对路径以场景文件所在目录为基准。"""
        def resolve(key: str, required: bool = False) -> Optional[str]:
            value = payload[key] if required else payload.get(key)
            if value is None:
                return None
            return os.path.normpath(os.path.join(base_dir, value))

        try:
            noise = payload.get('noise_snr_db')
            return cls(
                target_wav_path=resolve('target_wav_path', required=True),
                interferer_wav_path=resolve('interferer_wav_path', required=True),
                theta_target_deg=float(payload['theta_target_deg']),
                theta_interferer_deg=float(payload['theta_interferer_deg']),
                sir_db=float(payload.get('sir_db', 1.5)),
                overlap_ratio=float(payload.get('overlap_ratio', 0.8)),
                noise_snr_db=None if noise is None else float(noise),
                seed=int(payload.get('seed', 0)),
                geometry_path=resolve('geometry_path'),
                sample_rate_hz=int(payload.get('sample_rate_hz', 16000)),
                target_rir_path=resolve('target_rir_path'),
                interferer_rir_path=resolve('interferer_rir_path'),
            )
        except KeyError as e:
            raise InvalidValue(f"场景配置缺少字段 {e}")
        except (TypeError, ValueError) as e:
            raise InvalidValue(f"场景配置字段类型错误: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'target_wav_path': self.target_wav_path,
            'interferer_wav_path': self.interferer_wav_path,
            'theta_target_deg': self.theta_target_deg,
            'theta_interferer_deg': self.theta_interferer_deg,
            'sir_db': self.sir_db,
            'overlap_ratio': self.overlap_ratio,
            'noise_snr_db': self.noise_snr_db,
            'seed': self.seed,
            'geometry_path': self.geometry_path,
            'sample_rate_hz': self.sample_rate_hz,
            'target_rir_path': self.target_rir_path,
            'interferer_rir_path': self.interferer_rir_path,
        }


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidValue(f"解析场景文件 '{path}' 失败: {e}")
    return Scenario.from_dict(payload, os.path.dirname(os.path.abspath(path)))


@dataclass(frozen=True, eq=False)
class SceneBundle:
    mixture: MultiChannelWaveform
    target_image: MultiChannelWaveform
    interferer_image: MultiChannelWaveform
    noise: Optional[MultiChannelWaveform] = None
    metadata: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        for name in ('target_image', 'interferer_image', 'noise'):
            component = getattr(self, name)
            if component is not None and component.data.shape != self.mixture.data.shape:
                raise DimensionMismatch(self.mixture.data.shape, component.data.shape, f"{name} 形状")

    @property
    def reference_channel(self) -> int:
        # 元数据中为 1-based
        return int((self.metadata or {}).get('reference_channel', 1)) - 1


# --- 渲染 ---

def render_margin(geometry: ArrayGeometry, config: SignalConfig) -> int:
    """两侧各留出的样本数: 不小于任意麦克风相对参考通道的最大传播延迟, 与方向无关。"""
    relative = geometry.mic_positions_m - geometry.mic_positions_m[geometry.reference_channel]
    max_delay = float(np.max(np.linalg.norm(relative, axis=1))) / config.sound_speed_m_per_s * config.sample_rate_hz
    return int(np.ceil(max_delay - 1e-9))


def render_plane_wave(source: Waveform, geometry: ArrayGeometry, theta_deg: float,
                      config: SignalConfig) -> MultiChannelWaveform:
    """
    来自 θ 的远场平面波: 通道 i 是源信号延迟 τ_i 的结果, τ_i 相对参考通道计算。
    源信号两侧各补 render_margin 个零, 输出长度为 len(source) + 2 * margin,
    每个通道都保留完整的延迟后信号。延迟在补零后的整段信号上以频域相位斜坡实现,
    FFT 长度另有余量, 不会发生循环卷绕。参考通道是补零后的源信号, 中间一段与源信号逐样本相同。
    """
    if source.sample_rate_hz != config.sample_rate_hz:
        raise InvalidValue(f"源信号采样率 {source.sample_rate_hz} 与配置 {config.sample_rate_hz} 不一致")
    length = len(source)
    if length < 1:
        raise InvalidValue("源信号为空")
    direction = arrival_direction(theta_deg)
    relative = geometry.mic_positions_m - geometry.mic_positions_m[geometry.reference_channel]
    delays = -(relative @ direction) / config.sound_speed_m_per_s * config.sample_rate_hz

    margin = render_margin(geometry, config)
    total = length + 2 * margin
    padded = np.zeros(total)
    padded[margin:margin + length] = source.samples
    n_fft = scipy.fft.next_fast_len(total + 2 * margin + 2, real=True)
    spectrum = scipy.fft.rfft(padded, n=n_fft)
    # 每个采样点的弧度
    omega = 2.0 * np.pi * np.arange(spectrum.shape[0]) / n_fft
    images = scipy.fft.irfft(spectrum[None, :] * np.exp(-1j * np.outer(delays, omega)), n=n_fft, axis=-1)
    images = images[:, :total]
    images[geometry.reference_channel] = padded
    return MultiChannelWaveform(images, config.sample_rate_hz)


def render_reverberant(source: Waveform, rir: MultiChannelWaveform) -> MultiChannelWaveform:
    """用多通道房间冲激响应逐通道卷积, 输出长度为 len(source) + len(rir) - 1。"""
    if rir.sample_rate_hz != source.sample_rate_hz:
        raise InvalidValue(f"冲激响应采样率 {rir.sample_rate_hz} 与源信号 {source.sample_rate_hz} 不一致")
    images = scipy.signal.fftconvolve(source.samples[None, :], rir.data, mode='full', axes=-1)
    return MultiChannelWaveform(images, source.sample_rate_hz)


# --- 混合 ---

def _reference_energy(mc: MultiChannelWaveform, reference: int, region: Optional[Tuple[int, int]]) -> float:
    start, stop = region if region is not None else (0, mc.num_samples)
    segment = mc.data[reference, start:stop]
    return float(np.dot(segment, segment))


def sir_gain(target_img: MultiChannelWaveform, interferer_img: MultiChannelWaveform, sir_db: float,
             reference: int = 0, region: Optional[Tuple[int, int]] = None) -> float:
    target_energy = _reference_energy(target_img, reference, region)
    interferer_energy = _reference_energy(interferer_img, reference, region)
    if target_energy == 0.0:
        raise SilentSource("目标信号在参考通道上能量为零")
    if interferer_energy == 0.0:
        raise SilentSource("干扰信号在参考通道上能量为零")
    return math.sqrt(target_energy / (interferer_energy * 10.0 ** (sir_db / 10.0)))


def mix_at_sir(target_img: MultiChannelWaveform, interferer_img: MultiChannelWaveform, sir_db: float,
               reference: int = 0, region: Optional[Tuple[int, int]] = None
               ) -> Tuple[MultiChannelWaveform, MultiChannelWaveform, MultiChannelWaveform]:
    """
    把干扰乘以 g, 使参考通道在 region 内满足
        10 log10(||target_ref||^2 / ||g * interferer_ref||^2) = sir_db,
    返回 (混合, 目标, 缩放后的干扰)。region 为 None 时在整段信号上计算。
    """
    if target_img.data.shape != interferer_img.data.shape:
        raise LengthMismatch(f"目标 {target_img.data.shape} 与干扰 {interferer_img.data.shape} 形状不一致")
    if not 0 <= reference < target_img.num_channels:
        raise DimensionMismatch(f"[0, {target_img.num_channels})", reference, '参考通道')
    gain = sir_gain(target_img, interferer_img, sir_db, reference, region)
    logger.debug(f"按 SIR {sir_db} dB 混合, 干扰增益 {gain:.6f}")
    return mix_with_gain(target_img, interferer_img, gain)


def mix_with_gain(target_img: MultiChannelWaveform, interferer_img: MultiChannelWaveform, gain: float
                  ) -> Tuple[MultiChannelWaveform, MultiChannelWaveform, MultiChannelWaveform]:
    scaled = MultiChannelWaveform(gain * interferer_img.data, interferer_img.sample_rate_hz)
    mixture = MultiChannelWaveform(target_img.data + scaled.data, target_img.sample_rate_hz)
    return mixture, target_img, scaled


def sensor_noise(mc: MultiChannelWaveform, snr_db: float, seed: int, reference: int = 0) -> MultiChannelWaveform:
    """
    各通道独立的高斯白噪声, 每个通道的噪声能量都精确缩放为
    ||mc_ref||^2 / 10^(snr_db/10)。
    """
    if not math.isfinite(snr_db):
        raise InvalidValue(f"snr_db 必须是有限值, 实际为 {snr_db}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(mc.data.shape)
    signal_energy = float(np.dot(mc.data[reference], mc.data[reference]))
    if signal_energy == 0.0:
        logger.warning("参考通道能量为零, 不添加噪声。")
        return MultiChannelWaveform(np.zeros_like(noise), mc.sample_rate_hz)
    target_energy = signal_energy / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target_energy / np.sum(noise ** 2, axis=1, keepdims=True))
    return MultiChannelWaveform(noise, mc.sample_rate_hz)


def add_sensor_noise(mc: MultiChannelWaveform, snr_db: float, seed: int, reference: int = 0) -> MultiChannelWaveform:
    noise = sensor_noise(mc, snr_db, seed, reference)
    return MultiChannelWaveform(mc.data + noise.data, mc.sample_rate_hz)


# --- 场景 ---

def overlap_layout(target_len: int, interferer_len: int, overlap_ratio: float) -> Dict[str, int]:
    """
    重叠长度 O = round(r * min(Lt, Li))。
    O 覆盖较短的源时, 较短的源居中放在较长的源内; 否则目标在前, 干扰从 Lt - O 处开始。
    部分重叠时两源只能首尾相接, 重叠区间固定为目标末尾的 O 个样本, 源长度不同时不在混合信号中居中。
    """
    overlap = int(round(overlap_ratio * min(target_len, interferer_len)))
    if overlap == interferer_len and interferer_len <= target_len:
        target_onset, interferer_onset = 0, (target_len - interferer_len) // 2
    elif overlap == target_len and target_len < interferer_len:
        target_onset, interferer_onset = (interferer_len - target_len) // 2, 0
    else:
        target_onset, interferer_onset = 0, target_len - overlap
    total = max(target_onset + target_len, interferer_onset + interferer_len)
    start = max(target_onset, interferer_onset)
    stop = min(target_onset + target_len, interferer_onset + interferer_len)
    return {
        'length_samples': total,
        'target_onset_samples': target_onset,
        'interferer_onset_samples': interferer_onset,
        'overlap_start_samples': start,
        'overlap_stop_samples': max(start, stop),
        'overlap_samples': max(0, stop - start),
    }


def _place(image: MultiChannelWaveform, onset: int, total: int) -> MultiChannelWaveform:
    data = np.zeros((image.num_channels, total))
    data[:, onset:onset + image.num_samples] = image.data
    return MultiChannelWaveform(data, image.sample_rate_hz)


def _read_source(path: str, sample_rate_hz: int) -> Waveform:
    mc = read_wav(path)
    if mc.num_channels != 1:
        raise DimensionMismatch(1, mc.num_channels, f"源文件 '{path}' 的通道数")
    if mc.sample_rate_hz != sample_rate_hz:
        raise InvalidValue(f"源文件 '{path}' 的采样率 {mc.sample_rate_hz} 与场景 {sample_rate_hz} 不一致")
    return mc.channel(0)


def _render(source: Waveform, rir_path: Optional[str], geometry: ArrayGeometry, theta_deg: float,
            config: SignalConfig) -> MultiChannelWaveform:
    if rir_path is None:
        return render_plane_wave(source, geometry, theta_deg, config)
    rir = read_wav(rir_path)
    if rir.num_channels != geometry.num_mics:
        raise DimensionMismatch(geometry.num_mics, rir.num_channels, f"冲激响应 '{rir_path}' 的通道数")
    return render_reverberant(source, rir)


def _as_float32(mc: MultiChannelWaveform) -> np.ndarray:
    return mc.data.astype(np.float32)


def simulate_scenario(scenario: Scenario, config: Optional[SignalConfig] = None,
                      geometry: Optional[ArrayGeometry] = None) -> SceneBundle:
    """渲染两个声源, 按重叠率放置, 在重叠区间内按 SIR 混合, 可选地加传感器噪声。结果只取决于场景和种子。"""
    config = config or SignalConfig(sample_rate_hz=scenario.sample_rate_hz)
    if config.sample_rate_hz != scenario.sample_rate_hz:
        config = SignalConfig(scenario.sample_rate_hz, config.window_len_samples,
                              config.hop_len_samples, config.sound_speed_m_per_s)
    geometry = geometry or load_geometry(scenario.geometry_path)
    reference = geometry.reference_channel

    target = _read_source(scenario.target_wav_path, scenario.sample_rate_hz)
    interferer = _read_source(scenario.interferer_wav_path, scenario.sample_rate_hz)
    target_img = _render(target, scenario.target_rir_path, geometry, scenario.theta_target_deg, config)
    interferer_img = _render(interferer, scenario.interferer_rir_path, geometry,
                             scenario.theta_interferer_deg, config)
    source_margin = render_margin(geometry, config) if scenario.target_rir_path is None else 0

    layout = overlap_layout(target_img.num_samples, interferer_img.num_samples, scenario.overlap_ratio)
    total = layout['length_samples']
    region = (layout['overlap_start_samples'], layout['overlap_stop_samples'])
    if layout['overlap_samples'] == 0:
        logger.warning("场景没有重叠区间, SIR 在整段信号上计算。")
        region = None
    target_placed = _place(target_img, layout['target_onset_samples'], total)
    interferer_placed = _place(interferer_img, layout['interferer_onset_samples'], total)
    gain = sir_gain(target_placed, interferer_placed, scenario.sir_db, reference, region)
    logger.debug(f"按 SIR {scenario.sir_db} dB 混合, 干扰增益 {gain:.6f}")
    _, target_full, interferer_scaled = mix_with_gain(target_placed, interferer_placed, gain)

    target32 = _as_float32(target_full)
    interferer32 = _as_float32(interferer_scaled)
    mixture32 = target32 + interferer32
    noise32 = None
    if scenario.noise_snr_db is not None:
        clean = MultiChannelWaveform(mixture32, config.sample_rate_hz)
        noise32 = _as_float32(sensor_noise(clean, scenario.noise_snr_db, scenario.seed, reference))
        mixture32 = mixture32 + noise32

    target_energy = _reference_energy(MultiChannelWaveform(target32, config.sample_rate_hz), reference, region)
    interferer_energy = _reference_energy(MultiChannelWaveform(interferer32, config.sample_rate_hz),
                                          reference, region)
    metadata = {
        'tool_version': TOOL_VERSION,
        'scenario': scenario.to_dict(),
        'reference_channel': reference + 1,
        'num_channels': geometry.num_mics,
        'sample_rate_hz': config.sample_rate_hz,
        'interferer_gain': gain,
        # 平面波渲染时源信号在各自分量内的起点偏移, 混响渲染为 0
        'render_margin_samples': source_margin,
        'achieved_sir_db': float(10.0 * np.log10(target_energy / interferer_energy)),
        'overlap_ratio_achieved': layout['overlap_samples'] / min(target_img.num_samples, interferer_img.num_samples),
        **layout,
    }
    rate = config.sample_rate_hz
    logger.info(f"场景仿真完成: {geometry.num_mics} 通道, {total} 样本, "
                f"SIR {metadata['achieved_sir_db']:.3f} dB, 重叠 {layout['overlap_samples']} 样本")
    return SceneBundle(
        mixture=MultiChannelWaveform(mixture32, rate),
        target_image=MultiChannelWaveform(target32, rate),
        interferer_image=MultiChannelWaveform(interferer32, rate),
        noise=None if noise32 is None else MultiChannelWaveform(noise32, rate),
        metadata=metadata,
    )


def write_bundle(bundle: SceneBundle, out_dir: str, geometry: ArrayGeometry) -> None:
    """场景目录总是以 32 位 float 写出, 保证分解关系逐样本精确。"""
    os.makedirs(out_dir, exist_ok=True)
    write_wav(os.path.join(out_dir, MIXTURE_WAV), bundle.mixture, bit_depth=32)
    write_wav(os.path.join(out_dir, TARGET_WAV), bundle.target_image, bit_depth=32)
    write_wav(os.path.join(out_dir, INTERFERER_WAV), bundle.interferer_image, bit_depth=32)
    noise_path = os.path.join(out_dir, NOISE_WAV)
    if bundle.noise is not None:
        write_wav(noise_path, bundle.noise, bit_depth=32)
    elif os.path.exists(noise_path):
        os.remove(noise_path)
    with open(os.path.join(out_dir, META_FILE), 'w', encoding='utf-8') as f:
        json.dump(bundle.metadata or {}, f, indent=2, sort_keys=True)
    dump_geometry(geometry, os.path.join(out_dir, GEOMETRY_FILE))
    logger.info(f"场景已写入 '{out_dir}'")


def read_bundle(bundle_dir: str) -> Tuple[SceneBundle, ArrayGeometry]:
    mixture = read_wav(os.path.join(bundle_dir, MIXTURE_WAV))
    target = read_wav(os.path.join(bundle_dir, TARGET_WAV))
    interferer = read_wav(os.path.join(bundle_dir, INTERFERER_WAV))
    noise_path = os.path.join(bundle_dir, NOISE_WAV)
    noise = read_wav(noise_path) if os.path.exists(noise_path) else None

    metadata = {}
    meta_path = os.path.join(bundle_dir, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, 'r', encoding='utf-8') as f:
            metadata = json.load(f)
    geometry_path = os.path.join(bundle_dir, GEOMETRY_FILE)
    geometry = load_geometry(geometry_path if os.path.exists(geometry_path) else None)
    bundle = SceneBundle(mixture, target, interferer, noise, metadata)
    if bundle.reference_channel != geometry.reference_channel:
        geometry = geometry.with_reference(bundle.reference_channel)
    return bundle, geometry
