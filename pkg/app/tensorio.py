"""
文件读写: 多通道 WAV、BTF 二进制张量交换格式。

BTF 字节布局 (小端):
    偏移 0  4 字节   magic, 固定为 b"BTF1"
    偏移 4  1 字节   dtype: 1 = float32 实数, 2 = complex64 (交错的 re, im float32)
    偏移 5  1 字节   ndim, 取值 [1, 4]
    偏移 6  2 字节   保留, 必须为 0
    偏移 8  ndim * 8 字节  各维大小, uint64
    之后     行优先 (C 顺序) 的数据, 长度必须恰好等于 prod(dims) * 元素大小

各类张量的维度顺序: 掩码 (T, F); 时不变权重 (I, F); 时变权重 (I, T, F); 特征 (T, F)。
"""
import logging
import os
import struct
from typing import Optional, Tuple

import numpy as np
import soundfile as sf

from app.core import (BadMagic, BeamformerWeights, CorruptFile, DimensionMismatch, DimsMismatch,
                      MultiChannelWaveform, TimeFrequencyMask, Truncated, UnsupportedDtype,
                      UnsupportedFormat, WeightKind)
from app.spatial import FeatureMap

logger = logging.getLogger(__name__)

BTF_MAGIC = b'BTF1'
BTF_HEADER = np.dtype([('magic', 'S4'), ('dtype', 'u1'), ('ndim', 'u1'), ('reserved', '<u2')])
BTF_DTYPES = {1: np.dtype('<f4'), 2: np.dtype('<c8')}
BTF_MAX_NDIM = 4

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
PCM16_SCALE = 32768.0


# --- WAV ---

def _scan_riff(path: str) -> Tuple[int, int, int]:
    """
    遍历 RIFF 块, 返回 (格式标签, 位深, 通道数)。
    文件在任何块中途结束都视为损坏, 并报告实际结束的字节偏移。
    """
    file_size = os.path.getsize(path)
    fmt = None
    with open(path, 'rb') as f:
        riff = f.read(12)
        if len(riff) < 12:
            raise CorruptFile(f"'{path}' 的 RIFF 头不完整", len(riff))
        if riff[:4] != b'RIFF' or riff[8:12] != b'WAVE':
            raise UnsupportedFormat(f"'{path}' 不是 RIFF/WAVE 文件")

        offset = 12
        while True:
            chunk_header = f.read(8)
            if len(chunk_header) < 8:
                raise CorruptFile(f"'{path}' 中没有找到完整的 fmt/data 块", offset + len(chunk_header))
            chunk_id, chunk_size = struct.unpack('<4sI', chunk_header)
            body_offset = offset + 8
            if chunk_id == b'data':
                if fmt is None:
                    raise CorruptFile(f"'{path}' 的 data 块出现在 fmt 块之前", offset)
                if body_offset + chunk_size > file_size:
                    raise CorruptFile(f"'{path}' 的音频数据被截断", file_size)
                if fmt[3] and chunk_size % fmt[3]:
                    raise CorruptFile(f"'{path}' 的音频数据长度不是整帧", body_offset + chunk_size)
                return fmt[0], fmt[1], fmt[2]
            if body_offset + chunk_size > file_size:
                raise CorruptFile(f"'{path}' 的 {chunk_id!r} 块被截断", file_size)
            if chunk_id == b'fmt ':
                if chunk_size < 16:
                    raise CorruptFile(f"'{path}' 的 fmt 块过短", body_offset + chunk_size)
                body = f.read(chunk_size)
                tag, channels, _, _, block_align, bits = struct.unpack('<HHIIHH', body[:16])
                if tag == WAVE_FORMAT_EXTENSIBLE and chunk_size >= 26:
                    tag = struct.unpack('<H', body[24:26])[0]
                fmt = (tag, bits, channels, block_align)
            offset = body_offset + chunk_size + (chunk_size & 1)
            f.seek(offset)


def read_wav(path: str) -> MultiChannelWaveform:
    """读取 16 位 PCM 或 32 位 float 的 WAV 文件, 任意通道数。"""
    tag, bits, _ = _scan_riff(path)
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = 'int16', PCM16_SCALE
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = 'float32', 1.0
    else:
        raise UnsupportedFormat(f"'{path}' 的格式 (标签 {tag}, {bits} 位) 不受支持, 只支持 16 位 PCM 和 32 位 float")
    try:
        data, sample_rate = sf.read(path, dtype=dtype, always_2d=True)
    except (sf.LibsndfileError, RuntimeError) as e:
        raise CorruptFile(f"解码 '{path}' 失败: {e}", 0)
    samples = data.T.astype(np.float64) / scale
    logger.debug(f"读取 '{path}': {samples.shape[0]} 通道, {samples.shape[1]} 样本, {sample_rate} Hz")
    return MultiChannelWaveform(samples, int(sample_rate))


def write_wav(path: str, mc: MultiChannelWaveform, bit_depth: int = 32) -> None:
    """32 位 float 无损; 16 位 PCM 按 round(x * 32768) 量化并截断到 int16 范围。"""
    if bit_depth == 32:
        sf.write(path, mc.data.T.astype(np.float32), mc.sample_rate_hz, subtype='FLOAT', format='WAV')
    elif bit_depth == 16:
        quantized = np.clip(np.round(mc.data * PCM16_SCALE), -32768, 32767).astype(np.int16)
        sf.write(path, quantized.T, mc.sample_rate_hz, subtype='PCM_16', format='WAV')
    else:
        raise UnsupportedFormat(f"不支持的位深 {bit_depth}, 只支持 16 和 32")
    logger.debug(f"写入 '{path}': {mc.num_channels} 通道, {bit_depth} 位")


# --- BTF ---

def write_btf(path: str, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor)
    if not 1 <= tensor.ndim <= BTF_MAX_NDIM:
        raise DimsMismatch(f"BTF 只支持 1 到 {BTF_MAX_NDIM} 维张量, 实际为 {tensor.ndim} 维")
    code = 2 if np.iscomplexobj(tensor) else 1
    payload = np.ascontiguousarray(tensor, dtype=BTF_DTYPES[code])

    header = np.zeros(1, dtype=BTF_HEADER)
    header['magic'] = BTF_MAGIC
    header['dtype'] = code
    header['ndim'] = tensor.ndim
    dims = np.asarray(tensor.shape, dtype='<u8')
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(dims.tobytes())
        f.write(payload.tobytes())


def read_btf(path: str) -> np.ndarray:
    """读取 BTF 张量; 只有在头部维度与文件实际大小一致后才分配内存。"""
    file_size = os.path.getsize(path)
    with open(path, 'rb') as f:
        fixed = f.read(BTF_HEADER.itemsize)
        if len(fixed) < BTF_HEADER.itemsize:
            raise Truncated(f"'{path}' 的 BTF 头不完整 ({len(fixed)} 字节)")
        header = np.frombuffer(fixed, dtype=BTF_HEADER)[0]
        if header['magic'] != BTF_MAGIC:
            raise BadMagic(f"'{path}' 的 magic 为 {bytes(header['magic'])!r}, 期望 {BTF_MAGIC!r}")
        code = int(header['dtype'])
        if code not in BTF_DTYPES:
            raise UnsupportedDtype(f"'{path}' 的 dtype 字节为 {code}, 只支持 1 (float32) 和 2 (complex64)")
        ndim = int(header['ndim'])
        if not 1 <= ndim <= BTF_MAX_NDIM:
            raise DimsMismatch(f"'{path}' 的 ndim 为 {ndim}, 必须在 [1, {BTF_MAX_NDIM}] 内")
        if int(header['reserved']) != 0:
            raise CorruptFile(f"'{path}' 的保留字节不为 0", 6)

        raw_dims = f.read(8 * ndim)
        if len(raw_dims) < 8 * ndim:
            raise Truncated(f"'{path}' 的维度信息不完整")
        dims = tuple(int(d) for d in np.frombuffer(raw_dims, dtype='<u8'))
        dtype = BTF_DTYPES[code]
        expected = dtype.itemsize
        for d in dims:
            expected *= d
        available = file_size - BTF_HEADER.itemsize - 8 * ndim
        if available < expected:
            raise Truncated(f"'{path}' 的数据被截断: 期望 {expected} 字节, 实际 {available} 字节")
        if available > expected:
            raise DimsMismatch(f"'{path}' 的数据长度 {available} 字节与维度 {dims} 不符 (期望 {expected})")
        payload = f.read(expected)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_mask(path: str, mask: TimeFrequencyMask) -> None:
    write_btf(path, mask.data)


def load_mask(path: str, shape: Optional[Tuple[int, int]] = None) -> TimeFrequencyMask:
    tensor = read_btf(path)
    if tensor.ndim != 2:
        raise DimsMismatch(f"掩码文件 '{path}' 必须是 (T, F) 二维张量, 实际为 {tensor.shape}")
    if shape is not None and tensor.shape != tuple(shape):
        raise DimensionMismatch(tuple(shape), tensor.shape, f"掩码文件 '{path}' 的形状")
    return TimeFrequencyMask(tensor.astype(np.complex128))


def save_weights(path: str, weights: BeamformerWeights) -> None:
    write_btf(path, weights.data)


def load_weights(path: str) -> BeamformerWeights:
    tensor = read_btf(path).astype(np.complex128)
    if tensor.ndim == 2:
        return BeamformerWeights(WeightKind.TIME_INVARIANT, tensor)
    if tensor.ndim == 3:
        return BeamformerWeights(WeightKind.TIME_VARYING, tensor)
    raise DimsMismatch(f"权重文件 '{path}' 必须是 (I, F) 或 (I, T, F), 实际为 {tensor.shape}")


def save_feature(path: str, feature: FeatureMap) -> None:
    write_btf(path, feature.data)
