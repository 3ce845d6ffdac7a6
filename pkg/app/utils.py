import hashlib
import logging
import os
import re
from typing import Optional, Tuple

from app.core import InvalidPair, InvalidValue

logger = logging.getLogger(__name__)

_PAIR_PATTERN = re.compile(r'^\s*(\d+)\s*-\s*(\d+)\s*$')
_HASH_CHUNK_BYTES = 1 << 20


def parse_pairs(text: str) -> Tuple[Tuple[int, int], ...]:
    """
    解析命令行上的麦克风对, 例如 "1-15,2-14", 编号为 1-based, 返回 0-based 元组。
    """
    pairs = []
    for item in text.split(','):
        if not item.strip():
            continue
        match = _PAIR_PATTERN.match(item)
        if not match:
            raise InvalidPair(f"无法解析麦克风对 '{item.strip()}', 格式应为 i-j")
        i, j = int(match.group(1)), int(match.group(2))
        if i < 1 or j < 1:
            raise InvalidPair(f"麦克风编号从 1 开始, 实际为 '{item.strip()}'")
        pairs.append((i - 1, j - 1))
    if not pairs:
        raise InvalidPair(f"'{text}' 中没有麦克风对")
    return tuple(pairs)


def parse_mask_source(text: str) -> Tuple[str, Optional[str]]:
    """'oracle' 或 'btf:<路径>'。"""
    if text == 'oracle':
        return 'oracle', None
    if text.startswith('btf:') and len(text) > 4:
        return 'btf', text[4:]
    raise InvalidValue(f"掩码来源必须是 'oracle' 或 'btf:<路径>', 实际为 '{text}'")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(_HASH_CHUNK_BYTES), b''):
            digest.update(chunk)
    return digest.hexdigest()


def hash_inputs(*paths: Optional[str]) -> dict:
    """输入文件 (或场景目录内所有文件) 的 SHA-256, 以路径为键, 目录按文件名排序展开。"""
    hashes = {}
    for path in paths:
        if path is None:
            continue
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full):
                    hashes[full] = sha256_file(full)
        elif os.path.isfile(path):
            hashes[path] = sha256_file(path)
        else:
            logger.debug(f"跳过不存在的输入 '{path}'")
    return hashes
