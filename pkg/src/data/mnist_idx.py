"""
MNIST IDX 形式の読み込み

画像ファイル: マジック 0x00000803, 件数, 行数, 列数（ビッグエンディアン 32bit）+ 画素（uint8）
ラベルファイル: マジック 0x00000801, 件数 + ラベル（uint8）
.gz で終わるファイルは gzip として読む。
"""

import gzip
import logging
import struct
from typing import Optional, Tuple

import numpy as np

from utils.errors import IngestionError
from .dataset import Dataset, spec_hash

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_TRAIN_COUNT = 60000
MNIST_TEST_COUNT = 10000
MNIST_CLASSES = 10


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith('.gz') else open
    try:
        with opener(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise IngestionError(f"ファイルを読み込めません: {path}: {e}", offset=0)


def _unpack(buf: bytes, fmt: str, offset: int, path: str) -> Tuple[int, ...]:
    size = struct.calcsize(fmt)
    if len(buf) < offset + size:
        raise IngestionError(f"ヘッダーが途中で切れています: {path}", offset=len(buf))
    return struct.unpack_from(fmt, buf, offset)


def read_idx_images(path: str) -> np.ndarray:
    """画像ファイルを (件数, 行数*列数) の uint8 配列として読む"""
    buf = _read_bytes(path)
    (magic,) = _unpack(buf, '>I', 0, path)
    if magic != IMAGE_MAGIC:
        raise IngestionError(f"画像ファイルのマジック番号が不正です: 0x{magic:08x} (期待 0x{IMAGE_MAGIC:08x})", offset=0)
    count, rows, cols = _unpack(buf, '>III', 4, path)
    expected = 16 + count * rows * cols
    if len(buf) < expected:
        raise IngestionError(f"画像データが途中で切れています: {path} ({len(buf)} < {expected} バイト)", offset=len(buf))
    if len(buf) > expected:
        logger.warning(f"警告: 画像ファイルの末尾に余分なデータがあります: {path} ({len(buf) - expected} バイト)")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols)


def read_idx_labels(path: str) -> np.ndarray:
    """ラベルファイルを (件数,) の uint8 配列として読む"""
    buf = _read_bytes(path)
    (magic,) = _unpack(buf, '>I', 0, path)
    if magic != LABEL_MAGIC:
        raise IngestionError(f"ラベルファイルのマジック番号が不正です: 0x{magic:08x} (期待 0x{LABEL_MAGIC:08x})", offset=0)
    (count,) = _unpack(buf, '>I', 4, path)
    expected = 8 + count
    if len(buf) < expected:
        raise IngestionError(f"ラベルデータが途中で切れています: {path} ({len(buf)} < {expected} バイト)", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_mnist_idx(images_path: str, labels_path: str, expected_count: Optional[int] = None,
                   split: str = 'train') -> Dataset:
    """
    IDX ファイルの組を読み込んで Dataset にする

    Args:
        images_path: 画像ファイル
        labels_path: ラベルファイル
        expected_count: 期待する件数（60000 / 10000 など、任意）
        split: 分割名

    Returns:
        画素を [0, 1] に正規化した 784 次元特徴量の Dataset
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"画像数とラベル数が一致しません: {images.shape[0]} vs {labels.shape[0]}", offset=4)
    if expected_count is not None and images.shape[0] != expected_count:
        raise IngestionError(f"件数が期待値と一致しません: {images.shape[0]} vs {expected_count}", offset=4)
    if labels.size and labels.max() >= MNIST_CLASSES:
        bad = int(np.argmax(labels >= MNIST_CLASSES))
        raise IngestionError(f"ラベルが範囲外です: {int(labels[bad])}", offset=8 + bad)

    logger.info(f"MNIST を読み込みました: {images.shape[0]} 件 ({images_path})")
    return Dataset(features=images.astype(np.float64) / 255.0, labels=labels.astype(np.int64),
                   num_classes=MNIST_CLASSES, split=split,
                   spec_hash=spec_hash({'mnist': [str(images_path), str(labels_path)], 'n': int(images.shape[0])}),
                   metadata={'generator': 'mnist'})
