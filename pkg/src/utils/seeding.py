"""
乱数シード管理

ルートシードから SeedSequence の spawn_key で独立な乱数列を派生させる。
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"キーは非負整数である必要があります: {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def derive_seed_sequence(root_seed: int, *keys: Key) -> np.random.SeedSequence:
    """ルートシードとキー列から SeedSequence を作る"""
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(root_seed: int, *keys: Key) -> np.random.Generator:
    """
    ルートシードとキー列から独立な Generator を作る

    Args:
        root_seed: 実験全体のルートシード
        keys: ステージ名・セル番号などの派生キー

    Returns:
        再現可能な numpy Generator
    """
    return np.random.default_rng(derive_seed_sequence(root_seed, *keys))


def derive_int_seed(root_seed: int, *keys: Key) -> int:
    """派生キーから 32bit の整数シードを作る"""
    return int(derive_seed_sequence(root_seed, *keys).generate_state(1)[0])
