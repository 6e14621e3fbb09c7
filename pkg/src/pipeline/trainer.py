"""
早期終了つきのミニバッチ学習ループ
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from autodiff.optim import Adam, AdamState
from autodiff.tensor import Tensor, backward
from utils.errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    """学習の結果"""
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool
    history: List[Dict] = field(default_factory=list)
    optimizer_state: Optional[AdamState] = None


def fit(params: Mapping[str, Tensor],
        step_loss: Callable[[np.ndarray], Tensor],
        val_loss: Callable[[], float],
        n_train: int,
        train_cfg,
        rng: np.random.Generator,
        stage: str = '',
        min_batch: int = 1,
        on_epoch: Optional[Callable[[int], Dict]] = None,
        optimizer_state: Optional[AdamState] = None) -> FitResult:
    """
    Adam によるミニバッチ学習。検証損失が最良のパラメータに戻して終了する

    Args:
        params: 更新するパラメータ（名前 → テンソル）
        step_loss: 訓練行インデックスからバッチ損失を作る関数
        val_loss: 検証損失を返す関数（勾配なしで評価する）
        n_train: 訓練行数
        train_cfg: epochs, batch_size, patience, lr を持つ設定
        rng: バッチ順序用の乱数
        stage: ログ用のステージ名
        min_batch: これより小さい端数バッチは捨てる
        on_epoch: エポック終了時に呼ばれ、履歴に追加する値を返す関数
        optimizer_state: 再開用の Adam 状態

    Returns:
        FitResult
    """
    if n_train < min_batch:
        raise ConfigurationError(f"[{stage}] 訓練データが少なすぎます: {n_train} < {min_batch}")
    if train_cfg.batch_size < 1 or train_cfg.epochs < 0 or train_cfg.patience < 1:
        raise ConfigurationError(f"[{stage}] 学習設定が不正です: {train_cfg}")

    optimizer = Adam(params, lr=train_cfg.lr, state=optimizer_state)
    best = float(val_loss())
    best_epoch = 0
    best_snapshot = {name: p.data.copy() for name, p in params.items()}
    history = [{'epoch': 0, 'train_loss': float('nan'), 'val_loss': best}]
    if on_epoch is not None:
        history[0].update(on_epoch(0) or {})
    wait = 0
    stopped_early = False
    epoch = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, train_cfg.batch_size):
            index = order[start:start + train_cfg.batch_size]
            if index.size < min_batch:
                continue
            loss = step_loss(index)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"[{stage}] エポック {epoch} で損失が非有限になりました")
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            losses.append(value)

        current = float(val_loss())
        record = {'epoch': epoch, 'train_loss': float(np.mean(losses)) if losses else float('nan'),
                  'val_loss': current}
        if on_epoch is not None:
            record.update(on_epoch(epoch) or {})
        history.append(record)
        logger.debug(f"[{stage}] エポック {epoch}: 訓練 {record['train_loss']:.5f}, 検証 {current:.5f}")

        if current < best:
            best, best_epoch, wait = current, epoch, 0
            best_snapshot = {name: p.data.copy() for name, p in params.items()}
        else:
            wait += 1
            if wait >= train_cfg.patience:
                stopped_early = True
                logger.info(f"[{stage}] 早期終了: エポック {epoch}（最良エポック {best_epoch}, 検証損失 {best:.5f}）")
                break

    for name, p in params.items():
        p.data[...] = best_snapshot[name]

    logger.info(f"[{stage}] 学習完了: {epoch} エポック, 最良エポック {best_epoch}, 検証損失 {best:.5f}")
    return FitResult(best_epoch=best_epoch, best_val_loss=best, epochs_run=epoch,
                     stopped_early=stopped_early, history=history, optimizer_state=optimizer.state)
