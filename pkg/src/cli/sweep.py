"""
パラメータスイープ

軸（lam / minority-size / per-class-count / mode）の値とシードの組ごとに
セルを作り、ワーカープールで独立に実行する。失敗したセルは記録して続行する。
"""

import logging
import os
import time
import traceback
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from pipeline.experiments import MINORITY_POOL_SIZES, aggregate_mean_sem, mmd_mode_comparison
from pipeline.stages import build_run_data, run_pipeline
from utils.errors import ConfigurationError
from utils.file_utils import ensure_dir, write_json_file
from utils.log_utils import setup_logging

from .config import ExperimentConfig, config_with

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    'lam': 'lam',
    'minority-size': 'dataset.minority_count',
    'per-class-count': 'dataset.per_class',
    'mode': None,
}
CELL_COLUMNS = ['axis', 'value', 'seed', 'pool_size', 'status', 'top1', 'top5', 'nll', 'macro_f1',
                'minority_f1', 'mmd', 'error']


def parse_values(axis: str, text: str) -> List[Any]:
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"未知のスイープ軸です: {axis}（{list(SWEEP_AXES)} のいずれか）")
    values = [yaml.safe_load(v.strip()) for v in text.split(',') if v.strip()]
    if not values:
        raise ConfigurationError(f"スイープの値が空です: {axis}")
    if axis == 'lam':
        return [float(v) for v in values]
    if axis in ('minority-size', 'per-class-count'):
        return [int(v) for v in values]
    return [str(v) for v in values]


def build_cells(config: ExperimentConfig, axis: str, values: Sequence[Any], seeds: Sequence[int],
                output_dir: str, pool_sizes: Sequence[int] = MINORITY_POOL_SIZES) -> List[Dict]:
    """軸の値 × シードのセル一覧"""
    cells = []
    for value in values:
        for seed in seeds:
            cells.append({
                'axis': axis,
                'value': value,
                'seed': int(seed),
                'config': config.to_dict(),
                'pool_sizes': [int(p) for p in pool_sizes],
                'output_dir': os.path.join(output_dir, 'cells', f"{axis}={value}", f"seed{seed}"),
            })
    return cells


def _failed_row(cell: Dict, error: str) -> Dict:
    return {'axis': cell['axis'], 'value': cell['value'], 'seed': cell['seed'], 'status': 'failed', 'error': error}


def run_cell(cell: Dict) -> List[Dict]:
    """
    1 セルを実行（ワーカープロセスから呼ばれる）

    Returns:
        結果行のリスト（mode 軸はプールサイズごとに 1 行）
    """
    axis, value, seed = cell['axis'], cell['value'], cell['seed']
    try:
        if axis == 'mode':
            frame = mmd_mode_comparison(pool_sizes=cell['pool_sizes'], seeds=[seed], modes=[value],
                                        sigma=cell['config']['sigma'],
                                        std_floor=cell['config']['std_floor'])
            return [{'axis': axis, 'value': value, 'seed': seed, 'pool_size': int(row.pool_size),
                     'status': 'completed', 'mmd': float(row.mmd)} for row in frame.itertuples()]

        overrides = {'seed': seed, 'output_dir': cell['output_dir'], SWEEP_AXES[axis]: value}
        config = config_with(ExperimentConfig.from_dict(cell['config']), overrides)
        data = build_run_data(config)
        _, report = run_pipeline(config, data=data)
        ensure_dir(cell['output_dir'])
        report.save(os.path.join(cell['output_dir'], 'metrics.json'))
        minority = [m for m in data.minority_classes if m < len(report.f1_per_class)]
        minority_f1 = float(np.mean([report.f1_per_class[m] for m in minority])) if minority else None
        return [{'axis': axis, 'value': value, 'seed': seed, 'status': 'completed', 'top1': report.top1,
                 'top5': report.top5, 'nll': report.nll, 'macro_f1': report.macro_f1, 'minority_f1': minority_f1}]
    except Exception as e:
        logger.error(f"セル {axis}={value} seed={seed} が失敗しました: {e}")
        logger.debug(traceback.format_exc())
        return [_failed_row(cell, f"{type(e).__name__}: {e}")]


def run_cells(cells: List[Dict], workers: Optional[int] = None) -> List[Dict]:
    """セルを並列実行（workers=1 なら逐次）。結果はセルの順に並ぶ"""
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(cells) <= 1:
        results = [run_cell(cell) for cell in cells]
    else:
        with Pool(processes=min(workers, len(cells))) as pool:
            results = pool.map(run_cell, cells, chunksize=1)
    return [row for rows in results for row in rows]


def aggregate_rows(rows: List[Dict]) -> pd.DataFrame:
    """完了したセルの平均と標準誤差"""
    frame = pd.DataFrame(rows, columns=CELL_COLUMNS)
    completed = frame[frame['status'] == 'completed']
    if completed.empty:
        return aggregate_mean_sem(completed, ['axis', 'value'], ['top1'])
    if (completed['axis'] == 'mode').all():
        return aggregate_mean_sem(completed, ['axis', 'value', 'pool_size'], ['mmd'])
    metrics = [c for c in ('top1', 'top5', 'nll', 'macro_f1', 'minority_f1') if completed[c].notna().any()]
    return aggregate_mean_sem(completed.astype({c: float for c in metrics}), ['axis', 'value'], metrics)


def run_sweep(config: ExperimentConfig, axis: str, values: Sequence[Any], seeds: Sequence[int],
              output_dir: str, workers: Optional[int] = None,
              pool_sizes: Sequence[int] = MINORITY_POOL_SIZES) -> Dict:
    """
    スイープを実行して cells.csv・sweep.csv・status.json を書き出す

    Returns:
        状態の辞書（全セル完了なら state = completed）
    """
    started = time.time()
    ensure_dir(output_dir)
    cells = build_cells(config, axis, values, seeds, output_dir, pool_sizes)
    logger.info(f"スイープ開始: 軸 {axis}, 値 {list(values)}, シード {list(seeds)}, セル {len(cells)} 個")
    write_json_file(os.path.join(output_dir, 'merged_config.json'), config.to_dict())

    rows = run_cells(cells, workers)
    pd.DataFrame(rows, columns=CELL_COLUMNS).to_csv(os.path.join(output_dir, 'cells.csv'), index=False)
    aggregate_rows(rows).to_csv(os.path.join(output_dir, 'sweep.csv'), index=False)

    failures = [row for row in rows if row['status'] != 'completed']
    status = {
        'state': 'completed' if not failures else 'failed',
        'axis': axis,
        'cells': len(cells),
        'completed': len(rows) - len(failures),
        'failed': len(failures),
        'failures': [{k: row.get(k) for k in ('value', 'seed', 'error')} for row in failures],
        'elapsed_sec': round(time.time() - started, 3),
    }
    write_json_file(os.path.join(output_dir, 'status.json'), status)
    logger.info(f"スイープ完了: 成功 {status['completed']}, 失敗 {status['failed']}")
    return status


def run_sweep_command(args) -> int:
    from .main import resolve_config

    config = resolve_config(args)
    setup_logging(config.log_level)
    values = parse_values(args.axis, args.values)
    seeds = [int(s) for s in args.seeds.split(',')] if args.seeds else list(config.seeds)
    pool_sizes = [int(p) for p in args.pool_sizes.split(',')] if args.pool_sizes else MINORITY_POOL_SIZES
    status = run_sweep(config, args.axis, values, seeds, config.output_dir,
                       workers=args.workers or config.workers, pool_sizes=pool_sizes)
    return 0 if status['state'] == 'completed' else 1

