"""
コマンドライン

  ecrt gen-data --toy henon --seed 7 --out data/henon
  ecrt run --config toy.yaml --variant ecrt --objective fdv --stages 1,2
  ecrt sweep --config toy.yaml --axis lam --values 0,1e-4,1e-3
  ecrt eval --checkpoint runs/run/checkpoints/4_refine --data data/henon
  ecrt inspect-checkpoint runs/run/checkpoints/2_demix
  ecrt schema
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from augment.source_augment import SourceSet, export_source_sets_csv
from data.dataset import DatasetConverter
from data.toy import EXTREME_VALIDATION_PER_CLASS, HENON_PER_CLASS, ToySpec, generate_extreme_toy, generate_toy
from pipeline.checkpoint import inspect_checkpoint, load_checkpoint
from pipeline.stages import RunData, StageState, build_run_data, encode, evaluate_state, run_pipeline, to_sources
from utils import __version__
from utils.errors import ConfigurationError, ECRTError
from utils.file_utils import ensure_dir, write_csv_file, write_json_file
from utils.log_utils import setup_logging
from utils.seeding import derive_int_seed

from .config import CONFIG_SCHEMA, ExperimentConfig, load_config, merge_overrides

logger = logging.getLogger(__name__)

LEARNING_CURVE_COLUMNS = ['stage', 'epoch', 'split', 'loss', 'top1']
PER_CLASS_F1_COLUMNS = ['class', 'frequency', 'f1']
FAILED_MARKER = 'FAILED'


def _parse_stages(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        stages = sorted({int(v) for v in text.split(',') if v.strip()})
    except ValueError:
        raise ConfigurationError(f"--stages は 1〜4 のカンマ区切りで指定してください: {text}")
    if not stages or any(s not in (1, 2, 3, 4) for s in stages):
        raise ConfigurationError(f"--stages は 1〜4 のカンマ区切りで指定してください: {text}")
    return stages


def _parse_sets(items: Optional[Sequence[str]]) -> Dict[str, Any]:
    """--set key=value（値は YAML として解釈）"""
    overrides = {}
    for item in items or []:
        if '=' not in item:
            raise ConfigurationError(f"--set は key=value の形式で指定してください: {item}")
        key, value = item.split('=', 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def _run_overrides(args) -> Dict[str, Any]:
    overrides = {
        'variant': args.variant,
        'objective': args.objective,
        'augment_mode': args.augment_mode,
        'lam': args.lam,
        'rho': args.rho,
        'seed': args.seed,
        'output_dir': args.output_dir,
        'log_level': args.log_level,
        'stages': _parse_stages(args.stages),
    }
    overrides.update(_parse_sets(args.set))
    return overrides


def resolve_config(args) -> ExperimentConfig:
    """設定ファイル（任意）にフラグの上書きを適用"""
    overrides = _run_overrides(args)
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig.from_dict(merge_overrides({}, overrides))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    """トイデータを生成してダンプに書き出す"""
    converter = DatasetConverter()
    if args.extreme:
        train, validation = generate_extreme_toy(classes=args.classes, per_class=args.per_class, seed=args.seed,
                                                 validation_per_class=EXTREME_VALIDATION_PER_CLASS)
    else:
        spec = ToySpec(per_class=args.samples_per_class, spread_is_variance=args.variance)
        train = generate_toy(spec, seed=args.seed)
        validation_spec = ToySpec(per_class=max(1, args.samples_per_class // 4), spread_is_variance=args.variance)
        validation = generate_toy(validation_spec, seed=derive_int_seed(args.seed, 'validation'))
        validation.split = 'validation'

    results = {name: converter.dump(ds, args.out, name) for name, ds in
               (('train', train), ('validation', validation))}
    converter.write_config_file(args.out, {'train': train, 'validation': validation})
    report = converter.validate_dataset_dump(args.out)
    if not report['valid']:
        for error in report['errors']:
            logger.error(error)
        return 1
    print(json.dumps({name: r['統計情報'] for name, r in results.items()}, ensure_ascii=False, indent=2))
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def write_status(folder: str, state: str, started: float, **extra) -> str:
    status = {'state': state, 'elapsed_sec': round(time.time() - started, 3), 'version': __version__}
    status.update(extra)
    return write_json_file(os.path.join(folder, 'status.json'), status)


def per_class_rows(report, class_counts: np.ndarray) -> List[Dict]:
    return [{'class': m, 'frequency': int(class_counts[m]) if m < len(class_counts) else 0, 'f1': f1}
            for m, f1 in enumerate(report.f1_per_class)]


def write_run_artifacts(folder: str, state: StageState, report, data: RunData) -> List[str]:
    """metrics.json・学習曲線・クラス別 F1・ソース CSV を書き出す"""
    written = [report.save(os.path.join(folder, 'metrics.json'))]
    written.append(write_csv_file(os.path.join(folder, 'learning_curve.csv'), state.history, LEARNING_CURVE_COLUMNS))
    if report.f1_per_class:
        written.append(write_csv_file(os.path.join(folder, 'per_class_f1.csv'),
                                      per_class_rows(report, data.train.class_counts), PER_CLASS_F1_COLUMNS))
    if 'flow' in state.modules:
        sources = to_sources(state.module('flow'), encode(state.module('encoder'), data.train.features))
        real = [SourceSet(label=int(m), sources=sources[data.train.labels == m])
                for m in np.unique(data.train.labels)]
        written.append(export_source_sets_csv(os.path.join(folder, 'sources.csv'), real,
                                              [state.augmented[m] for m in sorted(state.augmented)]))
    return written


def cmd_run(args) -> int:
    """ステージを実行して結果を出力フォルダに書き出す"""
    config = resolve_config(args)
    folder = ensure_dir(config.output_dir)
    setup_logging(config.log_level, os.path.join(folder, 'run.log'))
    started = time.time()
    config_hash = config.config_hash()
    marker = os.path.join(folder, FAILED_MARKER)
    if os.path.exists(marker):
        os.remove(marker)

    write_json_file(os.path.join(folder, 'merged_config.json'), config.to_dict())
    completed: List[str] = []
    write_status(folder, 'running', started, config_hash=config_hash, completed_stages=completed)

    def on_stage(current: StageState) -> None:
        completed[:] = current.completed_stages
        write_status(folder, 'running', started, config_hash=config_hash, completed_stages=list(completed))

    try:
        resume = None
        if args.resume:
            resume = load_checkpoint(args.resume, config_hash=config_hash)
            completed[:] = resume.completed_stages
        data = build_run_data(config)
        state, report = run_pipeline(config, data=data, checkpoint_dir=os.path.join(folder, 'checkpoints'),
                                     stages=config.stages if args.stages else None, state=resume,
                                     on_stage=on_stage)
        write_run_artifacts(folder, state, report, data)
    except Exception as e:
        if isinstance(e, ECRTError):
            logger.error(f"実行に失敗しました: {e}")
        else:
            logger.exception(f"実行中に予期しないエラーが発生しました: {type(e).__name__}: {e}")
        with open(marker, 'w', encoding='utf-8') as f:
            f.write(f"{type(e).__name__}: {e}\n")
        write_status(folder, 'failed', started, config_hash=config_hash, error=str(e),
                     error_type=type(e).__name__, completed_stages=list(completed))
        return 1

    write_status(folder, 'completed', started, config_hash=config_hash,
                 completed_stages=list(state.completed_stages), top1=report.top1, nll=report.nll)
    logger.info(f"完了しました: {folder}")
    return 0


# ---------------------------------------------------------------------------
# eval / inspect-checkpoint / schema
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    """チェックポイントをデータセットのダンプで評価"""
    state = load_checkpoint(args.checkpoint)
    if state.stage not in ('refine', 'pretrain'):
        raise ConfigurationError(f"評価には refine（または erm/iw の pretrain）チェックポイントが必要です: {state.stage}")
    dataset = DatasetConverter().load(args.data, args.split)
    report = evaluate_state(state, dataset)
    if args.out:
        report.save(args.out)
    print(json.dumps(report.to_dict(), ensure_ascii=False, indent=2))
    return 0


def cmd_inspect_checkpoint(args) -> int:
    summary = inspect_checkpoint(args.checkpoint)
    if args.verify:
        load_checkpoint(args.checkpoint)
        summary['verified'] = True
    print(json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True))
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(CONFIG_SCHEMA, ensure_ascii=False, indent=2))
    return 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep_command
    return run_sweep_command(args)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='設定ファイル（YAML または JSON）')
    parser.add_argument('--variant', choices=['erm', 'iw', 'ecrt', 'ecrt-multi'])
    parser.add_argument('--objective', choices=['gcl', 'fdv'])
    parser.add_argument('--augment-mode', dest='augment_mode',
                        choices=['nonparametric', 'parametric', 'oracle', 'feature-space'])
    parser.add_argument('--lam', type=float, help='拡張強度 λ')
    parser.add_argument('--rho', type=float, help='フロー尤度の重み ρ')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--stages', help='実行するステージ（例: 1,2）')
    parser.add_argument('--output-dir', dest='output_dir')
    parser.add_argument('--log-level', dest='log_level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='設定の上書き（例: train.epochs=50）')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ecrt', description='ソース空間拡張による不均衡分類の実験ツール')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help='トイデータの生成')
    kind = gen.add_mutually_exclusive_group(required=True)
    kind.add_argument('--toy', choices=['henon'])
    kind.add_argument('--extreme', action='store_true')
    gen.add_argument('--per-class', dest='per_class', type=int, default=20)
    gen.add_argument('--classes', type=int, default=1000)
    gen.add_argument('--samples-per-class', dest='samples_per_class', type=int, default=HENON_PER_CLASS)
    gen.add_argument('--variance', action='store_true', help='広がりを分散として解釈')
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', required=True)
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser('run', help='ステージの実行')
    _add_run_options(run)
    run.add_argument('--resume', help='再開に使うチェックポイントフォルダ')
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser('sweep', help='パラメータスイープ')
    _add_run_options(sweep)
    sweep.add_argument('--axis', required=True, choices=['lam', 'minority-size', 'per-class-count', 'mode'])
    sweep.add_argument('--values', required=True, help='カンマ区切りの値')
    sweep.add_argument('--seeds', help='カンマ区切りのシード（省略時は設定の seeds）')
    sweep.add_argument('--workers', type=int, help='並列ワーカー数（既定: CPU 数）')
    sweep.add_argument('--pool-sizes', dest='pool_sizes', help='mode 軸で使う少数クラスのプールサイズ')
    sweep.set_defaults(func=cmd_sweep)

    evaluate = sub.add_parser('eval', help='チェックポイントの評価')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True, help='データセットのダンプフォルダ')
    evaluate.add_argument('--split', default='validation')
    evaluate.add_argument('--out', help='metrics.json の出力先')
    evaluate.set_defaults(func=cmd_eval)

    inspect = sub.add_parser('inspect-checkpoint', help='チェックポイントの要約')
    inspect.add_argument('checkpoint')
    inspect.add_argument('--verify', action='store_true', help='全テンソルのハッシュを検証')
    inspect.set_defaults(func=cmd_inspect_checkpoint)

    schema = sub.add_parser('schema', help='設定スキーマの表示')
    schema.set_defaults(func=cmd_schema)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command not in ('run', 'sweep'):
        setup_logging('INFO')
    try:
        return args.func(args)
    except ECRTError as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
