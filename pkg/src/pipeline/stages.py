"""
段階的な学習パイプライン

1. pretrain: エンコーダと特徴量予測器の事前学習
2. demix: エンコーダを固定してフローと critic を学習（ソース分離）
3. augment: 少数クラスのソース集合を拡張
4. refine: ソース空間の予測器を拡張損失で学習

erm / iw はステージ 1 のみで特徴量予測器をそのまま評価する。
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from analyzer.class_balance import ClassBalanceAnalyzer
from augment.source_augment import (AugmentPlan, FeatureSpaceBatch, SourceSet, augment_source_set)
from autodiff.optim import AdamState
from autodiff.tensor import no_grad
from data.binning import assign_bins, bin_edges
from data.dataset import Dataset, DatasetConverter, spec_hash, train_val_split
from data.imbalance import (MNIST_MAJORITY_COUNT, MNIST_MINORITY_COUNT, MNIST_VALIDATION_PER_CLASS,
                            ImbalanceSpec, apply_step_imbalance, split_step_imbalance)
from data.mnist_idx import MNIST_CLASSES, load_mnist_idx
from data.toy import EXTREME_VALIDATION_PER_CLASS, ToySpec, generate_extreme_toy, generate_toy
from flow.maf import MafFlow
from flow.prior import SourcePrior
from metrics.evaluation import MetricsReport, class_conditional_decorrelation, classification_metrics
from nets.critics import FdvCritic, GclCritic
from nets.mlp import Identity, Mlp
from nets.module import Module
from objectives.losses import (AugmentedLossConfig, RegularizedGclConfig, augmented_refinement_loss,
                               cross_entropy_loss, importance_weights, make_gcl_plan,
                               regularized_demixing_loss)
from quality.source_quality import SourceQualityChecker
from utils.errors import ConfigurationError, StageOrderError, UsageError
from utils.seeding import derive_int_seed, derive_rng

from .trainer import FitResult, fit

logger = logging.getLogger(__name__)

STAGES = ('pretrain', 'demix', 'augment', 'refine')
STAGE_NUMBERS = {name: i + 1 for i, name in enumerate(STAGES)}
VARIANT_KINDS = ('erm', 'iw', 'ecrt', 'ecrt-multi')

# oracle 拡張の参照に使うホールドアウトのクラスあたり件数
ORACLE_HOLDOUT_PER_CLASS = 2000
EVAL_CHUNK = 4096


@dataclass
class RunVariant:
    """実行変種と目的関数・拡張の組"""
    kind: str = 'ecrt'
    objective: str = 'gcl'
    augment_mode: str = 'nonparametric'
    lam: float = 1e-3
    rho: float = 1e-2

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigurationError(f"未知の実行変種です: {self.kind}（{VARIANT_KINDS} のいずれか）")

    @classmethod
    def from_config(cls, config) -> 'RunVariant':
        return cls(kind=config.variant, objective=config.objective, augment_mode=config.augment_mode,
                   lam=config.lam, rho=config.rho)

    @property
    def feature_space_only(self) -> bool:
        return self.kind in ('erm', 'iw')


@dataclass
class RunData:
    """1 回の実行で使うデータ一式"""
    train: Dataset
    validation: Dataset
    minority_classes: Tuple[int, ...] = ()
    holdout: Optional[Dataset] = None
    balance: Dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


@dataclass
class StageState:
    """ステージ間で受け渡す状態（チェックポイントの内容）"""
    stage: str
    config_hash: str
    modules: Dict[str, Module] = field(default_factory=dict)
    optimizer_states: Dict[str, AdamState] = field(default_factory=dict)
    epochs: Dict[str, int] = field(default_factory=dict)
    history: List[Dict] = field(default_factory=list)
    decorrelation_trace: Dict[int, float] = field(default_factory=dict)
    real_sources: Dict[int, SourceSet] = field(default_factory=dict)
    augmented: Dict[int, SourceSet] = field(default_factory=dict)
    completed_stages: List[str] = field(default_factory=list)
    report: Optional[MetricsReport] = None
    feature_batches: List[FeatureSpaceBatch] = field(default_factory=list)
    quality: Dict[str, Dict] = field(default_factory=dict)

    def module(self, name: str) -> Module:
        if name not in self.modules:
            raise UsageError(f"状態にモジュール {name!r} がありません（ステージ {self.stage}）")
        return self.modules[name]

    def checkpoint_id(self) -> str:
        """エンコーダとフローのパラメータから決まる ID（ソース集合の出所確認用）"""
        digest = hashlib.sha256(self.config_hash.encode('utf-8'))
        for name in ('encoder', 'flow'):
            if name not in self.modules:
                continue
            for param_name, param in self.modules[name].named_parameters():
                digest.update(f"{name}.{param_name}".encode('utf-8'))
                digest.update(np.ascontiguousarray(param.data, dtype='<f8').tobytes())
        return digest.hexdigest()[:16]

    def mark(self, stage: str) -> 'StageState':
        self.stage = stage
        if stage not in self.completed_stages:
            self.completed_stages.append(stage)
        return self


def _require_stage(state: Optional[StageState], previous: str, stage: str) -> StageState:
    if state is None:
        raise UsageError(f"ステージ {stage} の実行には {previous} ステージのチェックポイントが必要です")
    if state.stage != previous:
        raise StageOrderError(f"ステージ {stage} は {previous} の後にのみ実行できます（受け取った状態: {state.stage}）")
    return state


# ---------------------------------------------------------------------------
# データ準備
# ---------------------------------------------------------------------------

def _capped_counts(available: np.ndarray, classes: Sequence[int], requested: int, what: str) -> Dict[int, int]:
    counts = {}
    for m in classes:
        counts[int(m)] = min(int(requested), int(available[m]))
        if counts[int(m)] < requested:
            logger.warning(f"警告: クラス {m} の{what}が不足しているため {requested} → {counts[int(m)]} 件に減らします")
    return counts


def _toy_imbalance(train: Dataset, minority: Sequence[int], minority_count: int, rng) -> Dataset:
    available = train.class_counts
    majority = {m: int(available[m]) for m in range(train.num_classes) if m not in minority}
    spec = ImbalanceSpec(majority=majority, minority={int(m): int(minority_count) for m in minority})
    return apply_step_imbalance(train, spec, rng)


def _load_henon(config, rng) -> Tuple[Dataset, Dataset, Optional[Dataset]]:
    ds = config.dataset
    spec = ToySpec(per_class=ds.samples_per_class, spread_is_variance=ds.spread_is_variance)
    full = generate_toy(spec, seed=config.seed)
    train, validation = train_val_split(full, ds.train_ratio, rng)
    if ds.minority_count is not None:
        train = _toy_imbalance(train, ds.minority_classes or [0], ds.minority_count, rng)
    holdout = None
    if config.augment_mode == 'oracle':
        holdout_spec = replace(spec, per_class=ORACLE_HOLDOUT_PER_CLASS)
        holdout = generate_toy(holdout_spec, seed=derive_int_seed(config.seed, 'holdout'))
    return train, validation, holdout


def _load_extreme(config, rng) -> Tuple[Dataset, Dataset]:
    ds = config.dataset
    if config.augment_mode == 'oracle':
        raise ConfigurationError("oracle 拡張は henon データセットでのみ利用できます")
    train, validation = generate_extreme_toy(
        classes=ds.classes, per_class=ds.per_class, seed=config.seed,
        validation_per_class=ds.validation_per_class or EXTREME_VALIDATION_PER_CLASS)
    if ds.minority_count is not None and ds.minority_classes:
        train = _toy_imbalance(train, ds.minority_classes, ds.minority_count, rng)
    return train, validation


def _load_mnist(config, rng) -> Tuple[Dataset, Dataset]:
    ds = config.dataset
    if config.augment_mode == 'oracle':
        raise ConfigurationError("oracle 拡張は henon データセットでのみ利用できます")
    full = load_mnist_idx(ds.mnist_train_images, ds.mnist_train_labels, split='train')
    test = load_mnist_idx(ds.mnist_test_images, ds.mnist_test_labels, split='test')
    minority = ds.minority_classes or [0]
    majority_classes = [m for m in range(MNIST_CLASSES) if m not in minority]
    majority = _capped_counts(full.class_counts, majority_classes,
                              ds.majority_count or MNIST_MAJORITY_COUNT, '訓練データ')
    per_class = ds.validation_per_class or MNIST_VALIDATION_PER_CLASS
    per_class_cap = int(min(per_class, test.class_counts.min()))
    if per_class_cap < per_class:
        logger.warning(f"警告: テストデータの最少クラスに合わせて検証件数を {per_class} → {per_class_cap} 件に減らします")
    spec = ImbalanceSpec(majority=majority,
                         minority={int(m): ds.minority_count or MNIST_MINORITY_COUNT for m in minority},
                         validation_per_class=per_class_cap)
    train, validation = split_step_imbalance(full, spec, rng, validation_pool=test)
    train.metadata['imbalance'] = spec.to_dict()
    return train, validation


def _load_dump(config) -> Tuple[Dataset, Dataset]:
    converter = DatasetConverter()
    folder = config.dataset.path
    report = converter.validate_dataset_dump(folder)
    if not report['valid']:
        raise ConfigurationError(f"データセットのダンプが不正です: {folder}\n  " + "\n  ".join(report['errors']))
    return converter.load(folder, 'train'), converter.load(folder, 'validation')


def _apply_binning(train: Dataset, validation: Dataset, bins: int) -> Tuple[Dataset, Dataset]:
    if train.targets is None or validation.targets is None:
        raise ConfigurationError("連続値ラベルのビニングには targets を持つデータセットが必要です")
    edges = bin_edges(train.targets, bins)
    logger.info(f"連続値ラベルを {bins} ビンに分割しました: 境界 {np.round(edges, 4).tolist()}")
    binned_train = replace(train, labels=assign_bins(train.targets, edges), num_classes=bins)
    binned_val = replace(validation, labels=assign_bins(validation.targets, edges), num_classes=bins)
    binned_train.metadata['bin_edges'] = edges.tolist()
    return binned_train, binned_val


def build_run_data(config) -> RunData:
    """
    設定からデータを準備する

    Returns:
        訓練・検証データと少数クラス（未指定なら件数から自動判定）
    """
    ds = config.dataset
    rng = derive_rng(config.seed, 'data')
    holdout = None
    if ds.kind == 'henon':
        train, validation, holdout = _load_henon(config, rng)
    elif ds.kind == 'extreme':
        train, validation = _load_extreme(config, rng)
    elif ds.kind == 'mnist':
        train, validation = _load_mnist(config, rng)
    elif ds.kind == 'dump':
        train, validation = _load_dump(config)
    else:
        raise ConfigurationError(f"未知のデータセット種別です: {ds.kind}")

    if ds.continuous_bins:
        train, validation = _apply_binning(train, validation, ds.continuous_bins)

    analyzer = ClassBalanceAnalyzer()
    if ds.kind == 'extreme' and not ds.minority_classes:
        minority = list(range(train.num_classes))
    else:
        minority = analyzer.resolve_minority_classes(train.class_counts, ds.minority_classes)
    balance = analyzer.analyze_dataset(train, minority)
    for line in analyzer.status_lines(balance, limit=10):
        logger.info(line)
    train.metadata['class_balance'] = balance['全体サマリー']

    return RunData(train=train, validation=validation, minority_classes=tuple(minority),
                   holdout=holdout, balance=balance)


# ---------------------------------------------------------------------------
# 共通処理
# ---------------------------------------------------------------------------

def build_encoder(config, p: int) -> Module:
    """特徴量がすでに潜在次元なら恒等写像、それ以外は MLP"""
    model = config.model
    if model.encoder == 'identity' or (model.encoder == 'auto' and p == model.latent_dim):
        return Identity(p)
    widths = [p] + list(model.encoder_hidden) + [model.latent_dim]
    return Mlp(widths, dropout=model.dropout, seed=derive_int_seed(config.seed, 'encoder'))


def build_predictor(config, in_dim: int, hidden: Sequence[int], num_classes: int, key: str) -> Mlp:
    widths = [in_dim] + list(hidden) + [num_classes]
    return Mlp(widths, dropout=config.model.dropout, seed=derive_int_seed(config.seed, key))


def _chunked(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    if x.shape[0] == 0:
        return fn(x)
    return np.concatenate([fn(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)], axis=0)


def encode(encoder: Module, features: np.ndarray) -> np.ndarray:
    """固定したエンコーダでの推論（勾配なし）"""
    encoder.eval()
    with no_grad():
        return _chunked(lambda x: encoder(x).data.copy(), np.asarray(features, dtype=np.float64))


def to_sources(flow: MafFlow, z: np.ndarray) -> np.ndarray:
    flow.eval()
    with no_grad():
        return _chunked(lambda x: flow(x)[0].data.copy(), np.asarray(z, dtype=np.float64))


def predict_logits(predictor: Module, inputs: np.ndarray) -> np.ndarray:
    predictor.eval()
    with no_grad():
        return _chunked(lambda x: predictor(x).data.copy(), np.asarray(inputs, dtype=np.float64))


def _named(prefix: str, module: Module) -> Dict:
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


def _history_rows(stage: str, result: FitResult) -> List[Dict]:
    rows = []
    for record in result.history:
        rows.append({'stage': stage, 'epoch': record['epoch'], 'split': 'train',
                     'loss': record['train_loss'], 'top1': None})
        rows.append({'stage': stage, 'epoch': record['epoch'], 'split': 'validation',
                     'loss': record['val_loss'], 'top1': record.get('val_top1')})
    return rows


def fit_classifier(config, predictor: Module, stage: str,
                   train_xy: Tuple[np.ndarray, np.ndarray], val_xy: Tuple[np.ndarray, np.ndarray],
                   class_weights: Optional[np.ndarray] = None,
                   step_loss: Optional[Callable] = None) -> FitResult:
    """
    予測器を交差エントロピーで学習し、検証損失で早期終了

    step_loss を渡すと訓練損失を置き換える（検証は常に重みなし交差エントロピー）。
    """
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    last = {}

    def default_step(index):
        predictor.train()
        return cross_entropy_loss(predictor(x_train[index]), y_train[index], class_weights)

    def val_loss():
        logits = predict_logits(predictor, x_val)
        last['top1'] = float(np.mean(np.argmax(logits, axis=1) == y_val)) if y_val.size else float('nan')
        with no_grad():
            return cross_entropy_loss(logits, y_val).item()

    return fit(_named('predictor', predictor), step_loss or default_step, val_loss, x_train.shape[0],
               config.train_for(stage), derive_rng(config.seed, stage, 'batches'), stage=stage,
               on_epoch=lambda epoch: {'val_top1': last.get('top1')})


# ---------------------------------------------------------------------------
# ステージ
# ---------------------------------------------------------------------------

def stage1_pretrain(config, data: RunData) -> StageState:
    """
    エンコーダ e_θ と特徴量予測器 h_φ' を学習

    majority_only_pretrain のときは多数クラスのみで学習する（M > 2 が必要）。
    iw は重要度重み付きの交差エントロピーを使う。
    """
    variant = RunVariant.from_config(config)
    train, validation = data.train, data.validation
    num_classes = train.num_classes

    majority_only = config.majority_only_pretrain and not variant.feature_space_only
    classes = list(range(num_classes))
    if majority_only:
        if num_classes <= 2:
            raise ConfigurationError(f"多数クラスのみの事前学習にはクラス数 3 以上が必要です: M={num_classes}")
        majority = [m for m in classes if m not in data.minority_classes]
        if majority:
            classes = majority
        else:
            logger.warning("警告: 多数クラスがないため全クラスで事前学習します")
            majority_only = False

    train_rows = np.where(np.isin(train.labels, classes))[0]
    val_rows = np.where(np.isin(validation.labels, classes))[0]
    x_train, y_train = train.features[train_rows], train.labels[train_rows]
    x_val, y_val = validation.features[val_rows], validation.labels[val_rows]

    class_weights = importance_weights(train.class_counts) if variant.kind == 'iw' else None
    encoder = build_encoder(config, train.p)
    predictor = build_predictor(config, encoder.out_features, config.model.predictor_hidden, num_classes,
                                'feature_predictor')
    logger.info(f"[pretrain] 開始: 変種 {variant.kind}, 学習クラス {len(classes)}/{num_classes}, "
                f"n={x_train.shape[0]}, エンコーダ {encoder.kind}")

    params = {**_named('encoder', encoder), **_named('feature_predictor', predictor)}
    last = {}

    def step_loss(index):
        encoder.train()
        predictor.train()
        return cross_entropy_loss(predictor(encoder(x_train[index])), y_train[index], class_weights)

    def val_loss():
        logits = predict_logits(predictor, encode(encoder, x_val))
        last['top1'] = float(np.mean(np.argmax(logits, axis=1) == y_val)) if y_val.size else float('nan')
        with no_grad():
            return cross_entropy_loss(logits, y_val).item()

    result = fit(params, step_loss, val_loss, x_train.shape[0], config.train_for('pretrain'),
                 derive_rng(config.seed, 'pretrain', 'batches'), stage='pretrain',
                 on_epoch=lambda epoch: {'val_top1': last.get('top1')})
    encoder.eval()
    predictor.eval()

    state = StageState(stage='pretrain', config_hash=config.config_hash(),
                       modules={'encoder': encoder, 'feature_predictor': predictor})
    state.optimizer_states['pretrain'] = result.optimizer_state
    state.epochs['pretrain'] = result.epochs_run
    state.history.extend(_history_rows('pretrain', result))
    return state.mark('pretrain')


def _validation_batches(n: int, batch_size: int) -> List[np.ndarray]:
    """固定の検証バッチ（端数が 2 件未満なら直前のバッチに含める）"""
    starts = list(range(0, n, batch_size))
    batches = [np.arange(s, min(s + batch_size, n)) for s in starts]
    if len(batches) > 1 and batches[-1].size < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return [b for b in batches if b.size >= 2]


def stage2_demix(state: StageState, config, data: RunData) -> StageState:
    """
    固定した z = e_θ(x) 上でフロー f_ψ と critic を学習

    損失は GCL または FDV に ρ · (−フロー対数尤度) を加えたもの。
    """
    state = _require_stage(state, 'pretrain', 'demix')
    encoder = state.module('encoder')
    z_train = encode(encoder, data.train.features)
    z_val = encode(encoder, data.validation.features)
    y_train, y_val = data.train.labels, data.validation.labels
    d = z_train.shape[1]
    num_classes = data.num_classes

    seed = derive_int_seed(config.seed, 'demix')
    flow = MafFlow(d, n_blocks=config.flow.n_blocks, hidden=config.flow.hidden,
                   n_hidden=config.flow.n_hidden, seed=seed)
    if config.objective == 'gcl':
        critic = GclCritic(num_classes, d, embed_dim=config.critic.embed_dim, hidden=config.critic.hidden,
                           seed=seed + 1)
    else:
        critic = FdvCritic(num_classes, d, embed_dim=config.critic.embed_dim, hidden=config.critic.hidden,
                           tau_init=config.critic.tau_init, seed=seed + 1)
    prior = SourcePrior(config.prior_mode, num_classes=num_classes, dim=d)
    loss_cfg = RegularizedGclConfig(rho=config.rho, objective=config.objective, prior_mode=config.prior_mode)
    logger.info(f"[demix] 開始: 目的関数 {config.objective}, ρ={config.rho}, 事前分布 {config.prior_mode}, "
                f"フロー {flow.num_parameters()} パラメータ")

    params = {**_named('flow', flow), **_named('critic', critic), **_named('prior', prior)}
    plan_rng = derive_rng(config.seed, 'demix', 'plans')
    train_cfg = config.train_for('demix')
    val_batches = _validation_batches(z_val.shape[0], train_cfg.batch_size)
    if not val_batches:
        raise ConfigurationError(f"[demix] 検証データが少なすぎます: {z_val.shape[0]} 件")

    def step_loss(index):
        flow.train()
        critic.train()
        return regularized_demixing_loss(loss_cfg, critic, flow, prior, z_train[index], y_train[index],
                                         rng=plan_rng)

    def val_loss():
        flow.eval()
        critic.eval()
        rng = derive_rng(config.seed, 'demix', 'validation')
        total, count = 0.0, 0
        with no_grad():
            for batch in val_batches:
                plan = make_gcl_plan(y_val[batch], rng) if config.objective == 'gcl' else None
                loss = regularized_demixing_loss(loss_cfg, critic, flow, prior, z_val[batch], y_val[batch],
                                                 plan=plan)
                total += loss.item() * batch.size
                count += batch.size
        return total / count

    def on_epoch(epoch):
        value = class_conditional_decorrelation(to_sources(flow, z_val), y_val)
        state.decorrelation_trace[int(epoch)] = value
        return {'decorrelation': value}

    result = fit(params, step_loss, val_loss, z_train.shape[0], train_cfg,
                 derive_rng(config.seed, 'demix', 'batches'), stage='demix', min_batch=2, on_epoch=on_epoch)
    flow.eval()
    critic.eval()

    s_train = to_sources(flow, z_train)
    final = class_conditional_decorrelation(s_train, y_train)
    logger.info(f"[demix] クラス条件付き相関: 初期 {state.decorrelation_trace.get(0, float('nan')):.4f} → "
                f"学習後 {final:.4f}")
    checker = SourceQualityChecker()
    state.quality['demix'] = checker.get_quality_summary(checker.check_source_quality(s_train, y_train))

    state.modules.update({'flow': flow, 'critic': critic, 'prior': prior})
    state.optimizer_states['demix'] = result.optimizer_state
    state.epochs['demix'] = result.epochs_run
    state.history.extend(_history_rows('demix', result))
    return state.mark('demix')


def synthetic_count(config, data: RunData) -> int:
    """合成サンプル数（未指定なら最大クラスの件数）"""
    if config.synthetic_count is not None:
        return int(config.synthetic_count)
    return int(data.train.class_counts.max())


def stage3_augment(state: StageState, config, data: RunData) -> StageState:
    """
    少数クラスごとに SourceSet を作り、拡張モードに従って合成ソースを作る

    λ = 0 のときは拡張を行わない。ecrt-multi は学習済みクラス事前分布からサンプリングする。
    """
    state = _require_stage(state, 'demix', 'augment')
    encoder, flow = state.module('encoder'), state.module('flow')
    checkpoint_id = state.checkpoint_id()
    s_train = to_sources(flow, encode(encoder, data.train.features))
    labels = data.train.labels

    state.real_sources = {int(m): SourceSet(label=int(m), sources=s_train[labels == m], checkpoint_id=checkpoint_id)
                          for m in data.minority_classes}
    state.augmented = {}
    state.feature_batches = []

    if config.lam == 0.0:
        logger.info("[augment] λ=0 のため拡張をスキップします")
        return state.mark('augment')
    if not data.minority_classes:
        logger.warning("警告: 少数クラスがないため拡張をスキップします")
        return state.mark('augment')

    count = synthetic_count(config, data)
    use_prior = config.variant == 'ecrt-multi'
    mode = 'parametric' if use_prior else config.augment_mode
    prior = state.modules.get('prior')
    holdout_sources = None
    if mode == 'oracle':
        if data.holdout is None:
            raise UsageError("oracle 拡張にはホールドアウト集合が必要です")
        holdout_sources = to_sources(flow, encode(encoder, data.holdout.features))

    for m in data.minority_classes:
        plan = AugmentPlan(mode=mode, count=count, seed=derive_int_seed(config.seed, 'augment', int(m)),
                           std_floor=config.std_floor, without_replacement=config.without_replacement,
                           use_prior=use_prior)
        source_set = state.real_sources[int(m)]
        if mode == 'oracle':
            source_set = SourceSet(label=int(m), sources=holdout_sources[data.holdout.labels == m],
                                   checkpoint_id=checkpoint_id)
        result = augment_source_set(source_set, plan, flow=flow, prior=prior)
        if isinstance(result, FeatureSpaceBatch):
            state.feature_batches.append(result)
            result = SourceSet(label=int(m), sources=result.sources, checkpoint_id=checkpoint_id)
        state.augmented[int(m)] = result

    synthetic = np.concatenate([s.sources for s in state.augmented.values()], axis=0)
    synthetic_labels = np.concatenate([np.full(s.size, s.label) for s in state.augmented.values()])
    checker = SourceQualityChecker()
    quality = checker.check_source_quality(synthetic, synthetic_labels, state.feature_batches)
    state.quality['augment'] = checker.get_quality_summary(quality)
    logger.info(f"[augment] モード {mode}: {len(state.augmented)} クラス × {count} 件の合成ソースを作成しました")
    return state.mark('augment')


def stage4_refine(state: StageState, config, data: RunData) -> StageState:
    """
    新しいソース空間予測器 h_φ(s) を実ソースと合成ソースで学習

    エンコーダとフローは固定。検証データでの MetricsReport を state.report に入れる。
    """
    state = _require_stage(state, 'augment', 'refine')
    encoder, flow = state.module('encoder'), state.module('flow')
    checkpoint_id = state.checkpoint_id()
    for source_set in state.augmented.values():
        source_set.verify(checkpoint_id)

    s_train = to_sources(flow, encode(encoder, data.train.features))
    s_val = to_sources(flow, encode(encoder, data.validation.features))
    y_train, y_val = data.train.labels, data.validation.labels
    num_classes = data.num_classes

    minority_rows = np.where(np.isin(y_train, data.minority_classes))[0]
    if state.augmented:
        aug_s = np.concatenate([s.sources for s in state.augmented.values()], axis=0)
        aug_y = np.concatenate([np.full(s.size, s.label, dtype=np.int64) for s in state.augmented.values()])
    else:
        aug_s, aug_y = np.zeros((0, s_train.shape[1])), np.zeros(0, dtype=np.int64)

    lam = config.lam
    if lam > 0.0 and (aug_s.shape[0] == 0 or minority_rows.size == 0):
        logger.warning("警告: 合成ソースまたは少数クラスの実データがないため λ=0 として学習します")
        lam = 0.0
    loss_cfg = AugmentedLossConfig(lam=lam, minority_classes=data.minority_classes,
                                   weighted_base=config.weighted_refine_base)
    class_weights = importance_weights(data.train.class_counts) if config.weighted_refine_base else None

    predictor = build_predictor(config, s_train.shape[1], config.model.source_predictor_hidden, num_classes,
                                'source_predictor')
    batch_size = config.train_for('refine').batch_size
    sample_rng = derive_rng(config.seed, 'refine', 'augmented')

    def step_loss(index):
        predictor.train()
        batch = (s_train[index], y_train[index])
        if loss_cfg.lam == 0.0:
            return augmented_refinement_loss(loss_cfg, predictor, (None, None), (None, None), batch, class_weights)
        real_index = minority_rows[sample_rng.choice(minority_rows.size, size=min(batch_size, minority_rows.size),
                                                     replace=False)]
        aug_index = sample_rng.choice(aug_s.shape[0], size=min(batch_size, aug_s.shape[0]), replace=False)
        return augmented_refinement_loss(loss_cfg, predictor,
                                         (s_train[real_index], y_train[real_index]),
                                         (aug_s[aug_index], aug_y[aug_index]),
                                         batch, class_weights)

    logger.info(f"[refine] 開始: λ={loss_cfg.lam}, 合成 {aug_s.shape[0]} 件, 少数クラス {list(data.minority_classes)[:10]}")
    result = fit_classifier(config, predictor, 'refine', (s_train, y_train), (s_val, y_val),
                            step_loss=step_loss)
    predictor.eval()

    report = classification_metrics(predict_logits(predictor, s_val), y_val)
    report.decorrelation_trace = dict(state.decorrelation_trace)
    logger.info(f"[refine] 検証: NLL {report.nll:.4f}, Top-1 {report.top1:.4f}, macro-F1 {report.macro_f1:.4f}")

    state.modules['source_predictor'] = predictor
    state.optimizer_states['refine'] = result.optimizer_state
    state.epochs['refine'] = result.epochs_run
    state.history.extend(_history_rows('refine', result))
    state.report = report
    return state.mark('refine')


def evaluate_feature_predictor(state: StageState, dataset: Dataset) -> MetricsReport:
    """e_θ と h_φ' による評価（erm / iw）"""
    encoder, predictor = state.module('encoder'), state.module('feature_predictor')
    return classification_metrics(predict_logits(predictor, encode(encoder, dataset.features)), dataset.labels)


def evaluate_state(state: StageState, dataset: Dataset) -> MetricsReport:
    """最終段のモデルで dataset を評価"""
    if 'source_predictor' in state.modules:
        sources = to_sources(state.module('flow'), encode(state.module('encoder'), dataset.features))
        report = classification_metrics(predict_logits(state.module('source_predictor'), sources), dataset.labels)
        report.decorrelation_trace = dict(state.decorrelation_trace)
        return report
    return evaluate_feature_predictor(state, dataset)


STAGE_FUNCTIONS = {
    'demix': stage2_demix,
    'augment': stage3_augment,
    'refine': stage4_refine,
}


def run_pipeline(config, data: Optional[RunData] = None, stages: Optional[Sequence[int]] = None,
                 checkpoint_dir: Optional[str] = None,
                 state: Optional[StageState] = None,
                 on_stage: Optional[Callable[[StageState], None]] = None) -> Tuple[StageState, MetricsReport]:
    """
    指定ステージを順に実行

    Args:
        config: ExperimentConfig
        data: 準備済みデータ（省略時は設定から作る）
        stages: 実行するステージ番号（省略時は config.stages。再開時は state のステージより後のみ）
        checkpoint_dir: 各ステージ後のチェックポイント保存先
        state: 再開用の状態（ステージ 2 以降から始める場合）
        on_stage: ステージ完了（チェックポイント保存後）ごとに呼ぶ関数

    Returns:
        (最終状態, MetricsReport)
    """
    from .checkpoint import save_checkpoint

    if stages is None and state is not None:
        done = STAGE_NUMBERS[state.stage]
        stages = [n for n in config.stages if n > done]
        logger.info(f"{state.stage} チェックポイントから再開します: ステージ {stages}")
        if not stages:
            raise UsageError(f"{state.stage} より後に実行するステージがありません")
    stages = sorted(set(stages or config.stages))
    data = data or build_run_data(config)

    def checkpoint(current: StageState) -> None:
        if checkpoint_dir:
            save_checkpoint(current, os.path.join(checkpoint_dir, f"{STAGE_NUMBERS[current.stage]}_{current.stage}"))
        if on_stage is not None:
            on_stage(current)

    if config.is_baseline:
        if any(s > 1 for s in stages):
            logger.info(f"{config.variant} ではステージ 2〜4 をスキップします")
        state = stage1_pretrain(config, data)
        state.report = evaluate_feature_predictor(state, data.validation)
        checkpoint(state)
        logger.info(f"[{config.variant}] 検証: NLL {state.report.nll:.4f}, Top-1 {state.report.top1:.4f}")
        return state, state.report

    for number in stages:
        name = STAGES[number - 1]
        if name == 'pretrain':
            state = stage1_pretrain(config, data)
        else:
            state = STAGE_FUNCTIONS[name](state, config, data)
        checkpoint(state)

    if state is None:
        raise UsageError("実行するステージがありません")
    report = state.report or MetricsReport(decorrelation_trace=dict(state.decorrelation_trace))
    return state, report


def run_fingerprint(state: StageState) -> str:
    """状態の要約ハッシュ（再現性の確認用）"""
    return spec_hash({'checkpoint_id': state.checkpoint_id(), 'stage': state.stage,
                      'report': state.report.to_dict() if state.report else None})
