import numpy as np
import pytest

from autodiff.tensor import Tensor
from flow.maf import MafFlow
from flow.prior import SourcePrior
from nets.critics import FdvCritic, GclCritic
from nets.mlp import Mlp
from objectives.losses import (AugmentedLossConfig, GclBatchPlan, RegularizedGclConfig, augmented_refinement_loss,
                               cross_entropy_loss, fdv_estimate, fdv_loss_from_sources, gcl_loss,
                               gcl_loss_from_sources, importance_weights, make_gcl_plan, regularized_demixing_loss)
from utils.errors import ConfigurationError, UsageError


class _ConstantScores:
    """ラベルが true_labels と一致すれば +value、それ以外は -value を返す critic"""

    def __init__(self, true_labels, value):
        self.true_labels = np.asarray(true_labels)
        self.value = value

    def score(self, labels, s):
        return Tensor(np.where(np.asarray(labels) == self.true_labels, self.value, -self.value))


class _FixedPairwise:

    def __init__(self, scores):
        self.scores = Tensor(np.asarray(scores, dtype=np.float64), requires_grad=True)

    def pairwise_scores(self, labels, s):
        return self.scores


class TestCrossEntropy:

    def test_uniform_logits(self):
        assert cross_entropy_loss(np.zeros((4, 5)), [0, 1, 2, 3]).item() == pytest.approx(np.log(5.0))

    def test_hand_softmax(self):
        loss = cross_entropy_loss(np.array([[1.0, 0.0, 0.0]]), [0]).item()
        assert loss == pytest.approx(-np.log(np.e / (np.e + 2.0)), abs=1e-12)
        assert loss == pytest.approx(0.5514, abs=1e-4)

    def test_large_margin_goes_to_zero(self):
        assert cross_entropy_loss(np.array([[50.0, 0.0]]), [0]).item() < 1e-20

    def test_class_weights(self):
        logits = np.zeros((2, 2))
        weighted = cross_entropy_loss(logits, [0, 1], class_weights=np.array([1.0, 3.0])).item()
        assert weighted == pytest.approx(2.0 * np.log(2.0))

    def test_label_out_of_range(self):
        with pytest.raises(UsageError):
            cross_entropy_loss(np.zeros((1, 3)), [3])


class TestImportanceWeights:

    def test_balanced_counts(self):
        np.testing.assert_allclose(importance_weights([7, 7, 7]), [1.0, 1.0, 1.0])

    def test_step_counts(self):
        np.testing.assert_allclose(importance_weights([100, 100, 10, 10]), [0.55, 0.55, 5.5, 5.5])

    def test_zero_count(self):
        with pytest.raises(ConfigurationError):
            importance_weights([10, 0])


class TestGcl:

    def test_plan_has_no_fixed_points(self):
        rng = np.random.default_rng(0)
        for n in (2, 3, 17):
            plan = make_gcl_plan(np.arange(n) % 3, rng)
            assert not np.any(plan.shuffle == np.arange(n))
            assert sorted(plan.shuffle.tolist()) == list(range(n))

    def test_plan_needs_two_rows(self):
        with pytest.raises(UsageError):
            make_gcl_plan([0], np.random.default_rng(0))

    def test_zero_critic_loss(self):
        critic = GclCritic(num_classes=2, dim=2, embed_dim=3, hidden=[4])
        for _, param in critic.named_parameters():
            param.data[...] = 0.0
        plan = make_gcl_plan([0, 1, 0, 1], np.random.default_rng(0))
        loss = gcl_loss_from_sources(critic, np.ones((4, 2)), plan).item()
        assert loss == pytest.approx(2.0 * np.log(2.0), abs=1e-12)

    def test_separating_scores(self):
        labels = np.array([0, 1])
        plan = GclBatchPlan(labels=labels, shuffle=np.array([1, 0]))
        loss = gcl_loss_from_sources(_ConstantScores(labels, 5.0), np.zeros((2, 1)), plan).item()
        assert loss == pytest.approx(2.0 * np.log1p(np.exp(-5.0)), abs=1e-12)
        assert loss == pytest.approx(0.01343, abs=1e-5)

    def test_loss_is_non_negative_and_trains_flow(self):
        rng = np.random.default_rng(1)
        critic = GclCritic(num_classes=3, dim=2, embed_dim=3, hidden=[6], seed=1)
        flow = MafFlow(2, n_blocks=2, hidden=6, seed=2)
        z = rng.standard_normal((8, 2))
        plan = make_gcl_plan(rng.integers(0, 3, size=8), rng)
        loss = gcl_loss(critic, flow, z, plan)
        assert loss.item() >= 0.0
        loss.backward()
        flow_grads = [p.grad for _, p in flow.named_parameters() if p.grad is not None]
        assert any(np.any(g != 0) for g in flow_grads)


class TestFdv:

    def test_constant_critic_gives_zero(self):
        loss = fdv_loss_from_sources(_FixedPairwise(np.full((4, 4), 2.5)), np.zeros((4, 1)), [0, 1, 2, 3])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_separating_critic_saturates_at_log_batch(self):
        k = 6
        estimate = fdv_estimate(_FixedPairwise(50.0 * np.eye(k)), np.zeros((k, 1)), np.arange(k))
        assert estimate == pytest.approx(np.log(k), abs=1e-6)

    def test_estimate_never_exceeds_log_batch(self):
        rng = np.random.default_rng(12)
        for trial in range(100):
            n = int(rng.integers(2, 33))
            num_classes = int(rng.integers(2, 6))
            critic = FdvCritic(num_classes=num_classes, dim=3, embed_dim=4, hidden=[8],
                               tau_init=float(rng.uniform(0.02, 2.0)), seed=trial)
            s = 3.0 * rng.standard_normal((n, 3))
            labels = rng.integers(0, num_classes, size=n)
            assert fdv_estimate(critic, s, labels) <= np.log(n) + 1e-9
            assert -fdv_loss_from_sources(critic, s, labels).item() <= np.log(n) + 1e-9

    def test_estimate_bound_holds_for_extreme_scores(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n = int(rng.integers(2, 33))
            scores = 100.0 * rng.standard_normal((n, n))
            estimate = fdv_estimate(_FixedPairwise(scores), np.zeros((n, 1)), np.arange(n))
            assert np.isfinite(estimate)
            assert estimate <= np.log(n) + 1e-9

    def test_single_label_batch_warns(self, caplog):
        loss = fdv_loss_from_sources(_FixedPairwise(np.zeros((3, 3))), np.zeros((3, 1)), [1, 1, 1])
        assert np.isfinite(loss.item())
        assert "1種類" in caplog.text

    def test_gradient_flows_through_scores(self):
        critic = _FixedPairwise(np.array([[1.0, 0.2], [0.1, 0.8]]))
        fdv_loss_from_sources(critic, np.zeros((2, 1)), [0, 1]).backward()
        assert critic.scores.grad is not None and np.all(np.isfinite(critic.scores.grad))


class TestRegularizedDemixing:

    def _parts(self):
        critic = GclCritic(num_classes=2, dim=2, embed_dim=3, hidden=[4], seed=0)
        flow = MafFlow(2, n_blocks=1, hidden=4, seed=1)
        z = np.random.default_rng(2).standard_normal((6, 2))
        labels = np.array([0, 1, 0, 1, 0, 1])
        return critic, flow, z, labels

    def test_rho_zero_equals_contrastive(self):
        critic, flow, z, labels = self._parts()
        plan = make_gcl_plan(labels, np.random.default_rng(3))
        cfg = RegularizedGclConfig(rho=0.0)
        total = regularized_demixing_loss(cfg, critic, flow, SourcePrior('shared', dim=2), z, labels, plan=plan)
        assert total.item() == pytest.approx(gcl_loss(critic, flow, z, plan).item(), abs=1e-12)

    def test_flow_likelihood_term(self):
        critic, flow, z, labels = self._parts()
        plan = make_gcl_plan(labels, np.random.default_rng(3))
        terms = {}
        cfg = RegularizedGclConfig(rho=0.5)
        total = regularized_demixing_loss(cfg, critic, flow, SourcePrior('shared', dim=2), z, labels,
                                          plan=plan, terms=terms)
        expected_nll = np.mean(0.5 * (z ** 2).sum(axis=1) + np.log(2.0 * np.pi))
        assert terms['flow_nll'] == pytest.approx(expected_nll, abs=1e-12)
        assert total.item() == pytest.approx(terms['contrastive'] + 0.5 * expected_nll, abs=1e-12)

    def test_gcl_needs_plan_or_rng(self):
        critic, flow, z, labels = self._parts()
        with pytest.raises(UsageError):
            regularized_demixing_loss(RegularizedGclConfig(), critic, flow, SourcePrior('shared', dim=2), z, labels)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            RegularizedGclConfig(rho=-1.0)
        with pytest.raises(ConfigurationError):
            RegularizedGclConfig(objective='infonce')


class TestAugmentedRefinement:

    def _predictor(self):
        return Mlp([2, 5, 3], seed=4)

    def _batch(self):
        rng = np.random.default_rng(5)
        return rng.standard_normal((10, 2)), rng.integers(0, 3, size=10)

    def test_lambda_zero_is_base_loss(self):
        predictor = self._predictor()
        batch = self._batch()
        loss = augmented_refinement_loss(AugmentedLossConfig(lam=0.0), predictor, (None, None), (None, None), batch)
        assert loss.item() == pytest.approx(cross_entropy_loss(predictor(batch[0]), batch[1]).item())

    def test_identical_sets_cancel(self):
        predictor = self._predictor()
        batch = self._batch()
        minority = (np.array([[0.3, -1.0], [1.2, 0.4]]), np.array([2, 2]))
        loss = augmented_refinement_loss(AugmentedLossConfig(lam=1.0, minority_classes=[2]), predictor,
                                         minority, minority, batch)
        assert loss.item() == pytest.approx(cross_entropy_loss(predictor(batch[0]), batch[1]).item(), abs=1e-12)

    def test_empty_augmentation(self):
        with pytest.raises(UsageError):
            augmented_refinement_loss(AugmentedLossConfig(lam=0.1), self._predictor(),
                                      (np.zeros((1, 2)), np.array([2])), (np.zeros((0, 2)), np.zeros(0)),
                                      self._batch())

    def test_lambda_range(self):
        with pytest.raises(ConfigurationError):
            AugmentedLossConfig(lam=1.5)
