import math

import numpy as np
import pytest

from foldnet.autodiff import (
    Tensor,
    backward,
    constant,
    finite_diff_check,
    grad_of,
    parameter,
)
from foldnet.losses import (
    AED_ALPHAS,
    CTC_ALPHAS,
    LossBreakdown,
    OutputDistribution,
    TrainingCriterion,
    attention_ce_loss,
    ctc_brute_force,
    ctc_loss,
    interpolated_loss,
    joint_criterion,
    kl_self_distillation,
)


class TestCtcLoss:
    def test_single_frame_single_label(self):
        # Uniform over {blank, a}: the only path is "a".
        logits = constant(np.zeros((1, 2)))
        assert ctc_loss(logits, [1]).item() == pytest.approx(-math.log(0.5))

    def test_two_frames_three_paths(self):
        # Paths aa, a-, -a out of four equally likely -> 3/4.
        logits = constant(np.zeros((2, 2)))
        expected = -math.log(0.75)
        assert expected == pytest.approx(0.2876820724517809)
        assert ctc_loss(logits, [1]).item() == pytest.approx(expected)

    def test_matches_brute_force_on_random_instances(self, rng):
        checked = 0
        while checked < 200:
            t = int(rng.integers(1, 7))
            v = int(rng.integers(1, 5))
            length = int(rng.integers(0, min(t, 3) + 1))
            target = list(rng.integers(1, v + 1, size=length))
            logits = Tensor(2.0 * rng.normal(size=(t, v + 1)))
            try:
                got = ctc_loss(logits, target).item()
            except ValueError:
                continue  # target too long for the frame count
            want = ctc_brute_force(logits, target)
            assert got == pytest.approx(want, abs=1e-9)
            checked += 1

    def test_target_too_long_fails(self):
        logits = constant(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="target too long"):
            ctc_loss(logits, [1, 2, 1])
        # Repeated labels need an interleaving blank frame.
        with pytest.raises(ValueError, match="target too long"):
            ctc_loss(logits, [1, 1])

    def test_blank_is_reserved(self):
        logits = constant(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="blank"):
            ctc_loss(logits, [0])

    def test_empty_target_all_blank_path(self, rng):
        logits = Tensor(rng.normal(size=(2, 4)))
        lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
        expected = -(lp[0, 0] + lp[1, 0])
        assert ctc_loss(logits, []).item() == pytest.approx(expected)
        assert ctc_brute_force(logits, []) == pytest.approx(expected)

    def test_gradient_passes_finite_differences(self, rng):
        target = [1, 2]
        theta = rng.normal(size=(4, 4))
        err = finite_diff_check(lambda p: ctc_loss(p, target), theta, 1e-6)
        assert err < 1e-5

    def test_brute_force_refuses_long_sequences(self, rng):
        with pytest.raises(ValueError, match="too many"):
            ctc_brute_force(Tensor(rng.normal(size=(9, 3))), [1])

    def test_brute_force_zero_probability_target(self):
        with pytest.raises(ValueError, match="target too long|zero probability"):
            ctc_brute_force(constant(np.zeros((1, 3))), [1, 2])


class TestAttentionCeLoss:
    def test_perfect_one_hot_no_smoothing(self):
        logits = constant(np.array([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]]))
        loss = attention_ce_loss(logits, [0, 1], smoothing=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("smoothing", [0.0, 0.1])
    def test_uniform_logits_gives_log_classes(self, smoothing):
        logits = constant(np.zeros((4, 6)))
        loss = attention_ce_loss(logits, [0, 1, 2, 3], smoothing=smoothing)
        assert loss.item() == pytest.approx(math.log(6))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="targets"):
            attention_ce_loss(constant(np.zeros((2, 3))), [0])

    def test_gradient(self, rng):
        err = finite_diff_check(
            lambda p: attention_ce_loss(p, [1, 0, 2]),
            rng.normal(size=(3, 4)), 1e-6)
        assert err < 1e-4


class TestInterpolatedLoss:
    def test_reference_value(self):
        assert interpolated_loss(1.0, 2.0, 0.3) == pytest.approx(1.3)

    def test_boundaries(self):
        assert interpolated_loss(1.0, 2.0, 1.0) == pytest.approx(2.0)
        assert interpolated_loss(1.0, 2.0, 0.0) == pytest.approx(1.0)

    def test_tensor_inputs(self):
        out = interpolated_loss(constant(1.0), constant(2.0), 0.25)
        assert out.item() == pytest.approx(0.75 * 1.0 + 0.25 * 2.0)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError, match="lam"):
            interpolated_loss(1.0, 2.0, 1.5)


class TestKlSelfDistillation:
    def test_equal_distributions_give_zero(self, rng):
        logits = Tensor(rng.normal(size=(3, 4)))
        d = OutputDistribution.from_logits(logits)
        assert kl_self_distillation(d, d).item() == pytest.approx(0.0, abs=1e-12)

    def test_reference_value_one_frame(self):
        # teacher [1, 0], student [0.5, 0.5] -> KL = ln 2.
        teacher = OutputDistribution.from_logits(constant([[60.0, 0.0]]))
        student = OutputDistribution.from_logits(constant([[0.0, 0.0]]))
        kl = kl_self_distillation(teacher, student)
        assert kl.item() == pytest.approx(math.log(2), abs=1e-9)

    def test_teacher_gradient_exactly_zero(self, rng):
        t_logits = parameter(rng.normal(size=(3, 4)))
        s_logits = parameter(rng.normal(size=(3, 4)))
        kl = kl_self_distillation(OutputDistribution.from_logits(t_logits),
                                  OutputDistribution.from_logits(s_logits))
        grads = backward(kl)
        np.testing.assert_array_equal(grad_of(grads, t_logits),
                                      np.zeros((3, 4)))
        assert np.abs(grads[s_logits]).max() > 0

    def test_non_negative_on_random_pairs(self, rng):
        for _ in range(50):
            a = OutputDistribution.from_logits(Tensor(rng.normal(size=(2, 5))))
            b = OutputDistribution.from_logits(Tensor(rng.normal(size=(2, 5))))
            assert kl_self_distillation(a, b).item() >= -1e-9

    def test_shape_mismatch(self, rng):
        a = OutputDistribution.from_logits(Tensor(rng.normal(size=(2, 5))))
        b = OutputDistribution.from_logits(Tensor(rng.normal(size=(3, 5))))
        with pytest.raises(ValueError, match="teacher"):
            kl_self_distillation(a, b)

    def test_rows_are_distributions(self, rng):
        d = OutputDistribution.from_logits(Tensor(rng.normal(size=(4, 6))))
        np.testing.assert_allclose(d.row_sums(), np.ones(4), atol=1e-9)


class TestJointCriterion:
    def test_reference_arithmetic(self):
        crit = TrainingCriterion(alpha_p=0.25, alpha_kl=0.1)
        total, bd = joint_criterion(2.0, 3.0, 0.5, crit)
        assert total == pytest.approx(2.8)
        assert bd == LossBreakdown(2.0, 3.0, 0.5, 2.8)

    def test_zero_alphas_reduce_to_single_loss(self):
        crit = TrainingCriterion(alpha_p=0.0, alpha_kl=0.0)
        total, bd = joint_criterion(2.0, 3.0, 0.5, crit)
        assert total == pytest.approx(2.0)

    def test_ctc_mode_defaults_accepted(self):
        crit = TrainingCriterion.ctc_defaults()
        assert (crit.alpha_p, crit.alpha_kl) == CTC_ALPHAS == (0.7, 0.005)
        aed = TrainingCriterion.aed_defaults()
        assert (aed.alpha_p, aed.alpha_kl) == AED_ALPHAS == (0.25, 0.1)
        assert aed.lam == 0.3

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            TrainingCriterion(alpha_p=-0.1)

    def test_linear_in_each_alpha(self):
        # The total responds linearly to each weight, checked at three points.
        for alphas in [(0.0, 0.5, 1.0), (0.1, 0.2, 0.4)]:
            totals_p = [joint_criterion(1.0, 2.0, 3.0,
                                        TrainingCriterion(alpha_p=a, alpha_kl=0.1))[0]
                        for a in alphas]
            totals_k = [joint_criterion(1.0, 2.0, 3.0,
                                        TrainingCriterion(alpha_p=0.3, alpha_kl=a))[0]
                        for a in alphas]
            for totals, weights in ((totals_p, alphas), (totals_k, alphas)):
                slope01 = (totals[1] - totals[0]) / (weights[1] - weights[0])
                slope12 = (totals[2] - totals[1]) / (weights[2] - weights[1])
                assert slope01 == pytest.approx(slope12)

    def test_breakdown_invariant(self):
        crit = TrainingCriterion(alpha_p=0.7, alpha_kl=0.005)
        total, bd = joint_criterion(constant(1.5), constant(0.5),
                                    constant(0.25), crit)
        assert bd.total == pytest.approx(
            bd.loss_F + 0.7 * bd.loss_P + 0.005 * bd.loss_reg, abs=1e-12)
        assert bd.finite()

    def test_tensor_total_differentiates(self, rng):
        crit = TrainingCriterion(alpha_p=0.5, alpha_kl=0.2)
        f_term = parameter(1.0)
        total, _ = joint_criterion(f_term, constant(2.0), constant(3.0), crit)
        grads = backward(total)
        assert grads[f_term] == pytest.approx(1.0)


class TestRegularizerIsolation:
    def test_reg_leaves_teacher_only_parameters_untouched(self, rng):
        # Teacher and student from disjoint parameters: adding the KL term
        # must not change any gradient reaching teacher-only parameters.
        from foldnet.autodiff import affine
        t_w = parameter(rng.normal(size=(3, 4)))
        t_b = parameter(rng.normal(size=4))
        s_w = parameter(rng.normal(size=(3, 4)))
        s_b = parameter(rng.normal(size=4))
        x = constant(rng.normal(size=(5, 3)))
        target = [1, 2]

        def build(crit):
            t_logits = affine(x, t_w, t_b)
            s_logits = affine(x, s_w, s_b)
            loss_f = ctc_loss(t_logits, target)
            loss_p = ctc_loss(s_logits, target)
            reg = kl_self_distillation(OutputDistribution.from_logits(t_logits),
                                       OutputDistribution.from_logits(s_logits))
            total, _ = joint_criterion(loss_f, loss_p, reg, crit)
            return backward(total)

        with_reg = build(TrainingCriterion(alpha_p=0.5, alpha_kl=0.3))
        without = build(TrainingCriterion(alpha_p=0.5, alpha_kl=0.0))
        np.testing.assert_allclose(with_reg[t_w], without[t_w], atol=1e-12)
        np.testing.assert_allclose(with_reg[t_b], without[t_b], atol=1e-12)
        # The student side does change.
        assert np.abs(with_reg[s_w] - without[s_w]).max() > 1e-9
