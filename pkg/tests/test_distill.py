"""Distillation tests: schedule, loss hand cases, optimizer, training loops."""

import numpy as np
import pytest

from amp.autodiff import Tensor
from amp.distill import (AdamW, DistillConfig, LossRecord, distill_loss, lr_at,
                         train, train_supervised, write_loss_curve)
from amp.errors import ContractError, NumericError, ParameterError
from amp.importance import NeuronRanking
from amp.model import ForwardRecord, init_random
from amp.pruner import apply_surgery, plan_from_sizes


def _cfg(**kw):
    base = dict(epochs=4, warmup_epochs=1, base_lr=2e-3, min_lr=1e-5,
                batch_size=32, seed=0)
    base.update(kw)
    return DistillConfig(**base)


class TestSchedule:
    def test_warmup_starts_at_zero(self):
        cfg = _cfg()
        assert lr_at(cfg, 0, 10) == 0.0
        assert 0.0 < lr_at(cfg, 5, 10) < cfg.peak_lr

    def test_peak_at_warmup_end(self):
        cfg = _cfg()
        assert lr_at(cfg, 10, 10) == pytest.approx(cfg.peak_lr)

    def test_min_lr_at_last_step(self):
        cfg = _cfg()
        assert lr_at(cfg, 39, 10) == cfg.min_lr

    def test_cosine_midpoint(self):
        cfg = _cfg()
        mid = (10 + 39) / 2
        expected = cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr)
        assert lr_at(cfg, int(mid), 10) == pytest.approx(expected, rel=0.05)

    def test_monotone_decay_after_warmup(self):
        cfg = _cfg()
        lrs = [lr_at(cfg, s, 10) for s in range(10, 40)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_peak_scales_with_batch_size(self):
        assert _cfg(batch_size=256).peak_lr == pytest.approx(2e-3)
        assert _cfg(batch_size=64).peak_lr == pytest.approx(2e-3 / 4)

    def test_negative_step_rejected(self):
        with pytest.raises(ParameterError):
            lr_at(_cfg(), -1, 10)

    def test_warmup_bounds_validated(self):
        with pytest.raises(ParameterError):
            _cfg(epochs=2, warmup_epochs=2)


class TestDistillLoss:
    def test_identical_outputs_zero(self):
        rec = ForwardRecord(z_cls=Tensor(np.ones((2, 4))),
                            z_patch=Tensor(np.ones((2, 3, 4))),
                            hidden_captures={})
        assert distill_loss(rec, rec).item() == 0.0

    def test_all_ones_cls_difference_is_one(self):
        # Eq-style hand case: C=4, cls difference all ones, patches equal
        t = ForwardRecord(z_cls=Tensor(np.zeros((2, 4))),
                          z_patch=Tensor(np.zeros((2, 3, 4))),
                          hidden_captures={})
        s = ForwardRecord(z_cls=Tensor(np.ones((2, 4))),
                          z_patch=Tensor(np.zeros((2, 3, 4))),
                          hidden_captures={})
        assert distill_loss(t, s).item() == 1.0

    def test_patch_term_normalization(self):
        # patch difference all ones: (1/(N C)) * N*C = 1 per sample
        t = ForwardRecord(z_cls=Tensor(np.zeros((2, 4))),
                          z_patch=Tensor(np.zeros((2, 3, 4))),
                          hidden_captures={})
        s = ForwardRecord(z_cls=Tensor(np.zeros((2, 4))),
                          z_patch=Tensor(np.ones((2, 3, 4))),
                          hidden_captures={})
        assert distill_loss(t, s).item() == 1.0

    def test_shape_mismatch_rejected(self):
        a = ForwardRecord(z_cls=Tensor(np.zeros((2, 4))),
                          z_patch=Tensor(np.zeros((2, 3, 4))),
                          hidden_captures={})
        b = ForwardRecord(z_cls=Tensor(np.zeros((2, 5))),
                          z_patch=Tensor(np.zeros((2, 3, 5))),
                          hidden_captures={})
        with pytest.raises(ContractError):
            distill_loss(a, b)


class TestAdamW:
    def test_single_step_matches_hand_formula(self):
        cfg = _cfg(weight_decay=0.1)
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.25])
        opt = AdamW([p], cfg)
        opt.step(lr=0.01)
        g = np.array([0.5, -0.25])
        m = (1 - cfg.beta1) * g / (1 - cfg.beta1)
        v = (1 - cfg.beta2) * g * g / (1 - cfg.beta2)
        expected = np.array([1.0, -2.0]) - 0.01 * (
            m / (np.sqrt(v) + cfg.eps) + 0.1 * np.array([1.0, -2.0]))
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_none_grad_skipped(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        AdamW([p], _cfg()).step(lr=0.1)
        np.testing.assert_array_equal(p.data, [3.0])


class TestTraining:
    def test_fixed_point_student_equals_teacher(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        student = apply_surgery(teacher, plan_from_sizes(ranking, [32, 32]))
        before = {n: np.array(t.data) for n, t in student.params.items()}
        tbefore = {n: np.array(t.data) for n, t in teacher.params.items()}
        _, records = train(student, teacher, trained_small["train"],
                           _cfg(epochs=2, warmup_epochs=1))
        assert all(r.loss == 0.0 for r in records)
        for name in before:
            np.testing.assert_array_equal(student.params[name].data, before[name])
            np.testing.assert_array_equal(teacher.params[name].data, tbefore[name])

    def test_distillation_reduces_loss(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        student = apply_surgery(teacher, plan_from_sizes(ranking, [8, 8]))
        _, records = train(student, teacher, trained_small["train"],
                           _cfg(epochs=6, warmup_epochs=1, base_lr=4e-3))
        head = np.mean([r.loss for r in records[:3]])
        tail = np.mean([r.loss for r in records[-3:]])
        assert tail < head

    def test_deterministic(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        outs = []
        for _ in range(2):
            student = apply_surgery(teacher, plan_from_sizes(ranking, [8, 8]))
            _, records = train(student, teacher, trained_small["train"],
                               _cfg(epochs=2, warmup_epochs=1))
            outs.append((student.params["block0.fc1_w"].data.copy(),
                         [r.loss for r in records]))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]

    def test_epochs_zero_is_noop(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        student = apply_surgery(teacher, plan_from_sizes(ranking, [8, 8]))
        before = np.array(student.params["block0.fc1_w"].data)
        _, records = train(student, teacher, trained_small["train"],
                           _cfg(epochs=0, warmup_epochs=0))
        assert records == []
        np.testing.assert_array_equal(student.params["block0.fc1_w"].data, before)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_raises(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        student = apply_surgery(teacher, plan_from_sizes(ranking, [8, 8]))
        student.params["block0.fc1_w"].data[:] = 1e200
        with pytest.raises(NumericError):
            train(student, teacher, trained_small["train"],
                  _cfg(epochs=1, warmup_epochs=0))

    def test_dataset_smaller_than_batch_rejected(self, trained_small):
        teacher = trained_small["model"]
        ranking = NeuronRanking(order=[np.arange(32), np.arange(32)])
        student = apply_surgery(teacher, plan_from_sizes(ranking, [8, 8]))
        with pytest.raises(ParameterError):
            train(student, teacher, trained_small["train"],
                  _cfg(batch_size=10_000))

    def test_supervised_training_learns(self, trained_small):
        # the session fixture itself is the oracle: its loss should have
        # dropped well below chance level ln(4)
        from amp.criterion import cross_entropy_criterion
        import amp.autodiff as ad
        from amp.model import forward
        model, head = trained_small["model"], trained_small["head"]
        ds = trained_small["train"]
        logits = ad.matmul(forward(model, ds.images[:64]).z_cls,
                           Tensor(head["head_w"])) \
            + Tensor(head["head_b"].reshape(1, -1))
        loss = cross_entropy_criterion(logits, ds.labels[:64]).item()
        assert loss < np.log(4.0)

    def test_supervised_requires_labels(self, trained_small, small_dataset):
        from amp.data import Dataset
        unlabeled = Dataset(images=small_dataset.images, labels=None,
                            source_tag="x")
        model = init_random(trained_small["config"], 0)
        with pytest.raises(ParameterError):
            train_supervised(model, 4, unlabeled, _cfg())


def test_write_loss_curve_round_trip(tmp_path):
    records = [LossRecord(step=0, loss=0.5, lr=1e-3),
               LossRecord(step=1, loss=0.25, lr=2e-3)]
    path = tmp_path / "loss.csv"
    write_loss_curve(records, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr"
    step, loss, lr = lines[2].split(",")
    assert (int(step), float(loss), float(lr)) == (1, 0.25, 2e-3)
