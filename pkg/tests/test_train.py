import dataclasses
import math

import numpy as np
import pytest

from mafnet.data import Sample, SynthSpec, generate_synthetic
from mafnet.mlfe import EVAL, TRAIN
from mafnet.model import TOY_CONFIG, MafConfig, init_params
from mafnet.tensor import Rng, Tensor, cross_entropy
from mafnet.train import (
    LONG_TRAIN_CONFIG,
    OptimState,
    TrainConfig,
    TrainHistory,
    batch_loss,
    cosine_lr,
    evaluate,
    sgd_step,
    train,
)


def toy_samples(n=4, seed=0):
    """12x12 images: drowsy ones are bright on top, the rest bright at the bottom."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        img = rng.uniform(0.0, 0.2, size=(1, 12, 12))
        rows = slice(0, 4) if label else slice(8, 12)
        img[:, rows] += 0.7
        out.append(Sample(Tensor(img), label, False))
    return out


class TestCrossEntropy:
    def test_uniform(self):
        assert abs(cross_entropy(Tensor([0.0, 0.0]), 0).item() - math.log(2)) < 1e-12
        assert abs(math.log(2) - 0.69315) < 1e-5

    def test_saturated(self):
        assert cross_entropy(Tensor([10.0, -10.0]), 0).item() < 1e-8

    def test_hand_value(self):
        expected = math.log(1 + math.exp(-2.0))
        assert abs(cross_entropy(Tensor([1.0, 3.0]), 1).item() - expected) < 1e-14
        assert abs(expected - 0.12693) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([1.0, 3.0]), 2)


class TestSgd:
    def params(self):
        return init_params(TOY_CONFIG, 0)

    def grads(self, params, seed=0):
        rng = np.random.default_rng(seed)
        return {k: rng.normal(size=t.shape) for k, t in params.named_tensors().items()}

    def test_plain_gradient_step(self):
        p = self.params()
        g = self.grads(p)
        new, _ = sgd_step(p, g, OptimState(lr=0.1, momentum=0.0, weight_decay=0.0))
        for k, t in new.named_tensors().items():
            np.testing.assert_array_equal(t.data, p.named_tensors()[k].data - 0.1 * g[k])

    def test_zero_gradient_fixed_point(self):
        p = self.params()
        g = {k: np.zeros(t.shape) for k, t in p.named_tensors().items()}
        new, _ = sgd_step(p, g, OptimState(lr=0.1, momentum=0.9, weight_decay=0.0))
        for k, t in new.named_tensors().items():
            np.testing.assert_array_equal(t.data, p.named_tensors()[k].data)

    def test_scalar_quadratic_recurrence(self):
        # f(w) = a w^2 / 2 on the head bias, hand-iterated
        a, lr, mu, wd = 3.0, 0.05, 0.9, 1e-3
        p = self.params()
        w0 = 0.7
        p = p.replace_tensor("head_b", Tensor(np.array([w0, 0.0])))
        state = OptimState(lr, mu, wd)
        w, v = w0, 0.0
        for _ in range(2):
            g = {"head_b": np.array([a * p.head_b.data[0], 0.0])}
            p, state = sgd_step(p, g, state)
            v = mu * v + (a * w + wd * w)
            w = w - lr * v
        assert abs(p.head_b.data[0] - w) < 1e-12

    def test_weight_decay_applies_without_gradient(self):
        p = self.params()
        new, _ = sgd_step(p, {}, OptimState(lr=0.1, momentum=0.0, weight_decay=0.5))
        np.testing.assert_allclose(new.head_w.data, p.head_w.data * (1 - 0.05), atol=1e-15)

    def test_velocity_shapes(self):
        p = self.params()
        _, state = sgd_step(p, self.grads(p), OptimState(0.1))
        for k, t in p.named_tensors().items():
            assert state.velocity[k].shape == t.shape

    def test_shape_mismatch(self):
        p = self.params()
        with pytest.raises(ValueError):
            sgd_step(p, {"head_b": np.zeros(3)}, OptimState(0.1))


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 0.01, 40) == 0.01
        assert abs(cosine_lr(20, 0.01, 40) - 0.005) < 1e-15
        assert cosine_lr(40, 0.01, 40) == 0.01

    def test_periodic_and_bounded(self):
        for e in range(200):
            lr = cosine_lr(e, 0.01, 40)
            assert 0 < lr <= 0.01
            assert lr == cosine_lr(e + 40, 0.01, 40)

    def test_bad_period(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0.01, 0)


class TestTrain:
    def test_zero_lr_leaves_params(self):
        p = init_params(TOY_CONFIG, 0)
        s = toy_samples(1)
        new, _ = train(TOY_CONFIG, p, s, s, TrainConfig(epochs=1, batch_size=1, lr=0.0))
        for k, t in new.named_tensors().items():
            np.testing.assert_array_equal(t.data, p.named_tensors()[k].data)

    def test_loss_decreases(self):
        cfg = TOY_CONFIG
        s = toy_samples(4)
        _, hist = train(cfg, init_params(cfg, 1), s, s, TrainConfig(epochs=20, batch_size=4, lr=1e-2, lr_period=40))
        losses = np.array([r.train_loss for r in hist.records])
        smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) < 0), losses
        assert losses[-1] < losses[0]

    def test_deterministic_history(self):
        s = toy_samples(6)
        tc = TrainConfig(epochs=3, batch_size=4, seed=9)
        _, h1 = train(TOY_CONFIG, init_params(TOY_CONFIG, 2), s, s, tc)
        _, h2 = train(TOY_CONFIG, init_params(TOY_CONFIG, 2), s, s, tc)
        assert h1.to_csv() == h2.to_csv()

    def test_history_csv(self):
        s = toy_samples(4)
        _, hist = train(TOY_CONFIG, init_params(TOY_CONFIG, 3), s, s, TrainConfig(epochs=2, batch_size=2))
        lines = hist.to_csv().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc,test_acc,test_f1"
        assert len(lines) == 3
        assert [r.epoch for r in hist.records] == [0, 1]
        for r in hist.records:
            for v in (r.train_acc, r.test_acc, r.test_f1):
                assert 0.0 <= v <= 1.0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(TOY_CONFIG, init_params(TOY_CONFIG, 0), [], toy_samples(2), TrainConfig(epochs=1))

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="epochs"):
            train(TOY_CONFIG, init_params(TOY_CONFIG, 0), toy_samples(2), toy_samples(2), TrainConfig(epochs=0))

    def test_zero_dropout_train_loss_equals_eval(self):
        cfg = dataclasses.replace(MafConfig(), p_map=0.0, p_head=0.0)
        p = init_params(cfg, 4)
        batch = generate_synthetic(SynthSpec(count=6, seed=1))
        a, _ = batch_loss(p, batch, cfg, Rng(0), TRAIN)
        b, _ = batch_loss(p, batch, cfg, None, EVAL)
        assert a.item() == b.item()


class TestEvaluate:
    def setup_method(self):
        self.cfg = TOY_CONFIG
        self.params = init_params(self.cfg, 5)
        self.samples = toy_samples(8, seed=3)

    def test_matches_confusion_oracle(self):
        acc, f1, preds = evaluate(self.params, self.samples, self.cfg)
        labels = [s.label for s in self.samples]
        tp = sum(p == 1 and y == 1 for p, y in zip(preds, labels))
        fp = sum(p == 1 and y == 0 for p, y in zip(preds, labels))
        fn = sum(p == 0 and y == 1 for p, y in zip(preds, labels))
        assert acc == sum(p == y for p, y in zip(preds, labels)) / len(labels)
        assert f1 == (0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))

    def test_perfect_and_degenerate(self):
        # a head that always favours one class
        always = lambda k: self.params.replace_tensor("head_w", Tensor(np.zeros((8, 2)))).replace_tensor(  # noqa: E731
            "head_b", Tensor(np.eye(2)[k]))
        positives = [s for s in self.samples if s.label == 1]
        assert evaluate(always(1), positives, self.cfg)[:2] == (1.0, 1.0)
        assert evaluate(always(0), positives, self.cfg)[:2] == (0.0, 0.0)

    def test_tie_predicts_class_zero(self):
        tied = self.params.replace_tensor("head_w", Tensor(np.zeros((8, 2)))).replace_tensor("head_b", Tensor(np.zeros(2)))
        _, _, preds = evaluate(tied, self.samples, self.cfg)
        assert np.all(preds == 0)

    def test_order_invariant(self):
        acc, f1, preds = evaluate(self.params, self.samples, self.cfg)
        order = np.random.default_rng(0).permutation(len(self.samples))
        acc2, f12, preds2 = evaluate(self.params, [self.samples[i] for i in order], self.cfg)
        assert (acc, f1) == (acc2, f12)
        np.testing.assert_array_equal(preds[order], preds2)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(self.params, [], self.cfg)


def test_long_train_config():
    assert (LONG_TRAIN_CONFIG.epochs, LONG_TRAIN_CONFIG.batch_size) == (200, 32)
    assert TrainHistory().to_csv() == "epoch,lr,train_loss,train_acc,test_acc,test_f1\n"
