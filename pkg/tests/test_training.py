import math

import numpy as np
import pytest

from trimlottery import model as M
from trimlottery import tensor as T
from trimlottery.tasks import Dataset, Split
from trimlottery.tensor import ContractError, Tensor
from trimlottery.training import Adam, PlateauScheduler, TrainConfig, evaluate, lr_on_plateau, train


def toy_dataset(n=120, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    centres = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])[:classes]
    x = (centres[y] + 0.3 * rng.standard_normal((n, 2))).astype(np.float32)
    parts = [slice(0, n // 2), slice(n // 2, 3 * n // 4), slice(3 * n // 4, n)]
    return Dataset("toy", seed, *(Split(x[p], y[p]) for p in parts), loss="ce")


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(3):
            p.grad = np.zeros(2)
            opt.step()
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_constant_gradient_monotone(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        seen = [0.0]
        for _ in range(20):
            p.grad = np.array([2.0])
            opt.step()
            seen.append(float(p.data[0]))
        assert all(b < a for a, b in zip(seen, seen[1:]))

    def test_hand_recurrence(self):
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        grads = [0.5, -1.0, 2.0]
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            w = w - lr * wd * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p], lr=lr, weight_decay=wd)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert abs(p.data[0] - w) < 1e-6

    def test_missing_gradient(self):
        opt = Adam([Tensor(np.ones(1), requires_grad=True)])
        with pytest.raises(ContractError):
            opt.step()


class TestPlateau:
    def test_decreasing_keeps_lr(self):
        assert lr_on_plateau(list(np.linspace(1, 0, 30))) == 1e-3

    def test_flat_ten_epochs_halves_once(self):
        sched = PlateauScheduler(1e-3, 10)
        lrs = [sched.step(0.5) for _ in range(11)]  # reference then 10 flat epochs
        assert lrs[9] == 1e-3 and lrs[10] == 5e-4

    def test_flat_25_epochs_two_halvings(self):
        assert lr_on_plateau([0.5] * 26) == pytest.approx(2.5e-4)

    def test_counter_resets_on_improvement(self):
        hist = [0.5] * 9 + [0.4] + [0.4] * 9
        assert lr_on_plateau(hist) == 1e-3

    def test_empty_history(self):
        with pytest.raises(ContractError):
            lr_on_plateau([])


class TestEvaluate:
    def _split(self, preds, k):
        class Fixed:
            def __init__(self, out):
                self.out = out

            def predict(self, inputs):
                return self.out

        return Fixed(np.eye(k)[preds])

    def test_perfect(self):
        y = np.arange(8) % 4
        assert evaluate(self._split(y, 4), Split(np.zeros((8, 1)), y)) == 0.0

    def test_constant_on_balanced(self):
        y = np.arange(400) % 4
        assert evaluate(self._split(np.zeros(400, int), 4), Split(np.zeros((400, 1)), y)) == 0.75

    def test_random_model_near_chance(self):
        k = 10
        rng = np.random.default_rng(0)
        m = M.build_model((M.dense(16), M.relu(), M.output_dense(k)), (8,), seed=1)
        x = rng.standard_normal((2000, 8)).astype(np.float32)
        y = rng.integers(0, k, 2000)
        assert abs(evaluate(m, Split(x, y)) - (1 - 1 / k)) < 0.05

    def test_empty_split(self):
        with pytest.raises(ContractError):
            evaluate(None, Split(np.zeros((0, 2)), np.zeros(0, int)))


class TestTrain:
    def test_zero_epochs_bitwise(self):
        ds = toy_dataset()
        m = M.build_model((M.dense(4), M.batchnorm(), M.relu(), M.output_dense(2)), (2,), seed=0)
        before = [a.copy() for a in m.state()]
        m, hist = train(m, ds, TrainConfig(epochs=0))
        assert all(a.tobytes() == b.tobytes() for a, b in zip(before, m.state()))
        assert hist.val_error == []

    def test_separable_reaches_zero(self):
        ds = toy_dataset()
        m = M.build_model((M.output_dense(2),), (2,), seed=0)
        m, hist = train(m, ds, TrainConfig(epochs=50, batch_size=16, learning_rate=1e-2))
        assert evaluate(m, ds.train) == 0.0

    def test_snapshot_matches_callback(self):
        ds = toy_dataset(classes=4)
        seen = {}

        def cb(epoch, model, hist):
            if epoch == 3:
                seen["state"] = [a.copy() for a in model.state()]

        m = M.build_model((M.dense(8), M.relu(), M.output_dense(4)), (2,), seed=2)
        _, hist = train(m, ds, TrainConfig(epochs=6), record_at=3, callback=cb)
        assert hist.snapshot_epoch == 3
        assert all(np.array_equal(a, b) for a, b in zip(seen["state"], hist.snapshot.state()))

    def test_snapshot_at_zero_is_input(self):
        ds = toy_dataset()
        m = M.build_model((M.output_dense(2),), (2,), seed=0)
        start = [a.copy() for a in m.state()]
        _, hist = train(m, ds, TrainConfig(epochs=2), record_at=0)
        assert all(np.array_equal(a, b) for a, b in zip(start, hist.snapshot.state()))

    def test_deterministic(self):
        ds = toy_dataset(classes=4)

        def run():
            m = M.build_model((M.dense(8), M.relu(), M.dropout(0.3), M.output_dense(4)), (2,), seed=1)
            m, h = train(m, ds, TrainConfig(epochs=5, seed=9))
            return [a.tobytes() for a in m.state()], h.train_loss, h.val_error

        assert run() == run()

    def test_returns_best_validation_weights(self):
        ds = toy_dataset(classes=4)
        m = M.build_model((M.dense(8), M.relu(), M.output_dense(4)), (2,), seed=1)
        m, hist = train(m, ds, TrainConfig(epochs=8))
        assert evaluate(m, ds.val) == hist.best_val_error == min([hist.initial_val_error] + hist.val_error)

    def test_masked_weights_stay_zero(self):
        from trimlottery import lottery as L

        ds = toy_dataset(classes=4)
        m = M.build_model((M.dense(8), M.relu(), M.output_dense(4)), (2,), seed=1)
        mask = L.init_mask(m)
        mask.arrays[0][:4] = False
        L.attach_mask(m, mask)
        m, _ = train(m, ds, TrainConfig(epochs=3))
        assert not m.layers[0].params["W"].data[:4].any()

    def test_tape_empty_after_training(self):
        ds = toy_dataset()
        train(M.build_model((M.output_dense(2),), (2,)), ds, TrainConfig(epochs=1))
        assert len(T.get_tape()) == 0
