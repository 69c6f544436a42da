import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimlottery import lottery as L
from trimlottery import model as M
from trimlottery.training import TrainConfig, train
from trimlottery.verify import (activation_oracle, composed_floor, rank_oracle, random_chain, random_plan,
                                randomize_state, to_float64, zeroed_equivalent)


def dense_model(W, b=None):
    m = M.build_model((M.dense(W.shape[0]), M.relu(), M.output_dense(1)), (W.shape[1],))
    m.layers[0].params["W"].data[:] = W
    if b is not None:
        m.layers[0].params["b"].data[:] = b
    return m


class TestConfig:
    def test_defaults(self):
        c = L.LotteryConfig()
        assert (c.prune_rate, c.iterations, c.rewind_epoch_fraction, c.repetitions) == (0.3, 15, 0.5, 5)

    @pytest.mark.parametrize("kw", [{"strategy": "x"}, {"criterion": "x"}, {"scope": "x"}, {"prune_rate": 1.2},
                                    {"prune_rate": 0}, {"iterations": 0}, {"rewind_epoch_fraction": 2}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            L.LotteryConfig(**kw)

    def test_keep_count_exact(self):
        assert L.keep_count(10, 0.3) == 7
        assert L.keep_count(30, 0.3) == 21
        assert L.surviving_count(100, 0.3) == 70


class TestMagnitude:
    def test_example(self):
        m = dense_model(np.array([[1.0, -2.0], [0.5, 0.5]]))
        np.testing.assert_allclose(L.criterion_magnitude(m.layers[0]), [3.0, 1.0])

    def test_zero_unit_ranked_last(self):
        m = dense_model(np.array([[1.0, 1.0], [0.0, 0.0], [0.2, 0.1], [0.5, 0.5]]))
        s = L.criterion_magnitude(m.layers[0])
        assert s[1] == 0
        assert 1 not in L.rank_units({0: s}, "local", 0.3).keep[0]

    def test_conv_flat_sum(self):
        m = M.build_model((M.conv1d(3, 3), M.flatten(), M.output_dense(1)), (2, 8), seed=2)
        W = m.layers[0].params["W"].data.astype(np.float64)
        want = [sum(abs(v) for v in W[o].reshape(-1)) for o in range(3)]
        assert W[0].size == 6
        np.testing.assert_allclose(L.criterion_magnitude(m.layers[0]), want, rtol=1e-12)

    def test_bias_excluded(self):
        m = dense_model(np.array([[1.0, 0.0]]), b=np.array([100.0]))
        assert L.criterion_magnitude(m.layers[0])[0] == 1.0

    def test_no_weights(self):
        m = M.build_model((M.dense(2), M.relu(), M.output_dense(1)), (2,))
        with pytest.raises(L.CriterionError):
            L.criterion_magnitude(m.layers[1])


class TestActivation:
    def test_dead_unit(self):
        m = dense_model(np.array([[1.0, 1.0], [1.0, 1.0]]), b=np.array([0.0, -100.0]))
        x = np.abs(np.random.default_rng(0).standard_normal((20, 2))).astype(np.float32)
        s = L.criterion_activation(m, x)[0]
        assert s[1] == 0 and s[0] > 0

    def test_duplication_doubles(self):
        rng = np.random.default_rng(1)
        specs, shape = random_chain(rng)
        m = to_float64(randomize_state(M.build_model(specs, shape, 3), rng))
        x = rng.standard_normal((7,) + shape)
        one = L.criterion_activation(m, x)
        two = L.criterion_activation(m, np.concatenate([x, x]))
        for i in one:
            np.testing.assert_allclose(two[i], 2 * one[i], rtol=1e-12)
            assert list(L.rank_units({0: one[i]}).keep[0]) == list(L.rank_units({0: two[i]}).keep[0])

    def test_two_layer_recording_oracle(self):
        rng = np.random.default_rng(2)
        m = to_float64(M.build_model((M.dense(5), M.relu(), M.dense(4), M.relu(), M.output_dense(2)), (3,), 1))
        x = rng.standard_normal((11, 3))
        W1, b1 = m.layers[0].params["W"].data, m.layers[0].params["b"].data
        W2, b2 = m.layers[2].params["W"].data, m.layers[2].params["b"].data
        s1, s2 = np.zeros(5), np.zeros(4)
        for row in x:
            h1 = np.maximum(W1 @ row + b1, 0)
            h2 = np.maximum(W2 @ h1 + b2, 0)
            s1 += np.abs(h1)
            s2 += np.abs(h2)
        got = L.criterion_activation(m, x, batch_size=4)
        np.testing.assert_allclose(got[0], s1, rtol=1e-10)
        np.testing.assert_allclose(got[2], s2, rtol=1e-10)

    def test_conv_chain_oracle(self):
        rng = np.random.default_rng(3)
        for seed in range(5):
            specs, shape = random_chain(rng)
            m = to_float64(randomize_state(M.build_model(specs, shape, seed), rng))
            x = rng.standard_normal((4,) + shape)
            got, want = L.criterion_activation(m, x), activation_oracle(m, x)
            for i in want:
                np.testing.assert_allclose(got[i], want[i], rtol=1e-9, atol=1e-12)

    def test_empty_validation(self):
        m = dense_model(np.ones((2, 2)))
        with pytest.raises(Exception):
            L.criterion_activation(m, np.zeros((0, 2), np.float32))


class TestBatchnormCriterion:
    def test_abs_gamma(self):
        m = M.build_model((M.dense(3), M.batchnorm(), M.relu(), M.output_dense(1)), (2,))
        m.layers[1].params["gamma"].data[:] = [0.1, -2.0, 0.0]
        np.testing.assert_allclose(L.criterion_batchnorm(m, 0), [0.1, 2.0, 0.0], rtol=1e-7)

    def test_missing_batchnorm(self):
        m = M.build_model((M.dense(3), M.relu(), M.output_dense(1)), (2,))
        with pytest.raises(L.CriterionError):
            L.criterion_batchnorm(m, 0)

    def test_batchnorm_must_precede_next_weight_layer(self):
        m = M.build_model((M.dense(3), M.relu(), M.dense(3), M.batchnorm(), M.output_dense(1)), (2,))
        with pytest.raises(L.CriterionError):
            L.criterion_batchnorm(m, 0)
        assert L.criterion_batchnorm(m, 2).shape == (3,)

    def test_ranking_matches_magnitude_when_proportional(self):
        rng = np.random.default_rng(4)
        m = M.build_model((M.dense(10), M.batchnorm(), M.relu(), M.output_dense(2)), (6,), 5)
        mag = L.criterion_magnitude(m.layers[0])
        m.layers[1].params["gamma"].data[:] = 0.37 * mag * np.sign(rng.standard_normal(10))
        for scope in ("local", "global"):
            a = L.rank_units(L.compute_scores(m, "batchnorm"), scope, 0.3).keep
            b = L.rank_units(L.compute_scores(m, "magnitude"), scope, 0.3).keep
            assert all(list(a[i]) == list(b[i]) for i in a)


class TestRankUnits:
    def test_local_example(self):
        assert list(L.rank_units({0: [3, 1]}, "local", 0.5).keep[0]) == [0]

    def test_keep_seven_of_ten(self):
        s = np.random.default_rng(0).random(10)
        assert len(L.rank_units({0: s}, "local", 0.3).keep[0]) == 7

    def test_local_ties_keep_lower_index(self):
        assert list(L.rank_units({0: [1, 1, 1, 1]}, "local", 0.5).keep[0]) == [0, 1]

    def test_global_equal_normalized_scores(self):
        plan = L.rank_units({0: [1.0, 1.0], 3: [2.0, 2.0]}, "global", 0.5).keep
        assert {k: list(v) for k, v in plan.items()} == {0: [0], 3: [0]}
        assert {k: list(v) for k, v in plan.items()} == rank_oracle({0: [1.0, 1.0], 3: [2.0, 2.0]}, "global", 0.5)

    def test_global_never_empties_layer(self):
        plan = L.rank_units({0: [0.0], 1: [5.0, 1.0, 1.0, 1.0]}, "global", 0.5).keep
        assert len(plan[0]) == 1
        assert sum(len(v) for v in plan.values()) == 5 - math.floor(0.5 * 5)

    def test_global_drop_count(self):
        rng = np.random.default_rng(5)
        scores = {0: rng.random(10), 2: rng.random(20)}
        plan = L.rank_units(scores, "global", 0.3)
        assert sum(len(v) for v in plan.keep.values()) == 30 - 9

    def test_global_normalization_uses_layer_sums(self):
        # layer 1 has tiny raw scores but the same shape of distribution
        plan = L.rank_units({0: [4.0, 3.0, 2.0, 1.0], 1: [0.004, 0.003, 0.002, 0.001]}, "global", 0.5).keep
        assert list(plan[0]) == [0, 1] and list(plan[1]) == [0, 1]

    @pytest.mark.parametrize("bad", [{0: []}, {0: [-1.0]}, {0: [np.nan]}])
    def test_invalid_scores(self, bad):
        with pytest.raises(ValueError):
            L.rank_units(bad)

    def test_full_sort_oracle_with_ties(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            scores = {2 * k: rng.integers(0, 3, size=int(rng.integers(1, 9))).astype(float)
                      for k in range(int(rng.integers(1, 4)))}
            for scope in ("local", "global"):
                got = L.rank_units(scores, scope, 0.3).keep
                assert {k: list(v) for k, v in got.items()} == rank_oracle(scores, scope, 0.3)


score_vectors = st.lists(st.floats(0.001, 100.0, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(st.lists(score_vectors, min_size=1, max_size=4), st.integers(-6, 6), st.sampled_from(["local", "global"]),
       st.sampled_from([0.1, 0.3, 0.5]))
def test_ranking_scale_invariance(layers, power, scope, rate):
    scores = {i: np.array(v) for i, v in enumerate(layers)}
    scaled = {i: v * 2.0 ** power for i, v in scores.items()}
    a, b = L.rank_units(scores, scope, rate).keep, L.rank_units(scaled, scope, rate).keep
    assert all(list(a[i]) == list(b[i]) for i in a)


@settings(max_examples=60, deadline=None)
@given(st.lists(score_vectors, min_size=1, max_size=4), st.sampled_from(["local", "global"]),
       st.sampled_from([0.1, 0.3, 0.5, 0.9]))
def test_ranking_unit_floor_and_order(layers, scope, rate):
    scores = {i: np.array(v) for i, v in enumerate(layers)}
    plan = L.rank_units(scores, scope, rate).keep
    for i, k in plan.items():
        assert len(k) >= 1
        assert all(np.diff(k) > 0)


class TestTrim:
    def test_column_selection_example(self):
        m = M.build_model((M.dense(3), M.relu(), M.dense(4), M.relu(), M.output_dense(1)), (2,), 0)
        t = L.trim(m, L.TrimPlan({0: np.array([0, 2]), 2: np.arange(4)}))
        W = m.layers[2].params["W"].data
        assert t.layers[2].params["W"].shape == (4, 2)
        np.testing.assert_array_equal(t.layers[2].params["W"].data, W[:, [0, 2]])

    def test_identity_plan_bitwise(self):
        rng = np.random.default_rng(1)
        specs, shape = random_chain(rng)
        m = randomize_state(M.build_model(specs, shape, 1), rng)
        t = L.trim(m, L.full_plan(m))
        assert [a.tobytes() for a in t.state()] == [a.tobytes() for a in m.state()]
        assert t.specs == m.specs

    def test_original_untouched(self):
        m = M.build_model((M.dense(4), M.relu(), M.output_dense(1)), (2,), 0)
        before = [a.copy() for a in m.state()]
        L.trim(m, L.TrimPlan({0: np.array([1])}))
        assert all(np.array_equal(a, b) for a, b in zip(before, m.state()))

    def test_flatten_remap(self):
        m = M.build_model((M.conv1d(3, 2), M.flatten(), M.output_dense(2)), (1, 5), 0)  # L_out = 4
        t = L.trim(m, L.TrimPlan({0: np.array([1])}))
        np.testing.assert_array_equal(t.layers[2].params["W"].data, m.layers[2].params["W"].data[:, 4:8])

    def test_batchnorm_follows_units(self):
        rng = np.random.default_rng(2)
        m = randomize_state(M.build_model((M.dense(4), M.batchnorm(), M.relu(), M.output_dense(1)), (2,)), rng)
        t = L.trim(m, L.TrimPlan({0: np.array([0, 3])}))
        bn, bn0 = t.layers[1], m.layers[1]
        np.testing.assert_array_equal(bn.params["gamma"].data, bn0.params["gamma"].data[[0, 3]])
        np.testing.assert_array_equal(bn.bn_state.running_var, bn0.bn_state.running_var[[0, 3]])

    def test_kept_indices_compose(self):
        m = M.build_model((M.dense(10), M.relu(), M.output_dense(1)), (2,))
        t = L.trim(m, L.TrimPlan({0: np.array([1, 4, 6, 9])}))
        t = L.trim(t, L.TrimPlan({0: np.array([0, 3])}))
        np.testing.assert_array_equal(t.layers[0].kept, [1, 9])

    @pytest.mark.parametrize("keep", [np.array([]), np.array([2, 1]), np.array([0, 5])])
    def test_inconsistent_plan(self, keep):
        m = M.build_model((M.dense(4), M.relu(), M.output_dense(1)), (2,))
        with pytest.raises(Exception):
            L.trim(m, L.TrimPlan({0: keep}))

    def test_output_layer_not_plannable(self):
        m = M.build_model((M.dense(4), M.relu(), M.output_dense(2)), (2,))
        with pytest.raises(Exception):
            L.trim(m, L.TrimPlan({2: np.array([0])}))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1_000_000))
def test_zeroing_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    specs, shape = random_chain(rng)
    m = randomize_state(M.build_model(specs, shape, seed % 1000), rng)
    plan = random_plan(m, rng)
    x = rng.standard_normal((3,) + shape).astype(np.float32)
    assert np.abs(L.trim(m, plan).predict(x) - zeroed_equivalent(m, plan).predict(x)).max() < 1e-5


class TestMask:
    def test_hundred_to_seventy(self):
        m = M.build_model((M.output_dense(10),), (10,), 0)
        mask = L.mask_update(m, L.init_mask(m), 0.3)
        assert mask.count() == 70

    def test_fifteen_rounds(self):
        m = M.build_model((M.dense(50), M.relu(), M.output_dense(40)), (40,), 0)
        mask = L.init_mask(m)
        for _ in range(15):
            mask = L.mask_update(m, mask, 0.3)
        for i, arr in mask.arrays.items():
            assert arr.sum() == composed_floor(arr.size)[-1]
        assert mask.count() / mask.size() <= 0.005
        assert abs(0.7 ** 15 - 0.00475) < 1e-5

    def test_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        m = M.build_model((M.dense(7), M.relu(), M.output_dense(3)), (5,), 1)
        mask = L.init_mask(m)
        for _ in range(4):
            for t in m.parameters():
                t.data[:] = rng.standard_normal(t.shape)
            new = L.mask_update(m, mask, 0.3, "local")
            for i, arr in mask.arrays.items():
                w = np.abs(m.layers[i].params["W"].data.reshape(-1))
                alive = [j for j in range(w.size) if arr.reshape(-1)[j]]
                alive.sort(key=lambda j: (w[j], -j))
                n_drop = len(alive) - math.floor(0.7 * len(alive) + 1e-9)
                want = set(alive[n_drop:])
                assert set(np.flatnonzero(new.arrays[i].reshape(-1))) == want
            mask = new

    def test_monotone(self):
        rng = np.random.default_rng(4)
        m = M.build_model((M.dense(7), M.relu(), M.output_dense(3)), (5,), 1)
        mask = L.init_mask(m)
        for scope in ("local", "global", "local"):
            for t in m.parameters():
                t.data[:] = rng.standard_normal(t.shape)
            new = L.mask_update(m, mask, 0.3, scope)
            for i in mask.arrays:
                assert not (new.arrays[i] & ~mask.arrays[i]).any()
            mask = new

    def test_global_count(self):
        m = M.build_model((M.dense(7), M.relu(), M.output_dense(3)), (5,), 1)
        mask = L.mask_update(m, L.init_mask(m), 0.3, "global")
        assert mask.count() == math.floor(0.7 * (35 + 21))

    def test_attach_shape_check(self):
        m = M.build_model((M.dense(7), M.relu(), M.output_dense(3)), (5,), 1)
        with pytest.raises(Exception):
            L.attach_mask(m, L.Mask({0: np.ones((2, 2), bool)}))


class TestRewind:
    def _pair(self, seed):
        rng = np.random.default_rng(seed)
        specs, shape = random_chain(rng)
        w_k = randomize_state(M.build_model(specs, shape, seed), rng)
        trained = w_k.clone()
        for t in trained.parameters():
            t.data += 1.0
        for layer in trained.layers:
            if layer.bn_state is not None:
                layer.bn_state.running_mean += 3
        return L.RewindSnapshot(w_k, 3, seed), trained, rng

    def test_full_plan_bitwise(self):
        snap, trained, _ = self._pair(0)
        out = L.rewind(trained.clone(), snap, L.full_plan(trained))
        for a, b in zip(out.parameters(), snap.model.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_running_stats_reset(self):
        snap, trained, _ = self._pair(1)
        out = L.rewind(trained.clone(), snap, L.full_plan(trained))
        for layer in out.layers:
            if layer.bn_state is not None:
                assert not layer.bn_state.running_mean.any() and (layer.bn_state.running_var == 1).all()

    def test_trim_rewind_bitwise(self):
        for seed in range(10):
            snap, trained, rng = self._pair(seed)
            plan = random_plan(trained, rng)
            out = L.rewind(L.trim(trained, plan), snap, plan)
            want = L.trim(snap.model, plan)
            for a, b in zip(out.parameters(), want.parameters()):
                assert a.data.tobytes() == b.data.tobytes()

    def test_mask_rewind(self):
        snap, trained, rng = self._pair(2)
        mask = L.Mask({i: rng.random(trained.layers[i].params["W"].shape) < 0.5 for i in trained.weight_layers()})
        out = L.rewind(trained.clone(), snap, mask)
        for i, m in mask.arrays.items():
            np.testing.assert_array_equal(out.layers[i].params["W"].data, snap.model.layers[i].params["W"].data * m)

    def test_topology_mismatch(self):
        snap, trained, rng = self._pair(3)
        other = M.build_model((M.output_dense(2),), (3,))
        with pytest.raises(Exception):
            L.rewind(other, snap, L.full_plan(trained))

    def test_bad_argument(self):
        snap, trained, _ = self._pair(4)
        with pytest.raises(TypeError):
            L.rewind(trained, snap, None)


class TestLoop:
    def _run(self, task, ds, strategy="trim", iterations=3, criterion="magnitude", scope="local"):
        lc = L.LotteryConfig(strategy, criterion, scope, 0.3, iterations, 0.5, 1)
        return L.lottery_repetition(task, ds, lc, TrainConfig(epochs=4), seed=7, timing=False)

    def test_reference_is_plain_training(self, toy_task, toy_dataset):
        recs, _ = self._run(toy_task, toy_dataset, iterations=1)
        m, _ = train(toy_task.build(7), toy_dataset, TrainConfig(epochs=4, seed=7))
        from trimlottery.training import evaluate

        assert recs[0].test_err == evaluate(m, toy_dataset.test)
        assert recs[0].remaining_fraction == 1.0 and recs[0].iteration == 0

    def test_widths_follow_ceil_schedule(self, toy_task, toy_dataset):
        _, events = self._run(toy_task, toy_dataset, iterations=15)
        widths = [12, 10, 16]
        for ev in events:
            assert ev["widths"] == widths
            widths = [math.ceil(0.7 * w - 1e-9) for w in widths]
        assert events[-1]["widths"] == [3, 3, 3]

    def test_remaining_fraction_decreasing(self, toy_task, toy_dataset):
        recs, events = self._run(toy_task, toy_dataset, iterations=15)
        for prev, cur, ev in zip(recs, recs[1:], events):
            # widths of 3 or less cannot shrink under ceil(0.7 n)
            if max(ev["widths"]) > 3:
                assert cur.remaining_fraction < prev.remaining_fraction
            else:
                assert cur.remaining_fraction == prev.remaining_fraction
            assert 0 < cur.remaining_fraction <= 1

    def test_every_criterion_and_scope_keeps_units(self, toy_task, toy_dataset):
        for criterion in L.CRITERIA:
            for scope in L.SCOPES:
                _, events = self._run(toy_task, toy_dataset, iterations=6, criterion=criterion, scope=scope)
                assert all(min(ev["widths"]) >= 1 for ev in events)

    def test_mask_strategy(self, toy_task, toy_dataset):
        recs, events = self._run(toy_task, toy_dataset, "mask", iterations=4)
        assert all(r.params == recs[0].params for r in recs)
        assert all(b.remaining_fraction < a.remaining_fraction for a, b in zip(recs, recs[1:]))
        assert all(ev["rewound"] for ev in events[1:])

    def _spy(self, monkeypatch):
        """Record (model handed in, lr, trained result, history) for every training call."""
        calls = []
        real_train = L.train

        def spy(model, dataset, config, epochs=None, record_at=None, callback=None, lr=None):
            given = model.clone()
            out = real_train(model, dataset, config, epochs, record_at, callback, lr)
            calls.append((given, lr, out[0].clone(), out[1]))
            return out

        monkeypatch.setattr(L, "train", spy)
        return calls

    def test_trim_restarts_from_snapshot(self, toy_task, toy_dataset, monkeypatch):
        calls = self._spy(monkeypatch)
        self._run(toy_task, toy_dataset, "trim", iterations=1)
        (_, _, _, ref_hist), (start, lr, _, _) = calls
        assert ref_hist.snapshot_epoch == 2 and lr == 1e-3
        for i in start.weight_layers():
            rows = start.layers[i].kept
            W_k = ref_hist.snapshot.layers[i].params["W"].data[rows]
            # input columns were trimmed too; compare the kept rows' surviving columns
            assert set(start.layers[i].params["W"].data.reshape(-1)) <= set(W_k.reshape(-1))
        np.testing.assert_array_equal(start.layers[0].params["W"].data,
                                      ref_hist.snapshot.layers[0].params["W"].data[start.layers[0].kept])

    def test_finetune_continues_from_trained(self, toy_task, toy_dataset, monkeypatch):
        calls = self._spy(monkeypatch)
        _, events = self._run(toy_task, toy_dataset, "finetune", iterations=1)
        (_, _, trained, ref_hist), (start, lr, _, _) = calls
        assert not events[1]["rewound"]
        assert lr == ref_hist.final_lr
        np.testing.assert_array_equal(start.layers[0].params["W"].data,
                                      trained.layers[0].params["W"].data[start.layers[0].kept])

    def test_resume_matches_uninterrupted(self, toy_task, toy_dataset):
        lc = L.LotteryConfig("trim", "magnitude", "local", 0.3, 3, 0.5, 1)
        tc = TrainConfig(epochs=4)
        full, _ = L.lottery_repetition(toy_task, toy_dataset, lc, tc, 5, timing=False)
        states = []
        L.lottery_repetition(toy_task, toy_dataset, L.LotteryConfig("trim", "magnitude", "local", 0.3, 1, 0.5, 1),
                             tc, 5, on_state=states.append, timing=False)
        rest, _ = L.lottery_repetition(toy_task, toy_dataset, lc, tc, 5, resume=states[-1], timing=False)
        assert [r.test_err for r in full[2:]] == [r.test_err for r in rest]
        assert [r.params for r in full[2:]] == [r.params for r in rest]

    def test_lottery_run_distinct_seeds(self, toy_task, toy_dataset):
        lc = L.LotteryConfig("trim", "magnitude", "local", 0.3, 1, 0.5, 2)
        recs = L.lottery_run(toy_task, toy_dataset, lc, TrainConfig(epochs=2), base_seed=3, timing=False)
        assert [r.seed for r in recs] == [3, 3, 4, 4]
