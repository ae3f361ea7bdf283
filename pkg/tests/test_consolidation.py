import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isslab import consolidation as cons
from isslab.errors import ConfigError
from isslab.numgrad import backward, init_model
from isslab.scenario import ImageSample, StepDataset


def toy_dataset(seed=0, n=4, h=3, w=3, d=4, classes=(1, 2)):
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        gt = rng.integers(0, 3, size=(h, w))
        images.append(ImageSample(rng.normal(size=(h, w, d)), gt, gt))
    return StepDataset(0, classes, images)


class TestFisher:
    def test_matches_per_image_loop(self):
        model = init_model(np.random.default_rng(1), 3, in_dim=4, hidden=(6, 5), emb_dim=3, cls_std=0.5)
        ds = toy_dataset()
        fisher = cons.fisher_diagonal(model, ds)
        acc = np.zeros(len(model.values))
        for im in ds.images:
            _, g = backward(model, im.features.reshape(-1, 4), im.gt_step.ravel())
            acc += g**2
        np.testing.assert_allclose(fisher.values, acc / len(ds), atol=1e-10)
        assert fisher.sample_count == 4 * 9
        assert np.all(fisher.values >= 0)

    def test_single_image(self):
        model = init_model(np.random.default_rng(2), 3, in_dim=4, hidden=(6,), emb_dim=3, cls_std=0.5)
        ds = toy_dataset(n=1)
        _, g = backward(model, ds.images[0].features.reshape(-1, 4), ds.images[0].gt_step.ravel())
        np.testing.assert_allclose(cons.fisher_diagonal(model, ds).values, g**2, atol=1e-14)

    def test_perfect_fit_gives_zero(self):
        # zero extractor output -> classifier sees only bias; a huge bias on class 0 fits all-bg labels
        model = init_model(np.random.default_rng(0), 2, in_dim=4, hidden=(3,), emb_dim=3)
        model.values[:] = 0.0
        model.classifier()[1][0] = 1e3
        rng = np.random.default_rng(1)
        images = [ImageSample(rng.normal(size=(2, 2, 4)), np.zeros((2, 2), int), np.zeros((2, 2), int))]
        np.testing.assert_array_equal(cons.fisher_diagonal(model, StepDataset(0, (1,), images)).values, 0.0)

    def test_chunking_is_irrelevant(self):
        model = init_model(np.random.default_rng(3), 3, in_dim=4, hidden=(5,), emb_dim=3)
        ds = toy_dataset(n=7)
        a = cons.fisher_diagonal(model, ds, chunk=2).values
        b = cons.fisher_diagonal(model, ds, chunk=16).values
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_empty(self):
        with pytest.raises(Exception):
            cons.fisher_diagonal(init_model(np.random.default_rng(0), 2), StepDataset(0, (1,), []))

    def test_round_trip(self, tmp_path):
        f = cons.FisherDiag(np.array([0.0, 1.5, 2.25]), 12)
        cons.save_fisher(f, tmp_path / "f.bin")
        back = cons.load_fisher(tmp_path / "f.bin")
        np.testing.assert_array_equal(back.values, f.values)
        assert back.sample_count == 12


class TestSchedules:
    def test_beta_15_1(self):
        assert cons.beta([15, 1]) == pytest.approx(1 / (1 + math.exp(-15 / 17)), abs=1e-9)
        assert cons.beta([15, 1]) == pytest.approx(0.7073, abs=5e-5)

    def test_beta_balance_point(self):
        assert cons.beta([2, 3, 6]) == pytest.approx(0.5, abs=1e-15)

    def test_omega_15_1(self):
        assert cons.omega([15, 1]) == pytest.approx(1 - math.sqrt(1 / 17), abs=1e-9)
        assert cons.omega([15, 1]) == pytest.approx(0.7575, abs=5e-5)

    def test_omega_stays_positive_for_large_new_step(self):
        assert 0 < cons.omega([1, 500]) < 0.05

    def test_omega_decreasing_in_new_count(self):
        values = [cons.omega([10, 5, k]) for k in range(1, 30)]
        assert all(a > b for a, b in zip(values, values[1:]))

    @given(st.lists(st.integers(1, 200), min_size=1, max_size=12))
    def test_ranges(self, counts):
        assert 0 < cons.beta(counts) < 1
        assert 0 < cons.omega(counts) < 1

    def test_single_step_degenerate(self):
        # nothing old: the whole running total is the current step
        assert cons.omega([7]) == pytest.approx(1 - math.sqrt(7 / 8), abs=1e-15)
        assert cons.omega([7]) > 0

    def test_empty_or_nonpositive(self):
        with pytest.raises(ConfigError):
            cons.beta([])
        with pytest.raises(ConfigError):
            cons.omega([3, 0])


class TestTopK:
    def test_small(self):
        assert cons.topk_threshold(np.array([3.0, 1.0, 2.0]), 2) == 2.0

    def test_all_equal(self):
        assert cons.topk_threshold(np.full(9, 0.25), 4) == 0.25

    def test_sort_oracle(self):
        values = np.random.default_rng(0).random(1000)
        desc = sorted(values, reverse=True)
        for k in (1, 2, 17, 500, 999, 1000):
            assert cons.topk_threshold(values, k) == desc[k - 1]

    def test_count_clamped(self):
        assert cons.topk_count(10, 0.05) == 1
        assert cons.topk_count(10, 0.66) == 6
        assert cons.topk_count(10, 1.0) == 10

    def test_range(self):
        with pytest.raises(ConfigError):
            cons.topk_threshold(np.ones(3), 4)


class TestMerge:
    def test_zero_fisher_returns_new(self):
        rng = np.random.default_rng(0)
        old, new = rng.normal(size=6), rng.normal(size=9)
        out = cons.selective_merge(old, new, np.zeros(6), 0.7, 0.6)
        assert out.tobytes() == new.tobytes()

    def test_k_one_selects_nothing(self):
        rng = np.random.default_rng(1)
        old, new = rng.normal(size=6), rng.normal(size=8)
        # k = 1 puts the threshold at the maximum; nothing is strictly above it
        out = cons.selective_merge(old, new, np.arange(1.0, 7.0), 1 / 6, 1.0)
        assert out.tobytes() == new.tobytes()

    def test_omega_one_restores_old_prefix(self):
        rng = np.random.default_rng(1)
        old, new = rng.normal(size=6), rng.normal(size=8)
        # beta = 1 puts the threshold at the minimum; every other entry is selected
        fisher = np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.0])
        out = cons.selective_merge(old, new, fisher, 1.0, 1.0)
        assert out[:5].tobytes() == old[:5].tobytes()
        assert out[5] == new[5]
        assert out[6:].tobytes() == new[6:].tobytes()

    def test_hand_oracle(self):
        old = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        new = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0])
        fisher = np.array([0.9, 0.1, 0.5, 0.7, 0.3, 0.2])
        # beta=0.5 -> k=3 -> 3rd largest = 0.5 -> strictly above: indices 0 (0.9) and 3 (0.7)
        out = cons.selective_merge(old, new, fisher, 0.5, 0.75)
        expected = [0.75 * 1.0, 0.0, 0.0, 0.75 * 4.0, 0.0, 0.0, 9.0]
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_uniform_equals_selective_when_all_selected(self):
        rng = np.random.default_rng(2)
        old, new = rng.normal(size=10), rng.normal(size=13)
        fisher = np.append(rng.random(9) + 1.0, 0.0)
        # beta=1 -> threshold = min = 0.0 -> the first 9 indices are strictly above
        sel = cons.selective_merge(old, new, fisher, 1.0, 0.4)
        uni = cons.uniform_fusion(old, new, 0.4)
        assert sel[:9].tobytes() == uni[:9].tobytes()
        assert sel[10:].tobytes() == uni[10:].tobytes()

    def test_uniform_endpoints(self):
        rng = np.random.default_rng(3)
        old, new = rng.normal(size=4), rng.normal(size=6)
        assert cons.uniform_fusion(old, new, 0.0).tobytes() == new.tobytes()
        out = cons.uniform_fusion(old, new, 1.0)
        assert out[:4].tobytes() == old.tobytes()
        assert out[4:].tobytes() == new[4:].tobytes()

    def test_layout_mismatch(self):
        with pytest.raises(ConfigError):
            cons.selective_merge(np.zeros(5), np.zeros(4), np.zeros(5), 0.5, 0.5)
        with pytest.raises(ConfigError):
            cons.selective_merge(np.zeros(3), np.zeros(4), np.zeros(2), 0.5, 0.5)

    @settings(max_examples=60)
    @given(seed=st.integers(0, 10_000), n_old=st.integers(1, 40), extra=st.integers(0, 5),
           b=st.floats(0.01, 1.0), w=st.floats(0.0, 1.0))
    def test_properties(self, seed, n_old, extra, b, w):
        rng = np.random.default_rng(seed)
        old, new = rng.normal(size=n_old), rng.normal(size=n_old + extra)
        fisher = rng.integers(0, 4, size=n_old).astype(float)  # heavy ties on purpose
        out = cons.selective_merge(old, new, fisher, b, w)
        lo = np.minimum(old, new[:n_old]) - 1e-12
        hi = np.maximum(old, new[:n_old]) + 1e-12
        assert np.all((out[:n_old] >= lo) & (out[:n_old] <= hi))
        assert out[n_old:].tobytes() == new[n_old:].tobytes()
        # cardinality against a sort oracle
        k = cons.topk_count(n_old, b)
        thr = sorted(fisher, reverse=True)[k - 1]
        n_sel = sum(1 for f in fisher if f > thr)
        changed = cons.merge_mask(fisher, b)
        assert int(changed.sum()) == n_sel <= k - 1
        if len(set(fisher)) == n_old:
            assert n_sel == k - 1
