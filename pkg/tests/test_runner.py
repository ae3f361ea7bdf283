import shutil
from dataclasses import replace

import numpy as np
import pytest

from isslab import runner as R
from isslab.errors import ConfigError
from isslab.numgrad import backward, sgd_step
from isslab.scenario import ScenarioSpec, generate_scenario

SPEC = ScenarioSpec(images_per_step=6, test_images=30, image_size=(8, 8), seed=5)
HYPER = R.TrainConfig(epochs=2, batch_size=4, hidden=(8, 8), emb_dim=6)


@pytest.fixture(scope="module")
def scenario():
    return generate_scenario(SPEC)


def step0(scenario, method, hyper=HYPER, seed=0):
    state = R.initial_state(scenario, hyper, seed)
    return R.train_step(state, scenario.steps[0], hyper, method)


def step1(scenario, method, hyper=HYPER, seed=0):
    state = step0(scenario, method, hyper, seed)
    prev = state.model.copy()
    state = R.prepare_step(state, scenario.steps[1], hyper)
    return prev, R.train_step(state, scenario.steps[1], hyper, method)


class TestPresets:
    def test_ablate_wsc(self):
        cfg = R.method_from_name("cs2k", ["wsc"])
        assert cfg == R.MethodConfig("prototype_guided", True, True, "none")

    def test_ft_is_all_off(self):
        assert R.method_from_name("ft") == R.MethodConfig()

    def test_ppl_ablation_falls_back_to_naive(self):
        assert R.method_from_name("cs2k", ["ppl"]).pseudo_label_strategy == "naive"

    def test_unknown(self):
        with pytest.raises(ConfigError):
            R.method_from_name("nope")
        with pytest.raises(ConfigError):
            R.method_from_name("cs2k", ["xyz"])

    def test_joint_exclusive(self):
        with pytest.raises(ConfigError):
            R.MethodConfig(joint_training=True, consolidation="selective").validate()


class TestStepZero:
    def test_all_methods_degenerate_to_plain_training(self, scenario):
        ref = step0(scenario, R.PRESETS["ft"]).model.values
        for name in ("naive", "median", "wf", "cs2k"):
            assert step0(scenario, R.PRESETS[name]).model.values.tobytes() == ref.tobytes()

    def test_matches_hand_written_loop(self, scenario):
        model = R.initial_state(scenario, HYPER, 0).model
        ds = scenario.steps[0]
        feats, gt = ds.features(), ds.labels()
        rng = R.stream(0, "shuffle", 0)
        for _ in range(HYPER.epochs):
            order = rng.permutation(len(feats))
            for lo in range(0, len(feats), HYPER.batch_size):
                idx = order[lo : lo + HYPER.batch_size]
                _, g = backward(model, feats[idx].reshape(-1, feats.shape[-1]), gt[idx].ravel())
                sgd_step(model, g, HYPER.lr)
        assert step0(scenario, R.PRESETS["ft"]).model.values.tobytes() == model.values.tobytes()

    def test_bookkeeping(self, scenario):
        state = step0(scenario, R.PRESETS["cs2k"])
        assert state.store.old_classes == [1, 2, 3, 4]
        assert 0 in state.store.sigma_history
        assert state.fisher is not None and len(state.fisher) == len(state.model.values)


class TestIncremental:
    def test_old_model_frozen(self, scenario):
        prev, state = step1(scenario, R.PRESETS["cs2k"])
        assert not state.old_model.values.flags.writeable
        assert state.old_model.values.tobytes() == prev.values.tobytes()

    def test_classifier_extended_before_training(self, scenario):
        _, state = step1(scenario, R.PRESETS["ft"])
        assert state.model.num_classes == 6

    def test_width_mismatch(self, scenario):
        state = step0(scenario, R.PRESETS["ft"])
        state = replace(R.prepare_step(state, scenario.steps[1], HYPER), class_counts=[4, 2])
        with pytest.raises(ConfigError):
            R.train_step(state, scenario.steps[1], HYPER, R.PRESETS["ft"])

    def test_omega_zero_merge_equals_no_merge(self, scenario):
        # the merge runs after SGD and draws no randomness: ω = 0 must leave the trajectory untouched
        _, merged = step1(scenario, R.PRESETS["cs2k"], replace(HYPER, omega_override=0.0))
        _, plain = step1(scenario, R.method_from_name("cs2k", ["wsc"]))
        assert merged.model.values.tobytes() == plain.model.values.tobytes()

    def test_omega_one_restores_selected_old_weights(self, scenario):
        hyper = replace(HYPER, omega_override=1.0, beta_override=1.0)
        prev, state = step1(scenario, R.PRESETS["cs2k"], hyper)
        _, unmerged = step1(scenario, R.method_from_name("cs2k", ["wsc"]), hyper)
        fisher = step0(scenario, R.PRESETS["cs2k"], hyper).fisher.values
        n = len(prev.values)
        sel = fisher > fisher.min()
        assert sel.any()
        after = state.model.values
        np.testing.assert_array_equal(after[:n][sel], prev.values[sel])
        np.testing.assert_array_equal(after[:n][~sel], unmerged.model.values[:n][~sel])
        np.testing.assert_array_equal(after[n:], unmerged.model.values[n:])

    def test_augmentation_streams_independent(self, scenario):
        # switching inter-prototype replay off must not change the self-replay draws
        a = R.stream(3, "self_aug", 1).standard_normal(5)
        b = R.stream(3, "self_aug", 1).standard_normal(5)
        c = R.stream(3, "inter_aug", 1).standard_normal(5)
        assert a.tobytes() == b.tobytes() != c.tobytes()


class TestRuns:
    def test_evaluate_maps_future_classes_to_background(self, scenario):
        state = step0(scenario, R.PRESETS["ft"])
        rep = R.evaluate(state.model, scenario, 0)
        assert sorted(rep.per_class_iou) == [0, 1, 2, 3, 4]
        assert rep.pixel_counts[0] == sum(int(np.isin(im.gt_full, [0, 5, 6]).sum()) for im in scenario.test_set)

    def test_reports_per_step(self, scenario):
        reps = R.run_scenario(scenario, R.PRESETS["cs2k"], HYPER, seed=0)
        assert [r.step for r in reps] == [0, 1, 2]
        assert reps[0].miou_old is None and reps[2].new_classes == [6]

    def test_joint_reports_final_step(self, scenario):
        reps = R.run_scenario(scenario, R.PRESETS["joint"], HYPER, seed=0)
        assert len(reps) == 1 and reps[0].step == 2

    def test_deterministic_checkpoints(self, scenario, tmp_path):
        R.run_scenario(scenario, R.PRESETS["cs2k"], HYPER, 1, checkpoint_dir=tmp_path / "a")
        R.run_scenario(scenario, R.PRESETS["cs2k"], HYPER, 1, checkpoint_dir=tmp_path / "b")
        for t in range(3):
            assert (tmp_path / "a" / f"step{t}.ckpt").read_bytes() == (tmp_path / "b" / f"step{t}.ckpt").read_bytes()

    def test_resume_is_bit_identical(self, scenario, tmp_path):
        full = R.run_scenario(scenario, R.PRESETS["cs2k"], HYPER, 2, checkpoint_dir=tmp_path / "full")
        (tmp_path / "resume").mkdir()
        for t in (0, 1):
            shutil.copy(tmp_path / "full" / f"step{t}.ckpt", tmp_path / "resume" / f"step{t}.ckpt")
        resumed = R.run_scenario(scenario, R.PRESETS["cs2k"], HYPER, 2, checkpoint_dir=tmp_path / "resume",
                                 from_step=2)
        assert resumed == full
        assert (tmp_path / "full/step2.ckpt").read_bytes() == (tmp_path / "resume/step2.ckpt").read_bytes()

    def test_resume_seed_mismatch(self, scenario, tmp_path):
        R.run_scenario(scenario, R.PRESETS["ft"], HYPER, 2, checkpoint_dir=tmp_path)
        with pytest.raises(ConfigError):
            R.run_scenario(scenario, R.PRESETS["ft"], HYPER, 3, checkpoint_dir=tmp_path, from_step=1)

    def test_checkpoint_round_trip(self, scenario, tmp_path):
        state = step0(scenario, R.PRESETS["cs2k"])
        rep = R.evaluate(state.model, scenario, 0)
        R.save_checkpoint(state, rep, tmp_path / "c.ckpt")
        back, rep2 = R.load_checkpoint(tmp_path / "c.ckpt")
        assert back.model.values.tobytes() == state.model.values.tobytes()
        assert back.fisher.values.tobytes() == state.fisher.values.tobytes()
        assert back.class_counts == state.class_counts and rep2 == rep
        for c in state.store.old_classes:
            assert back.store.prototypes[c].tobytes() == state.store.prototypes[c].tobytes()
