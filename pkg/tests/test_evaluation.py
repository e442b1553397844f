import numpy as np
import pytest

from redirtrans import evaluation as E
from redirtrans import geometry as G
from redirtrans import redirector as R
from redirtrans import trainer as TR
from redirtrans import world as W


@pytest.fixture(scope="module")
def test_data(small_world):
    return W.sample_dataset(small_world, 10, 4, seed=17)


def _snapshot(params):
    return {k: v.data.tobytes() for k, v in params.tensors.items()}


class TestPairs:
    def test_same_identity(self, test_data):
        pairs = E.make_pairs(test_data, 20, seed=0)
        assert pairs.shape == (20, 2)
        assert np.all(test_data.identity[pairs[:, 0]] == test_data.identity[pairs[:, 1]])
        assert len(set(pairs[:, 0])) == 20

    def test_reproducible(self, test_data):
        assert E.make_pairs(test_data, 10, 4).tobytes() == E.make_pairs(test_data, 10, 4).tobytes()

    def test_empty(self, test_data):
        with pytest.raises(ValueError, match="empty"):
            E.make_pairs(test_data.subset([]), 5, 0)


class TestEditors:
    def test_oracle_rebuilds_ground_truth(self, small_world, test_data):
        pairs = E.make_pairs(test_data, 12, seed=1)
        src, tgt = pairs[:, 0], pairs[:, 1]
        c_t = test_data.conditions[tgt].reshape(-1, 2, 2)
        out = E.oracle_editor(small_world, test_data)(src, c_t)
        np.testing.assert_allclose(out, test_data.latent[tgt], atol=1e-4)

    def test_oracle_mask_keeps_attribute(self, small_world, test_data):
        idx = np.arange(4)
        c_t = np.full((4, 2, 2), 0.3, np.float32)
        out = E.oracle_editor(small_world, test_data)(idx, c_t, mask=(False, True))
        head_layers = set(small_world.planted_layers[1])
        for k in range(small_world.K):
            if k not in head_layers:
                np.testing.assert_allclose(out[:, k], test_data.latent[idx, k], atol=1e-4)

    def test_strip_conditions_recovers_identity(self, small_world):
        f_id = W.sample_identity(5, small_world.K, small_world.D)
        c1, c2 = np.array([0.1, -0.2]), np.array([0.3, 0.05])
        lat = W.compose_latent(small_world, f_id, c1, c2)
        np.testing.assert_allclose(E.strip_conditions(small_world, lat, c1, c2), f_id, atol=1e-5)


class TestRedirection:
    def test_untrained_error_is_source_target_gap(self, small_world, test_data, small_estimator):
        params = R.init_redirector("layerwise", small_world.K, small_world.D, seed=0)
        pairs = E.make_pairs(test_data, 20, seed=2)
        rep = E.eval_redirection(params, small_world, test_data, small_estimator, pairs)
        est = W.np_estimate(small_estimator, test_data.image).reshape(-1, 2, 2)
        gap = G.np_condition_angular_error(est[pairs[:, 0]], est[pairs[:, 1]])
        assert rep.gaze_redir_err == pytest.approx(gap[:, 0].mean(), abs=1e-6)
        assert rep.head_redir_err == pytest.approx(gap[:, 1].mean(), abs=1e-6)

    def test_identity_editor_equals_untrained(self, small_world, test_data, small_estimator):
        params = R.init_redirector("layerwise", small_world.K, small_world.D, seed=0)
        pairs = E.make_pairs(test_data, 20, seed=2)
        a = E.eval_redirection(params, small_world, test_data, small_estimator, pairs)
        b = E.eval_redirection(params, small_world, test_data, small_estimator, pairs,
                               editor=E.identity_editor(test_data))
        assert a.gaze_redir_err == b.gaze_redir_err

    def test_errors_in_range_and_logged(self, small_world, test_data, small_estimator, random_layerwise):
        rep = E.eval_redirection(random_layerwise, small_world, test_data, small_estimator, n_pairs=15)
        assert rep.n == 15
        for name in ("gaze_redir", "head_redir"):
            vals = rep.per_sample[name]
            assert vals.shape == (15,) and np.all((vals >= 0) & (vals <= np.pi))

    def test_no_mutation_and_bitwise_reproducible(self, small_world, test_data, small_estimator, random_layerwise):
        before = _snapshot(random_layerwise)
        a = E.eval_redirection(random_layerwise, small_world, test_data, small_estimator, n_pairs=10, seed=3)
        b = E.eval_redirection(random_layerwise, small_world, test_data, small_estimator, n_pairs=10, seed=3)
        assert _snapshot(random_layerwise) == before
        assert a.per_sample["gaze_redir"].tobytes() == b.per_sample["gaze_redir"].tobytes()

    def test_empty(self, small_world, test_data, small_estimator, random_layerwise):
        with pytest.raises(ValueError, match="empty"):
            E.eval_redirection(random_layerwise, small_world, test_data.subset([]), small_estimator)

    def test_report_rows_include_degrees(self):
        rep = E.EvalReport(gaze_redir_err=np.pi / 180, n=3)
        rows = {name: (rad, deg) for name, rad, deg in rep.rows()}
        assert rows["gaze_redir_err"][1] == pytest.approx(1.0)
        assert rows["n"][0] == 3.0

    def test_merge_keeps_both_halves(self):
        a = E.EvalReport(gaze_redir_err=0.1, n=5, per_sample={"gaze_redir": np.zeros(5)})
        b = E.EvalReport(gaze_induce_err=0.2, n=5, per_sample={"gaze_induce": np.ones(5)})
        m = a.merge(b)
        assert (m.gaze_redir_err, m.gaze_induce_err) == (0.1, 0.2)
        assert set(m.per_sample) == {"gaze_redir", "gaze_induce"}


class TestDisentanglement:
    def test_zero_perturbation_zero_induce(self, small_world, test_data, small_estimator, random_layerwise):
        pairs = E.make_pairs(test_data, 10, seed=0)
        rep = E.eval_disentanglement(random_layerwise, small_world, test_data, small_estimator, pairs=pairs,
                                     eps=np.zeros((10, 2, 2)))
        assert rep.gaze_induce_err == 0.0 and rep.head_induce_err == 0.0

    def test_perturbations_reproducible_and_bounded(self):
        a, b = E.draw_perturbations(100, 5), E.draw_perturbations(100, 5)
        assert a.tobytes() == b.tobytes()
        assert np.all(np.abs(a) <= 0.1 * np.pi)
        assert a.tobytes() != E.draw_perturbations(100, 6).tobytes()

    def test_identity_editor_never_induces(self, small_world, test_data, small_estimator):
        pairs = E.make_pairs(test_data, 20, seed=0)
        oracle = E.eval_disentanglement(None, small_world, test_data, small_estimator, pairs=pairs,
                                        editor=E.oracle_editor(small_world, test_data))
        ident = E.eval_disentanglement(None, small_world, test_data, small_estimator, pairs=pairs,
                                       editor=E.identity_editor(test_data))
        assert ident.gaze_induce_err == 0.0
        assert np.all(oracle.per_sample["gaze_induce"] <= np.pi)


class TestLayerWeights:
    def _params(self, w):
        p = R.init_redirector("layerwise", 6, 4, seed=0)
        p.tensors["weights"].data = np.asarray(w, np.float32)
        return p

    def test_uniform(self):
        world = W.WorldSpec()
        np.testing.assert_allclose(E.eval_layer_weights(self._params(np.full((2, 6), 1 / 6)), world), 2 / 6)

    def test_supported_on_planted(self):
        world = W.WorldSpec()
        w = np.zeros((2, 6))
        w[0, [0, 1]] = [0.7, -0.2]
        w[1, [2, 3]] = [0.1, 0.4]
        np.testing.assert_allclose(E.eval_layer_weights(self._params(w), world), 1.0)

    def test_flat_rejected(self, random_flat, small_world):
        with pytest.raises(ValueError, match="layerwise"):
            E.eval_layer_weights(random_flat, small_world)

    def test_normalized_profile(self):
        prof = E.normalized_weight_profile(self._params(np.arange(12).reshape(2, 6) - 3.0))
        np.testing.assert_allclose(np.abs(prof).sum(axis=1), 1.0)


class TestCorrection:
    def test_self_reference_is_noop(self, random_layerwise, small_world, rng):
        lat = rng.standard_normal((5, small_world.K, small_world.D)).astype(np.float32)
        own = R.np_project_labels(random_layerwise, lat)
        out = R.edit(random_layerwise, lat, own).latent.data
        assert np.abs(out - lat).max() < 1e-5
        single = E.correct(random_layerwise, lat[0], np.zeros((2, 2)))
        assert single.shape == lat[0].shape

    def test_deterministic(self, random_layerwise, small_world, test_data, small_estimator):
        a = E.perturb_and_correct(random_layerwise, small_world, test_data, small_estimator, n_trials=12, seed=1)
        b = E.perturb_and_correct(random_layerwise, small_world, test_data, small_estimator, n_trials=12, seed=1)
        assert a.pre_err.tobytes() == b.pre_err.tobytes() and a.post_err.tobytes() == b.post_err.tobytes()

    def test_identity_correction_changes_nothing(self, small_world, test_data, small_estimator):
        params = R.init_redirector("layerwise", small_world.K, small_world.D, seed=0)
        res = E.perturb_and_correct(params, small_world, test_data, small_estimator, n_trials=12)
        np.testing.assert_array_equal(res.pre_err, res.post_err)
        assert res.improved_fraction == 0.0


class TestAugmentation:
    def test_sizes_and_direction_fields(self, small_world):
        cfg = E.AugmentationConfig(n_images=48, samples_per_identity=3, n_holdout=12, quantiles=(75,),
                                   redirector_iterations=4, estimator_epochs=1, downstream_epochs=1, seed=0)
        rows = E.run_augmentation_experiment(small_world, cfg, TR.TrainConfig(eval_every=0))
        (row,) = rows
        assert row.q == 75 and row.n_labeled == 36
        assert row.n_aug == 2 * 48 * 75 // 100
        assert 0 <= row.raw_err <= np.pi and 0 <= row.aug_err <= np.pi

    def test_unusual_quantile_warns(self, small_world):
        cfg = E.AugmentationConfig(n_images=24, samples_per_identity=3, n_holdout=6, quantiles=(40,),
                                   redirector_iterations=2, estimator_epochs=1, downstream_epochs=1)
        with pytest.warns(UserWarning, match="40"):
            E.run_augmentation_experiment(small_world, cfg)
