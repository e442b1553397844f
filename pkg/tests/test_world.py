import numpy as np
import pytest

from redirtrans import geometry as G
from redirtrans import tensor as T
from redirtrans import world as W


class TestIdentity:
    def test_same_seed_identical(self):
        assert W.sample_identity(9).tobytes() == W.sample_identity(9).tobytes()

    def test_distinct_seeds_differ_almost_everywhere(self):
        fractions = [np.mean(W.sample_identity(2 * i) != W.sample_identity(2 * i + 1)) for i in range(100)]
        assert min(fractions) >= 0.99

    def test_standard_normal_moments(self):
        vals = np.concatenate([W.sample_identity(s).ravel() for s in range(30)])[:10_000]
        assert abs(vals.mean()) < 0.05
        assert abs(vals.std() - 1.0) < 0.05


class TestWorldSpec:
    def test_reproducible_from_seed(self):
        a = W.build_world(K=3, D=8, image_side=6, planted_layers=((0,), (1,)), master_seed=4)
        b = W.build_world(K=3, D=8, image_side=6, planted_layers=((0,), (1,)), master_seed=4)
        assert a.arrays.keys() == b.arrays.keys()
        assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)

    def test_seed_changes_weights(self):
        a = W.build_world(K=3, D=8, image_side=6, planted_layers=((0,), (1,)), master_seed=4)
        b = W.build_world(K=3, D=8, image_side=6, planted_layers=((0,), (1,)), master_seed=5)
        assert a.arrays["world/gen/w1"].tobytes() != b.arrays["world/gen/w1"].tobytes()

    @pytest.mark.parametrize("planted", [((0, 1), (1, 2)), ((0,), (6,)), ((-1,), (2,))])
    def test_bad_planted_sets(self, planted):
        with pytest.raises(ValueError):
            W.build_world(K=6, D=8, image_side=6, planted_layers=planted)

    def test_meta_round_trip(self, small_world):
        back = W.world_from_arrays(small_world.arrays, W.world_meta(small_world))
        assert W.world_meta(back) == W.world_meta(small_world)


class TestCompose:
    def test_zero_conditions_add_unrotated_offset(self, small_world):
        f_id = W.sample_identity(1, small_world.K, small_world.D)
        out = W.compose_latent(small_world, f_id, np.zeros(2), np.zeros(2))
        for attr, layers in enumerate(small_world.planted_layers):
            for k in layers:
                want = f_id[k] + small_world.injection(attr, k) @ small_world.canonical(attr).ravel()
                np.testing.assert_allclose(out[k], want, rtol=1e-5, atol=1e-5)

    def test_unplanted_layers_bit_identical(self):
        world = W.build_world(K=4, D=8, image_side=6, planted_layers=((0,), (2,)), master_seed=1)
        f_id = W.sample_identity(3, 4, 8)
        out = W.compose_latent(world, f_id, np.array([0.2, -0.1]), np.array([0.3, 0.1]))
        for k in (1, 3):
            assert out[k].tobytes() == f_id[k].tobytes()

    def test_gaze_change_only_touches_gaze_layers(self, small_world, rng):
        f_id = W.sample_identity(2, small_world.K, small_world.D)
        head = rng.uniform(-0.4, 0.4, 2)
        a = W.compose_latent(small_world, f_id, rng.uniform(-0.4, 0.4, 2), head)
        b = W.compose_latent(small_world, f_id, rng.uniform(-0.4, 0.4, 2), head)
        gaze_layers = set(small_world.planted_layers[0])
        for k in range(small_world.K):
            if k not in gaze_layers:
                assert a[k].tobytes() == b[k].tobytes()
            else:
                assert np.any(a[k] != b[k])

    def test_linear_in_rotated_embedding(self, small_world, rng):
        c1, c2 = rng.uniform(-0.4, 0.4, (2, 2))
        k = small_world.planted_layers[0][0]
        emb = lambda c: (G.np_rotation(*c) @ small_world.canonical(0)).ravel()  # noqa: E731
        mix = W.planted_offset(small_world, 0, k, c1) + W.planted_offset(small_world, 0, k, c2)
        np.testing.assert_allclose(mix, small_world.injection(0, k) @ (emb(c1) + emb(c2)), rtol=1e-5, atol=1e-5)


class TestRender:
    def test_deterministic_and_bounded(self, small_world, small_data):
        a = W.np_render(small_world, small_data.latent)
        b = W.np_render(small_world, small_data.latent)
        assert a.tobytes() == b.tobytes()
        assert np.all(np.abs(a) < 1)

    def test_shape_mismatch(self, small_world):
        with pytest.raises(ValueError, match="does not match"):
            W.render(small_world, np.zeros((small_world.K + 1, small_world.D)))

    def test_jvp_matches_backward(self, small_world, rng):
        latent = rng.standard_normal((small_world.K, small_world.D))
        direction = [rng.standard_normal(latent.shape)]
        w = rng.standard_normal(small_world.n_pixels)
        err = T.gradcheck_directional(lambda x: T.sum_(T.mul(W.render(small_world, x), w)), [latent], direction)
        assert err < 1e-4

    def test_render_never_updates_weights(self, small_world, rng):
        before = {k: v.tobytes() for k, v in small_world.arrays.items()}
        x = T.Tensor(rng.standard_normal((2, small_world.K, small_world.D)), requires_grad=True)
        T.backward(T.sum_(W.render(small_world, x)))
        assert {k: v.tobytes() for k, v in small_world.arrays.items()} == before


class TestFeatures:
    def test_identity_features_unit_norm(self, small_world, small_data):
        feats = W.identity_features(small_world, small_data.image).data
        np.testing.assert_allclose(np.linalg.norm(feats, axis=-1), 1.0, atol=1e-6)

    def test_identity_features_reject_zero(self, small_world):
        with pytest.raises(FloatingPointError):
            W.identity_features(small_world, np.zeros(small_world.n_pixels))

    def test_distinct_identities_have_distinct_features(self):
        world = W.build_world(master_seed=0)
        c = np.zeros(2)
        cos = []
        for i in range(100):
            imgs = [W.np_render(world, W.compose_latent(world, W.sample_identity(s, world.K, world.D), c, c))
                    for s in (2 * i, 2 * i + 1)]
            a, b = (W.identity_features(world, im).data for im in imgs)
            cos.append(float(a @ b))
        assert np.mean(cos) < 0.99

    def test_perceptual_distance_zero_and_symmetric(self, small_world, small_data):
        a, b = small_data.image[:4], small_data.image[4:8]
        np.testing.assert_array_equal(W.perceptual_distance(small_world, a, a).data, 0.0)
        np.testing.assert_allclose(W.perceptual_distance(small_world, a, b).data,
                                   W.perceptual_distance(small_world, b, a).data, rtol=1e-6)

    def test_perceptual_distance_tracks_pixel_distance(self, rng):
        world = W.build_world(master_seed=0)
        a = rng.uniform(-1, 1, (200, world.n_pixels)) * rng.uniform(0.05, 1, (200, 1))
        b = rng.uniform(-1, 1, (200, world.n_pixels)) * rng.uniform(0.05, 1, (200, 1))
        perc = W.perceptual_distance(world, a.astype(np.float32), b.astype(np.float32)).data
        pix = np.linalg.norm(a - b, axis=-1)
        assert np.corrcoef(perc, pix)[0, 1] > 0.5


class TestDataset:
    def test_counts(self, small_world):
        data = W.sample_dataset(small_world, 10, 5, seed=0)
        assert len(data) == 50
        assert len(np.unique(data.identity)) == 10

    def test_conditions_in_range(self, small_world):
        data = W.sample_dataset(small_world, 10, 5, seed=0, condition_range=0.3)
        assert np.all(np.abs(data.conditions) <= 0.3)

    def test_condition_mean_near_zero(self, small_world):
        data = W.sample_dataset(small_world, 2500, 4, seed=1)
        assert np.all(np.abs(data.conditions.mean(axis=0)) < 0.02)

    def test_deterministic(self, small_world):
        a = W.sample_dataset(small_world, 4, 3, seed=8)
        b = W.sample_dataset(small_world, 4, 3, seed=8)
        assert a.latent.tobytes() == b.latent.tobytes() and a.image.tobytes() == b.image.tobytes()

    def test_samples_consistent_with_world(self, small_world, small_data):
        groups = small_data.by_identity()
        for idx in groups.values():
            # recover the shared identity latent from an unplanted-free reconstruction
            first = small_data[idx[0]]
            for i in idx:
                s = small_data[i]
                assert s.identity_id == first.identity_id
                f_id = s.latent - (W.compose_latent(small_world, np.zeros_like(s.latent), s.gaze, s.head))
                f_first = first.latent - W.compose_latent(small_world, np.zeros_like(first.latent), first.gaze, first.head)
                np.testing.assert_allclose(f_id, f_first, atol=1e-4)
        np.testing.assert_array_equal(small_data.image, W.np_render(small_world, small_data.latent))

    def test_sample_latent_is_exact_composition(self, small_world):
        data = W.sample_dataset(small_world, 3, 2, seed=4)
        from redirtrans import rng as R
        f_id = W.sample_identity(R.stream(4, "identity-seed", 0).integers(2**63), small_world.K, small_world.D)
        want = W.compose_latent(small_world, f_id, data.gaze[0], data.head[0])
        assert want.tobytes() == data.latent[0].tobytes()

    @pytest.mark.parametrize("n, spi", [(0, 3), (3, 0)])
    def test_rejects_empty(self, small_world, n, spi):
        with pytest.raises(ValueError):
            W.sample_dataset(small_world, n, spi, seed=0)


class TestEstimator:
    def test_outputs_bounded_for_any_input(self, small_world, rng):
        params = W.init_estimator(small_world, "train", seed=0)
        for p in params.values():
            p.data = p.data * 100
        out = W.np_estimate(params, rng.uniform(-50, 50, (20, small_world.n_pixels)))
        assert np.all(np.abs(out) <= 0.5 * np.pi)

    def test_architectures_differ(self, small_world):
        train = W.init_estimator(small_world, "train", seed=0)
        ev = W.init_estimator(small_world, "eval", seed=0)
        assert len(train) == 6 and len(ev) == 2
        assert train["est/fc0/w"].shape == (small_world.n_pixels, 128)
        assert ev["est/fc0/w"].shape == (small_world.n_pixels, 4)

    def test_unknown_arch(self, small_world):
        with pytest.raises(ValueError, match="architecture"):
            W.init_estimator(small_world, "resnet", seed=0)

    def test_shape_mismatch(self, small_world, small_estimator):
        with pytest.raises(ValueError):
            W.estimate(small_estimator, np.zeros(small_world.n_pixels + 1))

    def test_empty_dataset(self, small_world, small_data):
        with pytest.raises(ValueError, match="empty"):
            W.pretrain_estimator(small_world, small_data.subset([]), "eval")

    def test_pretraining_deterministic(self, small_world, small_data):
        runs = [W.pretrain_estimator(small_world, small_data, "eval", seed=6, epochs=2)[0] for _ in range(2)]
        enc = [T.encode_checkpoint({k: v.data for k, v in r.items()}) for r in runs]
        assert enc[0] == enc[1]

    def test_estimate_deterministic(self, small_estimator, small_data):
        a = W.np_estimate(small_estimator, small_data.image)
        assert a.tobytes() == W.np_estimate(small_estimator, small_data.image).tobytes()

    def test_training_reduces_loss(self, small_world, small_data):
        _, report = W.pretrain_estimator(small_world, small_data, "train", seed=1, epochs=8)
        assert report.history[-1] < report.history[0]
