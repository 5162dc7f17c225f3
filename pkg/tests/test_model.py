"""Detector configuration, weight layout, pyramid, and forward pass."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keynet import autodiff as ad
from keynet import filters, model
from keynet.model import KeyNetConfig


class TestConfig:
    def test_defaults(self):
        cfg = KeyNetConfig()
        assert cfg.pyramid_levels == 3
        assert cfg.downsample_factor == 1.2
        assert cfg.num_learnable_blocks == 3
        assert cfg.filters_per_block == 8
        assert cfg.kernel_size == 5
        assert cfg.softmax_base == pytest.approx(np.e)
        assert cfg.msip_window_sizes == [8, 16, 24, 32, 40]
        assert cfg.msip_weights == [256.0, 64.0, 16.0, 4.0, 1.0]

    def test_tiny(self):
        cfg = KeyNetConfig.tiny()
        assert (cfg.pyramid_levels, cfg.num_learnable_blocks, cfg.filters_per_block) == (1, 1, 1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"pyramid_levels": 0},
            {"downsample_factor": 1.0},
            {"kernel_size": 4},
            {"softmax_base": 1.0},
            {"msip_window_sizes": [8, 8], "msip_weights": [1.0, 1.0]},
            {"msip_window_sizes": [16, 8], "msip_weights": [1.0, 1.0]},
            {"msip_window_sizes": [8, 16], "msip_weights": [1.0]},
            {"num_learnable_blocks": 1, "filters_per_block": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            KeyNetConfig(**kwargs)

    def test_mapping_round_trip(self):
        cfg = KeyNetConfig(pyramid_levels=2, softmax_base=5.0, msip_window_sizes=[8, 16], msip_weights=[2.0, 1.0])
        back = KeyNetConfig.from_mapping(cfg.to_mapping())
        assert back == cfg

    def test_from_mapping_ignores_unknown_keys(self):
        cfg = KeyNetConfig.from_mapping({"unrelated": "x", "kernel_size": "3"})
        assert cfg.kernel_size == 3


class TestParamCount:
    def test_default_count_and_breakdown(self):
        total, breakdown = model.count_params(KeyNetConfig())
        assert total == 5873
        by_name = dict(breakdown)
        # 10 bank channels -> 8 filters, 5x5 kernels
        assert by_name["block1.kernel"] == 8 * 10 * 5 * 5
        assert by_name["block2.kernel"] == 8 * 8 * 5 * 5
        assert by_name["block3.kernel"] == 8 * 8 * 5 * 5
        assert by_name["fusion.kernel"] == 24 * 5 * 5
        assert by_name["fusion.bias"] == 1
        assert 5600 <= total <= 6200

    def test_tiny_count(self):
        total, _ = model.count_params(KeyNetConfig.tiny())
        # 1 block of 1 filter on 10 channels + 1-channel fusion
        assert total == 279
        assert 250 <= total <= 310

    def test_count_matches_init_weights(self):
        for cfg in (KeyNetConfig(), KeyNetConfig.tiny(), KeyNetConfig(num_learnable_blocks=0)):
            total, _ = model.count_params(cfg)
            w = model.init_weights(cfg, seed=0)
            assert sum(v.value.size for v in w.learnables()) == total


class TestInitWeights:
    def test_deterministic_per_seed(self):
        a = model.init_weights(KeyNetConfig(), seed=3)
        b = model.init_weights(KeyNetConfig(), seed=3)
        c = model.init_weights(KeyNetConfig(), seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].value, b.params[name].value)
        assert any(not np.array_equal(a.params[n].value, c.params[n].value) for n in a.params)

    def test_layout_and_init_values(self):
        w = model.init_weights(KeyNetConfig(), seed=0)
        assert set(w.params) == {
            f"block{i}.{part}"
            for i in (1, 2, 3)
            for part in ("kernel", "bias", "bn_gamma", "bn_beta")
        } | {"fusion.kernel", "fusion.bias"}
        np.testing.assert_array_equal(w.params["block1.bias"].value, 0.0)
        np.testing.assert_array_equal(w.params["block2.bn_gamma"].value, 1.0)
        np.testing.assert_array_equal(w.running["block3.bn_var"], 1.0)

    def test_he_std(self):
        w = model.init_weights(KeyNetConfig(), seed=5)
        k = w.params["block2.kernel"].value
        want = np.sqrt(2.0 / (8 * 25))
        assert abs(k.std() - want) / want < 0.15

    def test_kernels_helper(self):
        w = model.init_weights(KeyNetConfig(), seed=0)
        names = {v.name for v in w.kernels()}
        assert names == {"block1.kernel", "block2.kernel", "block3.kernel", "fusion.kernel"}


class TestPyramid:
    def test_sizes_follow_downsample_factor(self):
        cfg = KeyNetConfig()
        sizes = model.pyramid_sizes(120, 96, cfg)
        assert sizes == [(120, 96), (100, 80), (83, 67)]

    def test_min_input_size(self):
        cfg = KeyNetConfig()
        m = model.min_input_size(cfg)
        assert m == int(np.ceil(5 * 1.2**2))
        sizes = model.pyramid_sizes(m, m, cfg)
        assert min(min(s) for s in sizes) >= 5

    def test_level_zero_is_input(self):
        rng = np.random.default_rng(0)
        imgs = rng.random((2, 1, 24, 24)).astype(np.float32)
        levels = model.build_pyramid(imgs, KeyNetConfig())
        np.testing.assert_array_equal(levels[0], imgs)
        assert levels[1].shape == (2, 1, 20, 20)
        assert levels[2].shape == (2, 1, 17, 17)

    def test_blur_is_cumulative(self):
        # level 2 equals blurring level 1 again with the same sigma, then resizing
        rng = np.random.default_rng(1)
        imgs = rng.random((1, 1, 30, 30)).astype(np.float32)
        cfg = KeyNetConfig()
        levels = model.build_pyramid(imgs, cfg)
        sigma = 0.8 * np.sqrt(cfg.downsample_factor**2 - 1.0)
        again = filters.gaussian_blur_stack(levels[1], sigma)
        h, w = levels[2].shape[2:]
        resized = ad.bilinear_resize(ad.constant(again), h, w).value
        np.testing.assert_allclose(levels[2], resized, atol=1e-6)


class TestForward:
    def test_output_shape_matches_input(self):
        cfg = KeyNetConfig()
        w = model.init_weights(cfg, seed=0)
        img = np.random.default_rng(2).random((2, 1, 32, 40)).astype(np.float32)
        out = model.forward_batch(img, w, cfg, training=False)
        assert out.value.shape == (2, 1, 32, 40)

    def test_rejects_wrong_rank_and_small_input(self):
        cfg = KeyNetConfig()
        w = model.init_weights(cfg, seed=0)
        with pytest.raises(ValueError):
            model.forward_batch(np.zeros((1, 3, 32, 32), dtype=np.float32), w, cfg, training=False)
        with pytest.raises(ValueError, match="too small"):
            model.forward_batch(np.zeros((1, 1, 5, 5), dtype=np.float32), w, cfg, training=False)

    def test_deterministic(self):
        cfg = KeyNetConfig()
        w = model.init_weights(cfg, seed=0)
        img = np.random.default_rng(3).random((1, 1, 24, 24)).astype(np.float32)
        a = model.forward_batch(img, w, cfg, training=False).value
        b = model.forward_batch(img, w, cfg, training=False).value
        np.testing.assert_array_equal(a, b)

    def test_zeroing_shared_block_silences_every_stream(self):
        # one kernel serves all pyramid streams: zeroing it (with biases and
        # bn_beta already zero) must kill the whole response, because every
        # stream is forced through that block before fusion
        cfg = KeyNetConfig(num_learnable_blocks=1)
        w = model.init_weights(cfg, seed=1)
        img = np.random.default_rng(4).random((1, 1, 24, 24)).astype(np.float32)
        assert np.abs(model.forward_batch(img, w, cfg, training=False).value).max() > 0
        w.params["block1.kernel"].value = np.zeros_like(w.params["block1.kernel"].value)
        out = model.forward_batch(img, w, cfg, training=False).value
        np.testing.assert_array_equal(out, 0.0)

    def test_forward_matches_manual_pipeline(self):
        # wiring contract: bank -> shared block -> upsample -> concat -> fusion
        cfg = KeyNetConfig(num_learnable_blocks=1)
        w = model.init_weights(cfg, seed=9)
        img = np.random.default_rng(8).random((2, 1, 20, 22)).astype(np.float32)
        streams = []
        for level in model.build_pyramid(img, cfg):
            x = ad.constant(filters.filter_stack(level[:, 0]))
            x = ad.conv2d(x, w.params["block1.kernel"], w.params["block1.bias"], padding="zero")
            x = ad.batchnorm2d(
                x,
                w.params["block1.bn_gamma"],
                w.params["block1.bn_beta"],
                w.running["block1.bn_mean"],
                w.running["block1.bn_var"],
                training=False,
            )
            x = ad.relu(x)
            if x.value.shape[2:] != (20, 22):
                x = ad.bilinear_resize(x, 20, 22)
            streams.append(x)
        stacked = ad.concat_channels(streams)
        want = ad.conv2d(
            stacked, w.params["fusion.kernel"], w.params["fusion.bias"], padding="zero"
        ).value
        got = model.forward_batch(img, w, cfg, training=False).value
        np.testing.assert_array_equal(got, want)

    def test_training_mode_uses_batch_stats(self):
        cfg = KeyNetConfig.tiny()
        w = model.init_weights(cfg, seed=2)
        img = np.random.default_rng(5).random((2, 1, 16, 16)).astype(np.float32)
        train_out = model.forward_batch(img, w, cfg, training=True).value
        eval_out = model.forward_batch(img, w, cfg, training=False).value
        assert np.abs(train_out - eval_out).max() > 1e-4

    def test_update_running_moves_stats(self):
        cfg = KeyNetConfig.tiny()
        w = model.init_weights(cfg, seed=2)
        before = w.running["block1.bn_mean"].copy()
        img = np.random.default_rng(6).random((2, 1, 16, 16)).astype(np.float32)
        model.forward_batch(img, w, cfg, training=True, update_running=True)
        assert not np.array_equal(before, w.running["block1.bn_mean"])

    @settings(deadline=None, max_examples=8)
    @given(h=st.integers(8, 40), w=st.integers(8, 40))
    def test_shape_property_single_level(self, h, w):
        cfg = KeyNetConfig.tiny()
        weights = model.init_weights(cfg, seed=0)
        img = np.zeros((1, 1, h, w), dtype=np.float32)
        out = model.forward_batch(img, weights, cfg, training=False)
        assert out.value.shape == (1, 1, h, w)

    def test_fusion_free_output_averages_streams(self):
        # without the fusion conv the response is the plain channel average,
        # so a single-level bank-only config exposes the handcrafted mean
        cfg = KeyNetConfig(pyramid_levels=1, num_learnable_blocks=0, use_fusion=False)
        w = model.init_weights(cfg, seed=0)
        img = np.random.default_rng(7).random((1, 1, 16, 16)).astype(np.float32)
        out = model.forward_batch(img, w, cfg, training=False).value
        bank = filters.filter_stack(img[:, 0])
        np.testing.assert_allclose(out[:, 0], bank.mean(axis=1), rtol=1e-5, atol=1e-7)

    def test_single_image_forward_helper(self):
        cfg = KeyNetConfig.tiny()
        m = model.KeyNetModel(cfg, seed=0)
        img = np.random.default_rng(9).random((1, 18, 18)).astype(np.float32)
        resp = m.response(img)
        assert resp.shape == (1, 18, 18)
        batch = model.forward_batch(img[None], m.weights, cfg, training=False).value
        np.testing.assert_array_equal(resp, batch[0])
        with pytest.raises(ValueError):
            model.forward(img[0], m.weights, cfg)
