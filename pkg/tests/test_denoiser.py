import numpy as np
import pytest

import ldae.denoiser as dn
from ldae.rng import child_rng

CFG = dn.DenoiserConfig(
    token_dim_in=5, token_dim_out=3, tokens=4, width=16, depth=2, heads=4,
    time_embed_dim=8,
)


def make_model(seed: int = 0, config: dn.DenoiserConfig = CFG):
    params = dn.init_params(config, child_rng(seed, "init"))
    x = child_rng(seed, "x").normal(size=(2, config.tokens, config.token_dim_in))
    return params, x


class TestConfig:
    def test_head_split(self):
        assert CFG.head_dim == 4
        assert CFG.cond_hidden == 4

    @pytest.mark.parametrize(
        "kw",
        [
            dict(depth=0),
            dict(width=20, heads=8),  # not divisible by heads
            dict(width=18, heads=2),  # not divisible by 4
            dict(time_embed_dim=7),
            dict(tokens=0),
            dict(token_dim_in=0),
        ],
    )
    def test_bad_shapes_rejected(self, kw):
        base = dict(
            token_dim_in=5, token_dim_out=3, tokens=4, width=16, depth=2,
            heads=4, time_embed_dim=8,
        )
        base.update(kw)
        with pytest.raises(ValueError):
            dn.DenoiserConfig(**base)


class TestTimeEmbedding:
    def test_scalar_and_vector_shapes(self):
        assert dn.time_embedding(7, 8).shape == (1, 8)
        assert dn.time_embedding(np.arange(5), 8).shape == (5, 8)

    def test_range_and_t_zero(self):
        emb = dn.time_embedding(np.arange(0, 1001, 37), 64)
        assert np.all(np.abs(emb) <= 1.0)
        row0 = dn.time_embedding(0, 64)[0]
        np.testing.assert_array_equal(row0[:32], 1.0)  # cos(0)
        np.testing.assert_array_equal(row0[32:], 0.0)  # sin(0)

    def test_distinct_times_distinct_rows(self):
        emb = dn.time_embedding(np.array([1, 2, 999]), 16)
        assert not np.allclose(emb[0], emb[1])
        assert not np.allclose(emb[1], emb[2])


class TestInit:
    def test_deterministic(self):
        a, _ = make_model(3)
        b, _ = make_model(3)
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_key_layout(self):
        params, _ = make_model()
        assert "in_proj_w" in params and "out_proj_b" in params
        assert "block0.qkv_w" in params and "block1.cond2_b" in params
        assert "block2.qkv_w" not in params

    def test_zero_init_conditioning_ignores_t(self):
        # the last conditioning layer starts at zero, so modulation is the
        # identity and the time input cannot influence a fresh model
        params, x = make_model(4)
        a, _ = dn.forward(params, CFG, x, 0)
        b, _ = dn.forward(params, CFG, x, 999)
        np.testing.assert_array_equal(a, b)


class TestForward:
    def test_output_shape_and_cache_flag(self):
        params, x = make_model(5)
        out, cache = dn.forward(params, CFG, x, 10)
        assert out.shape == (2, CFG.tokens, CFG.token_dim_out)
        assert cache is None
        out2, cache2 = dn.forward(params, CFG, x, 10, want_cache=True)
        np.testing.assert_array_equal(out, out2)
        assert isinstance(cache2, dict)

    def test_scalar_t_matches_constant_vector(self):
        params, x = make_model(6)
        a, _ = dn.forward(params, CFG, x, 10)
        b, _ = dn.forward(params, CFG, x, np.array([10, 10]))
        np.testing.assert_array_equal(a, b)

    def test_per_sample_times_differ_after_conditioning_trains(self):
        # force a nonzero conditioning path, then distinct times must matter
        params, x = make_model(7)
        params["block0.cond2_w"] = child_rng(7, "c").normal(
            size=params["block0.cond2_w"].shape
        )
        a, _ = dn.forward(params, CFG, x, np.array([10, 10]))
        b, _ = dn.forward(params, CFG, x, np.array([10, 500]))
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.allclose(a[1], b[1])

    def test_bad_inputs_rejected(self):
        params, x = make_model(8)
        with pytest.raises(ValueError, match="input"):
            dn.forward(params, CFG, x[:, :3], 0)
        with pytest.raises(ValueError, match="input"):
            dn.forward(params, CFG, x[:, :, :4], 0)
        with pytest.raises(ValueError, match="batch"):
            dn.forward(params, CFG, x, np.array([1, 2, 3]))


def rel_err(num: float, ana: float) -> float:
    return abs(num - ana) / max(abs(num) + abs(ana), 1e-6)


class TestGradcheck:
    def test_backward_matches_finite_differences(self):
        params, x = make_model(9)
        # give the conditioning path weight so its gradients are nonzero
        for i in range(CFG.depth):
            params[f"block{i}.cond2_w"] = 0.3 * child_rng(9, "c", i).normal(
                size=params[f"block{i}.cond2_w"].shape
            )
        t = np.array([3, 7])
        proj = child_rng(9, "proj").normal(size=(2, CFG.tokens, CFG.token_dim_out))

        def loss() -> float:
            out, _ = dn.forward(params, CFG, x, t)
            return float(np.sum(out * proj))

        out, cache = dn.forward(params, CFG, x, t, want_cache=True)
        grads = dn.backward(params, CFG, cache, proj)
        assert set(grads) == set(params)

        h = 1e-5
        picks = child_rng(9, "picks")
        worst = 0.0
        for name, g in grads.items():
            flat = params[name].reshape(-1)
            idx = picks.choice(flat.size, size=min(4, flat.size), replace=False)
            for j in idx:
                keep = flat[j]
                flat[j] = keep + h
                up = loss()
                flat[j] = keep - h
                dn_ = loss()
                flat[j] = keep
                num = (up - dn_) / (2 * h)
                worst = max(worst, rel_err(num, g.reshape(-1)[j]))
        assert worst < 1e-4, f"worst relative gradient error {worst:.3g}"


class TestMergedConditioning:
    @pytest.mark.parametrize("t", [0, 10, 999])
    def test_bit_identical_to_direct_features(self, t):
        config = dn.DenoiserConfig(
            token_dim_in=5, token_dim_out=3, tokens=4, width=16, depth=4,
            heads=4, time_embed_dim=8,
        )
        params = dn.init_params(config, child_rng(10, "init"))
        for i in range(config.depth):
            params[f"block{i}.cond2_w"] = child_rng(10, "c", i).normal(
                size=params[f"block{i}.cond2_w"].shape
            )
        x = child_rng(10, "x").normal(size=(3, 4, 5))
        merged = dn.merge_conditioning(params, config, t)
        for blocks in (1, 2, 4):
            a = dn.encoder_features(params, config, x, t, blocks)
            b = dn.merged_features(params, config, x, merged, blocks)
            np.testing.assert_array_equal(a, b)

    def test_constant_shapes(self):
        params, _ = make_model(11)
        merged = dn.merge_conditioning(params, CFG, 10)
        assert merged.scale1.shape == (CFG.depth, CFG.width)
        assert merged.size() == 4 * CFG.depth * CFG.width
        assert merged.size(1) == 4 * CFG.width

    def test_param_count_matches_plain_transformer(self):
        # folding the conditioning MLPs at fixed t leaves exactly the
        # parameter count of an unconditioned pre-norm transformer whose
        # layer norms carry affine scale and bias
        for config in (
            CFG,
            dn.DenoiserConfig(
                token_dim_in=16, token_dim_out=16, tokens=16, width=16,
                depth=2, heads=4, time_embed_dim=64,
            ),
        ):
            params = dn.init_params(config, child_rng(12, "init"))
            merged = dn.merge_conditioning(params, config, 10)
            for blocks in (1, config.depth):
                got = dn.merged_encoder_param_count(params, config, merged, blocks)
                want = dn.plain_transformer_param_count(config, blocks)
                assert got == want

    def test_enc_blocks_range_enforced(self):
        params, x = make_model(13)
        merged = dn.merge_conditioning(params, CFG, 10)
        for blocks in (0, CFG.depth + 1):
            with pytest.raises(ValueError, match="enc_blocks"):
                dn.encoder_features(params, CFG, x, 10, blocks)
            with pytest.raises(ValueError, match="enc_blocks"):
                dn.merged_features(params, CFG, x, merged, blocks)


class TestEncoderFeatures:
    def test_shape_is_pooled_width(self):
        params, x = make_model(14)
        feats = dn.encoder_features(params, CFG, x, 10, 2)
        assert feats.shape == (2, CFG.width)

    def test_prefix_depth_changes_features(self):
        params, x = make_model(15)
        a = dn.encoder_features(params, CFG, x, 10, 1)
        b = dn.encoder_features(params, CFG, x, 10, 2)
        assert not np.allclose(a, b)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params, x = make_model(16)
        path = tmp_path / "model.ldae"
        dn.save_denoiser(path, CFG, params)
        config2, params2 = dn.load_denoiser(path)
        assert config2 == CFG
        assert set(params2) == set(params)
        for k in params:
            assert params[k].tobytes() == params2[k].tobytes()
        a, _ = dn.forward(params, CFG, x, 10)
        b, _ = dn.forward(params2, config2, x, 10)
        np.testing.assert_array_equal(a, b)

    def test_count_params_prefix(self):
        params, _ = make_model(17)
        total = dn.count_params(params)
        assert total == sum(v.size for v in params.values())
        block0 = dn.count_params(params, "block0.")
        assert 0 < block0 < total
