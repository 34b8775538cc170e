import numpy as np
import pytest

from hgfusion.data import make_activity_tensor
from hgfusion.errors import ConfigurationError, UsageError
from hgfusion.model import FusionBlock, Hourglass, ModelConfig, Residual, build_model, init_parameters
from hgfusion.ops import mse_loss
from hgfusion.tensor import Tensor, backward, tensor_sum
from hgfusion.training import total_loss

from oracles import model_param_count

# Small enough for fast forward/backward: 32 px input -> 8x8 features.
TINY = dict(channels=8, hourglass_depth=2, input_side=32)

# Frozen census of the full-scale baseline (8 stacks, 256 channels, depth 4).
FULL_SCALE_BASELINE_PARAMS = 25_434_112


def tiny(**kw):
    base = dict(TINY, num_stacks=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def image(rng, cfg, n=2):
    return Tensor(rng.uniform(0, 1, (n, 3, cfg.input_side, cfg.input_side)))


def activities(cfg, ids):
    return Tensor(np.concatenate([make_activity_tensor(a, cfg.feature_side) for a in ids]))


class TestConfig:
    @pytest.mark.parametrize("variant,form", [("baseline", "A"), ("contextual", "none"), ("ablative", "none")])
    def test_form_rule(self, variant, form):
        with pytest.raises(ConfigurationError, match="form"):
            tiny(variant=variant, form=form)

    @pytest.mark.parametrize("form,index", [("A", 0), ("B", 3), ("C", 7)])
    def test_injection_index(self, form, index):
        assert tiny(num_stacks=8, variant="contextual", form=form).injection_index == index

    def test_injection_beyond_stacks(self):
        with pytest.raises(ConfigurationError, match="hourglass 8"):
            tiny(num_stacks=2, variant="ablative", form="C")

    def test_feature_side(self):
        assert ModelConfig().feature_side == 64
        assert ModelConfig.toy().feature_side == 32

    def test_indivisible_feature_side(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ModelConfig(input_side=40, hourglass_depth=2)

    def test_dict_round_trip(self):
        cfg = tiny(variant="contextual", form="A", fusion_post=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict({"bogus": 1})


class TestCensus:
    @pytest.mark.parametrize("variant,form", [("baseline", "none"), ("contextual", "A"), ("ablative", "C")])
    def test_full_scale_matches_closed_form(self, variant, form):
        model = build_model(ModelConfig(variant=variant, form=form))
        assert model.num_parameters() == model_param_count(8, 256, 4, variant=variant)

    def test_golden_baseline_count(self):
        assert build_model(ModelConfig()).num_parameters() == FULL_SCALE_BASELINE_PARAMS

    def test_fusion_width_full_scale(self):
        model = build_model(ModelConfig(variant="contextual", form="A"))
        assert model.fusion.in_channels == 277
        assert model.fusion.conv.weight.shape == (256, 277, 1, 1)

    def test_contextual_and_ablative_differ_only_in_fusion_input(self):
        ctx = dict(build_model(tiny(variant="contextual", form="A"), seed=3).named_parameters())
        abl = dict(build_model(tiny(variant="ablative", form="A"), seed=3).named_parameters())
        assert ctx.keys() == abl.keys()
        differing = [k for k in ctx if ctx[k].shape != abl[k].shape]
        assert differing == ["fusion.conv.weight"]
        assert ctx["fusion.conv.weight"].shape[1] - abl["fusion.conv.weight"].shape[1] == 21
        for k in ctx:
            if k != "fusion.conv.weight":
                np.testing.assert_array_equal(ctx[k].data, abl[k].data)


class TestBlocks:
    def test_stem_shape(self, rng):
        cfg = tiny()
        model = build_model(cfg)
        out = model.stem_forward(image(rng, cfg))
        assert out.shape == (2, cfg.channels, cfg.feature_side, cfg.feature_side)
        assert model.stem_forward(image(rng, cfg, n=4)).shape[0] == 4

    def test_stem_zero_image_finite(self):
        cfg = tiny()
        out = build_model(cfg).stem_forward(Tensor(np.zeros((2, 3, 32, 32))))
        assert np.isfinite(out.data).all()

    def test_stem_rejects_wrong_side(self, rng):
        with pytest.raises(ConfigurationError):
            build_model(tiny()).stem_forward(Tensor(np.zeros((1, 3, 16, 16))))

    def test_hourglass_preserves_shape(self, rng):
        hg = Hourglass(2, 8)
        init_parameters(hg, 0)
        x = Tensor(rng.standard_normal((2, 8, 8, 8)))
        assert hg(x).shape == x.shape

    def test_hourglass_indivisible(self, rng):
        hg = Hourglass(3, 8)
        init_parameters(hg, 0)
        with pytest.raises(ConfigurationError):
            hg(Tensor(rng.standard_normal((1, 8, 4, 4))))

    def test_depth_zero_is_residual(self, rng):
        hg, res = Hourglass(0, 8), Residual(8, 8)
        init_parameters(hg, 1)
        for (_, a), (_, b) in zip(hg.named_parameters(), res.named_parameters()):
            b.data[...] = a.data
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        np.testing.assert_array_equal(hg(x).data, res(x).data)

    def test_every_parameter_gets_gradient(self, rng):
        hg = Hourglass(2, 8)
        init_parameters(hg, 0)
        for _, p in hg.named_parameters():
            p.data += 0.1 * rng.standard_normal(p.shape)  # break zero beta/bias symmetry
        out = hg(Tensor(rng.standard_normal((2, 8, 8, 8))))
        backward(mse_loss(out, Tensor(rng.standard_normal(out.shape))))
        dead = [name for name, p in hg.named_parameters() if not np.any(p.grad)]
        assert dead == []


class TestFusion:
    def test_ablative_identity(self, rng):
        block = FusionBlock(8, 21, contextual=False)
        block.conv.weight.data[...] = np.eye(8)[:, :, None, None]
        block.bn.mode = "inference"
        x = rng.uniform(0, 2, (2, 8, 4, 4))
        out = block(Tensor(x)).data
        np.testing.assert_allclose(out, x, rtol=1e-5)
        # BN epsilon alone scales by 1/sqrt(1 + eps)
        np.testing.assert_allclose(out * np.sqrt(1 + block.bn.epsilon), x, rtol=1e-12)

    def test_width_and_sensitivity(self, rng):
        block = FusionBlock(8, 21, contextual=True, post=False)
        init_parameters(block, 5)
        block.conv.weight.data[...] = rng.standard_normal(block.conv.weight.shape)
        feats = Tensor(np.repeat(rng.standard_normal((1, 8, 4, 4)), 2, axis=0))
        acts = Tensor(np.concatenate([make_activity_tensor(a, 4) for a in (2, 9)]))
        out = block(feats, acts).data
        assert block.last_input_width == 29
        assert not np.allclose(out[0], out[1])

    def test_usage_errors(self, rng):
        feats = Tensor(rng.standard_normal((1, 8, 4, 4)))
        with pytest.raises(UsageError):
            FusionBlock(8, 21, contextual=True)(feats)
        with pytest.raises(UsageError):
            FusionBlock(8, 21, contextual=False)(feats, Tensor(make_activity_tensor(0, 4)))

    def test_locality_zero_activity_equals_ablative(self, rng):
        cfg_c, cfg_a = tiny(variant="contextual", form="A"), tiny(variant="ablative", form="A")
        ctx, abl = build_model(cfg_c, 2), build_model(cfg_a, 2)
        abl.fusion.conv.weight.data[...] = ctx.fusion.conv.weight.data[:, :8]
        img = image(rng, cfg_c)
        zero = Tensor(np.zeros((2, 21, 8, 8)))
        np.testing.assert_array_equal(ctx(img, zero)[0].data, abl(img)[0].data)

    def test_activity_permutation_invariance(self, rng):
        cfg = tiny(variant="contextual", form="A")
        a, b = build_model(cfg, 4), build_model(cfg, 4)
        perm = rng.permutation(21)
        # b's column perm[k] holds a's column k, so activity perm[k] in b == activity k in a
        b.fusion.conv.weight.data[:, 8 + perm] = a.fusion.conv.weight.data[:, 8:]
        img = image(rng, cfg)
        ids = [3, 17]
        out_a = a(img, activities(cfg, ids))[0].data
        out_b = b(img, activities(cfg, [perm[i] for i in ids]))[0].data
        np.testing.assert_allclose(out_a, out_b, rtol=0, atol=1e-12)


class TestForward:
    @pytest.mark.parametrize("stacks", [1, 2])
    def test_heatmap_sets(self, rng, stacks):
        cfg = tiny(num_stacks=stacks)
        out = build_model(cfg)(image(rng, cfg))
        assert len(out) == stacks
        assert all(h.shape == (2, 16, 8, 8) for h in out)

    def test_toy_64_channel_config(self, rng):
        cfg = ModelConfig.toy(channels=64)
        out = build_model(cfg)(Tensor(rng.uniform(0, 1, (1, 3, 128, 128))))
        assert len(out) == 1 and out[0].shape == (1, 16, 32, 32)

    def test_fusion_applied_once_at_index(self, rng):
        cfg = tiny(num_stacks=3, variant="ablative", form="A")
        model = build_model(cfg)
        calls = []
        original = model.fusion.__call__

        class Spy:
            def __call__(self, *a):
                calls.append(1)
                return original(*a)

        model.fusion = Spy()
        model(image(rng, cfg))
        assert calls == [1]

    def test_activity_variant_mismatch(self, rng):
        cfg = tiny(variant="contextual", form="A")
        with pytest.raises(UsageError):
            build_model(cfg)(image(rng, cfg))
        with pytest.raises(UsageError):
            build_model(tiny())(image(rng, cfg), activities(cfg, [0, 1]))

    def test_every_head_gets_gradient(self, rng):
        cfg = tiny(num_stacks=3)
        model = build_model(cfg)
        out = model(image(rng, cfg))
        backward(total_loss(out, Tensor(rng.uniform(0, 1, out[0].shape))))
        for unit in model.stacks:
            assert np.any(unit.heat.weight.grad)

    def test_deterministic(self, rng):
        cfg = tiny(num_stacks=2, variant="contextual", form="A")
        img, act = image(rng, cfg), activities(cfg, [1, 20])
        a = build_model(cfg, 11)(img, act)
        b = build_model(cfg, 11)(img, act)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_inter_hourglass_features_shape(self, rng):
        cfg = tiny(num_stacks=2, variant="contextual", form="A")
        _, feats = build_model(cfg).forward_with_features(image(rng, cfg), activities(cfg, [0, 5]))
        assert [f.shape for f in feats] == [(2, 8, 8, 8)] * 2


def test_train_eval_mode_switch(rng):
    model = build_model(tiny())
    assert {s.mode for s in model.batch_norm_states()} == {"train"}
    model.eval()
    assert {s.mode for s in model.batch_norm_states()} == {"inference"}
    out = model(image(rng, tiny(), n=1))
    assert np.isfinite(out[0].data).all()


class TestInit:
    def test_he_scale(self):
        m = build_model(tiny(channels=64), seed=0)
        w = dict(m.named_parameters())["stacks.0.hourglass.up1.conv2.weight"].data
        fan_in = np.prod(w.shape[1:])
        assert np.std(w) == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.1)

    def test_uniform_bounds_and_biases(self):
        m = build_model(tiny(init="uniform"), seed=0)
        params = dict(m.named_parameters())
        for name, p in params.items():
            owner, leaf = name.rsplit(".", 1)
            if leaf in ("weight", "bias"):
                bound = 1.0 / np.sqrt(np.prod(params[owner + ".weight"].shape[1:]))
                assert np.abs(p.data).max() <= bound
        assert np.any(params["stacks.0.heat.bias"].data != 0)

    @pytest.mark.parametrize("scheme", ["he", "uniform"])
    def test_zero_head(self, scheme):
        m = build_model(tiny(num_stacks=2, init=scheme, zero_head=True), seed=0)
        cfg = m.config
        heats = m(Tensor(np.random.default_rng(0).random((1, 3, cfg.input_side, cfg.input_side))))
        assert all(not h.data.any() for h in heats)
        others = [p for n, p in m.named_parameters() if n.endswith(".weight") and ".heat." not in n]
        assert all(p.data.any() for p in others)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationError):
            tiny(init="xavier")
