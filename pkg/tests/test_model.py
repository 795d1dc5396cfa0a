"""Module system, residual blocks, and the assembled cascade."""

import numpy as np
import pytest

from phr3d.autograd import (
    Constant,
    Parameter,
    Tensor,
    Zeros,
    bilinear_filter,
    l2_pixelwise,
    no_grad,
    save_arrays,
    load_arrays,
)
from phr3d.errors import ConfigError, ShapeError, UntrainedModelError
from phr3d.geometry import BBox
from phr3d.model import (
    BatchNorm2d,
    Bottleneck,
    Conv2d,
    ConvTranspose2d,
    Hourglass,
    Linear,
    Module,
    build_cascade,
    desk_config,
    full_config,
)


def tiny_cascade(seed=0, n=3, crop=32):
    return build_cascade("desk", n_landmarks=n, crop_size=crop,
                         rng=np.random.default_rng(seed))


class _Toy(Module):
    def __init__(self):
        super().__init__()
        self.conv = Conv2d(3, 4, 3, padding=1)
        self.bn = BatchNorm2d(4)
        self.head = Linear(4, 2)


class TestModuleSystem:
    def test_named_parameters_dotted_paths(self):
        m = _Toy()
        names = set(m.named_parameters())
        assert names == {"conv.weight", "conv.bias", "bn.gamma", "bn.beta",
                         "head.weight", "head.bias"}

    def test_named_buffers_tracks_batchnorm_stats(self):
        m = _Toy()
        assert set(m.named_buffers()) == {"bn.running_mean", "bn.running_var"}

    def test_finalize_names_stamps_parameters(self):
        m = _Toy()
        m.finalize_names()
        assert m.conv.weight.name == "conv.weight"
        assert m.bn.gamma.name == "bn.gamma"

    def test_parameter_count_sums_sizes(self):
        m = _Toy()
        expect = 4 * 3 * 3 * 3 + 4 + 4 + 4 + 2 * 4 + 2
        assert m.parameter_count() == expect

    def test_train_eval_propagates_to_children(self):
        m = _Toy()
        m.eval()
        assert not m.training and not m.bn.training
        m.train()
        assert m.training and m.bn.training

    def test_initialize_is_seed_deterministic(self):
        a, b = _Toy(), _Toy()
        a.initialize(np.random.default_rng(7))
        b.initialize(np.random.default_rng(7))
        for k, p in a.named_parameters().items():
            np.testing.assert_array_equal(p.tensor.data,
                                          b.named_parameters()[k].tensor.data)

    def test_initialize_different_seeds_differ(self):
        a, b = _Toy(), _Toy()
        a.initialize(np.random.default_rng(1))
        b.initialize(np.random.default_rng(2))
        assert not np.array_equal(a.conv.weight.tensor.data,
                                  b.conv.weight.tensor.data)

    def test_construction_leaves_weights_zero(self):
        # big presets must be auditable without paying for init
        m = _Toy()
        assert np.all(m.conv.weight.tensor.data == 0.0)

    def test_state_arrays_round_trip(self, tmp_path):
        m = _Toy()
        m.initialize(np.random.default_rng(3))
        path = tmp_path / "toy.bin"
        save_arrays(path, m.state_arrays())
        fresh = _Toy()
        fresh.load_state_arrays(load_arrays(path))
        for k, arr in m.state_arrays().items():
            np.testing.assert_array_equal(arr, fresh.state_arrays()[k])

    def test_load_state_rejects_missing_keys(self):
        m = _Toy()
        state = dict(m.state_arrays())
        state.pop("param.conv.weight")
        with pytest.raises(ConfigError, match="missing"):
            _Toy().load_state_arrays(state)

    def test_load_state_rejects_extra_keys(self):
        m = _Toy()
        state = dict(m.state_arrays())
        state["param.ghost"] = np.zeros(3)
        with pytest.raises(ConfigError, match="unexpected"):
            _Toy().load_state_arrays(state)

    def test_load_state_rejects_shape_mismatch(self):
        m = _Toy()
        state = {k: v.copy() for k, v in m.state_arrays().items()}
        state["param.head.weight"] = np.zeros((5, 5))
        with pytest.raises(ConfigError, match="shape mismatch"):
            _Toy().load_state_arrays(state)


class TestLayerInit:
    def test_conv_he_std(self):
        conv = Conv2d(16, 64, 3)
        conv.initialize(np.random.default_rng(0))
        w = conv.weight.tensor.data
        expect = np.sqrt(2.0 / (16 * 9))
        assert abs(w.std() - expect) / expect < 0.1
        assert np.all(conv.bias.tensor.data == 0.0)

    def test_constant_init_fills_value(self):
        conv = Conv2d(4, 2, 1, init=Zeros(), bias_init=Constant(-4.0))
        conv.initialize(np.random.default_rng(0))
        assert np.all(conv.weight.tensor.data == 0.0)
        assert np.all(conv.bias.tensor.data == -4.0)

    def test_output_heads_start_prior_matched(self):
        # logit head at the sparse-class prior, regression maps blank
        from phr3d.model.cascade import SPARSE_PRIOR_LOGIT
        model = tiny_cascade()
        det_head = model.detection.head
        assert np.all(det_head.weight.tensor.data == 0.0)
        assert np.all(det_head.bias.tensor.data == SPARSE_PRIOR_LOGIT)
        assert np.all(model.regression.mid.weight.tensor.data == 0.0)

    def test_batchnorm_identity_init(self):
        bn = BatchNorm2d(8)
        bn.initialize(np.random.default_rng(0))
        np.testing.assert_array_equal(bn.gamma.tensor.data, np.ones(8))
        np.testing.assert_array_equal(bn.beta.tensor.data, np.zeros(8))
        np.testing.assert_array_equal(bn.running_mean, np.zeros(8))
        np.testing.assert_array_equal(bn.running_var, np.ones(8))

    def test_deconv_bilinear_init_diagonal(self):
        dc = ConvTranspose2d(3, 3, kernel=4, stride=2, padding=1, bias=False)
        dc.initialize(np.random.default_rng(0))
        w = dc.weight.tensor.data
        filt = bilinear_filter(4, 4)
        for i in range(3):
            for j in range(3):
                if i == j:
                    np.testing.assert_allclose(w[i, j], filt)
                else:
                    np.testing.assert_array_equal(w[i, j], 0.0)

    def test_linear_weight_layout_matches_functional(self):
        lin = Linear(6, 4)
        lin.initialize(np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).random((2, 6)))
        out = lin(x)
        assert out.shape == (2, 4)
        expect = x.data @ lin.weight.tensor.data.T + lin.bias.tensor.data
        np.testing.assert_allclose(out.data, expect)


class TestBottleneck:
    def test_zero_final_conv_is_identity(self):
        block = Bottleneck(8, 4, 8)
        block.initialize(np.random.default_rng(0))
        block.conv3.weight.tensor.data[...] = 0.0
        block.eval()
        x = Tensor(np.random.default_rng(1).random((2, 8, 6, 6)))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_no_projection_when_shapes_match(self):
        assert Bottleneck(8, 4, 8).proj is None
        assert Bottleneck(8, 4, 16).proj is not None
        assert Bottleneck(8, 4, 8, stride=2).proj is not None

    def test_stride_and_expansion_shapes(self):
        block = Bottleneck(8, 4, 16, stride=2)
        block.initialize(np.random.default_rng(0))
        out = block(Tensor(np.random.default_rng(1).random((2, 8, 12, 12))))
        assert out.shape == (2, 16, 6, 6)

    def test_gradient_reaches_input(self):
        block = Bottleneck(4, 2, 4)
        block.initialize(np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).random((1, 4, 6, 6)),
                   requires_grad=True)
        block(x).backward(np.ones((1, 4, 6, 6)))
        assert x.grad is not None and np.isfinite(x.grad).all()


class TestHourglass:
    def test_output_shape_matches_input(self):
        hg = Hourglass(2, 8)
        hg.initialize(np.random.default_rng(0))
        out = hg(Tensor(np.random.default_rng(1).random((2, 8, 24, 24))))
        assert out.shape == (2, 8, 24, 24)

    def test_depth_counts_pooling_levels(self):
        hg = Hourglass(3, 4)
        inner = hg.inner
        assert isinstance(inner, Hourglass) and inner.depth == 2
        assert isinstance(inner.inner, Hourglass) and inner.inner.depth == 1
        assert isinstance(inner.inner.inner, Bottleneck)

    def test_rejects_odd_spatial_input(self):
        hg = Hourglass(2, 4)
        hg.initialize(np.random.default_rng(0))
        with pytest.raises(ConfigError, match="even"):
            hg(Tensor(np.random.default_rng(1).random((1, 4, 6, 6))))

    def test_rejects_zero_depth(self):
        with pytest.raises(ConfigError, match="depth"):
            Hourglass(0, 4)


class TestCascadeShapes:
    @pytest.mark.parametrize("batch", [1, 3])
    def test_detection_heatmaps_quarter_resolution(self, batch):
        m = tiny_cascade()
        with no_grad():
            out = m.forward_detection(Tensor(np.zeros((batch, 3, 32, 32))))
        assert out.shape == (batch, 3, 8, 8)

    def test_regression_maps_at_crop_resolution(self):
        m = tiny_cascade()
        with no_grad():
            logits, reg = m.forward_xy(Tensor(np.zeros((2, 3, 32, 32))))
        assert logits.shape == (2, 3, 8, 8)
        assert reg.shape == (2, 3, 32, 32)

    def test_z_output_one_scalar_per_landmark(self):
        m = tiny_cascade()
        with no_grad():
            z = m.forward_z(Tensor(np.zeros((2, 3, 32, 32))),
                            Tensor(np.zeros((2, 3, 32, 32))))
        assert z.shape == (2, 3)

    def test_z_rejects_low_resolution_heatmaps(self):
        m = tiny_cascade()
        with pytest.raises(ShapeError, match="crop resolution"):
            m.forward_z(Tensor(np.zeros((1, 3, 32, 32))),
                        Tensor(np.zeros((1, 3, 8, 8))))

    def test_eval_forward_is_deterministic(self):
        m = tiny_cascade()
        m.eval()
        x = Tensor(np.random.default_rng(5).random((1, 3, 32, 32)))
        with no_grad():
            _, a = m.forward_xy(x)
            _, b = m.forward_xy(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_train_forward_updates_bn_buffers(self):
        m = tiny_cascade()
        m.train()
        before = m.detection.trunk.stem_bn.running_mean.copy()
        with no_grad():
            m.forward_detection(Tensor(np.random.default_rng(5).random((2, 3, 32, 32))))
        assert not np.array_equal(before, m.detection.trunk.stem_bn.running_mean)

    def test_hourglass_path_backprops_into_detection(self):
        m = tiny_cascade()
        m.train()
        # the blank-start head passes no gradient while exactly zero; nudge
        # it off zero so this checks connectivity, not init
        m.regression.mid.weight.tensor.data[:] = 0.01
        _, reg = m.forward_xy(Tensor(np.random.default_rng(5).random((1, 3, 32, 32))))
        loss = l2_pixelwise(reg, Tensor(np.zeros((1, 3, 32, 32))))
        loss.backward()
        g = m.detection.trunk.stem_conv.weight.grad
        assert g is not None and np.any(g != 0.0)


class TestCascadeConfigs:
    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="preset"):
            build_cascade("huge")

    def test_full_preset_crop_is_fixed(self):
        with pytest.raises(ConfigError, match="384"):
            build_cascade("full", crop_size=256)

    def test_desk_crop_must_be_divisible(self):
        with pytest.raises(ConfigError):
            desk_config(5, 90)

    def test_set_stage_validates(self):
        m = tiny_cascade()
        with pytest.raises(ConfigError, match="stage"):
            m.set_stage("warmup")

    def test_untrained_model_refuses_to_predict(self):
        m = tiny_cascade()
        with pytest.raises(UntrainedModelError):
            m.predict_landmarks_3d(np.zeros((64, 64, 3)), BBox(0, 0, 64, 64))

    def test_predict_returns_source_coordinates(self):
        m = tiny_cascade()
        m.set_stage("done")
        img = np.random.default_rng(0).random((80, 70, 3))
        res = m.predict_landmarks_3d(img, BBox(10, 10, 60, 60))
        assert res.points.shape == (3, 2)
        assert res.z.shape == (3,)
        assert res.crop_size == (80, 70)


class TestCensus:
    def test_desk_census_consistency(self):
        m = tiny_cascade(n=5, crop=96)
        c = m.census()
        assert c["preset"] == "desk"
        assert c["heatmap_size"] == 24
        parts = (c["detection"]["parameters"] + c["regression"]["parameters"]
                 + c["z"]["parameters"])
        assert parts == c["total_parameters"] == m.parameter_count()

    def test_full_census_matches_published_architecture(self):
        c = build_cascade("full").census()
        assert [s["bottlenecks"] for s in c["detection"]["stages"]] == [3, 8, 36, 3]
        assert [s["bottlenecks"] for s in c["z"]["stages"]] == [3, 24, 38, 3]
        assert [s["mid_channels"] for s in c["detection"]["stages"]] == [64, 128, 256, 512]
        assert [s["out_channels"] for s in c["detection"]["stages"]] == [256, 512, 1024, 2048]
        assert c["z"]["input_channels"] == 3 + 66
        assert c["z"]["fc_out"] == 66
        assert c["crop_size"] == 384 and c["heatmap_size"] == 96
        assert c["regression"]["hourglass_width"] == 256
        assert c["regression"]["hourglass_depth"] == 4

    def test_full_config_validates(self):
        cfg = full_config()
        assert cfg.detection.backbone_size == 24
        assert cfg.hourglass.input_size == 96
