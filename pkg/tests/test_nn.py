import numpy as np
import pytest

from curlprune import tensor as T
from curlprune.nn import (ArchConfig, BatchNormLayer, LayerShapeError, bn_forward, build_tiny_resnet,
                          forward_logits, load_checkpoint, save_checkpoint)

SMALL = ArchConfig(widths=(8, 16), blocks=(1, 1), image_size=8, stem_width=4)


def _bn(width, dtype=np.float64):
    return BatchNormLayer("bn", width, dtype=dtype)


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        bn = _bn(3)
        mu = np.array([0.5, -2.0, 7.0])
        bn.running_mean[:] = mu
        bn.beta.data[:] = [1.0, 2.0, 3.0]
        x = np.broadcast_to(mu[None, :, None, None], (2, 3, 4, 4)).copy()
        out = bn_forward(T.Tensor(x), bn, training=False).data
        np.testing.assert_allclose(out, np.broadcast_to([[[[1.0]], [[2.0]], [[3.0]]]], out.shape))

    def test_identity_normalization(self):
        bn = _bn(2)
        bn.running_var[:] = 1 - bn.eps
        x = np.random.default_rng(0).standard_normal((3, 2, 5, 5))
        out = bn_forward(T.Tensor(x), bn, training=False).data
        np.testing.assert_allclose(out, x, atol=1e-6)

    @pytest.mark.parametrize("training", [False, True])
    def test_zeroing_is_local_to_channel(self, training):
        bn = _bn(4, np.float32)
        rng = np.random.default_rng(1)
        bn.gamma.data[:] = rng.uniform(0.5, 2, 4)
        bn.beta.data[:] = rng.standard_normal(4)
        x = T.Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
        ref = bn_forward(x, bn, training).data
        bn.gamma.data[2] = 0.0
        bn.beta.data[2] = 0.0
        out = bn_forward(x, bn, training).data
        assert np.all(out[:, 2] == 0.0)
        np.testing.assert_array_equal(np.delete(out, 2, axis=1), np.delete(ref, 2, axis=1))

    def test_empty_training_batch_rejected(self):
        with pytest.raises(T.ShapeError, match="empty"):
            bn_forward(T.Tensor(np.zeros((0, 2, 2, 2))), _bn(2), training=True)


class TestBuild:
    def test_default_desk_net_logits(self):
        net = build_tiny_resnet()
        assert [s.width for s in net.stages] == [32, 64, 128]
        out = forward_logits(net, np.zeros((1, 1, 32, 32), dtype=np.float32))
        assert out.shape == (1, 10)

    def test_wide_two_stage_output_channels(self):
        net = build_tiny_resnet(ArchConfig(widths=(256, 256), blocks=(2, 2), image_size=8))
        h = net.run_stages(net.stem(T.Tensor(np.zeros((1, 1, 8, 8))), False), False)
        assert h.shape[1] == 256

    def test_single_class(self):
        net = build_tiny_resnet(ArchConfig(widths=(8, 16), blocks=(1, 1), class_count=1, image_size=8))
        out = forward_logits(net, np.zeros((3, 1, 8, 8), dtype=np.float32))
        assert out.shape == (3, 1)

    @pytest.mark.parametrize("widths,blocks", [((3, 16), (1, 1)), ((8,), (0,)), ((8, 8), (1,))])
    def test_invalid_config_rejected(self, widths, blocks):
        with pytest.raises(ValueError):
            build_tiny_resnet(ArchConfig(widths=widths, blocks=blocks))

    def test_last_stage_output_not_prunable(self):
        net = build_tiny_resnet(SMALL)
        flags = {s.name: s.prunable for s in net.channel_spaces()}
        assert flags["s0.out"] and not flags["s1.out"] and not flags["stem"]

    def test_downsample_and_stage_consistency(self):
        net = build_tiny_resnet()
        for stage in net.stages:
            assert stage.blocks[0].downsample is not None
            assert all(b.downsample is None for b in stage.blocks[1:])
            widths = {b.bn3.width for b in stage.blocks} | {stage.blocks[0].downsample[1].width}
            assert widths == {stage.width}
            assert stage.blocks[0].conv1.out_channels == stage.width // 4

    def test_depthwise_variant_shares_space(self):
        net = build_tiny_resnet(ArchConfig(widths=(8, 16), blocks=(1, 1), image_size=8, depthwise=True))
        b = net.stages[0].blocks[0]
        assert b.conv2.depthwise and b.conv2.in_space == b.conv2.out_space == b.conv1.out_space
        assert forward_logits(net, np.zeros((2, 1, 8, 8), dtype=np.float32)).shape == (2, 10)


class TestForward:
    def test_identical_rows(self):
        net = build_tiny_resnet(SMALL)
        x = np.random.default_rng(0).random((1, 1, 8, 8), dtype=np.float32)
        out = forward_logits(net, np.concatenate([x, x])).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_zero_classifier_zero_logits(self):
        net = build_tiny_resnet(SMALL)
        net.fc.weight.data[:] = 0
        net.fc.bias.data[:] = 0
        out = forward_logits(net, np.zeros((2, 1, 8, 8), dtype=np.float32)).data
        assert np.all(out == 0)

    def test_eval_is_pure(self):
        net = build_tiny_resnet(SMALL)
        x = np.random.default_rng(1).random((4, 1, 8, 8), dtype=np.float32)
        a = forward_logits(net, x).data
        forward_logits(net, x, training=True)  # updates running stats only
        net2 = build_tiny_resnet(SMALL)
        np.testing.assert_array_equal(a, forward_logits(net2, x).data)

    def test_channel_mismatch_names_stem(self):
        net = build_tiny_resnet(SMALL)
        with pytest.raises(LayerShapeError, match=r"^stem\.conv: "):
            forward_logits(net, np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_inner_mismatch_names_first_offending_layer(self):
        net = build_tiny_resnet(SMALL)
        b = net.stages[0].blocks[0]
        b.conv2.weight = T.Parameter(np.zeros((2, 3, 3, 3), dtype=np.float32))
        with pytest.raises(LayerShapeError, match=r"^s0\.b0\.conv2: conv2d"):
            forward_logits(net, np.zeros((1, 1, 8, 8), dtype=np.float32))


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = build_tiny_resnet(SMALL, seed=3)
        x = np.random.default_rng(2).random((8, 1, 8, 8), dtype=np.float32)
        forward_logits(net, x, training=True)
        save_checkpoint(net, tmp_path / "a.ckpt", meta={"note": "t"})
        back = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert back.meta == {"note": "t"}
        np.testing.assert_array_equal(forward_logits(net, x).data, forward_logits(back, x).data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"nope")
        with pytest.raises(ValueError, match="not a curlprune checkpoint"):
            load_checkpoint(p)
