"""Model tests: config validation, forward shapes, accounting, checkpoints."""

import numpy as np
import pytest

import amp.autodiff as ad
from amp.criterion import entropy_criterion
from amp.errors import ConfigError, FormatError, ShapeError
from amp.model import (CHECKPOINT_MAGIC, ModelConfig, count_flops,
                       count_mlp_hidden_params, count_params, forward,
                       init_random, load_checkpoint, load_tensors, param_shapes,
                       patchify, save_checkpoint, save_tensors)


class TestConfig:
    def test_rejects_indivisible_patch(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=10, patch_size=4, embed_dim=8,
                        num_blocks=1, num_heads=2, mlp_hidden=4)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=8, patch_size=4, embed_dim=9,
                        num_blocks=1, num_heads=2, mlp_hidden=4)

    def test_rejects_out_of_range_hidden(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1,
                        num_heads=2, mlp_hidden=4, per_block_hidden=[5])

    def test_defaults_fill_per_block(self, tiny_config):
        assert tiny_config.per_block_hidden == [16, 16]
        assert tiny_config.num_patches == 4
        assert tiny_config.seq_len == 5

    def test_copy_is_deep_for_hidden_list(self, tiny_config):
        c2 = tiny_config.copy()
        c2.per_block_hidden[0] = 1
        assert tiny_config.per_block_hidden[0] == 16


class TestForward:
    def test_output_shapes(self, tiny_model, tiny_images):
        rec = forward(tiny_model, tiny_images, capture_blocks=(0, 1))
        assert rec.z_cls.shape == (4, 8)
        assert rec.z_patch.shape == (4, 4, 8)
        # captures cover the class token too: T = N + 1
        assert rec.hidden_captures[0].value.shape == (4, 5, 16)

    def test_bad_image_shape(self, tiny_model):
        with pytest.raises(ShapeError):
            forward(tiny_model, np.zeros((2, 8, 8, 1)))

    def test_bad_capture_block(self, tiny_model, tiny_images):
        with pytest.raises(ShapeError):
            forward(tiny_model, tiny_images, capture_blocks=(7,))

    def test_masking_zeroes_capture(self, tiny_model, tiny_images):
        tiny_model.hidden_masks[0] = np.ones(16)
        tiny_model.hidden_masks[0][3] = 0.0
        rec = forward(tiny_model, tiny_images, capture_blocks=(0,))
        assert np.all(rec.hidden_captures[0].value[:, :, 3] == 0.0)
        tiny_model.hidden_masks[0] = None

    def test_different_seeds_differ(self, tiny_config):
        a = init_random(tiny_config, 0)
        b = init_random(tiny_config, 1)
        assert not np.array_equal(a.params["block0.fc1_w"].data,
                                  b.params["block0.fc1_w"].data)

    def test_init_deterministic(self, tiny_config):
        a = init_random(tiny_config, 9)
        b = init_random(tiny_config, 9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_patchify_row_major_order(self):
        img = np.arange(16.0).reshape(1, 4, 4, 1)
        patches = patchify(img, 2)
        np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[0, 3], [10, 11, 14, 15])

    def test_gradient_flow_to_all_params(self, tiny_model, tiny_images):
        rec = forward(tiny_model, tiny_images)
        ad.backward(entropy_criterion(rec.z_cls, 1.0))
        zeros = total = 0
        for name, t in tiny_model.params.items():
            assert t.grad is not None, f"no gradient reached {name}"
            zeros += np.sum(t.grad == 0.0)
            total += t.grad.size
        # key-projection biases are softmax-invariant, so a handful of exact
        # zeros is structural; the global fraction still stays tiny
        assert zeros / total < 0.01


class TestAccounting:
    def test_count_params_matches_schema(self, tiny_model, tiny_config):
        expected = sum(int(np.prod(s)) for s in param_shapes(tiny_config).values())
        assert count_params(tiny_model) == expected

    def test_mlp_hidden_params_closed_form(self, tiny_model):
        c = tiny_model.config.embed_dim
        assert count_mlp_hidden_params(tiny_model) == 2 * 16 * (2 * c + 1)

    def test_flops_closed_form(self, tiny_config):
        model = init_random(tiny_config, 0)
        n, t, c, m = 4, 5, 8, 16
        expected = 2 * n * (4 * 4 * 3) * c
        expected += 2 * (4 * 2 * t * c * c + 2 * 2 * t * t * c + 2 * 2 * t * c * m)
        assert count_flops(model) == expected

    def test_flops_scale_with_hidden(self, tiny_config):
        big = init_random(tiny_config, 0)
        small_cfg = tiny_config.copy()
        small_cfg.per_block_hidden = [4, 4]
        small = init_random(small_cfg, 0)
        assert count_flops(small) < count_flops(big)

    def test_flops_resolution_must_divide(self, tiny_model):
        with pytest.raises(ConfigError):
            count_flops(tiny_model, image_size=9)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == tiny_model.config
        for name in tiny_model.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          tiny_model.params[name].data)
        # bytes are stable under re-save
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_magic_header(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model, path)
        assert path.read_bytes()[:8] == CHECKPOINT_MAGIC

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model, path)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(IOError):
            load_checkpoint(clipped)

    def test_named_tensor_file_round_trip(self, tmp_path):
        arrays = {"head_w": np.arange(6.0).reshape(2, 3), "head_b": np.zeros(3)}
        path = tmp_path / "head.ckpt"
        save_tensors(arrays, path)
        loaded = load_tensors(path)
        assert set(loaded) == {"head_w", "head_b"}
        np.testing.assert_array_equal(loaded["head_w"], arrays["head_w"])

    def test_schema_mismatch_rejected(self, tiny_config):
        from amp.model import VitModel
        with pytest.raises(ConfigError):
            VitModel(tiny_config, {"patch_embed_w": np.zeros((48, 8))})
