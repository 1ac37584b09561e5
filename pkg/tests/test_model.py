"""Config plumbing, stage arithmetic, and full model assembly."""

import numpy as np
import pytest

from volformer.config import (
    PRESETS,
    ModelConfig,
    micro_config,
    mirror_plan,
    parse_config,
    serialize_config,
    stage_plan,
)
from volformer.errors import ConfigError, UsageError
from volformer.model import build_model, forward, output_resolutions
from volformer.tensor import Tensor


class TestStagePlans:
    def test_synapse_table(self):
        extents = [s.extents for s in stage_plan(PRESETS["synapse"])]
        assert extents == [(32, 32, 32), (16, 16, 16), (8, 8, 8), (4, 4, 4)]

    def test_acdc_table(self):
        extents = [s.extents for s in stage_plan(PRESETS["acdc"])]
        assert extents == [(40, 40, 14), (20, 20, 14), (10, 10, 7), (5, 5, 4)]

    def test_tumor_table(self):
        extents = [s.extents for s in stage_plan(PRESETS["tumor"])]
        assert extents == [(32, 32, 32), (16, 16, 16), (8, 8, 8), (4, 4, 4)]

    def test_decoder_mirrors_encoder(self):
        for name in ("synapse", "acdc", "tumor", "toy"):
            enc = stage_plan(PRESETS[name])
            dec = mirror_plan(PRESETS[name])
            assert [d.extents for d in dec] == [enc[2].extents, enc[1].extents, enc[0].extents]

    def test_output_resolutions(self):
        cfg = PRESETS["toy"]
        full, mid, low = output_resolutions(cfg)
        plan = stage_plan(cfg)
        assert full == tuple(cfg.crop_size)
        assert mid == plan[0].extents
        assert low == plan[1].extents

    def test_stage_channels_double(self):
        cfg = PRESETS["synapse"]
        assert cfg.stage_channels == (192, 384, 768, 1536)


class TestConfigValidation:
    def test_heads_must_divide_channels(self):
        cfg = ModelConfig(
            crop_size=(32, 32, 16), embed_dim=16, stage_heads=(3, 2, 4, 8),
            embed_strides=((2, 2, 2), (2, 2, 1)),
            down_strides=((2, 2, 2), (2, 2, 2), (1, 1, 1)),
            volume_size=(4, 4, 4), num_classes=3,
        )
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_over_downsampling_detected(self):
        cfg = ModelConfig(
            crop_size=(4, 4, 2), embed_dim=16, stage_heads=(1, 2, 4, 8),
            embed_strides=((2, 2, 2), (2, 2, 2)),
            down_strides=((2, 2, 2), (2, 2, 2), (2, 2, 2)),
            volume_size=(4, 4, 4), num_classes=3,
        )
        # ceil arithmetic keeps extents at 1, never 0 -- this config is legal
        cfg.validate()

    def test_roundtrip_serialization(self):
        for name, cfg in PRESETS.items():
            assert parse_config(serialize_config(cfg)) == cfg

    def test_parse_rejects_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config("crop_size = 8, 8, 8\nbogus = 1\n")


class TestModel:
    def test_toy_parameter_count(self):
        model = build_model(PRESETS["toy"], seed=0)
        n = sum(p.data.size for p in model.named_parameters().values())
        assert n == 1_756_673

    def test_build_deterministic(self):
        a = build_model(PRESETS["toy"], seed=7).named_parameters()
        b = build_model(PRESETS["toy"], seed=7).named_parameters()
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_seed_changes_parameters(self):
        a = build_model(PRESETS["toy"], seed=0).named_parameters()
        b = build_model(PRESETS["toy"], seed=1).named_parameters()
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)

    def test_forward_shapes(self):
        cfg = PRESETS["toy"]
        model = build_model(cfg, seed=0)
        x = Tensor(np.zeros((2, 1, 32, 32, 16), dtype=np.float32))
        full, mid, low = forward(model, x)
        assert full.shape == (2, 3, 32, 32, 16)
        assert mid.shape == (2, 3, 16, 16, 8)
        assert low.shape == (2, 3, 8, 8, 4)
        for out in (full, mid, low):
            assert np.isfinite(out.data).all()

    def test_forward_deterministic(self):
        cfg = micro_config()
        model = build_model(cfg, seed=3)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1) + cfg.crop_size).astype(np.float32))
        y1 = forward(model, x)[0].data
        y2 = forward(model, x)[0].data
        np.testing.assert_array_equal(y1, y2)

    def test_wrong_input_shape_rejected(self):
        model = build_model(micro_config(), seed=0)
        with pytest.raises(UsageError):
            forward(model, Tensor(np.zeros((1, 1, 8, 8, 8), dtype=np.float32)))
