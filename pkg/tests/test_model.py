import json
import zipfile

import numpy as np
import pytest

from cswsteg.errors import ArchMismatch, ClipTooShort, ConfigError, FormatError, IoError
from cswsteg.model import (
    ArchConfig,
    _channel_forward,
    _forward_batch,
    arch_config_hash,
    build,
    forward,
    load_model,
    predict,
    save_model,
)
from cswsteg.streams import CodewordClip, normalize

SMALL = ArchConfig(
    window_widths=(1, 3),
    conv1_kernels=6,
    conv2_widths=(2, 3),
    conv2_kernels=4,
    skip_rows=4,
    fused_dim=8,
)


def random_clip(n, seed=0, sizes=(128, 32, 32)):
    rng = np.random.default_rng(seed)
    codes = np.stack([rng.integers(0, s, size=n, dtype=np.uint16) for s in sizes])
    return CodewordClip(codes, sizes)


class TestArchConfig:
    def test_default_dimensions(self):
        cfg = ArchConfig()
        assert cfg.fused_input_dim == 448
        assert cfg.fused_dim == 64
        assert cfg.min_clip_frames == 12

    def test_variant_dimensions(self):
        assert ArchConfig.variant("b").fused_input_dim == 384
        assert ArchConfig.variant("j").fused_input_dim == 2 * 128 + 64
        assert ArchConfig.variant("g").fused_input_dim == 3 * 128 * 2 + 64
        assert ArchConfig.variant("f").fused_input_dim == 448

    def test_short_clip_config_fits_ten_frames(self):
        assert ArchConfig.short_clip().min_clip_frames <= 10

    def test_extra_layers_raise_minimum_length(self):
        assert ArchConfig.variant("h").min_clip_frames == 12 + 6
        assert ArchConfig.variant("i").min_clip_frames == 12 + 12

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(window_widths=())
        with pytest.raises(ConfigError):
            ArchConfig(conv2_widths=(3, 5))  # one width per channel
        with pytest.raises(ConfigError):
            ArchConfig(threshold=1.0)
        with pytest.raises(ConfigError):
            ArchConfig(conv1_enabled=False, conv2_enabled=False)
        with pytest.raises(ConfigError):
            ArchConfig(extra_conv_layers=1, conv2_enabled=False)
        with pytest.raises(ConfigError):
            ArchConfig.variant("z")

    def test_hash_is_canonical(self):
        assert arch_config_hash(ArchConfig()) == arch_config_hash(ArchConfig())
        assert arch_config_hash(ArchConfig()) != arch_config_hash(
            ArchConfig(fused_dim=32)
        )


class TestBuild:
    def test_deterministic_per_seed(self):
        a = build(SMALL, seed=4)
        b = build(SMALL, seed=4)
        for (na, pa), (nb, pb) in zip(a.named_params().items(), b.named_params().items()):
            assert na == nb
            assert np.array_equal(pa, pb)

    def test_param_count_default(self):
        model = build(ArchConfig(), seed=0)
        # conv1 + bn1 + conv2 + bn2 per channel, skip + bn, fusion, detector
        expected = 0
        for w, w2 in zip((1, 3, 5), (3, 5, 7)):
            expected += 128 * 3 * w + 128 + 2 * 128
            expected += 64 * 128 * w2 + 64 + 2 * 64
        expected += 64 * 3 + 64 + 2 * 64
        expected += 448 * 64 + 64
        expected += 64 + 1
        assert model.n_params() == expected

    def test_dimension_chain_at_thousand_frames(self):
        model = build(ArchConfig(), seed=1)
        rng = np.random.default_rng(2)
        xb = rng.random((1, 3, 1000))
        x_tf = np.ascontiguousarray(xb.transpose(0, 2, 1))
        block, cache = _channel_forward(model, 2, x_tf, True, False, True)
        layer_caches, _idx, h_shape = cache
        assert layer_caches[0][2].shape == (1, 996, 128)  # l_c = 1000 - 5 + 1
        assert h_shape == (1, 990, 64)  # l_e = 996 - 7 + 1
        assert block.shape == (1, 128)  # 64 kernels x 2-max
        y, o, _ = _forward_batch(model, xb, train=False)
        assert o.shape == (1, 64)


class TestForward:
    def test_zero_parameters_give_half(self):
        model = build(SMALL, seed=0)
        for arr in model.named_params().values():
            arr[...] = 0.0
        clip = random_clip(30, seed=1)
        y, o = forward(model, normalize(clip))
        assert y == 0.5
        assert np.array_equal(o, np.zeros(SMALL.fused_dim))

    def test_clip_too_short(self):
        model = build(ArchConfig(), seed=0)
        clip = random_clip(11, seed=2)
        with pytest.raises(ClipTooShort):
            predict(model, clip)

    def test_infer_forward_is_pure(self):
        model = build(SMALL, seed=3)
        clip = random_clip(40, seed=4)
        before = {n: a.copy() for n, a in model.named_params().items()}
        stats_before = {
            n: (bn.running_mean.copy(), bn.running_var.copy())
            for n, bn in model.named_batchnorms().items()
        }
        v1, p1 = predict(model, clip)
        v2, p2 = predict(model, clip)
        assert (v1, p1) == (v2, p2)
        for n, a in model.named_params().items():
            assert np.array_equal(a, before[n])
        for n, bn in model.named_batchnorms().items():
            assert np.array_equal(bn.running_mean, stats_before[n][0])
            assert np.array_equal(bn.running_var, stats_before[n][1])

    def test_train_mode_dropout_one_rejected(self):
        model = build(SMALL, seed=5)
        x = np.random.default_rng(6).random((4, 3, 20))
        with pytest.raises(ConfigError):
            _forward_batch(model, x, train=True, dropout_rate=1.0)

    def test_dropout_zero_train_matches_infer_after_stat_sync(self):
        model = build(SMALL, seed=7)
        for bn in model.named_batchnorms().values():
            bn.momentum = 1.0  # one train pass pins running stats to batch stats
        x = np.random.default_rng(8).random((8, 3, 20))
        y_train, _, _ = _forward_batch(
            model, x, train=True, dropout_rate=0.0, update_bn=True
        )
        y_infer, _, _ = _forward_batch(model, x, train=False)
        assert np.allclose(y_train, y_infer, atol=1e-10)

    def test_raw_scaling_flag(self):
        cfg = ArchConfig(
            window_widths=SMALL.window_widths,
            conv1_kernels=SMALL.conv1_kernels,
            conv2_widths=SMALL.conv2_widths,
            conv2_kernels=SMALL.conv2_kernels,
            skip_rows=SMALL.skip_rows,
            fused_dim=SMALL.fused_dim,
            input_scaling="raw",
        )
        model = build(cfg, seed=9)
        clip = random_clip(30, seed=10)
        assert np.array_equal(model.prepare(clip), clip.codes.astype(np.float64))


class TestPredict:
    def make_fixed_probability_model(self, prob):
        model = build(SMALL, seed=0)
        for arr in model.named_params().values():
            arr[...] = 0.0
        # with everything zeroed, y = sigmoid(detector bias)
        model.detector.bias[0] = np.log(prob / (1.0 - prob))
        return model

    def test_above_threshold_is_stego(self):
        model = self.make_fixed_probability_model(0.7)
        verdict, p = predict(model, random_clip(30), threshold=0.5)
        assert verdict == "stego" and abs(p - 0.7) < 1e-12

    def test_boundary_equality_is_stego(self):
        model = build(SMALL, seed=0)
        for arr in model.named_params().values():
            arr[...] = 0.0
        verdict, p = predict(model, random_clip(30), threshold=0.5)
        assert p == 0.5
        assert verdict == "stego"

    def test_below_threshold_is_cover(self):
        model = self.make_fixed_probability_model(0.49)
        verdict, _ = predict(model, random_clip(30), threshold=0.5)
        assert verdict == "cover"

    def test_threshold_monotonicity(self):
        model = build(SMALL, seed=11)
        clip = random_clip(25, seed=12)
        verdicts = [
            predict(model, clip, threshold=t)[0]
            for t in (0.1, 0.3, 0.5, 0.7, 0.9)
        ]
        # once a verdict flips to cover it can never flip back to stego
        first_cover = next(
            (i for i, v in enumerate(verdicts) if v == "cover"), len(verdicts)
        )
        assert all(v == "cover" for v in verdicts[first_cover:])

    def test_bad_threshold(self):
        model = build(SMALL, seed=13)
        with pytest.raises(ConfigError):
            predict(model, random_clip(30), threshold=0.0)


class TestPersistence:
    def test_round_trip_preserves_outputs(self, tmp_path):
        model = build(SMALL, seed=14)
        # move the bn stats off their init values first
        x = np.random.default_rng(15).random((6, 3, 24))
        _forward_batch(model, x, train=True, update_bn=True)
        path = tmp_path / "m.npz"
        save_model(model, path, metadata={"note": "test"})
        loaded = load_model(path)
        for i in range(10):
            clip = random_clip(30, seed=100 + i)
            assert predict(model, clip) == predict(loaded, clip)

    def test_arch_mismatch_detected(self, tmp_path):
        model = build(SMALL, seed=16)
        path = tmp_path / "m.npz"
        save_model(model, path)
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        manifest = json.loads(str(arrays["manifest"]))
        manifest["config"]["fused_dim"] = 16  # hash no longer matches
        arrays["manifest"] = np.array(json.dumps(manifest))
        bad = tmp_path / "bad.npz"
        with open(bad, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(ArchMismatch):
            load_model(bad)

    def test_truncation_sweep_raises_format_error(self, tmp_path):
        model = build(SMALL, seed=17)
        path = tmp_path / "m.npz"
        save_model(model, path)
        blob = path.read_bytes()
        cuts = list(range(0, len(blob), max(1, len(blob) // 40))) + [len(blob) - 1]
        for cut in cuts:
            trunc = tmp_path / "t.npz"
            trunc.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                load_model(trunc)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            load_model(tmp_path / "nope.npz")

    def test_metadata_and_dtype_round_trip(self, tmp_path):
        model = build(SMALL, seed=18, dtype=np.float32)
        path = tmp_path / "m32.npz"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.dtype == np.float32
        for n, a in model.named_params().items():
            assert a.dtype == loaded.named_params()[n].dtype
            assert np.array_equal(a, loaded.named_params()[n])
