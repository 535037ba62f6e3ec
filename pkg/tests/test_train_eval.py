import numpy as np
import pytest

from cswsteg.dataset import DatasetConfig, build_dataset
from cswsteg.errors import ConfigError, EmptySplit
from cswsteg.evaluation import (
    EvalReport,
    bench_latency,
    evaluate,
    export_features,
)
from cswsteg.model import ArchConfig, build
from cswsteg.training import HyperParams, TrainHistory, train

SMALL_ARCH = ArchConfig(
    window_widths=(1, 3),
    conv1_kernels=8,
    conv2_widths=(2, 3),
    conv2_kernels=6,
    skip_rows=6,
    fused_dim=8,
)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    config = DatasetConfig(
        clip_lengths_frames=(60,),
        embedding_rates=(1.0,),
        n_per_class=40,
        alpha=0.15,
        out_dir=str(out),
        codebook_sizes=(16, 8, 8),
        seeds={"master": 21},
    )
    return build_dataset(config)


class TestTrain:
    def test_learns_the_tiny_problem(self, tiny_manifest):
        hyper = HyperParams(
            epochs=30, batch_size=8, dropout_rate=0.1, seed=1, patience=30,
            dtype="float32",
        )
        model, history = train(tiny_manifest, SMALL_ARCH, hyper)
        assert isinstance(history, TrainHistory)
        report = evaluate(model, tiny_manifest, "test")
        assert report.accuracy >= 0.75

    def test_zero_learning_rate_changes_nothing(self, tiny_manifest):
        hyper = HyperParams(
            learning_rate=0.0, epochs=3, batch_size=64, dropout_rate=0.0,
            seed=2, patience=5, validation_fraction=0.0,
        )
        model, history = train(tiny_manifest, SMALL_ARCH, hyper)
        fresh = build(SMALL_ARCH, seed=hyper.seed)
        for name, arr in model.named_params().items():
            assert np.array_equal(arr, fresh.named_params()[name])
        # one full-dataset batch per epoch: the loss sequence is constant
        assert len(set(history.step_losses)) == 1

    def test_same_seed_gives_identical_curves(self, tiny_manifest):
        hyper = HyperParams(epochs=2, batch_size=16, dropout_rate=0.5, seed=3,
                            patience=5)
        _, h1 = train(tiny_manifest, SMALL_ARCH, hyper)
        _, h2 = train(tiny_manifest, SMALL_ARCH, hyper)
        assert h1.step_losses == h2.step_losses
        assert h1.epoch_val_acc == h2.epoch_val_acc

    def test_best_checkpoint_selection(self, tiny_manifest):
        hyper = HyperParams(epochs=5, batch_size=16, dropout_rate=0.3, seed=4,
                            patience=5)
        _, history = train(tiny_manifest, SMALL_ARCH, hyper)
        best = history.epoch_val_acc[history.best_epoch]
        assert best >= max(history.epoch_val_acc) - 1e-9

    def test_loss_trend_over_first_epochs(self, tiny_manifest):
        hyper = HyperParams(epochs=5, batch_size=16, dropout_rate=0.0, seed=5,
                            patience=5)
        _, history = train(tiny_manifest, SMALL_ARCH, hyper)
        steps = len(history.step_losses) // len(history.epoch_train_acc)
        medians = [
            float(np.median(history.step_losses[i * steps : (i + 1) * steps]))
            for i in range(len(history.epoch_train_acc))
        ]
        inversions = sum(1 for lo, hi in zip(medians, medians[1:]) if hi > lo + 1e-9)
        assert inversions <= 1

    def test_empty_and_one_sided_splits_rejected(self, tiny_manifest):
        import copy

        empty = copy.deepcopy(tiny_manifest)
        empty.entries = [e for e in empty.entries if e.split == "test"]
        with pytest.raises(EmptySplit):
            train(empty, SMALL_ARCH, HyperParams(epochs=1))
        one_sided = copy.deepcopy(tiny_manifest)
        one_sided.entries = [
            e for e in one_sided.entries
            if e.split == "test" or e.label == "cover"
        ]
        with pytest.raises(EmptySplit):
            train(one_sided, SMALL_ARCH, HyperParams(epochs=1))

    def test_hyper_validation(self):
        with pytest.raises(ConfigError):
            HyperParams(batch_size=1)
        with pytest.raises(ConfigError):
            HyperParams(dropout_rate=1.0)
        with pytest.raises(ConfigError):
            HyperParams(dtype="float16")


class TestEvaluate:
    def test_confusion_arithmetic(self):
        report = EvalReport(tp=10, fp=1, fn=1, tn=8, threshold=0.5, split="test")
        assert report.accuracy == 18 / 20
        assert report.fp_rate == 1 / 9
        assert report.fn_rate == 1 / 11
        report = EvalReport(tp=9, fp=1, fn=2, tn=8, threshold=0.5, split="test")
        assert report.accuracy == 17 / 20  # (TP + TN) / total, exactly

    def test_undefined_rates_are_none(self):
        report = EvalReport(tp=5, fp=0, fn=0, tn=0, threshold=0.5, split="test")
        assert report.fp_rate is None
        assert report.fn_rate == 0.0
        assert report.to_json_dict()["fp_rate"] is None

    def test_always_stego_model(self, tiny_manifest):
        model = build(SMALL_ARCH, seed=6)
        model.detector.bias[0] = 10.0  # saturates the sigmoid towards 1
        report = evaluate(model, tiny_manifest, "test")
        assert report.fn == 0
        assert report.tn == 0
        assert report.tp + report.fp == report.total

    def test_order_invariance(self, tiny_manifest):
        import copy

        model = build(SMALL_ARCH, seed=7)
        r1 = evaluate(model, tiny_manifest, "test")
        shuffled = copy.deepcopy(tiny_manifest)
        rng = np.random.default_rng(8)
        order = rng.permutation(len(shuffled.entries))
        shuffled.entries = [shuffled.entries[i] for i in order]
        r2 = evaluate(model, shuffled, "test")
        assert (r1.tp, r1.fp, r1.fn, r1.tn) == (r2.tp, r2.fp, r2.fn, r2.tn)

    def test_counts_sum_to_split_size(self, tiny_manifest):
        model = build(SMALL_ARCH, seed=9)
        report = evaluate(model, tiny_manifest, "test")
        assert report.total == len(tiny_manifest.select("test"))
        assert len(report.probabilities) == report.total

    def test_empty_split(self, tiny_manifest):
        import copy

        m = copy.deepcopy(tiny_manifest)
        m.entries = [e for e in m.entries if e.split == "train"]
        model = build(SMALL_ARCH, seed=10)
        with pytest.raises(EmptySplit):
            evaluate(model, m, "test")


class TestExportFeatures:
    def test_shape_and_determinism(self, tiny_manifest, tmp_path):
        model = build(SMALL_ARCH, seed=11)
        p1 = export_features(model, tiny_manifest, "test", tmp_path / "a.csv")
        p2 = export_features(model, tiny_manifest, "test", tmp_path / "b.csv")
        lines = p1.read_text().splitlines()
        n_test = len(tiny_manifest.select("test"))
        assert len(lines) == 1 + n_test
        header = lines[0].split(",")
        assert header[:2] == ["label", "embedding_rate"]
        assert len(header) == 2 + SMALL_ARCH.fused_dim
        assert p1.read_text() == p2.read_text()

    def test_zeroed_model_exports_zero_features(self, tiny_manifest, tmp_path):
        model = build(SMALL_ARCH, seed=12)
        for arr in model.named_params().values():
            arr[...] = 0.0
        path = export_features(model, tiny_manifest, "test", tmp_path / "z.csv")
        for line in path.read_text().splitlines()[1:]:
            values = [float(v) for v in line.split(",")[2:]]
            assert values == [0.0] * SMALL_ARCH.fused_dim


class TestBenchLatency:
    def test_requires_thirty_repetitions(self):
        model = build(SMALL_ARCH, seed=13)
        with pytest.raises(ConfigError):
            bench_latency(model, [20], repetitions=10)

    def test_longer_clips_take_longer(self):
        model = build(ArchConfig.short_clip(), seed=14)
        report = bench_latency(model, [10, 1000], repetitions=30, warmup=3, seed=0)
        by_len = {e.clip_len_frames: e for e in report.entries}
        assert by_len[1000].mean_ms > by_len[10].mean_ms
        for entry in report.entries:
            assert entry.sd_ms >= 0.0
            assert entry.n_samples >= 30

    def test_repeated_runs_agree_within_three_sd(self):
        model = build(SMALL_ARCH, seed=15)
        a = bench_latency(model, [50], repetitions=40, warmup=5, seed=1)
        b = bench_latency(model, [50], repetitions=40, warmup=5, seed=2)
        ea, eb = a.entries[0], b.entries[0]
        spread = 3 * max(ea.sd_ms, eb.sd_ms)
        assert abs(ea.mean_ms - eb.mean_ms) <= max(spread, 0.5)

    def test_below_minimum_length_rejected(self):
        model = build(ArchConfig(), seed=16)
        with pytest.raises(ConfigError):
            bench_latency(model, [5], repetitions=30)
