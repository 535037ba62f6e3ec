import json
from pathlib import Path

import numpy as np
import pytest

from cswsteg.dataset import (
    DatasetConfig,
    DatasetManifest,
    build_dataset,
    resolve_seeds,
)
from cswsteg.errors import ConfigError
from cswsteg.qim import qim_extract
from cswsteg.streams import read_container, read_sidecar


def small_config(out_dir, **overrides):
    base = dict(
        clip_lengths_frames=(20,),
        embedding_rates=(1.0,),
        n_per_class=100,
        alpha=0.2,
        out_dir=str(out_dir),
        codebook_sizes=(16, 8, 8),
        seeds={"master": 3},
    )
    base.update(overrides)
    return DatasetConfig(**base)


class TestConfig:
    def test_rejects_zero_counts(self):
        with pytest.raises(ConfigError):
            small_config("x", n_per_class=0)

    def test_rejects_rate_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            small_config("x", embedding_rates=(1.5,))

    def test_rejects_unknown_json_fields(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_per_class": 5, "bogus": 1}))
        with pytest.raises(ConfigError):
            DatasetConfig.from_json(path)

    def test_seed_resolution_is_stable_and_overridable(self):
        a = resolve_seeds({"master": 1})
        b = resolve_seeds({"master": 1})
        assert a == b
        c = resolve_seeds({"master": 1, "embed": 99})
        assert c["embed"] == 99
        assert c["cover"] == a["cover"]


class TestBuildDataset:
    def test_split_counts_and_balance(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds"))
        train = manifest.select("train")
        test = manifest.select("test")
        assert len(train) == 160
        assert len(test) == 40
        for split in (train, test):
            covers = [e for e in split if e.label == "cover"]
            stegos = [e for e in split if e.label == "stego"]
            assert len(covers) == len(stegos)

    def test_files_exist_and_have_sidecars(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds", n_per_class=5))
        for entry in manifest.entries:
            path = manifest.resolve(entry)
            assert path.exists()
            meta = read_sidecar(path)
            assert meta["label"] == entry.label
            clip = read_container(path)
            assert clip.n_frames == entry.clip_len_frames

    def test_byte_identical_rerun(self, tmp_path):
        m1 = build_dataset(small_config(tmp_path / "a", n_per_class=8))
        m2 = build_dataset(small_config(tmp_path / "b", n_per_class=8))
        files1 = sorted(p.name for p in (tmp_path / "a").iterdir())
        files2 = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert files1 == files2
        for name in files1:
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()
        assert len(m1.entries) == len(m2.entries)

    def test_full_rate_stego_files_decode_to_their_messages(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds", n_per_class=6))
        partitions = manifest.partitions()
        audited = 0
        for entry in manifest.select(label="stego"):
            meta = read_sidecar(manifest.resolve(entry))
            clip = read_container(manifest.resolve(entry))
            n = clip.n_frames
            # rate 1.0: the recorded selection seed marks every frame
            mask = np.random.default_rng(meta["embed_seed"]).random(n) < 1.0
            assert mask.all()
            message = np.random.default_rng(meta["message_seed"]).integers(
                0, 2, size=3 * n, dtype=np.uint8
            )
            assert np.array_equal(qim_extract(clip, mask, partitions), message)
            audited += 1
        assert audited == 6

    def test_covers_record_zero_rate(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds", n_per_class=4))
        for entry in manifest.select(label="cover"):
            assert entry.embedding_rate == 0.0
        for entry in manifest.select(label="stego"):
            assert entry.embedding_rate == 1.0

    def test_multi_combo_grid(self, tmp_path):
        cfg = small_config(
            tmp_path / "ds",
            clip_lengths_frames=(10, 20),
            embedding_rates=(0.5, 1.0),
            n_per_class=5,
        )
        manifest = build_dataset(cfg)
        assert len(manifest.entries) == 2 * 2 * 2 * 5
        lens = {e.clip_len_frames for e in manifest.entries}
        assert lens == {10, 20}


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds", n_per_class=4))
        loaded = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        assert loaded.codebook_sizes == manifest.codebook_sizes
        assert loaded.seeds == manifest.seeds
        assert [e.path for e in loaded.entries] == [e.path for e in manifest.entries]

    def test_reconstructed_generators_match(self, tmp_path):
        manifest = build_dataset(small_config(tmp_path / "ds", n_per_class=3))
        loaded = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        for a, b in zip(manifest.codebooks(), loaded.codebooks()):
            assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(
            manifest.cover_model().transitions[0], loaded.cover_model().transitions[0]
        )
