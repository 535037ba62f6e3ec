import numpy as np
import pytest

from cswsteg.codebook import Codebook, CnvPartition, cnv_partition, gen_codebook
from cswsteg.errors import BitsExhausted, RateOutOfRange
from cswsteg.qim import embedding_distortion, extract_record, qim_embed, qim_extract
from cswsteg.streams import CodewordClip

SIZES = (16, 8, 8)


def make_partitions(sizes=SIZES, seed=0):
    return [
        cnv_partition(gen_codebook(s, dim=3, seed=[seed, i], slot=i + 1))
        for i, s in enumerate(sizes)
    ]


def random_clip(n, sizes=SIZES, seed=0):
    rng = np.random.default_rng(seed)
    codes = np.stack([rng.integers(0, s, size=n, dtype=np.uint16) for s in sizes])
    return CodewordClip(codes, sizes)


PARTS = make_partitions()


class TestEmbed:
    def test_rate_zero_is_identity(self):
        clip = random_clip(50, seed=1)
        record = qim_embed(clip, np.zeros(0, dtype=np.uint8), 0.0, PARTS, seed=2)
        assert record.stego == clip
        assert not record.mask.any()
        assert len(record.bits) == 0

    def test_rate_one_marks_every_frame(self):
        clip = random_clip(40, seed=2)
        bits = np.random.default_rng(3).integers(0, 2, size=3 * 40, dtype=np.uint8)
        record = qim_embed(clip, bits, 1.0, PARTS, seed=4)
        assert record.mask.all()
        assert len(record.bits) == 120

    def test_line_codebook_nearest_in_class(self):
        # 1-D codebook {0, 1, 10, 11} with labels (0, 1, 0, 1)
        cb = Codebook(np.array([[0.0], [1.0], [10.0], [11.0]]))
        part = CnvPartition(cb, np.array([0, 1, 0, 1]))
        # exhaustive nearest-in-class search as the oracle
        vec = cb.vectors[:, 0]
        for i in range(4):
            for bit in (0, 1):
                members = [j for j in range(4) if part.labels[j] == bit]
                oracle = min(members, key=lambda j: abs(vec[i] - vec[j]))
                assert part.nearest_in_class()[bit, i] == oracle
        # cover index 0: bit 1 -> index 1 (nearest label-1); bit 0 -> unchanged
        assert part.nearest_in_class()[1, 0] == 1
        assert part.nearest_in_class()[0, 0] == 0

    def test_locality_only_masked_frames_change(self):
        clip = random_clip(200, seed=5)
        bits = np.random.default_rng(6).integers(0, 2, size=600, dtype=np.uint8)
        record = qim_embed(clip, bits, 0.4, PARTS, seed=7)
        diff = (record.stego.codes != clip.codes).any(axis=0)
        assert not diff[~record.mask].any()
        # per slot, a change happens only where the cover label mismatched the bit
        sel = np.flatnonzero(record.mask)
        used = record.bits.reshape(-1, 3)
        for j, part in enumerate(PARTS):
            cover_labels = part.labels[clip.codes[j, sel].astype(int)]
            changed = record.stego.codes[j, sel] != clip.codes[j, sel]
            assert not changed[cover_labels == used[:, j]].any()

    def test_stego_codewords_carry_their_bits(self):
        clip = random_clip(100, seed=8)
        bits = np.random.default_rng(9).integers(0, 2, size=300, dtype=np.uint8)
        record = qim_embed(clip, bits, 1.0, PARTS, seed=10)
        for j, part in enumerate(PARTS):
            labels = part.labels[record.stego.codes[j].astype(int)]
            assert np.array_equal(labels, record.bits.reshape(-1, 3)[:, j])

    def test_selected_fraction_within_three_sigma(self):
        n, rate = 20000, 0.3
        clip = random_clip(n, seed=11)
        bits = np.zeros(3 * n, dtype=np.uint8)
        record = qim_embed(clip, bits, rate, PARTS, seed=12)
        k = record.mask.sum()
        sigma = np.sqrt(n * rate * (1 - rate))
        assert abs(k - n * rate) < 3 * sigma

    def test_deterministic_for_fixed_seed(self):
        clip = random_clip(60, seed=13)
        bits = np.random.default_rng(14).integers(0, 2, size=180, dtype=np.uint8)
        a = qim_embed(clip, bits, 0.5, PARTS, seed=15)
        b = qim_embed(clip, bits, 0.5, PARTS, seed=15)
        assert a.stego == b.stego
        assert np.array_equal(a.mask, b.mask)

    def test_bits_exhausted(self):
        clip = random_clip(50, seed=16)
        with pytest.raises(BitsExhausted):
            qim_embed(clip, np.zeros(10, dtype=np.uint8), 1.0, PARTS, seed=17)

    def test_rate_out_of_range(self):
        clip = random_clip(5, seed=18)
        for rate in (-0.1, 1.1):
            with pytest.raises(RateOutOfRange):
                qim_embed(clip, np.zeros(30, dtype=np.uint8), rate, PARTS)


class TestExtract:
    def test_round_trip_many_messages(self):
        rng = np.random.default_rng(19)
        for trial in range(50):
            clip = random_clip(30, seed=100 + trial)
            message = rng.integers(0, 2, size=90, dtype=np.uint8)
            record = qim_embed(clip, message, 1.0, PARTS, seed=trial)
            assert np.array_equal(extract_record(record, PARTS), message)

    def test_rate_zero_extracts_nothing(self):
        clip = random_clip(20, seed=20)
        record = qim_embed(clip, np.zeros(0, dtype=np.uint8), 0.0, PARTS, seed=21)
        assert len(extract_record(record, PARTS)) == 0

    def test_single_frame_slot_order(self):
        clip = random_clip(1, seed=22)
        record = qim_embed(clip, np.array([1, 0, 1], dtype=np.uint8), 1.0, PARTS, seed=23)
        assert extract_record(record, PARTS).tolist() == [1, 0, 1]

    def test_extract_reads_partition_labels(self):
        clip = random_clip(10, seed=24)
        mask = np.ones(10, dtype=bool)
        bits = qim_extract(clip, mask, PARTS)
        expected = []
        for i in range(10):
            for j, part in enumerate(PARTS):
                expected.append(part.labels[int(clip.codes[j, i])])
        assert bits.tolist() == expected


class TestDistortion:
    def test_monotone_in_rate_over_hundred_clips(self):
        rates = [0.0, 0.25, 0.5, 0.75, 1.0]
        means = []
        for rate in rates:
            total = 0.0
            for i in range(100):
                clip = random_clip(200, seed=1000 + i)
                bits = np.random.default_rng(i).integers(
                    0, 2, size=600, dtype=np.uint8
                )
                record = qim_embed(clip, bits, rate, PARTS, seed=i)
                total += embedding_distortion(clip, record.stego, PARTS)
            means.append(total / 100)
        assert means[0] == 0.0
        for lo, hi in zip(means, means[1:]):
            assert hi >= lo
