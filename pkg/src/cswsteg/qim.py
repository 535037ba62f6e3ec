"""Hiding and recovering bits in codeword streams by sub-codebook quantization.

Embedding forces each selected codeword into the sub-codebook matching
its message bit, picking the nearest member by codebook vector distance.
Extraction reads the bits back as the partition labels of the codewords.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codebook import CnvPartition
from .errors import BitsExhausted, RateOutOfRange
from .streams import CodewordClip, validate_clip

BITS_PER_FRAME = 3  # one bit per codeword slot


@dataclass(frozen=True)
class EmbedRecord:
    """Result of one embedding pass.

    ``mask[i]`` says whether frame i carries bits; ``bits`` is the
    consumed message prefix, three bits per selected frame in slot order.
    """

    stego: CodewordClip
    mask: np.ndarray = field(repr=False)
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=np.uint8))
        mask.flags.writeable = False
        bits.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "bits", bits)
        if len(bits) != BITS_PER_FRAME * int(mask.sum()):
            raise ValueError("bits length must be 3 x number of selected frames")


def _check_partitions(clip: CodewordClip, partitions: Sequence[CnvPartition]):
    if len(partitions) != 3:
        raise ValueError("need one partition per codeword slot")
    for j, part in enumerate(partitions):
        if part.codebook.size != clip.codebook_sizes[j]:
            raise ValueError(
                f"slot {j + 1} partition covers {part.codebook.size} codewords, "
                f"clip declares {clip.codebook_sizes[j]}"
            )


def qim_embed(
    clip: CodewordClip,
    bits: Sequence[int] | np.ndarray,
    embedding_rate: float,
    partitions: Sequence[CnvPartition],
    seed: int = 0,
) -> EmbedRecord:
    """Embed message bits into a cover clip at the given per-frame rate.

    Each frame is independently selected with probability
    ``embedding_rate`` (drawn first, from ``seed``); a selected frame
    consumes three bits, one per slot. Each selected codeword becomes the
    nearest member of the sub-codebook carrying its bit, which is the
    codeword itself whenever its label already matches.
    """
    if not 0.0 <= embedding_rate <= 1.0:
        raise RateOutOfRange(f"embedding rate {embedding_rate} outside [0, 1]")
    validate_clip(clip)
    _check_partitions(clip, partitions)

    rng = np.random.default_rng(seed)
    mask = rng.random(clip.n_frames) < embedding_rate
    n_selected = int(mask.sum())
    needed = BITS_PER_FRAME * n_selected
    bits = np.asarray(bits, dtype=np.uint8)
    if len(bits) < needed:
        raise BitsExhausted(f"message has {len(bits)} bits, {needed} needed")
    used = bits[:needed].reshape(n_selected, BITS_PER_FRAME)

    codes = np.array(clip.codes)  # writable copy
    for j, part in enumerate(partitions):
        table = part.nearest_in_class()
        cover_idx = codes[j, mask].astype(np.int64)
        codes[j, mask] = table[used[:, j], cover_idx].astype(np.uint16)

    stego = CodewordClip(codes, clip.codebook_sizes, clip.frame_duration_ms)
    return EmbedRecord(stego, mask, used.reshape(-1))


def qim_extract(
    clip: CodewordClip,
    mask: np.ndarray,
    partitions: Sequence[CnvPartition],
) -> np.ndarray:
    """Read back the bits of every masked frame, in frame order, slots 1..3."""
    _check_partitions(clip, partitions)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (clip.n_frames,):
        raise ValueError("mask must have one entry per frame")
    selected = clip.codes[:, mask].astype(np.int64)  # (3, n_selected)
    out = np.empty(selected.shape, dtype=np.uint8)
    for j, part in enumerate(partitions):
        out[j] = part.labels[selected[j]]
    return out.T.reshape(-1)


def extract_record(record: EmbedRecord, partitions: Sequence[CnvPartition]) -> np.ndarray:
    return qim_extract(record.stego, record.mask, partitions)


def embedding_distortion(
    cover: CodewordClip,
    stego: CodewordClip,
    partitions: Sequence[CnvPartition],
) -> float:
    """Mean codebook-space displacement per codeword between cover and stego."""
    if cover.n_frames != stego.n_frames:
        raise ValueError("cover and stego lengths differ")
    total = 0.0
    for j, part in enumerate(partitions):
        v = part.codebook.vectors
        diff = v[cover.codes[j].astype(np.int64)] - v[stego.codes[j].astype(np.int64)]
        total += float(np.sqrt((diff**2).sum(axis=1)).sum())
    return total / (3 * cover.n_frames)
