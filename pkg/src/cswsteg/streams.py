"""Codeword-stream data model and the .cwst container format.

A low-bit-rate speech frame is represented by three quantizer indices
(one per line-spectrum-frequency codebook stage). A clip is a 3 x N
integer matrix: row j holds the stage-j codeword of every frame.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptyStream,
    FormatError,
    IndexOutOfRange,
    IoError,
    VersionMismatch,
)

CWST_MAGIC = b"CWST"
CWST_VERSION = 1
_HEADER = struct.Struct("<4sHHHHHQ")  # magic, version, 3 sizes, duration_ms, count
_FRAME = struct.Struct("<HHH")

DEFAULT_CODEBOOK_SIZES = (128, 32, 32)
DEFAULT_FRAME_MS = 10


class CodewordFrame(NamedTuple):
    """The three codeword indices of one frame."""

    a1: int
    a2: int
    a3: int


@dataclass(frozen=True)
class CodewordClip:
    """An immutable run of frames plus the codebook sizes they index into.

    ``codes`` has shape (3, N) with dtype uint16; row j-1 holds slot-j
    indices. N = 0 is permitted so a clip can double as an (possibly
    empty) stream buffer; operations that need frames raise EmptyStream.
    """

    codes: np.ndarray
    codebook_sizes: tuple[int, int, int] = DEFAULT_CODEBOOK_SIZES
    frame_duration_ms: int = DEFAULT_FRAME_MS

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint16)
        if codes.ndim != 2 or codes.shape[0] != 3:
            raise ValueError(f"codes must be 3 x N, got shape {codes.shape}")
        codes = np.ascontiguousarray(codes)
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        sizes = tuple(int(s) for s in self.codebook_sizes)
        if len(sizes) != 3 or any(s < 1 for s in sizes):
            raise ValueError(f"codebook sizes must be three positive ints, got {sizes}")
        object.__setattr__(self, "codebook_sizes", sizes)
        if self.frame_duration_ms < 1 or self.frame_duration_ms > 0xFFFF:
            raise ValueError("frame_duration_ms must be in [1, 65535]")

    @property
    def n_frames(self) -> int:
        return self.codes.shape[1]

    def frame(self, i: int) -> CodewordFrame:
        return CodewordFrame(*(int(v) for v in self.codes[:, i]))

    def frames(self) -> Iterator[CodewordFrame]:
        for i in range(self.n_frames):
            yield self.frame(i)

    @classmethod
    def from_frames(
        cls,
        frames: Sequence[tuple[int, int, int]],
        codebook_sizes=DEFAULT_CODEBOOK_SIZES,
        frame_duration_ms: int = DEFAULT_FRAME_MS,
    ) -> "CodewordClip":
        arr = np.asarray(frames, dtype=np.uint16).reshape(-1, 3).T
        return cls(arr, codebook_sizes, frame_duration_ms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodewordClip):
            return NotImplemented
        return (
            self.codebook_sizes == other.codebook_sizes
            and self.frame_duration_ms == other.frame_duration_ms
            and self.codes.shape == other.codes.shape
            and np.array_equal(self.codes, other.codes)
        )

    def __hash__(self):
        return hash((self.codes.tobytes(), self.codebook_sizes, self.frame_duration_ms))


@dataclass(frozen=True)
class NormalizedClip:
    """Clip scaled to the unit interval: entry (j, i) = a / (|L_j| - 1)."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[1]


def validate_clip(clip: CodewordClip) -> CodewordClip:
    """Return ``clip`` unchanged iff every index is within its codebook.

    Raises IndexOutOfRange for the first violation in frame order, then
    slot order within the frame. Idempotent.
    """
    codes = clip.codes
    limits = np.array(clip.codebook_sizes, dtype=np.uint32).reshape(3, 1)
    bad = codes >= limits
    if bad.any():
        # first offending frame, then the lowest offending slot in it
        frame = int(np.flatnonzero(bad.any(axis=0))[0])
        slot = int(np.flatnonzero(bad[:, frame])[0])
        raise IndexOutOfRange(
            frame, slot + 1, int(codes[slot, frame]), clip.codebook_sizes[slot]
        )
    return clip


def slice_clips(stream: CodewordClip, clip_len_frames: int) -> list[CodewordClip]:
    """Cut a stream into successive, non-overlapping clips of fixed length.

    Yields floor(N / len) clips; the trailing remainder is discarded.
    """
    if clip_len_frames < 1:
        raise ValueError("clip_len_frames must be >= 1")
    n = stream.n_frames
    if n == 0:
        raise EmptyStream("cannot slice an empty stream")
    count = n // clip_len_frames
    return [
        CodewordClip(
            stream.codes[:, i * clip_len_frames : (i + 1) * clip_len_frames],
            stream.codebook_sizes,
            stream.frame_duration_ms,
        )
        for i in range(count)
    ]


def normalize(clip: CodewordClip) -> NormalizedClip:
    """Scale indices to [0, 1] by dividing each slot by (codebook size - 1).

    A degenerate size-1 codebook maps its only index to 0.
    """
    validate_clip(clip)
    denom = np.array(
        [max(s - 1, 1) for s in clip.codebook_sizes], dtype=np.float64
    ).reshape(3, 1)
    return NormalizedClip(clip.codes.astype(np.float64) / denom)


def normalize_matrix(codes: np.ndarray, codebook_sizes) -> np.ndarray:
    """Array-level normalization used on hot paths; same formula as normalize()."""
    denom = np.array([max(s - 1, 1) for s in codebook_sizes], dtype=np.float64)
    return codes.astype(np.float64) / denom.reshape((3, 1))


def _pack_stream(stream: CodewordClip) -> bytes:
    header = _HEADER.pack(
        CWST_MAGIC,
        CWST_VERSION,
        *stream.codebook_sizes,
        stream.frame_duration_ms,
        stream.n_frames,
    )
    body = np.ascontiguousarray(stream.codes.T.astype("<u2")).tobytes()
    return header + body


def _concat_clips(clips: Sequence[CodewordClip]) -> CodewordClip:
    if not clips:
        raise EmptyStream("no clips to write")
    first = clips[0]
    for c in clips[1:]:
        if c.codebook_sizes != first.codebook_sizes:
            raise ValueError("clips disagree on codebook sizes")
        if c.frame_duration_ms != first.frame_duration_ms:
            raise ValueError("clips disagree on frame duration")
    codes = np.concatenate([c.codes for c in clips], axis=1)
    return CodewordClip(codes, first.codebook_sizes, first.frame_duration_ms)


def write_container(
    data: CodewordClip | Sequence[CodewordClip],
    path,
    metadata: dict | None = None,
) -> int:
    """Write a stream (or clips, concatenated) to a .cwst file.

    Returns the number of bytes written. If ``metadata`` is given it is
    stored as a JSON sidecar with the same basename.
    """
    stream = data if isinstance(data, CodewordClip) else _concat_clips(data)
    validate_clip(stream)
    blob = _pack_stream(stream)
    path = Path(path)
    try:
        path.write_bytes(blob)
        if metadata is not None:
            sidecar_path(path).write_text(
                json.dumps(metadata, sort_keys=True, indent=1)
            )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return len(blob)


def read_container(path) -> CodewordClip:
    """Read a .cwst file back into a stream, verifying the format exactly."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_container(blob)


def parse_container(blob: bytes) -> CodewordClip:
    if len(blob) < _HEADER.size:
        if blob[:4] != CWST_MAGIC[: min(4, len(blob))]:
            raise FormatError(0, "bad magic")
        raise FormatError(len(blob), "truncated header")
    magic, version, s1, s2, s3, dur, count = _HEADER.unpack_from(blob, 0)
    if magic != CWST_MAGIC:
        raise FormatError(0, "bad magic")
    if version != CWST_VERSION:
        raise VersionMismatch(f"unsupported container version {version}")
    if min(s1, s2, s3) < 1:
        raise FormatError(6, "zero codebook size")
    if dur < 1:
        raise FormatError(12, "zero frame duration")
    expected = _HEADER.size + _FRAME.size * count
    if len(blob) < expected:
        raise FormatError(len(blob), "truncated frame records")
    if len(blob) > expected:
        raise FormatError(expected, "trailing bytes after frame records")
    codes = (
        np.frombuffer(blob, dtype="<u2", count=3 * count, offset=_HEADER.size)
        .reshape(count, 3)
        .T
    )
    clip = CodewordClip(codes, (s1, s2, s3), dur)
    limits = np.array([s1, s2, s3], dtype=np.uint32).reshape(3, 1)
    bad = clip.codes >= limits
    if bad.any():
        frame = int(np.flatnonzero(bad.any(axis=0))[0])
        slot = int(np.flatnonzero(bad[:, frame])[0])
        raise FormatError(
            _HEADER.size + frame * _FRAME.size + slot * 2,
            f"codeword {int(clip.codes[slot, frame])} exceeds codebook size",
        )
    return clip


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def read_sidecar(path) -> dict | None:
    """Load the optional JSON sidecar next to a .cwst file, if present."""
    sc = sidecar_path(path)
    if not sc.exists():
        return None
    try:
        return json.loads(sc.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {sc}: {exc}") from exc
