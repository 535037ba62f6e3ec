"""Real-time sliding-window detection over a framed codeword byte stream.

The wire format is the .cwst layout: the 22-byte header once, then one
3 x u16 little-endian record per frame. A header frame count of zero
means "unbounded" (live sources that cannot know their length up front);
a nonzero count is enforced exactly. Malformed bytes terminate the stream
with a FormatError diagnostic; frames are never silently resynchronized.

Detection runs as the two-stage pipeline the module is specified around:
an ingestion thread assembles windows into a bounded queue (backpressure,
never dropping frames) and the consuming generator runs inference and
yields events in window order.
"""

from __future__ import annotations

import io
import json
import queue
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ClipTooShort, ConfigError, FormatError, IdleTimeout, IoError
from .model import CswModel, predict
from .streams import CWST_MAGIC, CWST_VERSION, CodewordClip

_HEADER = struct.Struct("<4sHHHHHQ")
_FRAME = struct.Struct("<HHH")
_READ_CHUNK_FRAMES = 1024


@dataclass
class StreamHeader:
    codebook_sizes: tuple[int, int, int]
    frame_duration_ms: int
    frame_count: int  # 0 = unbounded


class FrameSource:
    """A framed byte stream plus where it came from.

    ``origin`` is "file", "stdin", "tcp", or "bytes" (tests). The header is
    parsed lazily by ingest(); sockets honor ``idle_timeout`` seconds.
    """

    def __init__(self, stream, origin: str, idle_timeout: float | None = None,
                 _closer=None):
        self.stream = stream
        self.origin = origin
        self.idle_timeout = idle_timeout
        self.header: StreamHeader | None = None
        self._closer = _closer

    @classmethod
    def from_file(cls, path) -> "FrameSource":
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise IoError(f"cannot open {path}: {exc}") from exc
        return cls(fh, "file", _closer=fh.close)

    @classmethod
    def from_stdin(cls) -> "FrameSource":
        return cls(sys.stdin.buffer, "stdin")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FrameSource":
        return cls(io.BytesIO(blob), "bytes")

    @classmethod
    def from_tcp(cls, host: str, port: int, idle_timeout: float | None = 30.0):
        """Listen on host:port, accept one connection, and stream from it."""
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, port))
            listener.listen(1)
            if idle_timeout is not None:
                listener.settimeout(idle_timeout)
            conn, _addr = listener.accept()
        except socket.timeout as exc:
            raise IdleTimeout(f"no connection on {host}:{port}") from exc
        except OSError as exc:
            raise IoError(f"cannot listen on {host}:{port}: {exc}") from exc
        finally:
            listener.close()
        if idle_timeout is not None:
            conn.settimeout(idle_timeout)
        fh = conn.makefile("rb")

        def close():
            fh.close()
            conn.close()

        return cls(fh, "tcp", idle_timeout, _closer=close)

    def close(self):
        if self._closer is not None:
            self._closer()

    def _read(self, n: int) -> bytes:
        """Read exactly n bytes unless EOF arrives first."""
        try:
            chunks = []
            remaining = n
            while remaining > 0:
                chunk = self.stream.read(remaining)
                if not chunk:
                    break
                chunks.append(chunk)
                remaining -= len(chunk)
            return b"".join(chunks)
        except socket.timeout as exc:
            raise IdleTimeout(
                f"no data for {self.idle_timeout}s on {self.origin} source"
            ) from exc
        except OSError as exc:
            raise IoError(f"read failed on {self.origin} source: {exc}") from exc


def ingest(source: FrameSource):
    """Yield (3,) uint16 frames in arrival order, validating as they come.

    Completely empty input ends cleanly with zero frames. A partial header,
    a truncated record, an out-of-range codeword, or a frame-count mismatch
    raises FormatError at the offending byte offset.
    """
    head = source._read(_HEADER.size)
    if len(head) == 0:
        return
    if len(head) < _HEADER.size:
        if head[:4] != CWST_MAGIC[: min(4, len(head))]:
            raise FormatError(0, "bad magic")
        raise FormatError(len(head), "truncated header")
    magic, version, s1, s2, s3, dur, count = _HEADER.unpack(head)
    if magic != CWST_MAGIC:
        raise FormatError(0, "bad magic")
    if version != CWST_VERSION:
        raise FormatError(4, f"unsupported stream version {version}")
    if min(s1, s2, s3) < 1:
        raise FormatError(6, "zero codebook size")
    if dur < 1:
        raise FormatError(12, "zero frame duration")
    source.header = StreamHeader((s1, s2, s3), dur, count)
    limits = np.array([s1, s2, s3], dtype=np.uint16)

    offset = _HEADER.size
    delivered = 0
    while True:
        want = _READ_CHUNK_FRAMES
        if count and count - delivered < want:
            want = count - delivered
        if want == 0:
            # count satisfied: any extra byte is corruption
            extra = source._read(1)
            if extra:
                raise FormatError(offset, "bytes after the declared frame count")
            return
        blob = source._read(want * _FRAME.size)
        if len(blob) % _FRAME.size != 0:
            raise FormatError(offset + len(blob), "truncated frame record")
        got = len(blob) // _FRAME.size
        if got:
            frames = np.frombuffer(blob, dtype="<u2").reshape(got, 3)
            bad = frames >= limits
            if bad.any():
                row = int(np.flatnonzero(bad.any(axis=1))[0])
                col = int(np.flatnonzero(bad[row])[0])
                # deliver the good prefix before failing
                for i in range(row):
                    yield frames[i]
                raise FormatError(
                    offset + row * _FRAME.size + col * 2,
                    f"codeword {int(frames[row, col])} exceeds codebook size",
                )
            for i in range(got):
                yield frames[i]
            delivered += got
            offset += got * _FRAME.size
        if got < want:
            if count and delivered < count:
                raise FormatError(offset, "stream ended before declared frame count")
            return


class SlidingBuffer:
    """Ring of the last W frames; reports when a window is due.

    A window is due exactly when frames_seen >= W and
    (frames_seen - W) % H == 0, i.e. at offsets 0, H, 2H, ...
    """

    def __init__(self, window: int, hop: int):
        if window < 1 or hop < 1:
            raise ConfigError("window and hop must be >= 1")
        self.window = window
        self.hop = hop
        self.frames_seen = 0
        self._ring = np.zeros((3, window), dtype=np.uint16)

    def push(self, frame) -> np.ndarray | None:
        """Add one frame; returns the (3, W) window copy when one is due."""
        pos = self.frames_seen % self.window
        self._ring[:, pos] = frame
        self.frames_seen += 1
        if self.frames_seen < self.window:
            return None
        if (self.frames_seen - self.window) % self.hop != 0:
            return None
        cut = self.frames_seen % self.window
        return np.concatenate((self._ring[:, cut:], self._ring[:, :cut]), axis=1)


@dataclass
class DetectionEvent:
    start: int  # first frame index of the window
    end: int  # one past the last frame index (end - start = W)
    probability: float
    verdict: str
    latency_ms: float
    timestamp: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "start": self.start,
                "end": self.end,
                "p": self.probability,
                "verdict": self.verdict,
                "latency_ms": self.latency_ms,
                "ts": self.timestamp,
            }
        )


_QUEUE_WINDOWS = 4


def sliding_detect(
    source: FrameSource,
    model: CswModel,
    window: int,
    hop: int,
    threshold: float | None = None,
):
    """Yield one DetectionEvent per due window, in window order.

    Ingestion runs on its own thread feeding a bounded queue of at most
    four pending windows; a full queue blocks the reader (backpressure)
    rather than dropping frames. Each event's probability is exactly what
    predict() returns for the identical standalone clip.
    """
    if window < model.min_clip_frames:
        raise ClipTooShort(window, model.min_clip_frames)
    if hop < 1:
        raise ConfigError("hop must be >= 1")

    q: queue.Queue = queue.Queue(maxsize=_QUEUE_WINDOWS)
    stop = threading.Event()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def producer():
        try:
            buf = SlidingBuffer(window, hop)
            for frame in ingest(source):
                win = buf.push(frame)
                if win is not None:
                    if not put(("window", buf.frames_seen - window, win)):
                        return
            put(("end", None, None))
        except BaseException as exc:  # propagate to the consumer
            put(("error", None, exc))

    worker = threading.Thread(target=producer, name="cswsteg-ingest", daemon=True)
    worker.start()
    try:
        while True:
            kind, start, payload = q.get()
            if kind == "end":
                return
            if kind == "error":
                raise payload
            header = source.header
            clip = CodewordClip(
                payload, header.codebook_sizes, header.frame_duration_ms
            )
            t0 = time.perf_counter()
            verdict, prob = predict(model, clip, threshold)
            latency = (time.perf_counter() - t0) * 1e3
            yield DetectionEvent(
                start=start,
                end=start + window,
                probability=prob,
                verdict=verdict,
                latency_ms=latency,
                timestamp=time.time(),
            )
    finally:
        stop.set()
        worker.join(timeout=5.0)
