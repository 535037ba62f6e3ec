"""Evaluation, feature export, and latency benchmarking.

Stego is the positive class: FP counts cover clips flagged as stego, FN
counts stego clips missed. Rates use the confusion-matrix denominators
(FP over all covers, FN over all stegos) and are reported as None when
the denominator is zero rather than coerced to 0.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, EmptySplit, IoError
from .model import CswModel, batch_features, batch_probabilities, predict
from .streams import CodewordClip, read_container


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float
    split: str
    probabilities: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def fp_rate(self) -> float | None:
        denom = self.fp + self.tn
        return self.fp / denom if denom else None

    @property
    def fn_rate(self) -> float | None:
        denom = self.fn + self.tp
        return self.fn / denom if denom else None

    def to_json_dict(self, include_probabilities: bool = True) -> dict:
        out = {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "total": self.total,
            "accuracy": self.accuracy,
            "fp_rate": self.fp_rate,
            "fn_rate": self.fn_rate,
            "threshold": self.threshold,
            "split": self.split,
        }
        if include_probabilities:
            out["probabilities"] = self.probabilities
        return out


def evaluate(
    model: CswModel,
    manifest: DatasetManifest,
    split: str = "test",
    threshold: float | None = None,
    batch_size: int = 256,
) -> EvalReport:
    """Confusion counts and per-clip probabilities over one manifest split."""
    if threshold is None:
        threshold = model.config.threshold
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    entries = manifest.select(split)
    if not entries:
        raise EmptySplit(f"manifest has no {split!r} entries")
    codes = [read_container(manifest.resolve(e)).codes for e in entries]
    probs = batch_probabilities(model, codes, manifest.codebook_sizes, batch_size)

    tp = fp = fn = tn = 0
    prob_rows = []
    for entry, p in zip(entries, probs):
        is_stego = entry.label == "stego"
        flagged = p >= threshold
        if is_stego and flagged:
            tp += 1
        elif is_stego:
            fn += 1
        elif flagged:
            fp += 1
        else:
            tn += 1
        prob_rows.append(
            {"path": entry.path, "label": entry.label, "probability": float(p)}
        )
    return EvalReport(tp, fp, fn, tn, threshold, split, prob_rows)


def export_features(
    model: CswModel,
    manifest: DatasetManifest,
    split: str,
    path,
    batch_size: int = 256,
) -> Path:
    """CSV of fused feature vectors: label, embedding rate, then O columns.

    Rows follow manifest order, so repeated exports are identical files.
    """
    entries = manifest.select(split)
    if not entries:
        raise EmptySplit(f"manifest has no {split!r} entries")
    codes = [read_container(manifest.resolve(e)).codes for e in entries]
    feats = batch_features(model, codes, manifest.codebook_sizes, batch_size)
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["label", "embedding_rate"]
                + [f"o_{i}" for i in range(model.config.fused_dim)]
            )
            for entry, row in zip(entries, feats):
                writer.writerow(
                    [entry.label, repr(entry.embedding_rate)]
                    + [repr(float(v)) for v in row]
                )
    except OSError as exc:
        raise IoError(f"cannot write features to {path}: {exc}") from exc
    return path


@dataclass
class LatencyEntry:
    clip_len_frames: int
    mean_ms: float
    sd_ms: float
    n_samples: int
    samples_ms: list[float] = field(default_factory=list)

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))


@dataclass
class LatencyReport:
    entries: list[LatencyEntry]
    warmup: int
    seed: int

    def mean_ms(self, clip_len: int) -> float:
        for e in self.entries:
            if e.clip_len_frames == clip_len:
                return e.mean_ms
        raise KeyError(f"no latency entry for {clip_len} frames")

    def to_json_dict(self) -> dict:
        return {
            "warmup": self.warmup,
            "seed": self.seed,
            "entries": [
                {
                    "clip_len_frames": e.clip_len_frames,
                    "mean_ms": e.mean_ms,
                    "sd_ms": e.sd_ms,
                    "median_ms": e.median_ms,
                    "n_samples": e.n_samples,
                }
                for e in self.entries
            ],
        }


def bench_latency(
    model: CswModel,
    clip_lengths,
    repetitions: int = 100,
    warmup: int = 10,
    seed: int = 0,
    codebook_sizes=(128, 32, 32),
) -> LatencyReport:
    """Single-clip inference latency per clip length (mean and sd in ms).

    Clips are random index draws (the arithmetic cost does not depend on
    their content); warm-up runs are excluded from the statistics.
    """
    if repetitions < 30:
        raise ConfigError("need at least 30 repetitions for stable statistics")
    rng = np.random.default_rng(seed)
    entries = []
    for n in clip_lengths:
        if n < model.min_clip_frames:
            raise ConfigError(
                f"clip length {n} below model minimum {model.min_clip_frames}"
            )
        clips = []
        for _ in range(warmup + repetitions):
            codes = np.stack(
                [rng.integers(0, s, size=n, dtype=np.uint16) for s in codebook_sizes]
            )
            clips.append(CodewordClip(codes, tuple(codebook_sizes)))
        samples = []
        for i, clip in enumerate(clips):
            t0 = time.perf_counter()
            predict(model, clip)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                samples.append(dt)
        samples = np.array(samples)
        entries.append(
            LatencyEntry(
                int(n),
                float(samples.mean()),
                float(samples.std(ddof=1)),
                len(samples),
                [float(v) for v in samples],
            )
        )
    return LatencyReport(entries, warmup, seed)
