"""Labeled cover/stego dataset construction and the manifest that indexes it.

A dataset is a directory of .cwst clip files plus ``manifest.json``. Every
(clip length, embedding rate) combination gets ``n_per_class`` fresh cover
clips and ``n_per_class`` stego clips embedded into separate fresh covers,
split 80/20 into train/test per class, so both splits stay 1:1 balanced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .codebook import Codebook, CnvPartition, cnv_partition, gen_codebook
from .cover import CoverModel, gen_cover_batch
from .errors import ConfigError, IoError
from .qim import qim_embed
from .streams import CodewordClip, write_container

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
_SEED_PURPOSES = ("codebook", "model", "cover", "embed", "message", "split")


def resolve_seeds(seeds: dict | None) -> dict[str, int]:
    """Fill in per-purpose seeds, deriving missing ones from ``master``."""
    seeds = dict(seeds or {})
    master = int(seeds.get("master", 0))
    rng = np.random.default_rng(master)
    derived = rng.integers(0, 2**63, size=len(_SEED_PURPOSES))
    resolved = {"master": master}
    for purpose, auto in zip(_SEED_PURPOSES, derived):
        resolved[purpose] = int(seeds.get(purpose, auto))
    return resolved


@dataclass(frozen=True)
class DatasetConfig:
    clip_lengths_frames: tuple[int, ...] = (1000,)
    embedding_rates: tuple[float, ...] = (1.0,)
    n_per_class: int = 100
    alpha: float = 0.1
    out_dir: str = "dataset"
    codebook_sizes: tuple[int, int, int] = (128, 32, 32)
    codebook_dim: int = 3
    frame_duration_ms: int = 10
    train_fraction: float = 0.8
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "clip_lengths_frames", tuple(int(v) for v in self.clip_lengths_frames)
        )
        object.__setattr__(
            self, "embedding_rates", tuple(float(v) for v in self.embedding_rates)
        )
        object.__setattr__(
            self, "codebook_sizes", tuple(int(v) for v in self.codebook_sizes)
        )
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if not self.clip_lengths_frames or min(self.clip_lengths_frames) < 1:
            raise ConfigError("clip lengths must be positive")
        if not self.embedding_rates or not all(
            0.0 <= r <= 1.0 for r in self.embedding_rates
        ):
            raise ConfigError("embedding rates must lie in [0, 1]")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")

    @classmethod
    def from_json(cls, path) -> "DatasetConfig":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest file
    label: str  # "cover" | "stego"
    embedding_rate: float
    clip_len_frames: int
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    """Index of every generated clip plus the parameters that produced them."""

    entries: list[ManifestEntry]
    alpha: float
    codebook_sizes: tuple[int, int, int]
    codebook_dim: int
    frame_duration_ms: int
    train_fraction: float
    seeds: dict[str, int]
    base_dir: Path | None = None

    def select(self, split: str | None = None, label: str | None = None):
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if label is not None:
            out = [e for e in out if e.label == label]
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        base = self.base_dir if self.base_dir is not None else Path(".")
        return base / entry.path

    def to_json_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "alpha": self.alpha,
            "codebook_sizes": list(self.codebook_sizes),
            "codebook_dim": self.codebook_dim,
            "frame_duration_ms": self.frame_duration_ms,
            "train_fraction": self.train_fraction,
            "seeds": self.seeds,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))
        except OSError as exc:
            raise IoError(f"cannot write manifest {path}: {exc}") from exc
        self.base_dir = path.parent
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        return cls(
            entries=entries,
            alpha=raw["alpha"],
            codebook_sizes=tuple(raw["codebook_sizes"]),
            codebook_dim=raw["codebook_dim"],
            frame_duration_ms=raw["frame_duration_ms"],
            train_fraction=raw["train_fraction"],
            seeds=raw["seeds"],
            base_dir=path.parent,
        )

    def codebooks(self) -> list[Codebook]:
        seed = self.seeds["codebook"]
        return [
            gen_codebook(size, self.codebook_dim, seed=[seed, slot], slot=slot)
            for slot, size in enumerate(self.codebook_sizes, start=1)
        ]

    def partitions(self) -> list[CnvPartition]:
        return [cnv_partition(cb) for cb in self.codebooks()]

    def cover_model(self) -> CoverModel:
        return CoverModel.random(self.codebook_sizes, self.alpha, self.seeds["model"])


def _split_assignments(n: int, train_fraction: float, rng) -> np.ndarray:
    """Boolean mask: True = train. Random choice of floor(fraction * n)."""
    n_train = int(np.floor(train_fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_train]] = True
    return mask


def build_dataset(config: DatasetConfig) -> DatasetManifest:
    """Generate all clips and write them plus the manifest under ``out_dir``.

    Deterministic: one config produces byte-identical files and manifest
    on every run.
    """
    seeds = resolve_seeds(config.seeds)
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc

    model = CoverModel.random(config.codebook_sizes, config.alpha, seeds["model"])
    codebooks = [
        gen_codebook(size, config.codebook_dim, seed=[seeds["codebook"], slot], slot=slot)
        for slot, size in enumerate(config.codebook_sizes, start=1)
    ]
    partitions = [cnv_partition(cb) for cb in codebooks]

    cover_rng = np.random.default_rng(seeds["cover"])
    embed_rng = np.random.default_rng(seeds["embed"])
    message_rng = np.random.default_rng(seeds["message"])
    split_rng = np.random.default_rng(seeds["split"])

    generator_meta = {
        "alpha": config.alpha,
        "model_seed": seeds["model"],
        "codebook_seed": seeds["codebook"],
        "codebook_sizes": list(config.codebook_sizes),
        "codebook_dim": config.codebook_dim,
    }

    entries: list[ManifestEntry] = []
    n = config.n_per_class
    for length in config.clip_lengths_frames:
        for rate in config.embedding_rates:
            tag = f"L{length}_r{rate * 100:g}"
            cover_batch_seed = int(cover_rng.integers(0, 2**63))
            base_batch_seed = int(cover_rng.integers(0, 2**63))
            covers = gen_cover_batch(model, length, n, cover_batch_seed)
            bases = gen_cover_batch(model, length, n, base_batch_seed)
            split_cover = _split_assignments(n, config.train_fraction, split_rng)
            split_stego = _split_assignments(n, config.train_fraction, split_rng)

            for i in range(n):
                clip = CodewordClip(
                    covers[i], config.codebook_sizes, config.frame_duration_ms
                )
                name = f"{tag}_cover_{i:05d}.cwst"
                write_container(
                    clip,
                    out_dir / name,
                    metadata={
                        "label": "cover",
                        "embedding_rate": 0.0,
                        "clip_len_frames": length,
                        "batch_seed": cover_batch_seed,
                        "batch_index": i,
                        "generator": generator_meta,
                    },
                )
                entries.append(
                    ManifestEntry(
                        name, "cover", 0.0, length,
                        "train" if split_cover[i] else "test",
                    )
                )

            for i in range(n):
                base = CodewordClip(
                    bases[i], config.codebook_sizes, config.frame_duration_ms
                )
                embed_seed = int(embed_rng.integers(0, 2**63))
                message_seed = int(message_rng.integers(0, 2**63))
                bits = np.random.default_rng(message_seed).integers(
                    0, 2, size=3 * length, dtype=np.uint8
                )
                record = qim_embed(base, bits, rate, partitions, seed=embed_seed)
                name = f"{tag}_stego_{i:05d}.cwst"
                write_container(
                    record.stego,
                    out_dir / name,
                    metadata={
                        "label": "stego",
                        "embedding_rate": rate,
                        "clip_len_frames": length,
                        "batch_seed": base_batch_seed,
                        "batch_index": i,
                        "embed_seed": embed_seed,
                        "message_seed": message_seed,
                        "generator": generator_meta,
                    },
                )
                entries.append(
                    ManifestEntry(
                        name, "stego", rate, length,
                        "train" if split_stego[i] else "test",
                    )
                )

    manifest = DatasetManifest(
        entries=entries,
        alpha=config.alpha,
        codebook_sizes=config.codebook_sizes,
        codebook_dim=config.codebook_dim,
        frame_duration_ms=config.frame_duration_ms,
        train_fraction=config.train_fraction,
        seeds=seeds,
    )
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest
