"""Steganalysis toolkit for QIM-embedded low-bit-rate speech codeword streams.

The pipeline, end to end: synthesize correlated cover streams, hide bits
by sub-codebook quantization, train a multi-channel convolutional
sliding-window detector (built on a small gradient-checked numpy kernel),
evaluate it, and run it over live framed streams.
"""

from .codebook import Codebook, CnvPartition, cnv_partition, gen_codebook
from .cover import CoverModel, gen_cover, gen_cover_batch
from .dataset import DatasetConfig, DatasetManifest, build_dataset
from .detect import DetectionEvent, FrameSource, SlidingBuffer, ingest, sliding_detect
from .evaluation import EvalReport, LatencyReport, bench_latency, evaluate, export_features
from .model import (
    ArchConfig,
    CswModel,
    build,
    forward,
    grad_check_model,
    load_model,
    predict,
    save_model,
)
from .qim import EmbedRecord, qim_embed, qim_extract
from .streams import (
    CodewordClip,
    CodewordFrame,
    NormalizedClip,
    normalize,
    read_container,
    slice_clips,
    validate_clip,
    write_container,
)
from .training import HyperParams, TrainHistory, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "Codebook",
    "CnvPartition",
    "CodewordClip",
    "CodewordFrame",
    "CoverModel",
    "CswModel",
    "DatasetConfig",
    "DatasetManifest",
    "DetectionEvent",
    "EmbedRecord",
    "EvalReport",
    "FrameSource",
    "HyperParams",
    "LatencyReport",
    "NormalizedClip",
    "SlidingBuffer",
    "TrainHistory",
    "bench_latency",
    "build",
    "build_dataset",
    "cnv_partition",
    "evaluate",
    "export_features",
    "forward",
    "gen_codebook",
    "gen_cover",
    "gen_cover_batch",
    "grad_check_model",
    "ingest",
    "load_model",
    "normalize",
    "predict",
    "qim_embed",
    "qim_extract",
    "read_container",
    "save_model",
    "slice_clips",
    "sliding_detect",
    "train",
    "validate_clip",
    "write_container",
]
