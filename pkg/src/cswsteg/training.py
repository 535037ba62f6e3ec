"""Supervised training of the detector on a dataset manifest.

Mini-batch Adam with dropout and train-mode batch norm. A seeded fraction
of the train split is carved out for validation; the best-validation
parameters are what the caller gets back. Batches always contain clips of
one length (different lengths produce different conv shapes), so mixed
manifests are batched per length group.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, ManifestEntry
from .errors import ConfigError, EmptySplit
from .model import ArchConfig, CswModel, batch_probabilities, build, loss_and_grads
from .nn.optim import AdamState, adam_step
from .streams import read_container


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 256
    dropout_rate: float = 0.5
    l2_lambda: float = 1e-3
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    validation_fraction: float = 0.1
    dtype: str = "float64"  # float32 roughly halves train time at some precision cost

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (train-mode batch norm)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ConfigError("l2 lambda must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation fraction must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    epoch_train_acc: list[float] = field(default_factory=list)
    epoch_val_acc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    n_train: int = 0
    n_val: int = 0

    def to_json_dict(self) -> dict:
        return {
            "step_losses": self.step_losses,
            "epoch_train_acc": self.epoch_train_acc,
            "epoch_val_acc": self.epoch_val_acc,
            "epoch_seconds": self.epoch_seconds,
            "best_epoch": self.best_epoch,
            "n_train": self.n_train,
            "n_val": self.n_val,
        }


def load_entry_codes(manifest: DatasetManifest, entry: ManifestEntry) -> np.ndarray:
    return read_container(manifest.resolve(entry)).codes


def _load_split(manifest: DatasetManifest, entries: list[ManifestEntry]):
    codes = [load_entry_codes(manifest, e) for e in entries]
    labels = np.array([1.0 if e.label == "stego" else 0.0 for e in entries])
    return codes, labels


def _snapshot(model: CswModel):
    params = {n: a.copy() for n, a in model.named_params().items()}
    stats = {
        n: (bn.running_mean.copy(), bn.running_var.copy())
        for n, bn in model.named_batchnorms().items()
    }
    return params, stats


def _restore(model: CswModel, snap):
    params, stats = snap
    for n, a in model.named_params().items():
        a[...] = params[n]
    for n, bn in model.named_batchnorms().items():
        bn.running_mean[...] = stats[n][0]
        bn.running_var[...] = stats[n][1]


def _infer_accuracy(model, codes, labels, sizes, threshold, batch_size) -> float:
    probs = batch_probabilities(model, codes, sizes, batch_size=batch_size)
    return float(((probs >= threshold) == (labels == 1.0)).mean())


def _batch_plan(codes, batch_size, rng) -> list[np.ndarray]:
    """Shuffled same-length batches; sub-2 remainders are dropped
    (train-mode batch norm needs two rows)."""
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(codes):
        by_len.setdefault(c.shape[1], []).append(i)
    batches = []
    for _n, idxs in sorted(by_len.items()):
        idxs = np.array(idxs)
        rng.shuffle(idxs)
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            if len(chunk) >= 2:
                batches.append(chunk)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(
    manifest: DatasetManifest,
    config: ArchConfig,
    hyper: HyperParams,
    log=None,
) -> tuple[CswModel, TrainHistory]:
    """Train a fresh model on the manifest's train split.

    Deterministic for a fixed seed (single-threaded execution). Returns the
    model restored to its best-validation parameters plus the history.
    """
    entries = manifest.select("train")
    if not entries:
        raise EmptySplit("manifest has no train entries")
    labels_present = {e.label for e in entries}
    if labels_present != {"cover", "stego"}:
        raise EmptySplit(f"train split needs both classes, found {labels_present}")

    rng = np.random.default_rng(hyper.seed)

    # per-class validation carve-out keeps both splits balanced
    by_label = {"cover": [], "stego": []}
    for e in entries:
        by_label[e.label].append(e)
    train_entries, val_entries = [], []
    for label in ("cover", "stego"):
        pool = by_label[label]
        order = rng.permutation(len(pool))
        n_val = int(np.floor(hyper.validation_fraction * len(pool)))
        val_entries.extend(pool[i] for i in order[:n_val])
        train_entries.extend(pool[i] for i in order[n_val:])

    codes, labels = _load_split(manifest, train_entries)
    val_codes, val_labels = _load_split(manifest, val_entries)

    model = build(config, seed=hyper.seed, dtype=np.dtype(hyper.dtype))
    params = model.named_params()
    adam = AdamState(learning_rate=hyper.learning_rate)
    threshold = config.threshold

    history = TrainHistory(n_train=len(train_entries), n_val=len(val_entries))
    best_acc = -np.inf
    best_snap = None
    since_best = 0

    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        hits = 0
        seen = 0
        for batch_idx in _batch_plan(codes, hyper.batch_size, rng):
            stacked = np.stack([codes[i] for i in batch_idx])
            xb = model.prepare_batch(stacked, manifest.codebook_sizes)
            tb = labels[batch_idx]
            loss, y, grads = loss_and_grads(
                model, xb, tb,
                lam=hyper.l2_lambda,
                dropout_rate=hyper.dropout_rate,
                rng=rng,
                update_bn=True,
            )
            adam_step(params, grads, adam)
            history.step_losses.append(loss)
            hits += int(((y >= threshold) == (tb == 1.0)).sum())
            seen += len(batch_idx)

        train_acc = hits / max(seen, 1)
        if val_entries:
            val_acc = _infer_accuracy(
                model, val_codes, val_labels, manifest.codebook_sizes,
                threshold, hyper.batch_size,
            )
        else:
            val_acc = train_acc  # no carve-out: select on train accuracy
        history.epoch_train_acc.append(train_acc)
        history.epoch_val_acc.append(val_acc)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if log:
            log(
                f"epoch {epoch + 1}/{hyper.epochs}: "
                f"train acc {train_acc:.4f}, val acc {val_acc:.4f}, "
                f"{history.epoch_seconds[-1]:.1f}s"
            )

        if val_acc > best_acc:
            best_acc = val_acc
            best_snap = _snapshot(model)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                break

    if best_snap is not None:
        _restore(model, best_snap)
    return model, history
