"""Train-and-score sweep over the architecture variants."""

from __future__ import annotations

from .dataset import DatasetManifest
from .evaluation import evaluate
from .model import ArchConfig, VARIANT_NOTES
from .training import HyperParams, train


def run_ablation(
    manifest: DatasetManifest,
    variants: str | list[str],
    hyper: HyperParams,
    threshold: float | None = None,
    log=None,
) -> list[dict]:
    """Train each variant on the manifest and report its test accuracy.

    Returns one row per variant: letter, description, spliced dimension m,
    parameter count, accuracy, fp/fn rates.
    """
    rows = []
    for letter in variants:
        config = ArchConfig.variant(letter)
        if log:
            log(f"variant {letter} ({VARIANT_NOTES[letter]}): m={config.fused_input_dim}")
        model, history = train(manifest, config, hyper, log=log)
        report = evaluate(model, manifest, "test", threshold)
        rows.append(
            {
                "variant": letter,
                "description": VARIANT_NOTES[letter],
                "spliced_dim": config.fused_input_dim,
                "n_params": model.n_params(),
                "accuracy": report.accuracy,
                "fp_rate": report.fp_rate,
                "fn_rate": report.fn_rate,
                "best_epoch": history.best_epoch,
            }
        )
    return rows
