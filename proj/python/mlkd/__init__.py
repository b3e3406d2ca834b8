# SPDX-License-Identifier: Apache-2.0
"""Multi-level knowledge distillation: losses, evaluation and the CLI driver."""

from ._mlkd import (
    Error,
    cka,
    features,
    gaussian_mi_bound,
    generate,
    knn_classify,
    load_dataset,
    logits,
    loss_ce,
    loss_corr,
    loss_kd,
    loss_sup,
    run_cli,
    top1_accuracy,
)

__all__ = [
    "Error",
    "cka",
    "features",
    "gaussian_mi_bound",
    "generate",
    "knn_classify",
    "load_dataset",
    "logits",
    "loss_ce",
    "loss_corr",
    "loss_kd",
    "loss_sup",
    "run_cli",
    "top1_accuracy",
]
