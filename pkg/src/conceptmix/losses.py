"""Training objectives: concept discrimination, episodic classification.

The concept discrimination term treats a sample's C concept activations
as C "positives" of an InfoNCE-style objective at temperature kappa:

    L_CD = -(1/C) sum_i log( exp(A_i/kappa) / sum_k exp(A_k/kappa) )

computed through log-softmax (log-sum-exp stabilized). It is minimized,
at value ln C, exactly when all activations are equal, and is invariant
to adding a constant to every activation. Classification is mean
cross-entropy over scaled cosine similarities; raw cosines live in
[-1, 1], so a logit scale keeps the softmax from being near-uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

POOLED_PER_IMAGE = "pooled-per-image"
PER_PATCH_MEAN = "per-patch-mean"


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 0.07
    lambda_cd: float = 0.001
    logit_scale: float = 10.0
    cd_input: str = POOLED_PER_IMAGE

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        if self.lambda_cd < 0:
            raise ValueError("lambda_cd must be nonnegative")
        if self.cd_input not in (POOLED_PER_IMAGE, PER_PATCH_MEAN):
            raise ValueError(f"unknown cd_input {self.cd_input!r}")


def default_lambda(k_shot: int) -> float:
    """Published loss weight: 0.003 for 1-shot tasks, 0.001 otherwise."""
    return 0.003 if k_shot == 1 else 0.001


def concept_discrimination_loss(activations: ad.Tensor, kappa: float) -> ad.Tensor:
    """Mean over samples of the concept-axis discrimination objective.

    ``activations`` is (..., C); the loss for each length-C vector is the
    negative mean of its log-softmax at temperature kappa.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    logp = ad.log_softmax(activations * (1.0 / kappa), axis=-1)
    return -logp.mean()


def classification_loss(similarity: ad.Tensor, labels: np.ndarray,
                        logit_scale: float) -> ad.Tensor:
    """Mean cross-entropy of softmax(scale * M) against integer labels."""
    labels = np.asarray(labels)
    n_classes = similarity.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logp = ad.log_softmax(similarity * float(logit_scale), axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()


def total_loss(l_cls: ad.Tensor, l_cd: ad.Tensor, lambda_cd: float) -> ad.Tensor:
    return l_cls + float(lambda_cd) * l_cd
