"""The four training losses and their book-keeping bundle.

All losses are batch means; two-dataset terms average the two batch means
with a 1/2 factor. The pseudo-label loss keeps the full-batch 1/b
normalization so its scale does not jump as confidence grows."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError

COSINE_EPS = 1e-8

COMPONENTS = ("cl_st", "dom_st", "dom_uu", "orth_st", "orth_uu", "pl_u")


@dataclass
class Toggles:
    """Which loss terms participate in the total; mirrors the ablation grid."""
    cl_st: bool = True
    orth_st: bool = True
    dom_st: bool = True
    orth_uu: bool = True
    dom_uu: bool = True
    pl_u: bool = True

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def none(cls):
        return cls(**{f.name: False for f in fields(cls)})


@dataclass
class LossBundle:
    """Scalar values of the six terms for one step. Disabled terms are zero
    and build no graph; total is the sum of the enabled terms."""
    cl_st: float = 0.0
    dom_st: float = 0.0
    dom_uu: float = 0.0
    orth_st: float = 0.0
    orth_uu: float = 0.0
    pl_u: float = 0.0
    total: float = 0.0
    retained_count: int = 0
    batch_size: int = 0

    @property
    def retained_fraction(self):
        return self.retained_count / self.batch_size if self.batch_size else 0.0

    def component_values(self):
        return {name: getattr(self, name) for name in COMPONENTS}


def cross_entropy(probs: T.Tensor, labels) -> T.Tensor:
    """Mean over the batch of -log p[label], on probability rows."""
    picked = T.pick(probs, labels)
    return T.tmean(T.scale(T.log(picked), -1.0))


def classification_loss(probs_source, labels_source, probs_target, labels_target) -> T.Tensor:
    ce_s = cross_entropy(probs_source, labels_source)
    ce_t = cross_entropy(probs_target, labels_target)
    return T.scale(T.add(ce_s, ce_t), 0.5)


def _domain_ce(domain_probs: T.Tensor, domain_index: int) -> T.Tensor:
    labels = np.full(domain_probs.shape[0], domain_index, dtype=np.int64)
    return cross_entropy(domain_probs, labels)


def domain_loss_labelled(z_spe_source, z_spe_target, domain_head) -> T.Tensor:
    """Both labelled batches, each classified toward its true domain."""
    ce_s = _domain_ce(domain_head(z_spe_source), M.SOURCE)
    ce_t = _domain_ce(domain_head(z_spe_target), M.TARGET)
    return T.scale(T.add(ce_s, ce_t), 0.5)


def domain_loss_unlabelled(z_spe_unlabelled, z_spe_augmented, domain_head) -> T.Tensor:
    """Unlabelled samples and their augmentations both carry the target tag."""
    ce_u = _domain_ce(domain_head(z_spe_unlabelled), M.TARGET)
    ce_a = _domain_ce(domain_head(z_spe_augmented), M.TARGET)
    return T.scale(T.add(ce_u, ce_a), 0.5)


def orthogonality(z_invariant: T.Tensor, z_specific: T.Tensor) -> T.Tensor:
    """Batch-mean cosine similarity between the two embedding halves."""
    dots = T.tsum(T.mul(z_invariant, z_specific), axis=1)
    norm_inv = T.sqrt(T.tsum(T.mul(z_invariant, z_invariant), axis=1))
    norm_spe = T.sqrt(T.tsum(T.mul(z_specific, z_specific), axis=1))
    denom = T.shift(T.mul(norm_inv, norm_spe), COSINE_EPS)
    return T.tmean(T.div(dots, denom))


def orthogonality_pair(pair_a, pair_b) -> T.Tensor:
    """Half-sum of the per-batch orthogonality of two embedding pairs."""
    return T.scale(T.add(orthogonality(pair_a.invariant, pair_a.specific),
                         orthogonality(pair_b.invariant, pair_b.specific)), 0.5)


def pseudo_label_mask(probs_unlabelled: np.ndarray, tau: float):
    """Confidence mask (strict > tau) and argmax pseudo-labels."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"confidence threshold must lie in [0,1], got {tau}")
    confidence = probs_unlabelled.max(axis=1)
    labels = probs_unlabelled.argmax(axis=1)
    mask = confidence > tau
    return mask, labels


def pseudo_label_loss(probs_unlabelled, probs_augmented: T.Tensor, tau: float):
    """Consistency loss on augmented views against thresholded pseudo-labels.

    probs_unlabelled must come from a gradient-free forward pass (ndarray or
    detached tensor); gradients flow only through probs_augmented. Returns
    (scalar loss, retained_count). Normalized by the full batch size."""
    if isinstance(probs_unlabelled, T.Tensor):
        if probs_unlabelled.requires_grad:
            raise ContractError("pseudo-label source probabilities must be detached")
        probs_unlabelled = probs_unlabelled.data
    mask, labels = pseudo_label_mask(probs_unlabelled, tau)
    retained = int(mask.sum())
    if retained == 0:
        return T.constant(0.0, dtype=probs_augmented.dtype), 0
    per_sample = T.scale(T.log(T.pick(probs_augmented, labels)), -1.0)
    masked = T.mul(per_sample, T.Tensor(mask.astype(per_sample.dtype)))
    return T.tmean(masked), retained


def total_loss(parts, toggles: Toggles) -> T.Tensor | None:
    """Unweighted sum of the enabled terms. parts maps component name to a
    scalar tensor or None (not computed)."""
    total = None
    for name in COMPONENTS:
        if not getattr(toggles, name):
            continue
        term = parts.get(name)
        if term is None:
            continue
        total = term if total is None else T.add(total, term)
    return total
