"""Training objectives for the three-stage pipeline.

Covers the bidirectional image-to-text / text-to-image contrastive pair used
by stages 1 and 2, the full-identity text cross-entropy pair, the identity
classification loss, and the softmax-weighted soft-margin triplet loss used
by stage 3.

All functions are pure: tensors in, scalar tensor out, no hidden state.
Cosine-based losses expect row-wise L2-normalized features (the encoders
guarantee this); ``wrt_loss`` deliberately runs on unnormalized features with
plain Euclidean distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ValidationError


@dataclass(frozen=True)
class HsaWeights:
    """Balance weights for the two text cross-entropy terms in stage 3."""

    lambda1: float = 0.05
    lambda2: float = 0.05

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"HsaWeights.{name} must be finite and >= 0, got {v!r}")


@dataclass
class Stage3Batch:
    """One cross-modal training batch for stage 3.

    The normalized copies feed the cosine-based text losses; the raw
    (unnormalized) shared-encoder outputs feed the triplet distances.
    """

    visible_feats: Tensor
    infrared_feats: Tensor
    visible_raw: Tensor
    infrared_raw: Tensor
    visible_labels: Tensor
    infrared_labels: Tensor

    def __post_init__(self):
        n_v = self.visible_feats.shape[0]
        n_r = self.infrared_feats.shape[0]
        if n_v != n_r:
            raise ValidationError(f"stage-3 batch must have n_v == n_r, got {n_v} vs {n_r}")
        if self.visible_raw.shape[0] != n_v or self.infrared_raw.shape[0] != n_r:
            raise ValidationError("raw feature count does not match normalized feature count")
        if len(self.visible_labels) != n_v or len(self.infrared_labels) != n_r:
            raise ValidationError("label count does not match feature count")

    @property
    def pooled_raw(self) -> Tensor:
        return torch.cat([self.visible_raw, self.infrared_raw], dim=0)

    @property
    def pooled_labels(self) -> Tensor:
        return torch.cat([self.visible_labels, self.infrared_labels], dim=0)


def _as_labels(labels, n: int) -> Tensor:
    out = torch.as_tensor(labels, dtype=torch.long)
    if out.ndim != 1 or out.shape[0] != n:
        raise ValidationError(f"expected {n} labels, got shape {tuple(out.shape)}")
    return out


def _check_nonempty(feats: Tensor, what: str) -> None:
    if feats.ndim != 2:
        raise ValidationError(f"{what} must be a 2-D (batch, dim) tensor, got shape {tuple(feats.shape)}")
    if feats.shape[0] == 0:
        raise ValidationError(f"empty batch: {what} has no rows")


def similarity(a, b, scale=0.0) -> Tensor:
    """Scaled cosine similarity exp(scale) * cos(a, b) of two vectors."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if not a.is_floating_point():
        a = a.to(torch.get_default_dtype())
    if not b.is_floating_point():
        b = b.to(torch.get_default_dtype())
    if a.detach().norm() == 0 or b.detach().norm() == 0:
        raise ValidationError("similarity is undefined for zero-norm vectors")
    return math.exp(float(scale)) * (a * b).sum() / (a.norm() * b.norm())


def scaled_cosine_matrix(x: Tensor, y: Tensor, scale=0.0) -> Tensor:
    """Pairwise exp(scale) * cos between rows of x and rows of y."""
    _check_nonempty(x, "left features")
    _check_nonempty(y, "right features")
    if x.shape[1] != y.shape[1]:
        raise ValidationError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    xn = x.norm(dim=1, keepdim=True)
    yn = y.norm(dim=1, keepdim=True)
    if (xn.detach() == 0).any() or (yn.detach() == 0).any():
        raise ValidationError("similarity is undefined for zero-norm vectors")
    return math.exp(float(scale)) * (x / xn) @ (y / yn).t()


def _first_occurrence_mask(labels: Tensor) -> Tensor:
    """Boolean mask keeping the first batch element of each identity."""
    seen = {}
    keep = torch.zeros(len(labels), dtype=torch.bool)
    for i, y in enumerate(labels.tolist()):
        if y not in seen:
            seen[y] = i
            keep[i] = True
    return keep


def contrastive_i2t(image_feats: Tensor, text_feats: Tensor, labels, scale=0.0,
                    unique_identities: bool = False) -> Tensor:
    """Image-to-text contrastive loss over one batch.

    ``text_feats`` holds one text feature per batch element (row k is the
    prompt feature of sample k's identity). The softmax denominator runs over
    the batch's text rows; duplicated identities keep their duplicate rows
    unless ``unique_identities`` collapses the denominator to one text row
    per identity (ablation switch).
    """
    _check_nonempty(image_feats, "image features")
    n = image_feats.shape[0]
    if text_feats.shape[0] != n:
        raise ValidationError(f"need one text feature per image, got {text_feats.shape[0]} for {n}")
    labels = _as_labels(labels, n)
    sim = scaled_cosine_matrix(image_feats, text_feats, scale)
    if unique_identities:
        keep = _first_occurrence_mask(labels)
        first = {int(y): j for j, y in enumerate(labels[keep].tolist())}
        pos = torch.tensor([first[int(y)] for y in labels.tolist()])
        logp = sim[:, keep].log_softmax(dim=1)
        return -logp[torch.arange(n), pos].mean()
    logp = sim.log_softmax(dim=1)
    return -logp.diagonal().mean()


def contrastive_t2i(image_feats: Tensor, text_feats: Tensor, labels, scale=0.0) -> Tensor:
    """Text-to-image contrastive loss over one batch.

    For each element k the inner sum averages the log-probability of every
    positive image of identity y_k under a softmax over the batch's images
    against that identity's text feature.
    """
    _check_nonempty(image_feats, "image features")
    n = image_feats.shape[0]
    if text_feats.shape[0] != n:
        raise ValidationError(f"need one text feature per image, got {text_feats.shape[0]} for {n}")
    labels = _as_labels(labels, n)
    sim = scaled_cosine_matrix(image_feats, text_feats, scale)
    # logp[p, k] = log softmax over images p of s(f_p, t_k)
    logp = sim.log_softmax(dim=0)
    same = labels.unsqueeze(1) == labels.unsqueeze(0)
    counts = same.sum(dim=0)
    inner = (logp * same).sum(dim=0) / counts
    return -inner.mean()


def stage1_loss(image_feats: Tensor, text_feats: Tensor, labels, scale=0.0,
                unique_identities: bool = False) -> Tensor:
    """Stage-1 total: image-to-text plus text-to-image on visible features."""
    return (contrastive_i2t(image_feats, text_feats, labels, scale, unique_identities)
            + contrastive_t2i(image_feats, text_feats, labels, scale))


def stage2_loss(infrared_feats: Tensor, text_feats: Tensor, labels, scale=0.0,
                unique_identities: bool = False) -> Tensor:
    """Stage-2 total: same bidirectional pair on infrared features against
    the cached stage-1 text features."""
    return (contrastive_i2t(infrared_feats, text_feats, labels, scale, unique_identities)
            + contrastive_t2i(infrared_feats, text_feats, labels, scale))


def ce_i2t(image_feats: Tensor, all_text_feats: Tensor, labels, scale=0.0,
           num_identities: int | None = None) -> Tensor:
    """Cross entropy of each image against the text features of all N
    identities (softmax denominator over the full identity set)."""
    _check_nonempty(image_feats, "image features")
    _check_nonempty(all_text_feats, "text features")
    if num_identities is not None and all_text_feats.shape[0] != num_identities:
        raise ValidationError(
            f"text feature table has {all_text_feats.shape[0]} rows, expected {num_identities}")
    n = image_feats.shape[0]
    labels = _as_labels(labels, n)
    if labels.min() < 0 or labels.max() >= all_text_feats.shape[0]:
        raise ValidationError("label outside the text feature table")
    sim = scaled_cosine_matrix(image_feats, all_text_feats, scale)
    logp = sim.log_softmax(dim=1)
    return -logp[torch.arange(n), labels].mean()


def id_loss(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Identity classification loss: mean negative log-softmax of the true
    class. One-hot targets by default; optional label smoothing."""
    _check_nonempty(logits, "logits")
    n, num_classes = logits.shape
    labels = _as_labels(labels, n)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(f"label outside [0, {num_classes}) in id loss")
    logp = logits.log_softmax(dim=1)
    nll = -logp[torch.arange(n), labels]
    if smoothing > 0.0:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(dim=1)
    return nll.mean()


def pairwise_euclidean(feats: Tensor) -> Tensor:
    """All-pairs Euclidean distance matrix, numerically clamped."""
    sq = (feats * feats).sum(dim=1)
    d2 = sq.unsqueeze(1) + sq.unsqueeze(0) - 2.0 * feats @ feats.t()
    return d2.clamp(min=1e-12).sqrt()


def wrt_loss(feats: Tensor, labels) -> Tensor:
    """Softmax-weighted soft-margin triplet loss.

    Per anchor, positives (same identity, excluding self) are weighted by
    exp(+d) and negatives by exp(-d); the soft margin compares the weighted
    positive distance sum against the weighted negative sum.
    """
    _check_nonempty(feats, "features")
    n = feats.shape[0]
    labels = _as_labels(labels, n)
    same = labels.unsqueeze(1) == labels.unsqueeze(0)
    eye = torch.eye(n, dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    missing_pos = (~pos_mask.any(dim=1)).nonzero().flatten().tolist()
    if missing_pos:
        raise ValidationError(f"anchors without a positive pair: {missing_pos}")
    missing_neg = (~neg_mask.any(dim=1)).nonzero().flatten().tolist()
    if missing_neg:
        raise ValidationError(f"anchors without a negative pair: {missing_neg}")
    dist = pairwise_euclidean(feats)
    neg_inf = torch.finfo(dist.dtype).min
    w_pos = torch.where(pos_mask, dist, torch.full_like(dist, neg_inf)).softmax(dim=1)
    w_neg = torch.where(neg_mask, -dist, torch.full_like(dist, neg_inf)).softmax(dim=1)
    pos_term = (w_pos * dist * pos_mask).sum(dim=1)
    neg_term = (w_neg * dist * neg_mask).sum(dim=1)
    return torch.nn.functional.softplus(pos_term - neg_term).mean()


def hsa_loss_terms(batch: Stage3Batch, all_text_feats: Tensor, logits_v: Tensor,
                   logits_r: Tensor, weights: HsaWeights, scale=0.0,
                   num_identities: int | None = None) -> dict:
    """Individual stage-3 terms, keyed for logging."""
    pooled_labels = batch.pooled_labels
    return {
        "ce_v2t": ce_i2t(batch.visible_feats, all_text_feats, batch.visible_labels,
                         scale, num_identities),
        "ce_r2t": ce_i2t(batch.infrared_feats, all_text_feats, batch.infrared_labels,
                         scale, num_identities),
        "id": id_loss(torch.cat([logits_v, logits_r], dim=0), pooled_labels),
        "wrt": wrt_loss(batch.pooled_raw, pooled_labels),
    }


def hsa_loss(batch: Stage3Batch, all_text_feats: Tensor, logits_v: Tensor,
             logits_r: Tensor, weights: HsaWeights, scale=0.0,
             num_identities: int | None = None) -> Tensor:
    """Stage-3 total: lambda1 * ce_v2t + lambda2 * ce_r2t + id + wrt."""
    terms = hsa_loss_terms(batch, all_text_feats, logits_v, logits_r, weights,
                           scale, num_identities)
    return (weights.lambda1 * terms["ce_v2t"] + weights.lambda2 * terms["ce_r2t"]
            + terms["id"] + terms["wrt"])
