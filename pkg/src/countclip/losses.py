"""Contrastive objectives: CLIP loss, counting loss and the 9-way CountPlus loss.

All log-softmax terms go through ``torch.logsumexp``, which subtracts the
running maximum, so the losses stay finite for large logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .frequencies import ClassFrequencyTable
from .lambdas import LambdaScheme, LambdaTable
from .validation import check_counts, check_embeddings, check_same_dim, l2_normalize

VARIANTS = ("count", "count_plus")


@dataclass
class EmbeddingBatch:
    """Embeddings for one training step.

    ``cf_emb`` holds the counterfactual caption embeddings of the counting
    samples only, shaped ``(N, 1, d)`` for the single-counterfactual loss or
    ``(N, 8, d)`` for CountPlus.
    """

    image_emb: torch.Tensor
    text_emb: torch.Tensor
    counting_mask: torch.Tensor
    cf_emb: torch.Tensor
    counts: torch.Tensor

    def __post_init__(self):
        self.image_emb = check_embeddings(self.image_emb, "image_emb")
        self.text_emb = check_embeddings(self.text_emb, "text_emb")
        self.counting_mask = torch.as_tensor(self.counting_mask, dtype=torch.bool)
        self.counts = torch.as_tensor(check_counts(self.counts), dtype=torch.long)
        if self.image_emb.shape != self.text_emb.shape:
            raise ValueError(
                f"image_emb {tuple(self.image_emb.shape)} and text_emb "
                f"{tuple(self.text_emb.shape)} must have the same shape"
            )
        if self.counting_mask.shape != (self.image_emb.shape[0],):
            raise ValueError("counting_mask must have one entry per batch row")
        n = int(self.counting_mask.sum())
        d = self.image_emb.shape[1]
        if n == 0 and (self.cf_emb is None or torch.as_tensor(self.cf_emb).numel() == 0):
            self.cf_emb = self.image_emb.new_zeros((0, 1, d))
        self.cf_emb = check_embeddings(self.cf_emb, "cf_emb", ndim=3)
        if self.cf_emb.shape[0] != n or self.cf_emb.shape[2] != d:
            raise ValueError(
                f"cf_emb must be (N={n}, K, d={d}), got {tuple(self.cf_emb.shape)}"
            )
        if self.counts.shape != (n,):
            raise ValueError(f"expected {n} counts, got {tuple(self.counts.shape)}")

    @property
    def n_counting(self) -> int:
        return int(self.counting_mask.sum())


@dataclass
class LossBreakdown:
    l_clip: torch.Tensor
    l_count: torch.Tensor
    total: torch.Tensor
    per_sample_lambda: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "l_clip": float(self.l_clip.detach()),
            "l_count": float(self.l_count.detach()),
            "total": float(self.total.detach()),
        }


def clip_contrastive_loss(image_emb, text_emb, temperature=1.0, normalize=True) -> torch.Tensor:
    """Symmetric InfoNCE over the ``B x B`` image-text similarity matrix."""
    image_emb = check_embeddings(image_emb, "image_emb")
    text_emb = check_embeddings(text_emb, "text_emb")
    if image_emb.shape != text_emb.shape:
        raise ValueError("image and text embeddings must have the same shape")
    if image_emb.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 pairs in the batch")
    if normalize:
        image_emb, text_emb = l2_normalize(image_emb), l2_normalize(text_emb)
    logits = image_emb @ text_emb.T / temperature
    labels = torch.arange(logits.shape[0], device=logits.device)
    return (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2


def counting_terms(ei: torch.Tensor, et: torch.Tensor, et_cf: torch.Tensor) -> torch.Tensor:
    """Per-sample ``-log softmax`` of the true caption against its counterfactuals.

    ``ei`` and ``et`` are ``(N, d)``; ``et_cf`` is ``(N, K, d)``.
    """
    positive = (ei * et).sum(-1, keepdim=True)
    negatives = torch.bmm(et_cf, ei.unsqueeze(-1)).squeeze(-1)
    logits = torch.cat([positive, negatives], dim=1)
    return torch.logsumexp(logits, dim=1) - positive[:, 0]


def count_loss(ei, et, et_cf) -> torch.Tensor:
    """Two-way counting loss for one sample, on raw dot products."""
    ei = check_embeddings(ei, "ei", ndim=1)
    et = check_embeddings(et, "et", ndim=1)
    et_cf = check_embeddings(et_cf, "et_cf", ndim=1)
    check_same_dim(ei, et, et_cf)
    return counting_terms(ei[None], et[None], et_cf[None, None])[0]


def count_plus_loss(ei, et, et_cf_all) -> torch.Tensor:
    """Nine-way counting loss: the true caption against all 8 other counts."""
    ei = check_embeddings(ei, "ei", ndim=1)
    et = check_embeddings(et, "et", ndim=1)
    et_cf_all = check_embeddings(et_cf_all, "et_cf_all")
    if et_cf_all.shape[0] != 8:
        raise ValueError(f"et_cf_all must have 8 rows, got {et_cf_all.shape[0]}")
    check_same_dim(ei, et, et_cf_all)
    return counting_terms(ei[None], et[None], et_cf_all[None])[0]


def _lambda_table(scheme, table) -> LambdaTable:
    if isinstance(scheme, LambdaTable):
        return scheme
    if isinstance(scheme, str):
        scheme = LambdaScheme(scheme)
    if table is None:
        if scheme.kind != "constant":
            raise ValueError(f"scheme {scheme.kind!r} needs a class frequency table")
        table = ClassFrequencyTable({2: 1})
    return LambdaTable.build(scheme, table)


def combined_loss(
    batch: EmbeddingBatch,
    scheme: LambdaScheme | LambdaTable | str = "constant",
    table: ClassFrequencyTable | None = None,
    variant: str = "count",
    temperature=1.0,
    normalize: bool = True,
) -> LossBreakdown:
    """``L_clip + mean_k(lambda_k * counting_term_k)``.

    Counterfactual embeddings only enter the counting term, never the
    negatives of the CLIP loss. ``scheme`` may be a precomputed
    :class:`LambdaTable`, in which case ``table`` is ignored.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")
    image_emb, text_emb = batch.image_emb, batch.text_emb
    if normalize:
        image_emb, text_emb = l2_normalize(image_emb), l2_normalize(text_emb)
    l_clip = clip_contrastive_loss(image_emb, text_emb, temperature, normalize=False)

    n = batch.n_counting
    if n == 0:
        zero = l_clip.new_zeros(())
        return LossBreakdown(l_clip, zero, l_clip, l_clip.new_zeros((0,)))

    expected_k = 8 if variant == "count_plus" else 1
    if batch.cf_emb.shape[1] != expected_k:
        raise ValueError(
            f"variant {variant!r} needs {expected_k} counterfactual(s) per sample, "
            f"got {batch.cf_emb.shape[1]}"
        )
    ei = image_emb[batch.counting_mask]
    et = text_emb[batch.counting_mask]
    cf = l2_normalize(batch.cf_emb) if normalize else batch.cf_emb
    terms = counting_terms(ei, et, cf)
    lambdas = torch.as_tensor(
        _lambda_table(scheme, table).lookup(batch.counts.tolist()), dtype=terms.dtype
    )
    l_count = (lambdas * terms).mean()
    return LossBreakdown(l_clip, l_count, l_clip + l_count, lambdas)
