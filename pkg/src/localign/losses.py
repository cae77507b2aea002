"""Contrastive objectives: global InfoNCE plus similarity-supervised local loss.

The global objective contrasts pooled image/text embeddings across the batch
in both directions.  The local objective supervises the similarity structure
between projected positions and their cross-attended counterparts with a
target distribution derived from the *pre-projection* intra-modal
similarities, so that the projected space keeps the locality structure each
modality already had.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import torch
from torch import Tensor

from .embeddings import (
    Axis,
    ContractViolation,
    GlobalEmbedding,
    LocalEmbeddings,
    ProbabilityMap,
    masked_softmax,
    pairwise_similarity,
    unit_rows,
)

__all__ = [
    "LOG_EPS",
    "LossBundle",
    "LossConfig",
    "Reduction",
    "global_contrastive_loss",
    "global_loss_from_similarity",
    "intra_modal_target",
    "local_contrastive_loss",
    "total_loss",
]

# Guard inside every log so exact-zero probabilities stay finite.
LOG_EPS = 1e-12


class Reduction(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class LossConfig:
    """Temperatures, weights and switches for the combined objective.

    ``lambdas`` weights, in order: global image-given-text, global
    text-given-image, local image, local text.
    """

    tau_global: float = 0.3
    tau_local_source: float = 0.3
    tau_local_target: float = 0.1
    lambdas: Tuple[float, float, float, float] = (0.25, 0.75, 0.375, 0.375)
    target_gradient_blocked: bool = True
    reduction: Reduction = Reduction.SUM
    mask_self_similarity_diagonal: bool = False

    def validate(self) -> None:
        for name in ("tau_global", "tau_local_source", "tau_local_target"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if len(self.lambdas) != 4:
            raise ContractViolation("lambdas must have exactly four entries")
        if any(l < 0 for l in self.lambdas):
            raise ContractViolation("lambdas must be non-negative")
        if not isinstance(self.reduction, Reduction):
            raise ContractViolation("reduction must be a Reduction enum value")


@dataclass(eq=False)
class LossBundle:
    """All loss components for one batch (0-dim tensors, autograd-ready)."""

    global_image_given_text: Tensor
    global_text_given_image: Tensor
    local_image: Tensor
    local_text: Tensor
    total: Tensor
    batch_size: int

    def components(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        return (
            self.global_image_given_text,
            self.global_text_given_image,
            self.local_image,
            self.local_text,
        )

    def validate(self) -> None:
        for name in (
            "global_image_given_text",
            "global_text_given_image",
            "local_image",
            "local_text",
            "total",
        ):
            value = getattr(self, name)
            if not bool(torch.isfinite(value.detach())):
                raise ContractViolation(f"loss component {name} is non-finite")
        if float(self.global_image_given_text) < 0 or float(self.global_text_given_image) < 0:
            raise ContractViolation("global loss components must be non-negative")
        if self.batch_size < 1:
            raise ContractViolation("batch size must be at least 1")

    def as_floats(self) -> Tuple[float, float, float, float, float]:
        return (
            float(self.global_image_given_text.detach()),
            float(self.global_text_given_image.detach()),
            float(self.local_image.detach()),
            float(self.local_text.detach()),
            float(self.total.detach()),
        )


def global_loss_from_similarity(similarities: Tensor, tau: float) -> Tuple[Tensor, Tensor]:
    """Both directional InfoNCE losses from a [batch, batch] similarity matrix.

    Row ``i`` of the matrix holds the similarities of image ``i`` against every
    text.  The image-given-text direction normalizes over each row, the
    text-given-image direction over each column; both use the diagonal as the
    positive and are averaged over the batch.  A 1x1 matrix yields exactly 0.
    """
    if similarities.ndim != 2 or similarities.shape[0] != similarities.shape[1]:
        raise ContractViolation("global similarities must be a square matrix")
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    if not bool(torch.isfinite(similarities.detach()).all()):
        raise ContractViolation("global similarities contain non-finite values")
    logits = similarities / tau
    diag = logits.diagonal()
    image_given_text = (torch.logsumexp(logits, dim=1) - diag).mean()
    text_given_image = (torch.logsumexp(logits, dim=0) - diag).mean()
    return image_given_text, text_given_image


def _stack_globals(
    embeddings: Union[Tensor, Sequence[GlobalEmbedding]],
) -> Tensor:
    if isinstance(embeddings, Tensor):
        if embeddings.ndim != 2:
            raise ContractViolation("global embeddings tensor must be [batch, dim]")
        return embeddings
    return torch.stack([e.vector for e in embeddings])


def global_contrastive_loss(
    image_globals: Union[Tensor, Sequence[GlobalEmbedding]],
    text_globals: Union[Tensor, Sequence[GlobalEmbedding]],
    tau: float,
) -> Tuple[Tensor, Tensor]:
    """Directional InfoNCE over matched image/text global embeddings."""
    img = _stack_globals(image_globals)
    txt = _stack_globals(text_globals)
    if img.shape[0] != txt.shape[0]:
        raise ContractViolation(
            f"batch mismatch: {img.shape[0]} images vs {txt.shape[0]} texts"
        )
    if img.shape[0] < 1:
        raise ContractViolation("global loss needs at least one pair")
    if img.shape[1] != txt.shape[1]:
        raise ContractViolation(
            f"dimension mismatch: {img.shape[1]} vs {txt.shape[1]}"
        )
    sims = (unit_rows(img) @ unit_rows(txt).T).clamp(-1.0, 1.0)
    return global_loss_from_similarity(sims, tau)


def _pair_validity(mask: Tensor, mask_diagonal: bool) -> Tensor:
    valid = mask[:, None] & mask[None, :]
    if mask_diagonal:
        valid = valid & ~torch.eye(mask.shape[0], dtype=torch.bool, device=mask.device)
    return valid


def intra_modal_target(
    raw_locals: LocalEmbeddings,
    tau: float,
    *,
    gradient_blocked: bool = True,
    mask_diagonal: bool = False,
) -> Tuple[ProbabilityMap, ProbabilityMap]:
    """Row- and column-normalized targets from pre-projection similarities.

    The distributions are softmaxes of the intra-modal cosine similarities at
    temperature ``tau``.  With ``gradient_blocked`` (the default) the target
    is detached so no gradient flows back through it.
    """
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    vectors = raw_locals.vectors.detach() if gradient_blocked else raw_locals.vectors
    source = raw_locals.with_vectors(vectors)
    sims = pairwise_similarity(source, source)
    valid = _pair_validity(raw_locals.validity_mask, mask_diagonal)
    row = masked_softmax(sims.values / tau, valid, dim=1)
    col = masked_softmax(sims.values / tau, valid, dim=0)
    return (
        ProbabilityMap(values=row, axis=Axis.ROW, temperature=tau),
        ProbabilityMap(values=col, axis=Axis.COL, temperature=tau),
    )


def local_contrastive_loss(
    projected: LocalEmbeddings,
    cross_attended: LocalEmbeddings,
    target_row: ProbabilityMap,
    target_col: ProbabilityMap,
    config: LossConfig,
) -> Tensor:
    """Cross-entropy between target distributions and source distributions.

    The source distributions are softmaxes (temperature
    ``config.tau_local_source``) of the similarities between the projected
    positions and their cross-attended counterparts, normalized along rows
    and columns respectively.  Masked pairs contribute exactly zero.  SUM
    reduction returns the raw double sum; MEAN divides it by the number of
    valid pairs.
    """
    config.validate()
    n = projected.count
    if cross_attended.count != n:
        raise ContractViolation(
            f"position mismatch: {n} projected vs {cross_attended.count} cross-attended"
        )
    if target_row.values.shape != (n, n) or target_col.values.shape != (n, n):
        raise ContractViolation("target maps must be [positions, positions]")
    if not bool(torch.equal(projected.validity_mask, cross_attended.validity_mask)):
        raise ContractViolation("projected and cross-attended masks must agree")
    sims = pairwise_similarity(projected, cross_attended)
    valid = _pair_validity(projected.validity_mask, config.mask_self_similarity_diagonal)
    logits = sims.values / config.tau_local_source
    source_row = masked_softmax(logits, valid, dim=1)
    source_col = masked_softmax(logits, valid, dim=0)
    cross_entropy = -(
        (target_row.values * torch.log(source_row + LOG_EPS)).sum()
        + (target_col.values * torch.log(source_col + LOG_EPS)).sum()
    )
    if config.reduction is Reduction.MEAN:
        pairs = valid.sum()
        if int(pairs) == 0:
            raise ContractViolation("no valid pairs for the local loss")
        cross_entropy = cross_entropy / pairs.to(cross_entropy.dtype)
    return cross_entropy


def total_loss(
    components: Sequence[Union[Tensor, float]],
    lambdas: Sequence[float],
) -> Tensor:
    """Fixed-order weighted sum of the four loss components.

    Computed as ``l1*c1 + l2*c2 + l3*c3 + l4*c4`` in exactly that association
    so the combination is bit-reproducible.
    """
    if len(components) != 4 or len(lambdas) != 4:
        raise ContractViolation("total loss takes exactly four components and four weights")
    terms = []
    for c in components:
        t = c if isinstance(c, Tensor) else torch.tensor(float(c))
        if not bool(torch.isfinite(t.detach())):
            raise ContractViolation("loss components must be finite")
        terms.append(t)
    return (
        lambdas[0] * terms[0]
        + lambdas[1] * terms[1]
        + lambdas[2] * terms[2]
        + lambdas[3] * terms[3]
    )
