"""Embedding containers and the similarity/attention primitives built on them.

Everything downstream (losses, pooling, cross-modal mixing, grounding maps) is
expressed in terms of the small set of operations in this module, so their
contracts are deliberately strict: dimension mismatches raise
:class:`ContractViolation` instead of broadcasting, masked positions are exact
zeros rather than approximations, and cosine values are clamped to [-1, 1].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import torch
from torch import Tensor, nn

__all__ = [
    "NORM_EPS",
    "Axis",
    "ContractViolation",
    "GlobalEmbedding",
    "LocalEmbeddings",
    "Modality",
    "ProbabilityMap",
    "SimilarityMatrix",
    "AttentionPooling",
    "ProjectionHead",
    "attention_pool",
    "cosine_similarity",
    "cross_attend",
    "masked_softmax",
    "pairwise_similarity",
    "project_global",
    "project_local",
    "unit_rows",
]

# Added to every norm so zero vectors yield similarity 0 instead of NaN.  The
# same guard keeps self-similarities strictly inside (-1, 1), which keeps the
# clamp below inactive (and therefore smooth) at those points.
NORM_EPS = 1e-8


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class Modality(enum.Enum):
    IMAGE = "image"
    TEXT = "text"


class Axis(enum.Enum):
    """Axis along which a probability map is normalized."""

    ROW = "row"
    COL = "col"


def _check_finite(name: str, t: Tensor) -> None:
    if not bool(torch.isfinite(t.detach()).all()):
        raise ContractViolation(f"{name} contains non-finite values")


@dataclass(eq=False)
class LocalEmbeddings:
    """Per-position embeddings for one sample in one modality.

    ``vectors`` has shape [positions, dim]; ``validity_mask`` marks real
    positions (padding rows are masked out and must be ignored by every
    consumer).  ``grid_shape`` is set for image grids, in which case padding
    is disallowed and rows * cols must equal the number of positions.
    """

    modality: Modality
    vectors: Tensor
    validity_mask: Optional[Tensor] = None
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ContractViolation(
                f"local embeddings must be 2-D [positions, dim], got shape {tuple(self.vectors.shape)}"
            )
        n, d = self.vectors.shape
        if n < 1 or d < 1:
            raise ContractViolation("local embeddings need at least one position and one dimension")
        if self.validity_mask is None:
            self.validity_mask = torch.ones(n, dtype=torch.bool, device=self.vectors.device)
        if self.validity_mask.shape != (n,):
            raise ContractViolation(
                f"validity mask shape {tuple(self.validity_mask.shape)} does not match {n} positions"
            )
        if self.validity_mask.dtype != torch.bool:
            self.validity_mask = self.validity_mask.to(torch.bool)
        if not bool(self.validity_mask.any()):
            raise ContractViolation("at least one position must be valid")
        _check_finite("local embedding vectors", self.vectors)
        if self.grid_shape is not None:
            rows, cols = self.grid_shape
            if rows * cols != n:
                raise ContractViolation(
                    f"grid shape {self.grid_shape} does not cover {n} positions"
                )
            if not bool(self.validity_mask.all()):
                raise ContractViolation("grid-shaped local embeddings do not allow padding")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.validity_mask.sum())

    def with_vectors(self, vectors: Tensor) -> "LocalEmbeddings":
        """Same positions/mask/grid, new per-position vectors."""
        return LocalEmbeddings(
            modality=self.modality,
            vectors=vectors,
            validity_mask=self.validity_mask,
            grid_shape=self.grid_shape,
        )


@dataclass(eq=False)
class GlobalEmbedding:
    """A single pooled embedding for one sample in one modality."""

    modality: Modality
    vector: Tensor

    def __post_init__(self) -> None:
        if self.vector.ndim != 1 or self.vector.shape[0] < 1:
            raise ContractViolation(
                f"global embedding must be a 1-D vector, got shape {tuple(self.vector.shape)}"
            )
        _check_finite("global embedding", self.vector)


@dataclass(eq=False)
class SimilarityMatrix:
    """Cosine similarities between two sets of positions.

    Entries at masked rows/columns hold the sentinel value 0 and carry no
    information; consumers must consult the masks.
    """

    values: Tensor
    row_mask: Tensor
    col_mask: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ContractViolation("similarity matrix must be 2-D")
        r, c = self.values.shape
        if self.row_mask.shape != (r,) or self.col_mask.shape != (c,):
            raise ContractViolation("similarity masks do not match the matrix shape")
        _check_finite("similarity values", self.values)
        hi = float(self.values.detach().abs().max()) if self.values.numel() else 0.0
        if hi > 1.0 + 1e-6:
            raise ContractViolation(f"similarity values exceed [-1, 1] (max abs {hi})")

    @property
    def valid(self) -> Tensor:
        """Boolean [rows, cols] matrix of positions where both ends are real."""
        return self.row_mask[:, None] & self.col_mask[None, :]


@dataclass(eq=False)
class ProbabilityMap:
    """A similarity matrix turned into per-row or per-column distributions."""

    values: Tensor
    axis: Axis
    temperature: float

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ContractViolation("probability map must be 2-D")
        if self.temperature <= 0:
            raise ContractViolation(f"temperature must be positive, got {self.temperature}")
        _check_finite("probability map", self.values)
        if float(self.values.detach().min()) < 0:
            raise ContractViolation("probabilities must be non-negative")
        dim = 1 if self.axis is Axis.ROW else 0
        sums = self.values.detach().sum(dim=dim)
        ok = (sums - 1.0).abs() <= 1e-6
        empty = sums.abs() <= 1e-6  # fully masked slices are all-zero
        if not bool((ok | empty).all()):
            raise ContractViolation("each slice must sum to 1 (or be fully masked)")


def unit_rows(vectors: Tensor) -> Tensor:
    """Rows scaled to (almost) unit norm with a zero-vector guard."""
    norms = vectors.norm(dim=-1, keepdim=True)
    return vectors / (norms + NORM_EPS)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D vectors of equal dimension.

    Norms are guarded by ``NORM_EPS`` so a zero vector yields 0, and the
    result is clamped to [-1, 1] against floating-point drift.
    """
    if a.ndim != 1 or b.ndim != 1:
        raise ContractViolation("cosine_similarity expects 1-D vectors")
    if a.shape[0] != b.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"
        )
    _check_finite("cosine input a", a)
    _check_finite("cosine input b", b)
    out = (a * b).sum() / ((a.norm() + NORM_EPS) * (b.norm() + NORM_EPS))
    return out.clamp(-1.0, 1.0)


def _vectors_and_mask(x: Union[LocalEmbeddings, Tensor]) -> Tuple[Tensor, Tensor]:
    if isinstance(x, LocalEmbeddings):
        return x.vectors, x.validity_mask
    if not isinstance(x, Tensor) or x.ndim != 2:
        raise ContractViolation("expected LocalEmbeddings or a 2-D tensor")
    _check_finite("similarity input", x)
    return x, torch.ones(x.shape[0], dtype=torch.bool, device=x.device)


def pairwise_similarity(
    a: Union[LocalEmbeddings, Tensor], b: Union[LocalEmbeddings, Tensor]
) -> SimilarityMatrix:
    """All-pairs cosine similarities between the rows of ``a`` and ``b``.

    Entries involving a masked row are set to the sentinel 0.
    """
    va, ma = _vectors_and_mask(a)
    vb, mb = _vectors_and_mask(b)
    if va.shape[1] != vb.shape[1]:
        raise ContractViolation(
            f"dimension mismatch: {va.shape[1]} vs {vb.shape[1]}"
        )
    sims = unit_rows(va) @ unit_rows(vb).T
    sims = sims.clamp(-1.0, 1.0)
    valid = ma[:, None] & mb[None, :]
    sims = sims * valid.to(sims.dtype)
    return SimilarityMatrix(values=sims, row_mask=ma, col_mask=mb)


def masked_softmax(scores: Tensor, valid: Tensor, dim: int) -> Tensor:
    """Softmax over ``dim`` restricted to valid entries.

    Masked entries come out exactly 0; fully masked slices come out all-zero
    instead of NaN.  The underlying softmax subtracts the max for stability.
    """
    if scores.shape != valid.shape:
        raise ContractViolation("scores and validity mask must have the same shape")
    neg_inf = torch.tensor(float("-inf"), dtype=scores.dtype, device=scores.device)
    any_valid = valid.any(dim=dim, keepdim=True)
    # Fully masked slices get uniform zeros as logits first so softmax never
    # sees an all -inf slice (which would produce NaN); they are zeroed below.
    filled = torch.where(valid, scores, neg_inf)
    safe = torch.where(any_valid, filled, torch.zeros_like(scores))
    probs = torch.softmax(safe, dim=dim)
    probs = probs * valid.to(scores.dtype)
    return probs


class AttentionPooling(nn.Module):
    """Single-head attention pooling over a set of local embeddings.

    The query is a learned transform of the masked mean; keys and values are
    learned transforms of the locals; masked positions are excluded from the
    softmax; the pooled value passes through a learned output transform.
    Works on [positions, dim] or batched [batch, positions, dim] input.
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        if dim < 1:
            raise ContractViolation("pooling dimension must be positive")
        self.dim = dim
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, vectors: Tensor, mask: Tensor) -> Tensor:
        if vectors.shape[-1] != self.dim:
            raise ContractViolation(
                f"pooling expects dim {self.dim}, got {vectors.shape[-1]}"
            )
        counts = mask.sum(dim=-1)
        if not bool((counts >= 1).all()):
            raise ContractViolation("attention pooling needs at least one valid position")
        fmask = mask.to(vectors.dtype)
        mean = (vectors * fmask[..., None]).sum(dim=-2) / counts.to(vectors.dtype)[..., None]
        q = self.query(mean)
        k = self.key(vectors)
        v = self.value(vectors)
        scores = (k * q[..., None, :]).sum(dim=-1) / (self.dim**0.5)
        weights = masked_softmax(scores, mask, dim=-1)
        pooled = (weights[..., None] * v).sum(dim=-2)
        return self.out(pooled)


class ProjectionHead(nn.Module):
    """Affine maps from one modality's space into the joint space.

    Holds the local and global projections plus the value transform used when
    this modality is mixed into the other one by cross-attention.
    """

    def __init__(self, dim_in: int, dim_joint: int) -> None:
        super().__init__()
        if dim_in < 1 or dim_joint < 1:
            raise ContractViolation("projection dimensions must be positive")
        self.dim_in = dim_in
        self.dim_joint = dim_joint
        self.local_map = nn.Linear(dim_in, dim_joint)
        self.global_map = nn.Linear(dim_in, dim_joint)
        self.cross_value = nn.Linear(dim_joint, dim_joint, bias=False)


def attention_pool(locals_: LocalEmbeddings, pooling: AttentionPooling) -> GlobalEmbedding:
    """Pool per-position embeddings into one global embedding."""
    pooled = pooling(locals_.vectors, locals_.validity_mask)
    return GlobalEmbedding(modality=locals_.modality, vector=pooled)


def project_local(locals_: LocalEmbeddings, head: ProjectionHead) -> LocalEmbeddings:
    """Map per-position embeddings into the joint space (mask preserved)."""
    if locals_.dim != head.dim_in:
        raise ContractViolation(
            f"projection expects dim {head.dim_in}, got {locals_.dim}"
        )
    vectors = head.local_map(locals_.vectors)
    vectors = vectors * locals_.validity_mask.to(vectors.dtype)[:, None]
    return locals_.with_vectors(vectors)


def project_global(global_: GlobalEmbedding, head: ProjectionHead) -> GlobalEmbedding:
    """Map a pooled embedding into the joint space."""
    if global_.vector.shape[0] != head.dim_in:
        raise ContractViolation(
            f"projection expects dim {head.dim_in}, got {global_.vector.shape[0]}"
        )
    return GlobalEmbedding(modality=global_.modality, vector=head.global_map(global_.vector))


def cross_attend(
    primary: LocalEmbeddings,
    counterpart: LocalEmbeddings,
    value_transform: Union[nn.Linear, Tensor],
    *,
    row_softmax: bool = False,
) -> LocalEmbeddings:
    """Mix counterpart positions into each primary position.

    Each primary position receives the cosine-weighted sum of the transformed
    counterpart vectors.  Weights are the raw cosine similarities by default;
    ``row_softmax=True`` normalizes them over the counterpart axis instead.
    Masked counterpart positions contribute nothing; masked primary rows stay
    zero.  The result lives at the primary positions (same mask and grid).
    """
    if primary.dim != counterpart.dim:
        raise ContractViolation(
            f"dimension mismatch: {primary.dim} vs {counterpart.dim}"
        )
    if counterpart.valid_count == 0:
        raise ContractViolation("counterpart has no valid positions")
    sims = pairwise_similarity(primary, counterpart)
    if row_softmax:
        weights = masked_softmax(sims.values, sims.valid, dim=1)
    else:
        weights = sims.values
    if isinstance(value_transform, nn.Linear):
        values = value_transform(counterpart.vectors)
    else:
        if value_transform.shape != (counterpart.dim, counterpart.dim):
            raise ContractViolation("value transform must be a square [dim, dim] matrix")
        values = counterpart.vectors @ value_transform.T
    values = values * counterpart.validity_mask.to(values.dtype)[:, None]
    mixed = weights @ values
    mixed = mixed * primary.validity_mask.to(mixed.dtype)[:, None]
    return primary.with_vectors(mixed)
