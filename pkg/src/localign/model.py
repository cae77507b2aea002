"""The full two-tower model: encoders, pooling, and joint-space heads.

Two forward paths produce the same quantities:

* :meth:`AlignmentModel.forward_sample` — one image/report pair at a time,
  built from the container types.  This is the reference semantics.
* :meth:`AlignmentModel.forward_batch` — plain batched tensors for training.
  It must agree with the reference path to float32 accuracy, which the test
  suite checks directly.

Both compute, per modality: raw local embeddings (pre-projection), local
embeddings projected into the joint space, a pooled global embedding in the
joint space, and cross-attended vectors (each position mixed from the other
modality's projected locals through that modality's value transform).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .embeddings import (
    AttentionPooling,
    ContractViolation,
    GlobalEmbedding,
    LocalEmbeddings,
    Modality,
    ProjectionHead,
    attention_pool,
    cross_attend,
    masked_softmax,
    project_global,
    project_local,
    unit_rows,
)
from .encoders import EncoderConfig, Report, ToyImageEncoder, ToyTextEncoder

__all__ = [
    "AlignmentModel",
    "BatchOutputs",
    "ModelConfig",
    "SampleOutputs",
    "batched_cosine",
    "batched_cross_attend",
    "build_model",
]


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches of the composed model."""

    grid: int = 7
    image_channels: int = 4
    dim_image: int = 64
    dim_text: int = 64
    hidden: int = 32
    vocab_hash_dim: int = 64
    max_sentences: int = 8
    joint_dim: int = 32
    cross_attention_row_softmax: bool = False

    def validate(self) -> None:
        self.encoder_config().validate()
        if self.joint_dim < 1:
            raise ContractViolation("joint_dim must be positive")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            grid=self.grid,
            image_channels=self.image_channels,
            dim_image=self.dim_image,
            dim_text=self.dim_text,
            hidden=self.hidden,
            vocab_hash_dim=self.vocab_hash_dim,
            max_sentences=self.max_sentences,
        )


@dataclass(eq=False)
class SampleOutputs:
    """Everything the objectives need, for a single pair."""

    image_raw: LocalEmbeddings
    text_raw: LocalEmbeddings
    image_proj: LocalEmbeddings
    text_proj: LocalEmbeddings
    image_cross: LocalEmbeddings
    text_cross: LocalEmbeddings
    image_global: GlobalEmbedding
    text_global: GlobalEmbedding


@dataclass(eq=False)
class BatchOutputs:
    """Everything the objectives need, as batched tensors.

    Image positions are always all valid; ``text_mask`` marks real sentences.
    Masked text rows are zero everywhere they appear.
    """

    image_raw: Tensor  # [B, cells, dim_image]
    text_raw: Tensor  # [B, max_sentences, dim_text]
    image_proj: Tensor  # [B, cells, joint_dim]
    text_proj: Tensor  # [B, max_sentences, joint_dim]
    image_cross: Tensor  # [B, cells, joint_dim]
    text_cross: Tensor  # [B, max_sentences, joint_dim]
    image_global: Tensor  # [B, joint_dim]
    text_global: Tensor  # [B, joint_dim]
    text_mask: Tensor  # [B, max_sentences] bool

    @property
    def batch_size(self) -> int:
        return self.image_raw.shape[0]


def batched_cosine(a: Tensor, b: Tensor, a_mask: Tensor, b_mask: Tensor) -> Tensor:
    """[B, N, D] x [B, M, D] -> [B, N, M] cosine similarities, 0 at masked."""
    sims = unit_rows(a) @ unit_rows(b).transpose(-1, -2)
    sims = sims.clamp(-1.0, 1.0)
    sims = sims * a_mask.to(sims.dtype)[..., :, None]
    sims = sims * b_mask.to(sims.dtype)[..., None, :]
    return sims


def batched_cross_attend(
    primary: Tensor,
    counterpart: Tensor,
    primary_mask: Tensor,
    counterpart_mask: Tensor,
    value_transform: nn.Linear,
    *,
    row_softmax: bool = False,
) -> Tensor:
    """Batched version of :func:`localign.embeddings.cross_attend`."""
    sims = batched_cosine(primary, counterpart, primary_mask, counterpart_mask)
    if row_softmax:
        valid = primary_mask[..., :, None] & counterpart_mask[..., None, :]
        weights = masked_softmax(sims, valid, dim=-1)
    else:
        weights = sims
    values = value_transform(counterpart)
    values = values * counterpart_mask.to(values.dtype)[..., None]
    mixed = weights @ values
    return mixed * primary_mask.to(mixed.dtype)[..., None]


class AlignmentModel(nn.Module):
    """Image and text towers with attention pooling and joint-space heads."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        enc_cfg = config.encoder_config()
        self.image_encoder = ToyImageEncoder(enc_cfg)
        self.text_encoder = ToyTextEncoder(enc_cfg)
        self.image_pool = AttentionPooling(config.dim_image)
        self.text_pool = AttentionPooling(config.dim_text)
        self.image_head = ProjectionHead(config.dim_image, config.joint_dim)
        self.text_head = ProjectionHead(config.dim_text, config.joint_dim)

    # ---- reference path (one pair at a time) -------------------------------

    def encode_image(self, image: Tensor) -> LocalEmbeddings:
        return self.image_encoder(image)

    def encode_report(self, report: Report) -> LocalEmbeddings:
        return self.text_encoder(report)

    def forward_sample(self, image: Tensor, report: Report) -> SampleOutputs:
        image_raw = self.encode_image(image)
        text_raw = self.encode_report(report)
        image_proj = project_local(image_raw, self.image_head)
        text_proj = project_local(text_raw, self.text_head)
        row_softmax = self.config.cross_attention_row_softmax
        image_cross = cross_attend(
            image_proj, text_proj, self.text_head.cross_value, row_softmax=row_softmax
        )
        text_cross = cross_attend(
            text_proj, image_proj, self.image_head.cross_value, row_softmax=row_softmax
        )
        image_global = project_global(attention_pool(image_raw, self.image_pool), self.image_head)
        text_global = project_global(attention_pool(text_raw, self.text_pool), self.text_head)
        return SampleOutputs(
            image_raw=image_raw,
            text_raw=text_raw,
            image_proj=image_proj,
            text_proj=text_proj,
            image_cross=image_cross,
            text_cross=text_cross,
            image_global=image_global,
            text_global=text_global,
        )

    # ---- batched path (training) -------------------------------------------

    def text_inputs(self, reports: Sequence[Report]) -> Tuple[Tensor, Tensor]:
        """Stack reports into ([B, max_sentences, vocab] bags, [B, max_sentences] mask)."""
        bags = torch.stack([self.text_encoder.sentence_bags(r.sentences) for r in reports])
        mask = torch.stack(
            [self.text_encoder.sentence_mask(len(r.sentences)) for r in reports]
        )
        return bags, mask

    def forward_batch(self, images: Tensor, bags: Tensor, text_mask: Tensor) -> BatchOutputs:
        if images.ndim != 4:
            raise ContractViolation("expected [batch, channels, H, W] images")
        if images.shape[0] != bags.shape[0]:
            raise ContractViolation(
                f"batch size mismatch: {images.shape[0]} images vs {bags.shape[0]} reports"
            )
        image_raw = self.image_encoder.forward_batch(images)
        text_raw = self.text_encoder.forward_batch(bags, text_mask)
        return self.forward_features(image_raw, text_raw, text_mask)

    def forward_features(
        self, image_raw: Tensor, text_raw: Tensor, text_mask: Tensor
    ) -> BatchOutputs:
        """Post-encoder pipeline on precomputed raw locals (encoders bypassed)."""
        if image_raw.ndim != 3 or text_raw.ndim != 3:
            raise ContractViolation("raw locals must be [batch, positions, dim]")
        if image_raw.shape[-1] != self.config.dim_image:
            raise ContractViolation(
                f"image features have dim {image_raw.shape[-1]}, model expects {self.config.dim_image}"
            )
        if text_raw.shape[-1] != self.config.dim_text:
            raise ContractViolation(
                f"text features have dim {text_raw.shape[-1]}, model expects {self.config.dim_text}"
            )
        b, n_cells = image_raw.shape[0], image_raw.shape[1]
        image_mask = torch.ones(b, n_cells, dtype=torch.bool, device=image_raw.device)
        text_raw = text_raw * text_mask.to(text_raw.dtype)[..., None]

        image_proj = self.image_head.local_map(image_raw)
        text_proj = self.text_head.local_map(text_raw)
        text_proj = text_proj * text_mask.to(text_proj.dtype)[..., None]

        row_softmax = self.config.cross_attention_row_softmax
        image_cross = batched_cross_attend(
            image_proj,
            text_proj,
            image_mask,
            text_mask,
            self.text_head.cross_value,
            row_softmax=row_softmax,
        )
        text_cross = batched_cross_attend(
            text_proj,
            image_proj,
            text_mask,
            image_mask,
            self.image_head.cross_value,
            row_softmax=row_softmax,
        )
        image_global = self.image_head.global_map(self.image_pool(image_raw, image_mask))
        text_global = self.text_head.global_map(self.text_pool(text_raw, text_mask))
        return BatchOutputs(
            image_raw=image_raw,
            text_raw=text_raw,
            image_proj=image_proj,
            text_proj=text_proj,
            image_cross=image_cross,
            text_cross=text_cross,
            image_global=image_global,
            text_global=text_global,
            text_mask=text_mask,
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int) -> AlignmentModel:
    """Construct a model with initialization determined only by ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = AlignmentModel(config)
    return model
