"""Deliberately small encoders for desk-scale experiments.

The image encoder mean-pools each grid patch and pushes the pooled values
through a two-layer map; the text encoder hashes each sentence into a
bag-of-tokens vector and does the same.  Both are deterministic functions of
their inputs and their (seeded) parameters, which is what the reproducibility
guarantees downstream lean on.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import Tensor, nn

from .embeddings import ContractViolation, LocalEmbeddings, Modality

__all__ = [
    "EncoderConfig",
    "Report",
    "SentenceSplitError",
    "ToyImageEncoder",
    "ToyTextEncoder",
    "hash_bag",
    "split_sentences",
]

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"[a-z0-9]+")


class SentenceSplitError(ValueError):
    """A report produced no usable sentences."""


def split_sentences(text: str) -> List[str]:
    """Split report text into sentences on ., ! or ? followed by whitespace.

    A terminator inside a number ("3.5 cm") is not followed by whitespace and
    therefore never splits.  Text after the last terminator is kept as a
    final sentence.  Raises :class:`SentenceSplitError` when nothing remains.
    """
    parts = _SENTENCE_BOUNDARY.split(text.strip())
    sentences = [p.strip() for p in parts if p.strip()]
    if not sentences:
        raise SentenceSplitError("report contains no sentences")
    return sentences


@dataclass(frozen=True)
class Report:
    """Raw report text plus its derived sentences."""

    raw_text: str
    sentences: tuple

    @classmethod
    def from_text(cls, raw_text: str) -> "Report":
        return cls(raw_text=raw_text, sentences=tuple(split_sentences(raw_text)))


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes shared by both toy encoders.

    ``grid`` is the per-side number of image cells; the image height and
    width must be divisible by it.  ``vocab_hash_dim`` is the size of the
    token-hash bag.  ``max_sentences`` caps text positions; longer reports
    are truncated, shorter ones padded (masked).
    """

    grid: int = 7
    image_channels: int = 4
    dim_image: int = 64
    dim_text: int = 64
    hidden: int = 32
    vocab_hash_dim: int = 64
    max_sentences: int = 8

    def validate(self) -> None:
        for name in (
            "grid",
            "image_channels",
            "dim_image",
            "dim_text",
            "hidden",
            "vocab_hash_dim",
            "max_sentences",
        ):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be at least 1")


def hash_bag(sentence: str, dim: int) -> Tensor:
    """Counts of CRC32-hashed lowercase tokens, as a float vector.

    CRC32 is stable across processes and platforms, unlike Python's salted
    ``hash``.
    """
    if dim < 1:
        raise ContractViolation("hash dimension must be at least 1")
    vec = torch.zeros(dim)
    for token in _TOKEN.findall(sentence.lower()):
        vec[zlib.crc32(token.encode("utf-8")) % dim] += 1.0
    return vec


class ToyImageEncoder(nn.Module):
    """Patch mean-pooling followed by a two-layer map to the image space.

    The input is a [channels, H, W] tensor with H and W divisible by the
    grid size; each of the grid's cells is mean-pooled per channel and mapped
    to ``dim_image``.  Output rows follow row-major cell order.
    """

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.net = nn.Sequential(
            nn.Linear(config.image_channels, config.hidden),
            nn.Tanh(),
            nn.Linear(config.hidden, config.dim_image),
        )

    def patch_means(self, images: Tensor) -> Tensor:
        """[batch, channels, H, W] -> [batch, cells, channels] per-patch means."""
        g = self.config.grid
        if images.ndim != 4:
            raise ContractViolation("expected a batched [batch, channels, H, W] tensor")
        b, c, h, w = images.shape
        if c != self.config.image_channels:
            raise ContractViolation(
                f"expected {self.config.image_channels} channels, got {c}"
            )
        if h % g != 0 or w % g != 0:
            raise ContractViolation(
                f"image size {h}x{w} is not divisible into a {g}x{g} grid"
            )
        ph, pw = h // g, w // g
        patches = images.reshape(b, c, g, ph, g, pw)
        means = patches.mean(dim=(3, 5))  # [batch, channels, g, g]
        return means.permute(0, 2, 3, 1).reshape(b, g * g, c)

    def forward_batch(self, images: Tensor) -> Tensor:
        """[batch, channels, H, W] -> [batch, cells, dim_image]."""
        return self.net(self.patch_means(images))

    def forward(self, image: Tensor) -> LocalEmbeddings:
        if image.ndim != 3:
            raise ContractViolation("expected a [channels, H, W] image")
        vectors = self.forward_batch(image[None])[0]
        g = self.config.grid
        return LocalEmbeddings(
            modality=Modality.IMAGE,
            vectors=vectors,
            grid_shape=(g, g),
        )


class ToyTextEncoder(nn.Module):
    """Per-sentence token-hash bags followed by a two-layer map.

    Output always has ``max_sentences`` rows; rows beyond the sentence count
    are zero and masked out.
    """

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.net = nn.Sequential(
            nn.Linear(config.vocab_hash_dim, config.hidden),
            nn.Tanh(),
            nn.Linear(config.hidden, config.dim_text),
        )

    def sentence_bags(self, sentences: Sequence[str]) -> Tensor:
        """[max_sentences, vocab_hash_dim] padded bag matrix for one report."""
        cfg = self.config
        if len(sentences) == 0:
            raise SentenceSplitError("report contains no sentences")
        kept = list(sentences)[: cfg.max_sentences]
        bags = torch.zeros(cfg.max_sentences, cfg.vocab_hash_dim)
        for i, sentence in enumerate(kept):
            bags[i] = hash_bag(sentence, cfg.vocab_hash_dim)
        return bags

    def sentence_mask(self, sentence_count: int) -> Tensor:
        cfg = self.config
        count = min(sentence_count, cfg.max_sentences)
        mask = torch.zeros(cfg.max_sentences, dtype=torch.bool)
        mask[:count] = True
        return mask

    def forward_batch(self, bags: Tensor, mask: Tensor) -> Tensor:
        """[batch, max_sentences, vocab] + mask -> [batch, max_sentences, dim_text].

        Padded rows are forced to zero so downstream masking starts clean.
        """
        if bags.ndim != 3:
            raise ContractViolation("expected [batch, sentences, vocab] bags")
        out = self.net(bags)
        return out * mask.to(out.dtype)[..., None]

    def forward(self, report: Report) -> LocalEmbeddings:
        bags = self.sentence_bags(report.sentences)
        mask = self.sentence_mask(len(report.sentences))
        vectors = self.forward_batch(bags[None], mask[None])[0]
        return LocalEmbeddings(
            modality=Modality.TEXT,
            vectors=vectors,
            validity_mask=mask,
        )
