"""Synthetic paired image/report worlds and their on-disk dataset format.

Images are multi-channel color grids: every cell of the G×G grid is filled
with one color vector, so a patch-local encoder sees exactly one color per
cell.  The world is built so that *where* a finding sits is only recoverable
by a model that has actually learned the image↔report pairing:

* each finding type owns a fixed, world-level color; which color belongs to
  which finding *name* is carried solely by the paired reports;
* background cells draw independent colors from a continuum spanning the
  same value range, thinned only within a small exclusion radius around the
  finding colors — so no channel, brightness statistic, or image-side class
  boundary separates finding cells from background, and the background
  continuum surrounds every finding color, leaving a single linear map on
  any fixed random embedding of colors unable to isolate the findings;
* each finding instance produces a sentence naming its type and location,
  possibly a reworded duplicate sentence, and optionally a mirrored twin box
  ("bilateral"), giving one-sentence-to-many-cells ground truth and pairs of
  far-apart same-color cells whose similarity a good projection preserves.

The dataset directory layout is::

    manifest.json            ids, world parameters, per-file sha256 checksums
    images/<id>.f32          [channels, H, W] tensor file
    reports/<id>.txt         UTF-8 report text
    boxes/<id>.csv           row0,col0,row1,col1,label  (half-open grid coords)
    queries/<id>.txt         one grounding phrase (only for samples with boxes)

Sentence-to-cell ground truth is not stored; it is reconstructed by the rule
"a sentence owns the boxes whose label occurs in it", which the generator
guarantees to be exact (finding sentences always contain their label, filler
sentences never contain any label).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .embeddings import ContractViolation, LocalEmbeddings, Modality
from .encoders import Report, split_sentences
from .fileio import (
    FileFormatError,
    atomic_write_json,
    atomic_write_text,
    read_f32,
    sha256_file,
    write_f32,
)

__all__ = [
    "AlignedSample",
    "DatasetError",
    "FeaturePair",
    "GridBox",
    "SyntheticDataset",
    "SyntheticWorldConfig",
    "generate_dataset",
    "generate_sample",
    "load_external_features",
    "read_dataset",
    "sentence_cells",
    "write_dataset",
    "write_external_features",
]


class DatasetError(ValueError):
    """A dataset directory is missing, inconsistent, or corrupt."""


@dataclass(frozen=True)
class GridBox:
    """A half-open rectangle in grid-cell coordinates with a finding label."""

    row0: int
    col0: int
    row1: int
    col1: int
    label: str

    def validate(self, grid: int) -> None:
        if not (0 <= self.row0 < self.row1 <= grid and 0 <= self.col0 < self.col1 <= grid):
            raise ContractViolation(f"box {self} does not fit a {grid}x{grid} grid")
        if not self.label:
            raise ContractViolation("box label must be non-empty")

    def cell_mask(self, grid: int) -> Tensor:
        """Boolean [grid*grid] mask of covered cells (row-major)."""
        mask = torch.zeros(grid, grid, dtype=torch.bool)
        mask[self.row0 : self.row1, self.col0 : self.col1] = True
        return mask.reshape(-1)

    def mirrored(self, grid: int) -> "GridBox":
        """The same rectangle reflected about the vertical midline."""
        return GridBox(self.row0, grid - self.col1, self.row1, grid - self.col0, self.label)

    @property
    def cell_count(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)


_DEFAULT_FINDINGS = ("opacity", "consolidation", "effusion", "nodule", "edema")
_DEFAULT_FILLERS = (
    "Heart size within normal limits.",
    "Bony structures are intact.",
    "Mediastinal contours are unremarkable.",
    "No free air beneath the diaphragm.",
)
_SENTENCE_TEMPLATES = (
    "{label} is seen in the {location}.",
    "There is {label} in the {location}.",
    "{label} present in the {location}.",
    "Subtle {label} noted in the {location}.",
)


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Parameters of the generated world.

    Every ``finding_names`` entry is assigned a fixed color in
    ``[palette_low, palette_high]^channels`` (drawn once per world seed, with
    pairwise distance at least ``palette_min_separation``).  Background cells
    draw uniform colors from the same cube, redrawn whenever they land within
    ``background_exclusion`` of any finding color, so finding cells are
    identifiable per cell — but only by a model that knows the specific
    colors, which in turn is only learnable from the paired reports.
    ``cell_jitter`` perturbs each cell's color and ``pixel_noise`` each
    rendered pixel; the value ranges must leave room for both.
    """

    grid: int = 7
    image_size: int = 28
    channels: int = 4
    seed: int = 0
    roi_count_range: Tuple[int, int] = (1, 3)
    roi_height_range: Tuple[int, int] = (1, 3)
    roi_width_range: Tuple[int, int] = (1, 3)
    finding_names: Tuple[str, ...] = _DEFAULT_FINDINGS
    palette_low: float = 0.1
    palette_high: float = 0.9
    palette_min_separation: float = 0.25
    background_exclusion: float = 0.12
    cell_jitter: float = 0.02
    pixel_noise: float = 0.02
    duplicate_sentence_prob: float = 0.3
    bilateral_prob: float = 0.25
    filler_sentences: Tuple[str, ...] = _DEFAULT_FILLERS
    filler_count_range: Tuple[int, int] = (1, 2)

    def validate(self) -> None:
        if self.grid < 2:
            raise ContractViolation("grid must be at least 2")
        if self.image_size % self.grid != 0:
            raise ContractViolation(
                f"image size {self.image_size} is not divisible by grid {self.grid}"
            )
        if self.channels < 1:
            raise ContractViolation("channels must be at least 1")
        for name in ("roi_count_range", "roi_height_range", "roi_width_range", "filler_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ContractViolation(f"{name} must be a non-empty non-negative range")
        if self.roi_count_range[0] > 0 and not self.finding_names:
            raise ContractViolation("finding_names must be non-empty when ROIs are requested")
        if self.roi_height_range[1] > self.grid or self.roi_width_range[1] > self.grid:
            raise ContractViolation("ROI size range exceeds the grid")
        for name in ("duplicate_sentence_prob", "bilateral_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractViolation(f"{name} must be a probability")
        if not 0.0 <= self.palette_low <= self.palette_high <= 1.0:
            raise ContractViolation("palette range must be ordered and inside [0, 1]")
        if self.palette_min_separation <= 0 or self.background_exclusion < 0:
            raise ContractViolation("palette separation must be positive and exclusion non-negative")
        if self.cell_jitter < 0 or self.pixel_noise < 0:
            raise ContractViolation("jitter and noise amplitudes must be non-negative")
        margin = self.cell_jitter + self.pixel_noise
        if self.palette_high + margin > 1.0 + 1e-12 or self.palette_low - margin < -1e-12:
            raise ContractViolation(
                "palette range plus cell_jitter and pixel_noise must stay inside [0, 1]"
            )
        # Two-sided cell jitter must never carry a background color into a
        # finding color's exclusion ball, or per-cell ground truth blurs.
        if self.background_exclusion <= 2.0 * self.cell_jitter * math.sqrt(self.channels):
            raise ContractViolation(
                "background_exclusion must exceed twice the worst-case cell_jitter "
                f"displacement ({2.0 * self.cell_jitter * math.sqrt(self.channels):.4f})"
            )
        if not self.filler_sentences and self.roi_count_range[0] == 0:
            raise ContractViolation("a world with possibly zero ROIs needs filler sentences")
        lows = [n.lower() for n in self.finding_names]
        if len(set(lows)) != len(lows):
            raise ContractViolation("finding names must be unique")
        for a in lows:
            for b in lows:
                if a != b and a in b:
                    raise ContractViolation(
                        f"finding name {a!r} is a substring of {b!r}; label matching would be ambiguous"
                    )
            for filler in self.filler_sentences:
                if a in filler.lower():
                    raise ContractViolation(f"filler sentence contains finding name {a!r}")

    def finding_colors(self) -> np.ndarray:
        """[len(finding_names), channels] fixed colors, one per finding type."""
        return _finding_palette(self)

    def finding_color(self, label: str) -> np.ndarray:
        """The characteristic color of a finding type."""
        names = [n.lower() for n in self.finding_names]
        return self.finding_colors()[names.index(label.lower())]

    def to_flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, payload: Dict[str, object]) -> "SyntheticWorldConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in payload.items():
            if key not in known:
                raise DatasetError(f"unknown world config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# Distinct RNG stream tags so palette draws never alias per-sample draws.
_PALETTE_STREAM = 7_201
_PALETTE_MAX_TRIES = 10_000


@lru_cache(maxsize=128)
def _finding_palette(cfg: SyntheticWorldConfig) -> np.ndarray:
    """The world's fixed finding colors, [len(finding_names), channels].

    Drawn once per world seed by rejection sampling so all pairwise distances
    are at least ``palette_min_separation``.  The returned array is marked
    read-only because it is cached.
    """
    rng = np.random.default_rng((cfg.seed, _PALETTE_STREAM))
    colors: List[np.ndarray] = []
    for _ in range(len(cfg.finding_names)):
        for _attempt in range(_PALETTE_MAX_TRIES):
            candidate = rng.uniform(cfg.palette_low, cfg.palette_high, size=cfg.channels)
            if all(
                float(np.linalg.norm(candidate - existing)) >= cfg.palette_min_separation
                for existing in colors
            ):
                colors.append(candidate)
                break
        else:
            raise ContractViolation(
                f"could not place {len(cfg.finding_names)} colors at pairwise distance "
                f">= {cfg.palette_min_separation} inside "
                f"[{cfg.palette_low}, {cfg.palette_high}]^{cfg.channels}"
            )
    palette = np.stack(colors)
    palette.flags.writeable = False
    return palette


@dataclass(eq=False)
class AlignedSample:
    """One generated image/report pair with grounding annotations.

    ``gt_alignment`` is [sentences, grid*grid]: True where the sentence
    describes the cell.  Sentences that describe nothing (fillers) have
    all-False rows.
    """

    sample_id: str
    image: Tensor
    report: Report
    gt_boxes: Tuple[GridBox, ...]
    gt_alignment: Tensor
    grid: int

    def __post_init__(self) -> None:
        if self.image.ndim != 3:
            raise ContractViolation("sample image must be [channels, H, W]")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise ContractViolation(f"image intensities must lie in [0, 1], got [{lo}, {hi}]")
        n_sent = len(self.report.sentences)
        if self.gt_alignment.shape != (n_sent, self.grid * self.grid):
            raise ContractViolation(
                f"alignment shape {tuple(self.gt_alignment.shape)} does not match "
                f"{n_sent} sentences x {self.grid * self.grid} cells"
            )
        for box in self.gt_boxes:
            box.validate(self.grid)

    def cell_label_mask(self) -> Tensor:
        """Boolean [grid*grid] union of all finding boxes."""
        mask = torch.zeros(self.grid * self.grid, dtype=torch.bool)
        for box in self.gt_boxes:
            mask |= box.cell_mask(self.grid)
        return mask

    def labels(self) -> Tuple[str, ...]:
        """Distinct finding labels in first-appearance order."""
        seen: List[str] = []
        for box in self.gt_boxes:
            if box.label not in seen:
                seen.append(box.label)
        return tuple(seen)


def sentence_cells(sentence: str, boxes: Sequence[GridBox], grid: int) -> Tensor:
    """Cells owned by a sentence: union of boxes whose label occurs in it."""
    mask = torch.zeros(grid * grid, dtype=torch.bool)
    low = sentence.lower()
    for box in boxes:
        if box.label.lower() in low:
            mask |= box.cell_mask(grid)
    return mask


def _location_phrase(box: GridBox, grid: int) -> str:
    mid_row = (box.row0 + box.row1) / 2.0
    mid_col = (box.col0 + box.col1) / 2.0
    third = grid / 3.0
    if mid_row < third:
        vertical = "upper"
    elif mid_row < 2 * third:
        vertical = "mid"
    else:
        vertical = "lower"
    side = "left" if mid_col < grid / 2.0 else "right"
    return f"{side} {vertical} zone"


def _boxes_overlap(a: GridBox, b: GridBox) -> bool:
    return a.row0 < b.row1 and b.row0 < a.row1 and a.col0 < b.col1 and b.col0 < a.col1


def _place_rois(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> List[Tuple[GridBox, ...]]:
    """Non-overlapping finding instances; each instance is 1 or 2 (mirrored) boxes."""
    g = cfg.grid
    count = int(rng.integers(cfg.roi_count_range[0], cfg.roi_count_range[1] + 1))
    count = min(count, len(cfg.finding_names)) if count > 0 else 0
    labels = list(rng.choice(len(cfg.finding_names), size=count, replace=False)) if count else []
    placed: List[GridBox] = []
    instances: List[Tuple[GridBox, ...]] = []
    for label_idx in labels:
        label = cfg.finding_names[int(label_idx)].lower()
        bilateral = bool(rng.random() < cfg.bilateral_prob)
        for _ in range(50):
            h = int(rng.integers(cfg.roi_height_range[0], cfg.roi_height_range[1] + 1))
            w = int(rng.integers(cfg.roi_width_range[0], cfg.roi_width_range[1] + 1))
            h = max(1, min(h, g))
            w = max(1, min(w, g))
            if bilateral:
                # Keep the box strictly in the left half so its mirror is disjoint.
                max_col = g // 2 - w
                if max_col < 0:
                    continue
                r0 = int(rng.integers(0, g - h + 1))
                c0 = int(rng.integers(0, max_col + 1))
                box = GridBox(r0, c0, r0 + h, c0 + w, label)
                twin = box.mirrored(g)
                candidates = (box, twin)
            else:
                r0 = int(rng.integers(0, g - h + 1))
                c0 = int(rng.integers(0, g - w + 1))
                candidates = (GridBox(r0, c0, r0 + h, c0 + w, label),)
            if any(_boxes_overlap(c, p) for c in candidates for p in placed):
                continue
            placed.extend(candidates)
            instances.append(candidates)
            break
    return instances


def generate_sample(cfg: SyntheticWorldConfig, index: int) -> AlignedSample:
    """Deterministically generate sample ``index`` of the world.

    The same (config, index) always produces the same sample, independent of
    call order, because the RNG is keyed on both.
    """
    cfg.validate()
    rng = np.random.default_rng((cfg.seed, index))
    g, size, c = cfg.grid, cfg.image_size, cfg.channels
    patch = size // g
    palette = _finding_palette(cfg)

    # Background: independent colors from the palette cube, kept outside the
    # exclusion ball of every finding color.
    cell_colors = rng.uniform(cfg.palette_low, cfg.palette_high, size=(g, g, c))
    if len(cfg.finding_names) and cfg.background_exclusion > 0:
        for _ in range(_PALETTE_MAX_TRIES):
            distances = np.linalg.norm(
                cell_colors[:, :, None, :] - palette[None, None, :, :], axis=-1
            )
            colliding = (distances < cfg.background_exclusion).any(axis=-1)
            if not colliding.any():
                break
            redraw = rng.uniform(
                cfg.palette_low, cfg.palette_high, size=(int(colliding.sum()), c)
            )
            cell_colors[colliding] = redraw
        else:
            raise ContractViolation(
                "background_exclusion leaves too little of the palette cube to sample"
            )

    instances = _place_rois(cfg, rng)
    names = [n.lower() for n in cfg.finding_names]
    for boxes in instances:
        color = palette[names.index(boxes[0].label)]
        for box in boxes:
            cell_colors[box.row0 : box.row1, box.col0 : box.col1] = color

    cell_colors = cell_colors + rng.uniform(-cfg.cell_jitter, cfg.cell_jitter, size=(g, g, c))
    pixels = np.repeat(np.repeat(cell_colors, patch, axis=0), patch, axis=1)
    pixels = pixels + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise, size=pixels.shape)
    image = torch.from_numpy(
        np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32)
    )

    # One sentence per finding instance, optionally duplicated in new words.
    sentences: List[str] = []
    for boxes in instances:
        label = boxes[0].label
        if len(boxes) > 1:
            location = "both lungs"
        else:
            location = _location_phrase(boxes[0], g)
        order = rng.permutation(len(_SENTENCE_TEMPLATES))
        main = _SENTENCE_TEMPLATES[int(order[0])].format(label=label, location=location)
        sentences.append(main[0].upper() + main[1:])
        if rng.random() < cfg.duplicate_sentence_prob:
            dup = _SENTENCE_TEMPLATES[int(order[1])].format(label=label, location=location)
            sentences.append(dup[0].upper() + dup[1:])

    n_fillers = int(rng.integers(cfg.filler_count_range[0], cfg.filler_count_range[1] + 1))
    n_fillers = min(n_fillers, len(cfg.filler_sentences))
    if n_fillers:
        picks = rng.choice(len(cfg.filler_sentences), size=n_fillers, replace=False)
        sentences.extend(cfg.filler_sentences[int(i)] for i in picks)
    if not sentences:
        sentences.append(cfg.filler_sentences[0])
    sentences = [sentences[int(i)] for i in rng.permutation(len(sentences))]

    boxes = tuple(box for inst in instances for box in inst)
    report = Report(raw_text=" ".join(sentences), sentences=tuple(sentences))
    alignment = torch.stack([sentence_cells(s, boxes, g) for s in sentences])
    return AlignedSample(
        sample_id=f"{index:06d}",
        image=image,
        report=report,
        gt_boxes=boxes,
        gt_alignment=alignment,
        grid=g,
    )


def generate_dataset(cfg: SyntheticWorldConfig, count: int, start: int = 0) -> List[AlignedSample]:
    if count < 1:
        raise ContractViolation("dataset must contain at least one sample")
    return [generate_sample(cfg, i) for i in range(start, start + count)]


@dataclass(eq=False)
class SyntheticDataset:
    """An in-memory dataset plus the world it came from."""

    world: SyntheticWorldConfig
    samples: List[AlignedSample]
    queries: Dict[str, str] = field(default_factory=dict)

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]


def _boxes_csv(boxes: Sequence[GridBox]) -> str:
    lines = ["row0,col0,row1,col1,label"]
    for b in boxes:
        lines.append(f"{b.row0},{b.col0},{b.row1},{b.col1},{b.label}")
    return "\n".join(lines) + "\n"


def _parse_boxes_csv(text: str, grid: int, name: str) -> Tuple[GridBox, ...]:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].lower() != "row0,col0,row1,col1,label":
        raise DatasetError(f"{name}: missing or malformed boxes header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise DatasetError(f"{name}: malformed box row {ln!r}")
        try:
            box = GridBox(int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]), parts[4])
        except ValueError as exc:
            raise DatasetError(f"{name}: malformed box row {ln!r}") from exc
        box.validate(grid)
        out.append(box)
    return tuple(out)


def default_query(sample: AlignedSample) -> Optional[str]:
    """The grounding phrase for a sample: its first finding sentence."""
    labels = sample.labels()
    if not labels:
        return None
    for sentence in sample.report.sentences:
        if labels[0] in sentence.lower():
            return sentence
    return None


def write_dataset(samples: Sequence[AlignedSample], path: Union[str, Path], world: SyntheticWorldConfig) -> None:
    """Write the directory layout described in the module docstring.

    Files are written atomically and the manifest goes last, so a directory
    with a manifest is complete by construction.
    """
    if not samples:
        raise ContractViolation("refusing to write an empty dataset")
    root = Path(path)
    checksums: Dict[str, str] = {}
    for sample in samples:
        rel_img = f"images/{sample.sample_id}.f32"
        write_f32(root / rel_img, sample.image.numpy())
        checksums[rel_img] = sha256_file(root / rel_img)

        rel_rep = f"reports/{sample.sample_id}.txt"
        atomic_write_text(root / rel_rep, sample.report.raw_text)
        checksums[rel_rep] = sha256_file(root / rel_rep)

        rel_box = f"boxes/{sample.sample_id}.csv"
        atomic_write_text(root / rel_box, _boxes_csv(sample.gt_boxes))
        checksums[rel_box] = sha256_file(root / rel_box)

        query = default_query(sample)
        if query is not None:
            rel_q = f"queries/{sample.sample_id}.txt"
            atomic_write_text(root / rel_q, query + "\n")
            checksums[rel_q] = sha256_file(root / rel_q)

    manifest = {
        "format_version": 1,
        "kind": "paired-image-report-dataset",
        "sample_count": len(samples),
        "sample_ids": [s.sample_id for s in samples],
        "world": world.to_flat(),
        "checksums": checksums,
    }
    atomic_write_json(root / "manifest.json", manifest)


def _load_manifest(root: Path) -> dict:
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"dataset manifest not found at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed dataset manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "sample_ids" not in manifest:
        raise DatasetError("malformed dataset manifest: missing sample_ids")
    return manifest


def read_dataset(path: Union[str, Path], *, verify_checksums: bool = True) -> SyntheticDataset:
    """Read a dataset directory back; inverse of :func:`write_dataset`."""
    root = Path(path)
    manifest = _load_manifest(root)
    world = SyntheticWorldConfig.from_flat(manifest.get("world", {}))
    ids = manifest["sample_ids"]
    if manifest.get("sample_count") != len(ids):
        raise DatasetError(
            f"manifest sample_count {manifest.get('sample_count')} does not match "
            f"{len(ids)} sample ids"
        )
    checksums: Dict[str, str] = manifest.get("checksums", {})
    if verify_checksums:
        for rel, expected in checksums.items():
            target = root / rel
            if not target.is_file():
                raise DatasetError(f"dataset file missing: {rel}")
            actual = sha256_file(target)
            if actual != expected:
                raise DatasetError(f"checksum mismatch for {rel}")

    samples: List[AlignedSample] = []
    queries: Dict[str, str] = {}
    for sample_id in ids:
        img_path = root / f"images/{sample_id}.f32"
        rep_path = root / f"reports/{sample_id}.txt"
        box_path = root / f"boxes/{sample_id}.csv"
        for p in (img_path, rep_path, box_path):
            if not p.is_file():
                raise DatasetError(f"sample {sample_id}: missing file {p.name}")
        try:
            image = torch.from_numpy(read_f32(img_path))
        except FileFormatError as exc:
            raise DatasetError(f"sample {sample_id}: {exc}") from exc
        report = Report.from_text(rep_path.read_text())
        boxes = _parse_boxes_csv(box_path.read_text(), world.grid, f"sample {sample_id}")
        alignment = torch.stack(
            [sentence_cells(s, boxes, world.grid) for s in report.sentences]
        ) if report.sentences else torch.zeros(0, world.grid**2, dtype=torch.bool)
        samples.append(
            AlignedSample(
                sample_id=sample_id,
                image=image,
                report=report,
                gt_boxes=boxes,
                gt_alignment=alignment,
                grid=world.grid,
            )
        )
        q_path = root / f"queries/{sample_id}.txt"
        if q_path.is_file():
            queries[sample_id] = q_path.read_text().strip()
    return SyntheticDataset(world=world, samples=samples, queries=queries)


@dataclass(eq=False)
class FeaturePair:
    """Precomputed per-position embeddings for one sample (encoders bypassed)."""

    sample_id: str
    image: LocalEmbeddings
    text: LocalEmbeddings


def write_external_features(
    pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]], path: Union[str, Path]
) -> None:
    """Write (id, image [N, D_img], text [M, D_txt]) feature triples to disk."""
    root = Path(path)
    ids = []
    checksums: Dict[str, str] = {}
    for sample_id, img, txt in pairs:
        ids.append(sample_id)
        rel_i = f"features/{sample_id}.img.f32"
        rel_t = f"features/{sample_id}.txt.f32"
        write_f32(root / rel_i, np.asarray(img, dtype=np.float32))
        write_f32(root / rel_t, np.asarray(txt, dtype=np.float32))
        checksums[rel_i] = sha256_file(root / rel_i)
        checksums[rel_t] = sha256_file(root / rel_t)
    manifest = {
        "format_version": 1,
        "kind": "paired-feature-set",
        "sample_count": len(ids),
        "sample_ids": ids,
        "checksums": checksums,
    }
    atomic_write_json(root / "manifest.json", manifest)


def load_external_features(path: Union[str, Path]) -> List[FeaturePair]:
    """Load precomputed feature pairs, validating pairing and dimensions."""
    root = Path(path)
    manifest = _load_manifest(root)
    ids = manifest["sample_ids"]
    pairs: List[FeaturePair] = []
    dim_img: Optional[int] = None
    dim_txt: Optional[int] = None
    for sample_id in ids:
        img_path = root / f"features/{sample_id}.img.f32"
        txt_path = root / f"features/{sample_id}.txt.f32"
        if not img_path.is_file() or not txt_path.is_file():
            raise DatasetError(f"sample {sample_id}: missing feature file")
        img = read_f32(img_path)
        txt = read_f32(txt_path)
        if img.shape[2] != 1 or txt.shape[2] != 1:
            raise DatasetError(f"sample {sample_id}: features must be 2-D [positions, dim]")
        img2, txt2 = img[:, :, 0], txt[:, :, 0]
        if txt2.shape[0] < 1:
            raise DatasetError(f"sample {sample_id}: text features have zero sentences")
        if dim_img is None:
            dim_img, dim_txt = img2.shape[1], txt2.shape[1]
        if img2.shape[1] != dim_img or txt2.shape[1] != dim_txt:
            raise DatasetError(
                f"sample {sample_id}: feature dimensions {img2.shape[1]}/{txt2.shape[1]} "
                f"do not match the first sample's {dim_img}/{dim_txt}"
            )
        side = int(round(img2.shape[0] ** 0.5))
        grid_shape = (side, side) if side * side == img2.shape[0] else None
        pairs.append(
            FeaturePair(
                sample_id=sample_id,
                image=LocalEmbeddings(
                    modality=Modality.IMAGE,
                    vectors=torch.from_numpy(img2.copy()),
                    grid_shape=grid_shape,
                ),
                text=LocalEmbeddings(
                    modality=Modality.TEXT, vectors=torch.from_numpy(txt2.copy())
                ),
            )
        )
    return pairs
