"""Phrase grounding, linear-probe segmentation, and heatmap export.

Grounding quality is scored with a contrast-to-noise ratio (CNR) between the
similarity values inside and outside the ground-truth boxes of a query.  The
segmentation probe trains a single affine map on frozen per-cell embeddings and
is scored with Dice.  ``preservation_correlation`` measures how much of the
pre-projection local similarity structure survives the projection — the
quantity the local objective is designed to protect.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .embeddings import (
    ContractViolation,
    LocalEmbeddings,
    Modality,
    SimilarityMatrix,
    pairwise_similarity,
    project_local,
    unit_rows,
)
from .encoders import Report
from .fileio import atomic_write_bytes, atomic_write_text
from .model import AlignmentModel
from .synthetic import AlignedSample, GridBox

__all__ = [
    "CnrResult",
    "DegenerateCaseError",
    "GroundingCase",
    "GroundingReport",
    "HeatmapExport",
    "ProbeConfig",
    "boxes_for_phrase",
    "build_grounding_cases",
    "case_cnr",
    "cnr",
    "confidence_interval",
    "dice",
    "export_heatmap",
    "grid_foreground_mask",
    "grounding_report",
    "linear_probe_train",
    "preservation_correlation",
    "preservation_score",
    "probe_dice_scores",
    "probe_pixel_mask",
    "read_heatmap_csv",
    "read_pgm",
    "report_csv",
    "sample_pixel_mask",
    "similarity_map",
    "upsample_mask",
]

CNR_EPS = 1e-8


# ---- similarity maps ---------------------------------------------------------


def similarity_map(query: Tensor, image_locals: LocalEmbeddings) -> SimilarityMatrix:
    """Per-cell cosine similarity between one query vector and every cell.

    Returns the map reshaped to the (rows, cols) spatial grid.  All positions
    must be valid (image grids always are).
    """
    if query.ndim != 1:
        raise ContractViolation("query must be a 1-D vector")
    if query.shape[0] != image_locals.dim:
        raise ContractViolation(
            f"dimension mismatch: query {query.shape[0]} vs locals {image_locals.dim}"
        )
    if not bool(image_locals.validity_mask.all()):
        raise ContractViolation("similarity_map requires fully valid locals")
    if image_locals.grid_shape is not None:
        rows, cols = image_locals.grid_shape
    else:
        side = math.isqrt(image_locals.count)
        if side * side != image_locals.count:
            raise ContractViolation(
                f"{image_locals.count} positions do not form a square grid"
            )
        rows = cols = side
    sims = unit_rows(image_locals.vectors) @ unit_rows(query[None, :])[0]
    values = sims.clamp(-1.0, 1.0).reshape(rows, cols)
    return SimilarityMatrix(
        values=values,
        row_mask=torch.ones(rows, dtype=torch.bool),
        col_mask=torch.ones(cols, dtype=torch.bool),
    )


# ---- contrast-to-noise ratio -------------------------------------------------


class DegenerateCaseError(ContractViolation):
    """A grounding case whose boxes leave no interior or no exterior cells."""

    def __init__(self, reason: str) -> None:
        super().__init__(f"degenerate grounding case: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class CnrResult:
    """Interior-vs-exterior contrast of a similarity map.

    ``non_absolute`` keeps the sign of (interior mean − exterior mean);
    ``absolute`` is its magnitude.  Variances are population variances.
    """

    non_absolute: float
    absolute: float
    n_in: int
    n_out: int
    mu_in: float
    mu_out: float
    var_in: float
    var_out: float

    def __post_init__(self) -> None:
        if self.n_in < 1 or self.n_out < 1:
            raise ContractViolation("CNR needs interior and exterior cells")
        if self.var_in < 0.0 or self.var_out < 0.0:
            raise ContractViolation("variances must be non-negative")
        if not math.isclose(self.absolute, abs(self.non_absolute), rel_tol=0.0, abs_tol=1e-12):
            raise ContractViolation("absolute CNR must equal |non-absolute CNR|")


def _interior_mask(boxes: Sequence[GridBox], rows: int, cols: int) -> Tensor:
    """Cells whose center lies inside any box (the rasterization rule)."""
    r_centers = torch.arange(rows, dtype=torch.float64) + 0.5
    c_centers = torch.arange(cols, dtype=torch.float64) + 0.5
    mask = torch.zeros(rows, cols, dtype=torch.bool)
    for box in boxes:
        in_rows = (r_centers >= box.row0) & (r_centers < box.row1)
        in_cols = (c_centers >= box.col0) & (c_centers < box.col1)
        mask |= in_rows[:, None] & in_cols[None, :]
    return mask


def cnr(map_values: Union[SimilarityMatrix, Tensor], boxes: Sequence[GridBox]) -> CnrResult:
    """Contrast-to-noise ratio of a grid map against ground-truth boxes.

    A cell is interior iff its center lies inside any box.  The denominator is
    sqrt(var_in + var_out + 1e-8), so identically constant maps score 0.
    """
    values = map_values.values if isinstance(map_values, SimilarityMatrix) else map_values
    if values.ndim != 2:
        raise ContractViolation("CNR expects a 2-D grid map")
    if not bool(torch.isfinite(values).all()):
        raise ContractViolation("CNR map contains non-finite values")
    rows, cols = values.shape
    for box in boxes:
        box.validate(max(rows, cols))
    interior = _interior_mask(boxes, rows, cols)
    flat = values.detach().to(torch.float64).reshape(-1)
    inside = flat[interior.reshape(-1)]
    outside = flat[~interior.reshape(-1)]
    if inside.numel() == 0:
        raise DegenerateCaseError("no_interior_cells")
    if outside.numel() == 0:
        raise DegenerateCaseError("no_exterior_cells")
    mu_in = float(inside.mean())
    mu_out = float(outside.mean())
    var_in = float(((inside - inside.mean()) ** 2).mean())
    var_out = float(((outside - outside.mean()) ** 2).mean())
    value = (mu_in - mu_out) / math.sqrt(var_in + var_out + CNR_EPS)
    return CnrResult(
        non_absolute=value,
        absolute=abs(value),
        n_in=int(inside.numel()),
        n_out=int(outside.numel()),
        mu_in=mu_in,
        mu_out=mu_out,
        var_in=var_in,
        var_out=var_out,
    )


# ---- grounding cases and reports ---------------------------------------------


@dataclass(frozen=True)
class GroundingCase:
    """One query phrase against one image, ready for scoring."""

    sample_id: str
    label: str
    query_text: str
    query_vector: Tensor
    image_locals: LocalEmbeddings
    boxes: Tuple[GridBox, ...]
    grid: int
    gt_box_count: int

    def __post_init__(self) -> None:
        if self.query_vector.ndim != 1:
            raise ContractViolation("query vector must be 1-D")
        if self.query_vector.shape[0] != self.image_locals.dim:
            raise ContractViolation("query and image locals disagree on dimension")
        for box in self.boxes:
            box.validate(self.grid)
        if self.gt_box_count != len(self.boxes):
            raise ContractViolation("gt_box_count must equal the number of boxes")
        interior = _interior_mask(self.boxes, self.grid, self.grid)
        n_in = int(interior.sum())
        if n_in == 0 or n_in == self.grid * self.grid:
            raise ContractViolation(
                "grounding case needs at least one interior and one exterior cell"
            )


def case_cnr(case: GroundingCase) -> CnrResult:
    return cnr(similarity_map(case.query_vector, case.image_locals), case.boxes)


def boxes_for_phrase(phrase: str, boxes: Sequence[GridBox]) -> Tuple[GridBox, ...]:
    """Boxes whose label occurs in the phrase; all boxes when none match."""
    lowered = phrase.lower()
    matched = tuple(b for b in boxes if b.label.lower() in lowered)
    return matched if matched else tuple(boxes)


def _case_label(phrase: str, used: Sequence[GridBox], matched: bool) -> str:
    if not matched:
        return "any"
    seen: List[str] = []
    for box in used:
        if box.label not in seen:
            seen.append(box.label)
    return "+".join(seen)


def build_grounding_cases(
    model: AlignmentModel,
    samples: Sequence[AlignedSample],
    queries: Mapping[str, str],
) -> Tuple[List[GroundingCase], Counter]:
    """Encode query/image pairs into scorable cases.

    Returns the valid cases plus a counter of excluded sample ids by reason:
    ``no_query`` (no phrase for the sample), ``no_interior_cells`` and
    ``no_exterior_cells`` (boxes cover nothing / the whole grid).
    """
    cases: List[GroundingCase] = []
    excluded: Counter = Counter()
    with torch.no_grad():
        for sample in samples:
            phrase = queries.get(sample.sample_id)
            if phrase is None or not phrase.strip():
                excluded["no_query"] += 1
                continue
            lowered = phrase.lower()
            matched = any(b.label.lower() in lowered for b in sample.gt_boxes)
            used = boxes_for_phrase(phrase, sample.gt_boxes)
            interior = _interior_mask(used, sample.grid, sample.grid)
            n_in = int(interior.sum())
            if n_in == 0:
                excluded["no_interior_cells"] += 1
                continue
            if n_in == sample.grid * sample.grid:
                excluded["no_exterior_cells"] += 1
                continue
            image_locals = project_local(model.encode_image(sample.image), model.image_head)
            query_raw = model.encode_report(Report.from_text(phrase))
            query_proj = project_local(query_raw, model.text_head)
            cases.append(
                GroundingCase(
                    sample_id=sample.sample_id,
                    label=_case_label(phrase, used, matched),
                    query_text=phrase,
                    query_vector=query_proj.vectors[0],
                    image_locals=image_locals,
                    boxes=used,
                    grid=sample.grid,
                    gt_box_count=len(used),
                )
            )
    return cases, excluded


@dataclass(frozen=True)
class GroundingReport:
    """Aggregate CNR statistics: overall, per label, per box-count subgroup."""

    rows: Tuple[Tuple[str, str, float, int], ...]
    excluded: Tuple[Tuple[str, int], ...]

    def value(self, group: str, metric: str) -> float:
        for g, m, v, _ in self.rows:
            if g == group and m == metric:
                return v
        raise KeyError(f"no row for ({group}, {metric})")

    def count(self, group: str) -> int:
        for g, _, _, n in self.rows:
            if g == group:
                return n
        raise KeyError(f"no row for group {group}")


def _group_rows(group: str, results: Sequence[CnrResult]) -> List[Tuple[str, str, float, int]]:
    n = len(results)
    if n == 0:
        return [(group, "cnr", math.nan, 0), (group, "cnr_abs", math.nan, 0)]
    mean_plain = sum(r.non_absolute for r in results) / n
    mean_abs = sum(r.absolute for r in results) / n
    return [(group, "cnr", mean_plain, n), (group, "cnr_abs", mean_abs, n)]


def grounding_report(
    cases: Sequence[GroundingCase],
    excluded: Optional[Mapping[str, int]] = None,
) -> GroundingReport:
    """Score every case and aggregate by group with deterministic ordering.

    Groups: ``Avg`` (per-sample mean over all cases), one group per finding
    label (sorted), and ``Single``/``Multiple`` by ground-truth box count.
    Cases that degenerate at scoring time are excluded and counted.
    """
    tally: Counter = Counter(excluded or {})
    scored: List[Tuple[GroundingCase, CnrResult]] = []
    for case in cases:
        try:
            scored.append((case, case_cnr(case)))
        except DegenerateCaseError as exc:
            tally[exc.reason] += 1
    if not scored:
        raise ContractViolation("no grounding cases survived exclusion")

    rows = _group_rows("Avg", [r for _, r in scored])
    for label in sorted({c.label for c, _ in scored}):
        rows.extend(_group_rows(label, [r for c, r in scored if c.label == label]))
    rows.extend(_group_rows("Single", [r for c, r in scored if c.gt_box_count == 1]))
    rows.extend(_group_rows("Multiple", [r for c, r in scored if c.gt_box_count >= 2]))
    return GroundingReport(
        rows=tuple(rows),
        excluded=tuple(sorted(tally.items())),
    )


def report_csv(report: GroundingReport) -> str:
    """Render a report as ``group,metric,value,n`` rows (exclusions last)."""
    lines = ["group,metric,value,n"]
    for group, metric, value, n in report.rows:
        rendered = "nan" if math.isnan(value) else f"{value:.10g}"
        lines.append(f"{group},{metric},{rendered},{n}")
    for reason, count in report.excluded:
        lines.append(f"excluded,{reason},{count},{count}")
    return "\n".join(lines) + "\n"


def confidence_interval(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and 1.96·sd/sqrt(n) half-width over repeated runs (sample sd)."""
    if not values:
        raise ContractViolation("confidence interval needs at least one value")
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(n)


# ---- Dice and the linear segmentation probe -----------------------------------


def dice(pred: Tensor, target: Tensor) -> float:
    """2|A∩B| / (|A|+|B|) over boolean masks; both empty counts as 1.0."""
    if pred.dtype != torch.bool or target.dtype != torch.bool:
        raise ContractViolation("dice expects boolean masks")
    if pred.shape != target.shape:
        raise ContractViolation(
            f"mask shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    total = int(pred.sum()) + int(target.sum())
    if total == 0:
        return 1.0
    overlap = int((pred & target).sum())
    return 2.0 * overlap / total


def grid_foreground_mask(sample: AlignedSample) -> Tensor:
    """Boolean (grid, grid) union of the sample's finding boxes."""
    return sample.cell_label_mask().reshape(sample.grid, sample.grid)


def upsample_mask(mask: Tensor, size: Tuple[int, int]) -> Tensor:
    """Nearest-neighbor upsample of a boolean grid mask to pixel resolution."""
    if mask.dtype != torch.bool or mask.ndim != 2:
        raise ContractViolation("upsample_mask expects a 2-D boolean mask")
    as_float = mask[None, None].to(torch.float32)
    up = F.interpolate(as_float, size=size, mode="nearest")
    return up[0, 0] > 0.5


def sample_pixel_mask(sample: AlignedSample) -> Tensor:
    """Ground-truth foreground at pixel resolution (nearest upsample)."""
    size = (sample.image.shape[1], sample.image.shape[2])
    return upsample_mask(grid_foreground_mask(sample), size)


@dataclass(frozen=True)
class ProbeConfig:
    """Settings for the frozen-encoder linear segmentation probe."""

    epochs: int = 200
    learning_rate: float = 1e-2
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractViolation("probe epochs must be at least 1")
        if self.learning_rate <= 0.0:
            raise ContractViolation("probe learning_rate must be positive")


def _frozen_cell_features(model: AlignmentModel, samples: Sequence[AlignedSample]) -> Tensor:
    feats = []
    with torch.no_grad():
        for sample in samples:
            projected = project_local(model.encode_image(sample.image), model.image_head)
            feats.append(projected.vectors)
    return torch.stack(feats)


def _parameter_fingerprint(model: AlignmentModel) -> bytes:
    return b"".join(
        p.detach().to(torch.float32).numpy().tobytes() for _, p in model.named_parameters()
    )


def linear_probe_train(
    model: AlignmentModel, samples: Sequence[AlignedSample], cfg: ProbeConfig = ProbeConfig()
) -> nn.Linear:
    """Train one affine cell-to-logit map on frozen projected embeddings.

    The encoder is used only under ``no_grad`` and is asserted bit-identical
    before and after.  Training is full-batch binary cross-entropy against the
    grid-rasterized ground-truth masks.
    """
    cfg.validate()
    if not samples:
        raise ContractViolation("probe training needs a non-empty dataset")
    grid = samples[0].grid
    for sample in samples:
        if sample.grid != grid:
            raise ContractViolation("probe dataset mixes grid sizes")
    before = _parameter_fingerprint(model)
    features = _frozen_cell_features(model, samples)
    labels = torch.stack(
        [sample.cell_label_mask().to(torch.float32) for sample in samples]
    )
    if labels.shape != features.shape[:2]:
        raise ContractViolation(
            f"mask cells {tuple(labels.shape)} do not match features {tuple(features.shape[:2])}"
        )
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        probe = nn.Linear(features.shape[-1], 1)
    optimizer = torch.optim.Adam(probe.parameters(), lr=cfg.learning_rate)
    flat_x = features.reshape(-1, features.shape[-1])
    flat_y = labels.reshape(-1)
    criterion = nn.BCEWithLogitsLoss()
    for _ in range(cfg.epochs):
        optimizer.zero_grad()
        logits = probe(flat_x)[:, 0]
        loss = criterion(logits, flat_y)
        loss.backward()
        optimizer.step()
    if _parameter_fingerprint(model) != before:
        raise ContractViolation("probe training modified the frozen encoder")
    return probe


def probe_pixel_mask(probe: nn.Linear, model: AlignmentModel, sample: AlignedSample) -> Tensor:
    """Predicted foreground at pixel resolution: logits > 0, nearest upsample."""
    with torch.no_grad():
        projected = project_local(model.encode_image(sample.image), model.image_head)
        logits = probe(projected.vectors)[:, 0]
    grid_mask = (logits > 0).reshape(sample.grid, sample.grid)
    size = (sample.image.shape[1], sample.image.shape[2])
    return upsample_mask(grid_mask, size)


def probe_dice_scores(
    probe: nn.Linear, model: AlignmentModel, samples: Sequence[AlignedSample]
) -> List[float]:
    """Per-sample Dice between predicted and ground-truth pixel masks."""
    return [
        dice(probe_pixel_mask(probe, model, sample), sample_pixel_mask(sample))
        for sample in samples
    ]


# ---- similarity-structure preservation ----------------------------------------


def preservation_correlation(
    raw: Union[LocalEmbeddings, Tensor], projected: Union[LocalEmbeddings, Tensor]
) -> float:
    """Pearson correlation of the two upper-triangle pairwise-similarity sets.

    Measures how much of the pre-projection similarity structure survives
    into the projected space.  Degenerate (zero-variance) inputs score 0.0.
    """
    sims_raw = pairwise_similarity(raw, raw)
    sims_proj = pairwise_similarity(projected, projected)
    if sims_raw.values.shape != sims_proj.values.shape:
        raise ContractViolation("raw and projected position counts differ")
    valid = sims_raw.valid & sims_proj.valid
    n = sims_raw.values.shape[0]
    if n < 2:
        raise ContractViolation("preservation needs at least two positions")
    triu = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1) & valid
    if int(triu.sum()) < 2:
        raise ContractViolation("preservation needs at least two valid pairs")
    a = sims_raw.values[triu].detach().to(torch.float64).numpy()
    b = sims_proj.values[triu].detach().to(torch.float64).numpy()
    if float(a.std()) == 0.0 or float(b.std()) == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def preservation_score(
    model: AlignmentModel,
    samples: Sequence[AlignedSample],
    modality: Modality = Modality.IMAGE,
) -> float:
    """Mean per-sample preservation correlation over a dataset."""
    if not samples:
        raise ContractViolation("preservation score needs samples")
    scores = []
    with torch.no_grad():
        for sample in samples:
            if modality is Modality.IMAGE:
                raw = model.encode_image(sample.image)
                proj = project_local(raw, model.image_head)
            else:
                raw = model.encode_report(sample.report)
                proj = project_local(raw, model.text_head)
                if raw.valid_count < 3:
                    continue
            scores.append(preservation_correlation(raw, proj))
    if not scores:
        raise ContractViolation("no sample had enough positions for preservation")
    return sum(scores) / len(scores)


# ---- heatmap export ------------------------------------------------------------


@dataclass(frozen=True)
class HeatmapExport:
    """Paths and normalization facts for one exported similarity map."""

    pgm_path: Path
    sidecar_path: Path
    csv_path: Optional[Path]
    vmin: float
    vmax: float
    constant: bool


def export_heatmap(
    map_values: Union[SimilarityMatrix, Tensor, np.ndarray],
    path: Union[str, Path],
    *,
    write_csv: bool = False,
    upsample_to: Optional[Tuple[int, int]] = None,
) -> HeatmapExport:
    """Write a min-max normalized 8-bit grayscale PGM of a 2-D map.

    The sidecar ``<name>.txt`` records the normalization min/max and whether
    the map was constant (constant maps render mid-gray, value 128).  With
    ``write_csv`` the raw (pre-normalization, pre-upsampling) values go to
    ``<name>.csv`` with full float precision for exact round-trips.
    ``upsample_to`` bilinearly enlarges the written image for overlays.
    """
    if isinstance(map_values, SimilarityMatrix):
        values = map_values.values
    elif isinstance(map_values, np.ndarray):
        values = torch.from_numpy(np.ascontiguousarray(map_values))
    else:
        values = map_values
    if values.ndim != 2 or values.numel() == 0:
        raise ContractViolation("heatmap expects a non-empty 2-D map")
    values = values.detach().to(torch.float64)
    if not bool(torch.isfinite(values).all()):
        raise ContractViolation("heatmap values must be finite")

    raw = values.clone()
    if upsample_to is not None:
        h, w = upsample_to
        if h < 1 or w < 1:
            raise ContractViolation("upsample size must be positive")
        values = F.interpolate(
            values[None, None], size=(h, w), mode="bilinear", align_corners=False
        )[0, 0]

    vmin = float(values.min())
    vmax = float(values.max())
    constant = vmin == vmax
    if constant:
        pixels = np.full(tuple(values.shape), 128, dtype=np.uint8)
    else:
        scaled = (values - vmin) / (vmax - vmin) * 255.0
        pixels = np.rint(scaled.numpy()).clip(0, 255).astype(np.uint8)

    pgm_path = Path(path)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(pgm_path, header + pixels.tobytes())

    sidecar_path = pgm_path.with_name(pgm_path.name + ".txt")
    sidecar = (
        f"min={vmin:.17g}\nmax={vmax:.17g}\nconstant={'true' if constant else 'false'}\n"
    )
    atomic_write_text(sidecar_path, sidecar)

    csv_path: Optional[Path] = None
    if write_csv:
        csv_path = pgm_path.with_name(pgm_path.name + ".csv")
        lines = [",".join(f"{float(v):.17g}" for v in row) for row in raw.numpy()]
        atomic_write_text(csv_path, "\n".join(lines) + "\n")

    return HeatmapExport(
        pgm_path=pgm_path,
        sidecar_path=sidecar_path,
        csv_path=csv_path,
        vmin=vmin,
        vmax=vmax,
        constant=constant,
    )


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read back a binary 8-bit PGM written by :func:`export_heatmap`."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ContractViolation("not a binary PGM file")
    parts = blob.split(b"\n", 3)
    if len(parts) != 4:
        raise ContractViolation("malformed PGM header")
    width, height = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise ContractViolation("expected 8-bit PGM")
    data = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return data.reshape(height, width).copy()


def read_heatmap_csv(path: Union[str, Path]) -> np.ndarray:
    """Read back the exact raw values written by ``export_heatmap(write_csv=True)``."""
    rows = [
        [float(cell) for cell in line.split(",")]
        for line in Path(path).read_text().strip().splitlines()
    ]
    return np.asarray(rows, dtype=np.float64)
