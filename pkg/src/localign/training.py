"""Pre-training loop: batching, augmentation, schedules, checkpoints, resume.

Reproducibility design: no hidden RNG state survives between steps.  Every
random draw is derived from a fresh ``numpy`` generator keyed on
``(seed, stream, epoch, index)``, so epoch ``k`` of a resumed run replays the
exact draws of epoch ``k`` of an uninterrupted run, and checkpoints never
need to serialize RNG state.  Streams: 1 = epoch shuffling, 2 = augmentation.

The loss path exists twice on purpose: :func:`forward_batch` composes the
single-sample reference API, batched, and the test suite pins the two
implementations against each other.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import Tensor
from torchvision.transforms import InterpolationMode

from .config import config_hash, flatten_config
from .embeddings import ContractViolation, masked_softmax, unit_rows
from .losses import (
    LOG_EPS,
    LossBundle,
    LossConfig,
    Reduction,
    global_loss_from_similarity,
    total_loss,
)
from .model import AlignmentModel, BatchOutputs, ModelConfig, build_model
from .synthetic import AlignedSample, FeaturePair

__all__ = [
    "AugmentConfig",
    "CHECKPOINT_MAGIC",
    "CheckpointData",
    "CheckpointError",
    "EpochMetrics",
    "METRICS_HEADER",
    "PolarityCalibration",
    "Schedule",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "augment",
    "calibrate_alignment_polarity",
    "cosine_lr",
    "forward_batch",
    "load_checkpoint",
    "metrics_csv",
    "mispair_samples",
    "restore_training_state",
    "save_checkpoint",
    "train",
    "train_config_fingerprint",
]


class Schedule(enum.Enum):
    COSINE = "cosine"
    STEP = "step"
    PLATEAU = "plateau"


@dataclass(frozen=True)
class AugmentConfig:
    """Image augmentation ranges; every range's endpoints are inclusive.

    Ops run in a fixed order — rotation, scaling, brightness, contrast,
    horizontal flip, area-fraction random resized crop, Gaussian blur — and
    an op whose draw lands exactly on its identity value is skipped, so
    collapsing every range to identity reproduces the input bit-for-bit.
    """

    enabled: bool = True
    rotation_degrees: Tuple[float, float] = (-20.0, 20.0)
    scaling: Tuple[float, float] = (0.95, 1.05)
    brightness: Tuple[float, float] = (0.6, 1.4)
    contrast: Tuple[float, float] = (0.6, 1.4)
    horizontal_flip_prob: float = 0.5
    crop_area: Tuple[float, float] = (0.6, 1.0)
    blur_sigma: Tuple[float, float] = (0.1, 3.0)
    blur_kernel_size: int = 5

    def validate(self) -> None:
        for name in ("rotation_degrees", "scaling", "brightness", "contrast", "crop_area", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractViolation(f"{name} range is not ordered")
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ContractViolation("horizontal_flip_prob must be a probability")
        if not (0.0 < self.crop_area[0] <= self.crop_area[1] <= 1.0):
            raise ContractViolation("crop_area must lie in (0, 1]")
        if self.blur_sigma[0] < 0.0:
            raise ContractViolation("blur_sigma must be non-negative")
        if self.blur_kernel_size < 1 or self.blur_kernel_size % 2 == 0:
            raise ContractViolation("blur_kernel_size must be odd and positive")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """Enabled, but every op collapsed to its identity value."""
        return cls(
            rotation_degrees=(0.0, 0.0),
            scaling=(1.0, 1.0),
            brightness=(1.0, 1.0),
            contrast=(1.0, 1.0),
            horizontal_flip_prob=0.0,
            crop_area=(1.0, 1.0),
            blur_sigma=(0.0, 0.0),
        )


def augment(image: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Randomized photometric/geometric transform of one [C, H, W] image.

    Draws come from ``rng`` in a fixed order so a seeded generator reproduces
    the transform exactly.  Output is clipped to [0, 1].
    """
    if image.ndim != 3:
        raise ContractViolation("augment expects a [channels, H, W] image")
    if not cfg.enabled:
        return image
    cfg.validate()
    x = image

    angle = float(rng.uniform(*cfg.rotation_degrees))
    if angle != 0.0:
        x = TF.rotate(x, angle, interpolation=InterpolationMode.BILINEAR, fill=[0.0])

    scale = float(rng.uniform(*cfg.scaling))
    if scale != 1.0:
        x = TF.affine(
            x,
            angle=0.0,
            translate=[0, 0],
            scale=scale,
            shear=[0.0, 0.0],
            interpolation=InterpolationMode.BILINEAR,
            fill=[0.0],
        )

    brightness = float(rng.uniform(*cfg.brightness))
    if brightness != 1.0:
        x = x * brightness

    contrast = float(rng.uniform(*cfg.contrast))
    if contrast != 1.0:
        mean = x.mean()
        x = (x - mean) * contrast + mean

    if float(rng.random()) < cfg.horizontal_flip_prob:
        x = TF.hflip(x)

    area = float(rng.uniform(*cfg.crop_area))
    if area != 1.0:
        h, w = x.shape[-2:]
        side = math.sqrt(area)
        crop_h = min(h, max(1, int(round(h * side))))
        crop_w = min(w, max(1, int(round(w * side))))
        top = int(rng.integers(0, h - crop_h + 1))
        left = int(rng.integers(0, w - crop_w + 1))
        x = TF.resized_crop(
            x, top, left, crop_h, crop_w, [h, w],
            interpolation=InterpolationMode.BILINEAR, antialias=True,
        )

    sigma = float(rng.uniform(*cfg.blur_sigma))
    if sigma > 0.0:
        k = cfg.blur_kernel_size
        x = TF.gaussian_blur(x, kernel_size=[k, k], sigma=[sigma, sigma])

    return x.clamp(0.0, 1.0)


@dataclass
class TrainConfig:
    """Everything a training run depends on (data aside)."""

    epochs: int = 50
    learning_rate: float = 1e-4
    schedule: Schedule = Schedule.COSINE
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    early_stop_patience: Optional[int] = None
    grad_accum_steps: int = 1
    step_milestones: Tuple[int, ...] = (30, 40)
    step_gamma: float = 0.1
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    polarity_calibration: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractViolation("epochs must be at least 1")
        if self.learning_rate < 0:
            raise ContractViolation("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be at least 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractViolation("val_fraction must lie in [0, 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ContractViolation("early_stop_patience must be positive when set")
        if self.grad_accum_steps < 1:
            raise ContractViolation("grad_accum_steps must be at least 1")
        if not 0.0 < self.step_gamma <= 1.0:
            raise ContractViolation("step_gamma must lie in (0, 1]")
        if any(m < 0 for m in self.step_milestones):
            raise ContractViolation("step_milestones must be non-negative epochs")
        if self.plateau_patience < 1:
            raise ContractViolation("plateau_patience must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ContractViolation("plateau_factor must lie in (0, 1)")
        self.augment.validate()
        self.loss.validate()
        self.model.validate()


def train_config_fingerprint(cfg: TrainConfig) -> str:
    """Stable hash of the fully resolved config tree."""
    return config_hash(flatten_config(cfg, prefix="train."))


# ---- batched objective -------------------------------------------------------


def _valid_pairs(mask: Tensor, cfg: LossConfig) -> Tensor:
    valid = mask[:, :, None] & mask[:, None, :]
    if cfg.mask_self_similarity_diagonal:
        n = mask.shape[1]
        valid = valid & ~torch.eye(n, dtype=torch.bool, device=mask.device)
    return valid


def _batched_targets(raw: Tensor, mask: Tensor, cfg: LossConfig) -> Tuple[Tensor, Tensor]:
    """Row- and column-normalized intra-modal target maps for a raw batch."""
    target_vectors = raw.detach() if cfg.target_gradient_blocked else raw
    target_sims = (unit_rows(target_vectors) @ unit_rows(target_vectors).transpose(-1, -2)).clamp(-1.0, 1.0)
    valid = _valid_pairs(mask, cfg)
    p_row = masked_softmax(target_sims / cfg.tau_local_target, valid, dim=2)
    p_col = masked_softmax(target_sims / cfg.tau_local_target, valid, dim=1)
    return p_row, p_col


def _batched_local_loss(
    raw: Tensor,
    proj: Tensor,
    cross: Tensor,
    mask: Tensor,
    cfg: LossConfig,
    targets: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tensor:
    """Mean over the batch of the per-sample local contrastive loss.

    Matches the single-sample reference (`losses.local_contrastive_loss` with
    targets from `losses.intra_modal_target`) exactly, except that a sample
    with zero valid position pairs contributes 0 instead of raising.
    ``targets`` substitutes precomputed target maps (derivative checks pin
    them at a base point, since blocked targets are constants to autograd).
    """
    source_sims = (unit_rows(proj) @ unit_rows(cross).transpose(-1, -2)).clamp(-1.0, 1.0)

    valid = _valid_pairs(mask, cfg)
    p_row, p_col = targets if targets is not None else _batched_targets(raw, mask, cfg)
    q_row = masked_softmax(source_sims / cfg.tau_local_source, valid, dim=2)
    q_col = masked_softmax(source_sims / cfg.tau_local_source, valid, dim=1)

    per_sample = -(
        (p_row * torch.log(q_row + LOG_EPS)).sum(dim=(1, 2))
        + (p_col * torch.log(q_col + LOG_EPS)).sum(dim=(1, 2))
    )
    if cfg.reduction is Reduction.MEAN:
        pairs = valid.sum(dim=(1, 2))
        per_sample = per_sample / pairs.clamp(min=1).to(per_sample.dtype)
    return per_sample.mean()


def batched_targets(outputs: BatchOutputs, cfg: LossConfig) -> Tuple[Tuple[Tensor, Tensor], Tuple[Tensor, Tensor]]:
    """Detached (image, text) target maps for this batch at current parameters."""
    b, n_cells = outputs.image_raw.shape[0], outputs.image_raw.shape[1]
    image_mask = torch.ones(b, n_cells, dtype=torch.bool, device=outputs.image_raw.device)
    img = _batched_targets(outputs.image_raw, image_mask, cfg)
    txt = _batched_targets(outputs.text_raw, outputs.text_mask, cfg)
    return (img[0].detach(), img[1].detach()), (txt[0].detach(), txt[1].detach())


def loss_from_outputs(
    outputs: BatchOutputs,
    cfg: LossConfig,
    *,
    pinned_targets: Optional[Tuple[Tuple[Tensor, Tensor], Tuple[Tensor, Tensor]]] = None,
) -> LossBundle:
    """All four objectives plus their weighted total, from one forward pass.

    ``pinned_targets`` (from :func:`batched_targets`) freezes the local target
    maps at a base point; at that point the value and gradient equal the
    unpinned loss's, which makes finite-difference checks of the blocked
    objective well-defined.
    """
    cfg.validate()
    sims = (unit_rows(outputs.image_global) @ unit_rows(outputs.text_global).T).clamp(-1.0, 1.0)
    global_it, global_ti = global_loss_from_similarity(sims, cfg.tau_global)

    b, n_cells = outputs.image_raw.shape[0], outputs.image_raw.shape[1]
    image_mask = torch.ones(b, n_cells, dtype=torch.bool, device=outputs.image_raw.device)
    local_image = _batched_local_loss(
        outputs.image_raw,
        outputs.image_proj,
        outputs.image_cross,
        image_mask,
        cfg,
        targets=pinned_targets[0] if pinned_targets is not None else None,
    )
    local_text = _batched_local_loss(
        outputs.text_raw,
        outputs.text_proj,
        outputs.text_cross,
        outputs.text_mask,
        cfg,
        targets=pinned_targets[1] if pinned_targets is not None else None,
    )
    components = (global_it, global_ti, local_image, local_text)
    return LossBundle(
        global_image_given_text=global_it,
        global_text_given_image=global_ti,
        local_image=local_image,
        local_text=local_text,
        total=total_loss(components, cfg.lambdas),
        batch_size=b,
    )


Batch = Union[Sequence[AlignedSample], Sequence[FeaturePair]]


def _tensors_from_samples(
    model: AlignmentModel,
    samples: Sequence[AlignedSample],
    augment_cfg: Optional[AugmentConfig],
    rng: Optional[np.random.Generator],
) -> Tuple[Tensor, Tensor, Tensor]:
    images = []
    for sample in samples:
        img = sample.image
        if augment_cfg is not None and augment_cfg.enabled:
            if rng is None:
                raise ContractViolation("augmentation requires an rng")
            img = augment(img, augment_cfg, rng)
        images.append(img)
    bags, mask = model.text_inputs([s.report for s in samples])
    return torch.stack(images), bags, mask


def _tensors_from_features(
    model: AlignmentModel, pairs: Sequence[FeaturePair]
) -> Tuple[Tensor, Tensor, Tensor]:
    n_cells = pairs[0].image.count
    for pair in pairs:
        if pair.image.count != n_cells:
            raise ContractViolation(
                f"sample {pair.sample_id}: {pair.image.count} image positions, expected {n_cells}"
            )
    image_raw = torch.stack([p.image.vectors for p in pairs])
    max_sent = max(p.text.count for p in pairs)
    text_raw = torch.zeros(len(pairs), max_sent, pairs[0].text.dim)
    mask = torch.zeros(len(pairs), max_sent, dtype=torch.bool)
    for i, pair in enumerate(pairs):
        text_raw[i, : pair.text.count] = pair.text.vectors
        mask[i, : pair.text.count] = pair.text.validity_mask
    return image_raw, text_raw, mask


def forward_batch(
    model: AlignmentModel,
    batch: Batch,
    loss_config: LossConfig,
    *,
    augment_config: Optional[AugmentConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> LossBundle:
    """One forward pass over paired samples (or precomputed features).

    Deterministic whenever augmentation is disabled or ``rng`` is seeded.
    """
    if len(batch) < 1:
        raise ContractViolation("batch must contain at least one sample")
    try:
        if isinstance(batch[0], FeaturePair):
            image_raw, text_raw, mask = _tensors_from_features(model, batch)
            outputs = model.forward_features(image_raw, text_raw, mask)
        else:
            images, bags, mask = _tensors_from_samples(model, batch, augment_config, rng)
            outputs = model.forward_batch(images, bags, mask)
        return loss_from_outputs(outputs, loss_config)
    except ContractViolation as exc:
        first = getattr(batch[0], "sample_id", "?")
        raise ContractViolation(f"batch starting at sample {first}: {exc}") from exc


# ---- schedules ---------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay: exactly ``base_lr`` at step 0, exactly 0 at the end."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ContractViolation(f"step {step} outside schedule of {total_steps} steps")
    if total_steps == 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def _step_lr(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for m in cfg.step_milestones if epoch >= m)
    return cfg.learning_rate * (cfg.step_gamma**drops)


def _plateau_multipliers(monitors: Sequence[float], patience: int, factor: float) -> List[float]:
    """Multiplier in force for each epoch, given past monitor values.

    Epoch ``e`` uses the multiplier implied by ``monitors[:e]``; replaying the
    history therefore reconstructs the schedule state exactly on resume.
    """
    out: List[float] = []
    best = math.inf
    streak = 0
    mult = 1.0
    for value in [None] + list(monitors[:-1] if monitors else []):
        if value is not None:
            if value < best:
                best = value
                streak = 0
            else:
                streak += 1
                if streak >= patience:
                    mult *= factor
                    streak = 0
        out.append(mult)
    return out


# ---- metrics -----------------------------------------------------------------

METRICS_HEADER = "epoch,global_it,global_ti,local_img,local_txt,total,lr"


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    global_it: float
    global_ti: float
    local_img: float
    local_txt: float
    total: float
    lr: float
    val_total: Optional[float] = None

    def csv_row(self) -> str:
        cells = [str(self.epoch)] + [
            format(v, ".10g")
            for v in (self.global_it, self.global_ti, self.local_img, self.local_txt, self.total, self.lr)
        ]
        return ",".join(cells)

    def as_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "epoch": self.epoch,
            "global_it": self.global_it,
            "global_ti": self.global_ti,
            "local_img": self.local_img,
            "local_txt": self.local_txt,
            "total": self.total,
            "lr": self.lr,
        }
        if self.val_total is not None:
            out["val_total"] = self.val_total
        return out

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "EpochMetrics":
        return cls(
            epoch=int(payload["epoch"]),
            global_it=float(payload["global_it"]),
            global_ti=float(payload["global_ti"]),
            local_img=float(payload["local_img"]),
            local_txt=float(payload["local_txt"]),
            total=float(payload["total"]),
            lr=float(payload["lr"]),
            val_total=float(payload["val_total"]) if "val_total" in payload else None,
        )


def metrics_csv(history: Sequence[EpochMetrics]) -> str:
    lines = [METRICS_HEADER] + [m.csv_row() for m in history]
    return "\n".join(lines) + "\n"


# ---- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"LAGNCKPT"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with the model/config."""


@dataclass(eq=False)
class CheckpointData:
    manifest: dict
    tensors: Dict[str, Tensor]

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def config_hash(self) -> str:
        return str(self.manifest["config_hash"])

    def history(self) -> List[EpochMetrics]:
        return [EpochMetrics.from_dict(h) for h in self.manifest["history"]]


def _optimizer_slices(model: AlignmentModel, optimizer: torch.optim.Adam):
    for name, param in model.named_parameters():
        state = optimizer.state.get(param, {})
        step = int(state["step"].item()) if "step" in state else 0
        exp_avg = state.get("exp_avg", torch.zeros_like(param))
        exp_avg_sq = state.get("exp_avg_sq", torch.zeros_like(param))
        yield name, step, exp_avg, exp_avg_sq


def save_checkpoint(
    path: Union[str, Path],
    model: AlignmentModel,
    optimizer: torch.optim.Adam,
    *,
    epoch: int,
    config_hash_value: str,
    history: Sequence[EpochMetrics],
    extra: Optional[dict] = None,
) -> None:
    """Single-file checkpoint: magic, JSON manifest, float32 tensor payload.

    Layout: ``MAGIC | uint64 manifest length | manifest JSON | tensors``,
    where the manifest lists each tensor's name, shape, and byte offset into
    the payload.  Adam's integer step counts live in the manifest; its moment
    tensors live in the payload next to the parameters.
    """
    names: List[Tuple[str, Tensor]] = []
    adam_steps: Dict[str, int] = {}
    for name, param in model.named_parameters():
        names.append((f"param.{name}", param.detach()))
    for name, step, exp_avg, exp_avg_sq in _optimizer_slices(model, optimizer):
        adam_steps[name] = step
        names.append((f"adam.exp_avg.{name}", exp_avg))
        names.append((f"adam.exp_avg_sq.{name}", exp_avg_sq))

    entries = []
    blobs = []
    offset = 0
    for name, tensor in names:
        data = tensor.detach().cpu().contiguous().to(torch.float32).numpy().tobytes()
        entries.append(
            {"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(tensor.numel())}
        )
        blobs.append(data)
        offset += len(data)

    manifest = {
        "format_version": 1,
        "epoch": int(epoch),
        "config_hash": config_hash_value,
        "history": [m.as_dict() for m in history],
        "adam_steps": adam_steps,
        "tensors": entries,
        "extra": extra or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + _LEN.pack(len(manifest_bytes)) + manifest_bytes + b"".join(blobs)

    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, payload)


def load_checkpoint(path: Union[str, Path]) -> CheckpointData:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + _LEN.size
    if len(data) < head or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{Path(path).name}: not a checkpoint file")
    (manifest_len,) = _LEN.unpack_from(data, len(CHECKPOINT_MAGIC))
    if len(data) < head + manifest_len:
        raise CheckpointError(f"{Path(path).name}: truncated manifest")
    try:
        manifest = json.loads(data[head : head + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{Path(path).name}: malformed manifest: {exc}") from exc
    payload = data[head + manifest_len :]
    tensors: Dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        start, count = entry["offset"], entry["count"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{Path(path).name}: tensor {entry['name']} out of bounds")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).reshape(entry["shape"])
    return CheckpointData(manifest=manifest, tensors=tensors)


def restore_training_state(
    model: AlignmentModel, optimizer: Optional[torch.optim.Adam], ckpt: CheckpointData
) -> None:
    """Load parameters (and, if given, Adam moments/steps) from a checkpoint."""
    named = dict(model.named_parameters())
    for name, param in named.items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        if tuple(ckpt.tensors[key].shape) != tuple(param.shape):
            raise CheckpointError(f"checkpoint tensor {key} has wrong shape")
        with torch.no_grad():
            param.copy_(ckpt.tensors[key])
    if optimizer is None:
        return
    steps = ckpt.manifest.get("adam_steps", {})
    for name, param in named.items():
        avg_key, sq_key = f"adam.exp_avg.{name}", f"adam.exp_avg_sq.{name}"
        if avg_key not in ckpt.tensors or sq_key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing optimizer state for {name}")
        optimizer.state[param] = {
            "step": torch.tensor(float(steps.get(name, 0))),
            "exp_avg": ckpt.tensors[avg_key].clone().reshape(param.shape),
            "exp_avg_sq": ckpt.tensors[sq_key].clone().reshape(param.shape),
        }


# ---- the training loop -------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the last good checkpoint is left on disk."""

    def __init__(self, epoch: int, checkpoint_path: Optional[Path]) -> None:
        super().__init__(
            f"training diverged (non-finite loss) during epoch {epoch}; "
            f"last good checkpoint: {checkpoint_path}"
        )
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class PolarityCalibration:
    """Outcome of the post-training sign fix for the text local head.

    ``mean_contrast`` is the signed region-vs-background contrast averaged
    over the scored training cases *after* any flip, ``flipped`` says whether
    the head was negated, and ``cases`` counts the scored cases.
    """

    mean_contrast: float
    flipped: bool
    cases: int


@dataclass(eq=False)
class TrainResult:
    model: AlignmentModel
    history: List[EpochMetrics]
    checkpoint_path: Optional[Path]
    config_hash: str
    stopped_early: bool = False
    calibration: Optional[PolarityCalibration] = None


def split_train_val(
    samples: Sequence[AlignedSample], val_fraction: float
) -> Tuple[List[AlignedSample], List[AlignedSample]]:
    """Deterministic id-hash split, independent of sample order."""
    cut = int(round(val_fraction * 1000))
    train_set, val_set = [], []
    for sample in samples:
        bucket = zlib.crc32(sample.sample_id.encode("utf-8")) % 1000
        (val_set if bucket < cut else train_set).append(sample)
    return train_set, val_set


def mispair_samples(samples: Sequence[AlignedSample], seed: int) -> List[AlignedSample]:
    """Control condition: every image paired with some other sample's report."""
    n = len(samples)
    if n < 2:
        raise ContractViolation("mispairing needs at least two samples")
    order = np.random.default_rng((seed, 97)).permutation(n)
    out = []
    for k in range(n):
        img_src = samples[int(order[k])]
        txt_src = samples[int(order[(k + 1) % n])]
        out.append(
            AlignedSample(
                sample_id=f"{img_src.sample_id}+{txt_src.sample_id}",
                image=img_src.image,
                report=txt_src.report,
                gt_boxes=txt_src.gt_boxes,
                gt_alignment=txt_src.gt_alignment,
                grid=txt_src.grid,
            )
        )
    return out


def calibrate_alignment_polarity(
    model: AlignmentModel,
    samples: Sequence[AlignedSample],
    *,
    max_cases: int = 256,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Optional[PolarityCalibration]:
    """Pick the sign convention in which planted regions score positive.

    The training objective is exactly invariant under negating the text
    local projection (weight and bias together): the raw-cosine attention
    weights and the bias-free value transform each flip sign, so their
    product — and with it every cross-attended vector, both local loss
    terms, and the separately-pooled global terms — is unchanged.  Each run
    therefore lands on an arbitrary polarity, and phrase-grounding
    similarity maps inherit that coin flip.

    This measures the mean signed region-vs-background contrast on up to
    ``max_cases`` samples and, when it is negative, negates the text local
    head in place (and, when an optimizer is supplied, its first-moment
    state for those parameters, keeping a later resume consistent; the
    second moment is sign-invariant).  Returns the post-flip outcome, or
    ``None`` when no sample yields a scoreable case.  Running it twice is a
    no-op the second time.
    """
    from .evaluation import build_grounding_cases, case_cnr
    from .synthetic import default_query

    queries: Dict[str, str] = {}
    subset: List[AlignedSample] = []
    for sample in samples:
        if len(subset) >= max_cases:
            break
        if not sample.gt_boxes:
            continue
        phrase = default_query(sample)
        if phrase is None:
            continue
        queries[sample.sample_id] = phrase
        subset.append(sample)
    if not subset:
        return None
    cases, _ = build_grounding_cases(model, subset, queries)
    if not cases:
        return None
    mean = sum(case_cnr(c).non_absolute for c in cases) / len(cases)
    flipped = mean < 0.0
    if flipped:
        head = model.text_head.local_map
        with torch.no_grad():
            head.weight.neg_()
            if head.bias is not None:
                head.bias.neg_()
            if optimizer is not None:
                for param in (head.weight, head.bias):
                    if param is None:
                        continue
                    state = optimizer.state.get(param)
                    if state is not None and "exp_avg" in state:
                        state["exp_avg"].neg_()
        # Negating the head negates every cosine against its outputs exactly,
        # so the post-flip mean needs no second forward pass.
        mean = -mean
    return PolarityCalibration(mean_contrast=mean, flipped=flipped, cases=len(cases))


def _epoch_mean(
    model: AlignmentModel,
    images: Tensor,
    bags: Tensor,
    masks: Tensor,
    batch_size: int,
    loss_cfg: LossConfig,
) -> float:
    """Sample-weighted mean total loss over a fixed set, without gradients."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            stop = min(start + batch_size, images.shape[0])
            outputs = model.forward_batch(images[start:stop], bags[start:stop], masks[start:stop])
            bundle = loss_from_outputs(outputs, loss_cfg)
            total += float(bundle.total) * (stop - start)
    return total / images.shape[0]


def train(
    samples: Sequence[AlignedSample],
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    *,
    resume_from: Optional[Union[str, Path]] = None,
    on_epoch_end: Optional[Callable[[EpochMetrics, AlignmentModel], None]] = None,
) -> TrainResult:
    """Run the full pre-training loop.

    Writes ``checkpoint.bin`` and ``metrics.csv`` under ``out_dir`` after
    every epoch (atomically).  ``resume_from`` continues an interrupted run
    and, by the stateless-RNG design, reproduces the uninterrupted run's
    metrics exactly.  Raises :class:`TrainingDiverged` on a non-finite loss,
    leaving the last completed epoch's checkpoint in place.
    """
    cfg.validate()
    if len(samples) < 1:
        raise ContractViolation("training needs a non-empty dataset")
    fingerprint = train_config_fingerprint(cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_path / "checkpoint.bin" if out_path is not None else None

    train_set, val_set = split_train_val(samples, cfg.val_fraction)
    if not train_set:
        raise ContractViolation("validation split swallowed every sample")

    model = build_model(cfg.model, cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )

    n = len(train_set)
    n_batches = math.ceil(n / cfg.batch_size)
    steps_per_epoch = math.ceil(n_batches / cfg.grad_accum_steps)
    total_steps = cfg.epochs * steps_per_epoch

    history: List[EpochMetrics] = []
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != fingerprint:
            raise CheckpointError(
                "checkpoint config hash does not match the current configuration"
            )
        extra = ckpt.manifest.get("extra", {})
        if extra.get("train_size") not in (None, n):
            raise CheckpointError(
                f"checkpoint was trained on {extra.get('train_size')} samples, got {n}"
            )
        restore_training_state(model, optimizer, ckpt)
        history = ckpt.history()
        start_epoch = ckpt.epoch + 1

    # Static text inputs and (when augmentation is off) static image stacks.
    train_bags, train_masks = model.text_inputs([s.report for s in train_set])
    train_images = torch.stack([s.image for s in train_set])
    if val_set:
        val_bags, val_masks = model.text_inputs([s.report for s in val_set])
        val_images = torch.stack([s.image for s in val_set])

    def monitor_of(m: EpochMetrics) -> float:
        return m.val_total if m.val_total is not None else m.total

    best = math.inf
    bad_streak = 0
    for m in history:
        value = monitor_of(m)
        if value < best - 1e-12:
            best = value
            bad_streak = 0
        else:
            bad_streak += 1

    stopped_early = False
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.schedule is Schedule.PLATEAU:
            monitors = [monitor_of(m) for m in history]
            plateau_mult = _plateau_multipliers(monitors + [math.nan], cfg.plateau_patience, cfg.plateau_factor)[-1]

        order = np.random.default_rng((cfg.seed, 1, epoch)).permutation(n)
        sums = {"global_it": 0.0, "global_ti": 0.0, "local_img": 0.0, "local_txt": 0.0, "total": 0.0}
        seen = 0
        last_lr = 0.0
        accumulated = 0
        step_index = epoch * steps_per_epoch

        optimizer.zero_grad()
        for batch_idx in range(n_batches):
            rows = order[batch_idx * cfg.batch_size : (batch_idx + 1) * cfg.batch_size]
            if cfg.augment.enabled:
                images = torch.stack(
                    [
                        augment(
                            train_set[int(r)].image,
                            cfg.augment,
                            np.random.default_rng((cfg.seed, 2, epoch, int(r))),
                        )
                        for r in rows
                    ]
                )
            else:
                images = train_images[rows]
            bags = train_bags[rows]
            masks = train_masks[rows]

            try:
                outputs = model.forward_batch(images, bags, masks)
                bundle = loss_from_outputs(outputs, cfg.loss)
            except ContractViolation:
                # A contract failure with non-finite parameters is divergence,
                # not a caller bug; anything else propagates unchanged.
                if any(not bool(torch.isfinite(p).all()) for p in model.parameters()):
                    raise TrainingDiverged(
                        epoch, ckpt_path if ckpt_path and ckpt_path.exists() else None
                    ) from None
                raise
            if not bool(torch.isfinite(bundle.total.detach())):
                raise TrainingDiverged(epoch, ckpt_path if ckpt_path and ckpt_path.exists() else None)

            b = len(rows)
            seen += b
            for key, value in zip(sums, bundle.as_floats()):
                sums[key] += value * b

            (bundle.total / cfg.grad_accum_steps).backward()
            accumulated += 1
            if accumulated == cfg.grad_accum_steps or batch_idx == n_batches - 1:
                if cfg.schedule is Schedule.COSINE:
                    lr = cosine_lr(step_index, total_steps, cfg.learning_rate)
                elif cfg.schedule is Schedule.STEP:
                    lr = _step_lr(epoch, cfg)
                else:
                    lr = cfg.learning_rate * plateau_mult
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.step()
                optimizer.zero_grad()
                last_lr = lr
                step_index += 1
                accumulated = 0

        val_total = (
            _epoch_mean(model, val_images, val_bags, val_masks, cfg.batch_size, cfg.loss)
            if val_set
            else None
        )
        metrics = EpochMetrics(
            epoch=epoch,
            global_it=sums["global_it"] / seen,
            global_ti=sums["global_ti"] / seen,
            local_img=sums["local_img"] / seen,
            local_txt=sums["local_txt"] / seen,
            total=sums["total"] / seen,
            lr=last_lr,
            val_total=val_total,
        )
        if not all(math.isfinite(v) for v in (metrics.total, metrics.val_total or 0.0)):
            raise TrainingDiverged(epoch, ckpt_path if ckpt_path and ckpt_path.exists() else None)
        history.append(metrics)

        if out_path is not None:
            from .fileio import atomic_write_text

            save_checkpoint(
                ckpt_path,
                model,
                optimizer,
                epoch=epoch,
                config_hash_value=fingerprint,
                history=history,
                extra={
                    "train_size": n,
                    "val_size": len(val_set),
                    "steps_per_epoch": steps_per_epoch,
                    "train_config": flatten_config(cfg, prefix="train."),
                },
            )
            atomic_write_text(out_path / "metrics.csv", metrics_csv(history))

        if on_epoch_end is not None:
            on_epoch_end(metrics, model)

        value = monitor_of(metrics)
        if value < best - 1e-12:
            best = value
            bad_streak = 0
        else:
            bad_streak += 1
            if cfg.early_stop_patience is not None and bad_streak >= cfg.early_stop_patience:
                stopped_early = True
                break

    calibration: Optional[PolarityCalibration] = None
    if cfg.polarity_calibration:
        calibration = calibrate_alignment_polarity(model, train_set, optimizer=optimizer)
        if calibration is not None and calibration.flipped and out_path is not None and history:
            save_checkpoint(
                ckpt_path,
                model,
                optimizer,
                epoch=history[-1].epoch,
                config_hash_value=fingerprint,
                history=history,
                extra={
                    "train_size": n,
                    "val_size": len(val_set),
                    "steps_per_epoch": steps_per_epoch,
                    "train_config": flatten_config(cfg, prefix="train."),
                },
            )

    return TrainResult(
        model=model,
        history=history,
        checkpoint_path=ckpt_path,
        config_hash=fingerprint,
        stopped_early=stopped_early,
        calibration=calibration,
    )
