"""Command-line entry points binding all modules into reproducible runs.

Subcommands::

    gen-data           generate a synthetic paired dataset directory
    pretrain           run contrastive pre-training on a dataset
    eval-grounding     score phrase grounding (contrast-to-noise) to CSV
    eval-segmentation  linear-probe segmentation Dice to CSV
    export-heatmap     write a query similarity map as PGM + sidecar + CSV
    grad-check         verify analytic gradients of the full objective

Shared flags: ``--config FILE`` (flat ``key=value`` lines), ``--set key=value``
(repeatable, overrides the file; the last occurrence of a key wins),
``--seed N`` (overrides the subcommand's own seed key, beating ``--set``),
``--out DIR`` (output directory), and ``--workers N`` (torch thread count;
determinism is promised at the default of 1).

Exit codes: 0 success; 1 validation error (the message names the offending
key or flag); 2 runtime failure.  Every artifact-writing run also writes
``run_manifest.json`` — command, full resolved config, config hash, seed,
and code version, with no timestamps — so a run can be re-executed exactly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from . import __version__
from .config import (
    ConfigError,
    _parse_bool,
    _parse_float,
    _parse_int,
    config_hash,
    known_keys,
    merge_flat,
    parse_config_text,
    parse_kv,
    validate_flat,
)
from .embeddings import ContractViolation, project_local
from .encoders import Report
from .fileio import FileFormatError, atomic_write_json, atomic_write_text
from .gradcheck import GradCheckError, full_objective_gradient_check
from .synthetic import DatasetError, SyntheticDataset, read_dataset
from .training import CheckpointError, TrainingDiverged

__all__ = ["main", "run"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


# ---- configuration keys owned by the command line -----------------------------
# These name run inputs (paths, evaluation knobs) rather than model or world
# parameters, so they live here instead of in the core config schema.


def _parse_str(key: str, value: str) -> str:
    if not value:
        raise ConfigError(f"{key}: expected a non-empty value")
    return value


_CLI_KEY_PARSERS: Dict[str, Callable[[str, str], object]] = {
    "data.path": _parse_str,
    "eval.checkpoint": _parse_str,
    "eval.holdout_path": _parse_str,
    "eval.init_seed": _parse_int,
    "probe.epochs": _parse_int,
    "probe.learning_rate": _parse_float,
    "probe.seed": _parse_int,
    "heatmap.sample": _parse_str,
    "heatmap.query": _parse_str,
    "heatmap.upsample": _parse_bool,
    "gradcheck.samples": _parse_int,
    "gradcheck.step": _parse_float,
    "gradcheck.tolerance": _parse_float,
    "gradcheck.world_seed": _parse_int,
    "gradcheck.model_seed": _parse_int,
}

# The config key that --seed stands for, per subcommand.
_SEED_KEYS: Dict[str, str] = {
    "gen-data": "world.seed",
    "pretrain": "train.seed",
    "eval-grounding": "eval.init_seed",
    "eval-segmentation": "probe.seed",
    "export-heatmap": "eval.init_seed",
    "grad-check": "gradcheck.world_seed",
}


def _effective_seed(subcommand: str, flat: Mapping[str, str]) -> int:
    key = _SEED_KEYS[subcommand]
    if key in flat:
        return _parse_int(key, flat[key])
    if key == "world.seed":
        from .synthetic import SyntheticWorldConfig

        return SyntheticWorldConfig().seed
    if key == "train.seed":
        from .training import TrainConfig

        return TrainConfig().seed
    if key == "probe.seed":
        from .evaluation import ProbeConfig

        return ProbeConfig().seed
    if key == "gradcheck.world_seed":
        return 3
    return 0  # eval.init_seed


# ---- argv parsing --------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override the subcommand's seed key")
    common.add_argument("--out", metavar="DIR", help="output directory for artifacts")
    common.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override one config key (repeatable; later occurrences win)",
    )
    common.add_argument(
        "--workers",
        type=int,
        default=1,
        help="torch thread count (default 1; determinism is promised at 1)",
    )

    parser = argparse.ArgumentParser(
        prog="localign",
        description="Local/global image-text alignment: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    sub.add_parser(
        "gen-data", parents=[common], help="generate a synthetic paired dataset"
    )
    sub.add_parser("pretrain", parents=[common], help="run contrastive pre-training")
    sub.add_parser(
        "eval-grounding",
        parents=[common],
        help="score phrase grounding contrast-to-noise to grounding.csv",
    )
    sub.add_parser(
        "eval-segmentation",
        parents=[common],
        help="linear-probe segmentation Dice to segmentation.csv",
    )
    sub.add_parser(
        "export-heatmap",
        parents=[common],
        help="write one query similarity map as PGM + sidecar + raw CSV",
    )
    sub.add_parser(
        "grad-check",
        parents=[common],
        help="compare analytic gradients of the full objective to finite differences",
    )
    return parser


def _resolve_flat(args: argparse.Namespace) -> Dict[str, str]:
    """File < --set < --seed, validated against the full documented key set."""
    flat: Dict[str, str] = {}
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise ConfigError(f"--config: file {str(config_path)!r} does not exist")
        flat = parse_config_text(config_path.read_text(encoding="utf-8"))
    overrides: Dict[str, str] = {}
    for item in args.overrides:
        key, value = parse_kv(item)
        overrides[key] = value
    flat = merge_flat(flat, overrides)
    if args.seed is not None:
        flat[_SEED_KEYS[args.subcommand]] = str(args.seed)
        if args.subcommand == "grad-check" and "gradcheck.model_seed" not in flat:
            flat["gradcheck.model_seed"] = str(args.seed + 2)

    core_keys = known_keys()
    validate_flat({k: v for k, v in flat.items() if k in core_keys})
    for key in sorted(flat):
        if key in core_keys:
            continue
        parser = _CLI_KEY_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"unknown config key {key!r}")
        parser(key, flat[key])  # value validated now, naming the key on failure
    return flat


def _core_subset(flat: Mapping[str, str]) -> Dict[str, str]:
    core_keys = known_keys()
    return {k: v for k, v in flat.items() if k in core_keys}


def _cli_value(flat: Mapping[str, str], key: str, default=None):
    if key not in flat:
        return default
    return _CLI_KEY_PARSERS[key](key, flat[key])


# ---- shared pieces -------------------------------------------------------------


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise ConfigError(f"--out: {args.subcommand} writes artifacts; give an output directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(flat: Mapping[str, str], key: str = "data.path") -> SyntheticDataset:
    raw = flat.get(key)
    if raw is None:
        raise ConfigError(
            f"{key}: no dataset directory configured; generate one with gen-data "
            f"and pass --set {key}=DIR"
        )
    root = Path(raw)
    if not root.is_dir():
        raise ConfigError(f"{key}: dataset directory {str(root)!r} does not exist")
    if not (root / "manifest.json").is_file():
        raise ConfigError(
            f"{key}: {str(root)!r} is not a dataset directory (no manifest.json)"
        )
    return read_dataset(root)


def _load_model(flat: Mapping[str, str], dataset: Optional[SyntheticDataset] = None):
    """Model from ``eval.checkpoint`` when given, else a fresh initialization.

    A checkpoint carries its own training configuration, which wins over any
    ``model.*`` keys in the current invocation (the stored parameters fix the
    architecture).  Without a checkpoint, ``model.*`` keys and
    ``eval.init_seed`` define the untrained model; its grid follows the
    dataset unless set explicitly.
    """
    from .config import train_config_from_flat
    from .model import build_model
    from .training import load_checkpoint, restore_training_state

    core = _core_subset(flat)
    ckpt_raw = _cli_value(flat, "eval.checkpoint")
    if ckpt_raw is None:
        grid_given = "model.grid" in flat or "train.model.grid" in flat
        if dataset is not None and not grid_given:
            core["model.grid"] = str(dataset.world.grid)
        channels_given = "model.image_channels" in flat or "train.model.image_channels" in flat
        if dataset is not None and not channels_given:
            core["model.image_channels"] = str(dataset.world.channels)
        cfg = train_config_from_flat(core)
        init_seed = _cli_value(flat, "eval.init_seed", 0)
        return build_model(cfg.model, init_seed)

    ckpt_path = Path(ckpt_raw)
    if not ckpt_path.is_file():
        raise ConfigError(
            f"eval.checkpoint: checkpoint file {str(ckpt_path)!r} does not exist"
        )
    ckpt = load_checkpoint(ckpt_path)
    stored = ckpt.manifest.get("extra", {}).get("train_config")
    source = stored if stored else core
    cfg = train_config_from_flat(source)
    model = build_model(cfg.model, 0)
    restore_training_state(model, None, ckpt)
    return model


def _write_manifest(args: argparse.Namespace, flat: Mapping[str, str], out: Path) -> None:
    manifest = {
        "command": args.subcommand,
        "config": dict(sorted(flat.items())),
        "config_hash": config_hash(flat),
        "seed": _effective_seed(args.subcommand, flat),
        "version": __version__,
    }
    atomic_write_json(out / "run_manifest.json", manifest)


# ---- subcommand handlers --------------------------------------------------------


def _cmd_gen_data(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    from .config import data_options_from_flat, world_config_from_flat
    from .synthetic import generate_dataset, write_dataset

    out = _require_out(args)
    core = _core_subset(flat)
    world = world_config_from_flat(core)
    opts = data_options_from_flat(core)
    samples = generate_dataset(world, opts["count"], opts["start"])
    write_dataset(samples, out, world)
    _write_manifest(args, flat, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    from .config import train_config_from_flat
    from .training import train

    out = _require_out(args)
    dataset = _load_dataset(flat)
    cfg = train_config_from_flat(_core_subset(flat))
    if cfg.model.grid != dataset.world.grid:
        raise ConfigError(
            f"model.grid: model grid {cfg.model.grid} does not match the dataset's "
            f"grid {dataset.world.grid}; pass --set model.grid={dataset.world.grid}"
        )
    if cfg.model.image_channels != dataset.world.channels:
        raise ConfigError(
            f"model.image_channels: model expects {cfg.model.image_channels} image "
            f"channels but the dataset has {dataset.world.channels}; pass "
            f"--set model.image_channels={dataset.world.channels}"
        )
    result = train(dataset.samples, cfg, out)
    _write_manifest(args, flat, out)
    last = result.history[-1]
    note = " (stopped early)" if result.stopped_early else ""
    print(
        f"trained {len(result.history)} epochs{note}; "
        f"final mean loss {last.total:.6f}; checkpoint {result.checkpoint_path}"
    )
    return EXIT_OK


def _cmd_eval_grounding(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    from .evaluation import build_grounding_cases, grounding_report, report_csv

    out = _require_out(args)
    dataset = _load_dataset(flat)
    model = _load_model(flat, dataset)
    cases, excluded = build_grounding_cases(model, dataset.samples, dataset.queries)
    report = grounding_report(cases, excluded)
    atomic_write_text(out / "grounding.csv", report_csv(report))
    for group, metric, value, n in report.rows:
        if group == "Avg" and metric == "cnr":
            print(f"mean contrast-to-noise over {n} cases: {value:.4f}")
    print(f"wrote {out / 'grounding.csv'}")
    _write_manifest(args, flat, out)
    return EXIT_OK


def _cmd_eval_segmentation(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    from .evaluation import (
        ProbeConfig,
        confidence_interval,
        linear_probe_train,
        probe_dice_scores,
    )

    out = _require_out(args)
    dataset = _load_dataset(flat)
    holdout_raw = _cli_value(flat, "eval.holdout_path")
    holdout = dataset if holdout_raw is None else _load_dataset(flat, "eval.holdout_path")
    model = _load_model(flat, dataset)
    defaults = ProbeConfig()
    probe_cfg = ProbeConfig(
        epochs=_cli_value(flat, "probe.epochs", defaults.epochs),
        learning_rate=_cli_value(flat, "probe.learning_rate", defaults.learning_rate),
        seed=_cli_value(flat, "probe.seed", defaults.seed),
    )
    probe = linear_probe_train(model, dataset.samples, probe_cfg)
    scores = probe_dice_scores(probe, model, holdout.samples)
    mean, half_width = confidence_interval(scores)
    lines = [
        "group,metric,value,n",
        f"Avg,dice,{mean:.10g},{len(scores)}",
        f"Avg,dice_ci_half_width,{half_width:.10g},{len(scores)}",
    ]
    atomic_write_text(out / "segmentation.csv", "\n".join(lines) + "\n")
    print(f"mean Dice over {len(scores)} samples: {mean:.4f} ± {half_width:.4f}")
    print(f"wrote {out / 'segmentation.csv'}")
    _write_manifest(args, flat, out)
    return EXIT_OK


def _cmd_export_heatmap(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    from .evaluation import export_heatmap, similarity_map

    out = _require_out(args)
    dataset = _load_dataset(flat)
    model = _load_model(flat, dataset)

    sample_id = _cli_value(flat, "heatmap.sample")
    if sample_id is None:
        with_query = [s for s in dataset.samples if s.sample_id in dataset.queries]
        pool = with_query if _cli_value(flat, "heatmap.query") is None else dataset.samples
        if not pool:
            raise ConfigError(
                "heatmap.sample: no sample has a grounding phrase; name a sample "
                "and supply heatmap.query"
            )
        sample = pool[0]
    else:
        by_id = {s.sample_id: s for s in dataset.samples}
        if sample_id not in by_id:
            raise ConfigError(f"heatmap.sample: no sample named {sample_id!r} in the dataset")
        sample = by_id[sample_id]

    phrase = _cli_value(flat, "heatmap.query", dataset.queries.get(sample.sample_id))
    if phrase is None:
        raise ConfigError(
            f"heatmap.query: sample {sample.sample_id!r} has no grounding phrase; "
            "supply one"
        )

    with torch.no_grad():
        image_locals = project_local(model.encode_image(sample.image), model.image_head)
        query = project_local(
            model.encode_report(Report.from_text(phrase)), model.text_head
        ).vectors[0]
        sims = similarity_map(query, image_locals)

    upsample_to: Optional[Tuple[int, int]] = None
    if _cli_value(flat, "heatmap.upsample", False):
        upsample_to = (int(sample.image.shape[-2]), int(sample.image.shape[-1]))
    export = export_heatmap(
        sims, out / "heatmap.pgm", write_csv=True, upsample_to=upsample_to
    )
    print(f"sample {sample.sample_id}, query {phrase!r}")
    for path in (export.pgm_path, export.sidecar_path, export.csv_path):
        if path is not None:
            print(f"wrote {path}")
    _write_manifest(args, flat, out)
    return EXIT_OK


def _cmd_grad_check(args: argparse.Namespace, flat: Dict[str, str]) -> int:
    report = full_objective_gradient_check(
        sample_count=_cli_value(flat, "gradcheck.samples", 2),
        world_seed=_cli_value(flat, "gradcheck.world_seed", 3),
        model_seed=_cli_value(flat, "gradcheck.model_seed", 5),
        step=_cli_value(flat, "gradcheck.step", 1e-5),
        tolerance=_cli_value(flat, "gradcheck.tolerance", 1e-4),
    )
    print(report.summary())
    if args.out is not None:
        out = _require_out(args)
        atomic_write_text(out / "gradcheck.txt", report.summary() + "\n")
        _write_manifest(args, flat, out)
    return EXIT_OK if report.passed else EXIT_RUNTIME


_HANDLERS: Dict[str, Callable[[argparse.Namespace, Dict[str, str]], int]] = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "eval-grounding": _cmd_eval_grounding,
    "eval-segmentation": _cmd_eval_segmentation,
    "export-heatmap": _cmd_export_heatmap,
    "grad-check": _cmd_grad_check,
}


def run(argv: Sequence[str]) -> int:
    """Execute one invocation and return its exit code (never raises)."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code
        return int(code) if isinstance(code, int) else EXIT_RUNTIME

    try:
        if args.workers < 1:
            raise ConfigError(f"--workers: must be at least 1, got {args.workers}")
        torch.set_num_threads(args.workers)
        flat = _resolve_flat(args)
        return _HANDLERS[args.subcommand](args, flat)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        CheckpointError,
        ContractViolation,
        DatasetError,
        FileFormatError,
        GradCheckError,
        TrainingDiverged,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 — the CLI boundary converts to exit codes
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
