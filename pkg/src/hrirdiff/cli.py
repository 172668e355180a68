"""Command-line entry point.

Subcommands: synth (build a synthetic bundle), import (validate a bundle
into a store), train (one fold), loocv (every fold), sample (generate
HRIRs from a checkpoint), evaluate (metrics manifest + figure CSVs).

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .dataset import AnthroVector, SubjectStore, doa_label, import_bundle
from .errors import (
    ConfigurationError,
    HrirDiffError,
    ManifestConflictError,
    SchemaError,
)
from .evaluate import evaluate_stores, write_figure_data, write_metrics_manifest
from .metrics import BandSpec
from .synthetic import make_synthetic_bundle
from .training import (
    Checkpoint,
    derive_rng,
    generate_for_subject,
    load_checkpoint,
    run_loocv,
)

log = logging.getLogger("hrirdiff.cli")

_USAGE_ERRORS = (ConfigurationError, SchemaError, ManifestConflictError, FileNotFoundError)


def _schedule_of(config: ExperimentConfig):
    from .diffusion import make_linear_schedule

    return make_linear_schedule(config.schedule.steps, config.schedule.beta_start,
                                config.schedule.beta_end)


def _bands_of(options: dict) -> BandSpec:
    if options["band_spacing"] == "log":
        return BandSpec.logarithmic(options["band_count"], f_max=options["band_fmax"])
    return BandSpec.linear(options["band_count"], f_max=options["band_fmax"])


def cmd_synth(args) -> int:
    ids = make_synthetic_bundle(
        args.out, n_subjects=args.subjects, hrir_length=args.hrir_length,
        seed=args.seed, n_azimuths=args.azimuths,
        missing_feature_subjects=tuple(args.missing_feature),
    )
    print(f"wrote synthetic bundle with {len(ids)} subjects to {args.out}")
    return 0


def cmd_import(args) -> int:
    result = import_bundle(args.source, args.out)
    for sid, reason in result.skipped:
        print(f"warning: skipped subject {sid}: {reason}", file=sys.stderr)
    print(f"{result.count} subjects imported")
    return 0


def _loocv(args, only_fold=None) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    store = SubjectStore(config.store_dir)
    manifest = run_loocv(
        store, config.output_root, config.train,
        unet_config=config.unet_config(store), schedule=_schedule_of(config),
        config_hash=config.config_hash(), jobs=args.jobs, force=args.force,
        only_fold=only_fold,
    )
    statuses = [v["status"] for v in manifest["folds"].values()]
    diverged = [k for k, v in manifest["folds"].items() if v["status"] == "diverged"]
    print(f"{len(statuses)} folds recorded under {config.output_root}")
    if diverged:
        print(f"error: folds diverged: {diverged}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    return _loocv(args, only_fold=args.fold)


def cmd_loocv(args) -> int:
    return _loocv(args)


def _load_anthro(path, n_expected: int) -> AnthroVector:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("values")
    values = np.asarray(data, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != n_expected:
        raise SchemaError(
            f"anthropometric file must hold {n_expected} values, got shape {values.shape}"
        )
    return AnthroVector(values=values)


def _pick_doas(args, ckpt: Checkpoint):
    grid = ckpt.doa_grid
    if args.all_doas:
        return list(grid)
    if args.label is not None:
        if not (0 <= args.label < len(grid)):
            raise ConfigurationError(f"label {args.label} outside [0, {len(grid)})")
        return [grid[args.label]]
    try:
        az_deg, el_deg = (float(p) for p in args.doa.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"--doa expects 'AZ_DEG,EL_DEG', got {args.doa!r}") from exc
    label = doa_label(math.radians(az_deg) % (2 * math.pi), math.radians(el_deg), grid)
    return [grid[label]]


def cmd_sample(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"{out} already exists; use --force to regenerate")
        return 0
    ckpt = load_checkpoint(args.checkpoint)
    anthro = _load_anthro(args.anthro, ckpt.anthro_stats.mean.shape[0])
    doas = _pick_doas(args, ckpt)
    rng = derive_rng(args.seed, "cli-sample")
    pairs = generate_for_subject(ckpt, anthro, rng, doas=doas)
    from .dataset import write_hrir_file

    entries = [(d.azimuth, d.elevation, p.left, p.right) for d, p in zip(doas, pairs)]
    write_hrir_file(out, entries, ckpt.sample_rate)
    meta = {"config_hash": ckpt.config_hash, "seed": args.seed}
    with open(out.with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote {len(entries)} generated HRIRs to {out}")
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    metrics_path = out_dir / "metrics.json"
    if metrics_path.exists() and not args.force:
        print(f"{metrics_path} already exists; use --force to re-evaluate")
        return 0
    options = (ExperimentConfig.from_file(args.config).metric_options
               if args.config else dict())
    from .config import _METRIC_DEFAULTS

    options = {**_METRIC_DEFAULTS, **options}
    gt = SubjectStore(args.ground_truth)
    gen = SubjectStore(args.generated)
    manifest = evaluate_stores(
        gt, gen, bands=_bands_of(options), nfft=options["nfft"],
        magnitude_floor=options["magnitude_floor"], lowpass_hz=options["lowpass_hz"],
    )
    write_metrics_manifest(out_dir, manifest)
    write_figure_data(
        out_dir, gt, gen, subject_id=options["figure_subject"],
        azimuth=math.radians(options["figure_azimuth_deg"]) % (2 * math.pi),
        elevation=math.radians(options["figure_elevation_deg"]),
        nfft=options["nfft"], magnitude_floor=options["magnitude_floor"],
    )
    print(
        f"global lsd_db={manifest['global']['lsd_db']:.4f} "
        f"itd_mae_us={manifest['global']['itd_mae_us']:.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrirdiff",
                                     description="Personalized HRIR generation and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic exchange bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--hrir-length", type=int, default=64)
    p.add_argument("--azimuths", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-feature", type=int, action="append", default=[],
                   help="subject id to blank one anthropometric cell for")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="validate a bundle into a subject store")
    p.add_argument("source")
    p.add_argument("out")
    p.set_defaults(func=cmd_import)

    for name, help_text in (("train", "train a single fold"),
                            ("loocv", "train every leave-one-out fold")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true")
        if name == "train":
            p.add_argument("--fold", type=int, required=True,
                           help="test-subject id of the fold to run")
            p.set_defaults(func=cmd_train)
        else:
            p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("sample", help="generate HRIRs from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--anthro", required=True,
                   help="JSON file with the raw anthropometric features")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--all-doas", action="store_true")
    group.add_argument("--doa", help="azimuth,elevation in degrees")
    group.add_argument("--label", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compare generated HRIRs with ground truth")
    p.add_argument("--generated", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HrirDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
