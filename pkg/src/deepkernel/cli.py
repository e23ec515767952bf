"""``dkn`` command line: simulate, train, eval, viz-kernel, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 missing artifact,
4 numerical abort. ``DKN_SEED`` overrides the seed of every subcommand
unless ``--seed`` is given explicitly.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kernels import build_patch_table, kernel_row, make_kernel
from .network import ConfigError
from .phantom import DomainError, load_case, load_manifest, make_dataset
from .trainer import (
    ConfigSchemaError,
    ExperimentConfig,
    MissingArtifactError,
    NumericalAbort,
    clone_config,
    evaluate,
    evaluate_model,
    load_checkpoint,
    slab_samples,
    summarise,
    train,
)
from .autodiff import no_grad

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("deepkernel")


class UsageError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _gamma_pairs(text: str) -> list[tuple[float, float]]:
    """``"0:0,0.01:0.001"`` -> ``[(0, 0), (0.01, 0.001)]``."""
    pairs = []
    for item in _str_list(text):
        try:
            a, b = item.split(":")
            pairs.append((float(a), float(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"gamma pair must look like max:min, got {item!r}")
    return pairs


def _site(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"site must be y,x, got {text!r}")
    return y, x


def _seed(args) -> Optional[int]:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("DKN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DKN_SEED must be an integer, got {env!r}")
    return None


def _experiment(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifactError(f"config {path} not found")
        config = ExperimentConfig.load(path)
    else:
        config = ExperimentConfig()
    overrides = {}
    seed = _seed(args)
    if seed is not None:
        overrides["training.seed"] = seed
    for flag, key in (
        ("fold", "training.fold"),
        ("epochs", "training.epochs"),
        ("max_batches", "training.max_batches"),
        ("gamma_max", "constraints.gamma_max"),
        ("gamma_min", "constraints.gamma_min"),
        ("patch_top", "network.patch_top"),
        ("family", "network.kernel_family"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return clone_config(config, **overrides) if overrides else config


# -- subcommands --------------------------------------------------------------
def cmd_simulate(args) -> int:
    seed = _seed(args)
    manifest = make_dataset(
        args.cases,
        args.drfs,
        0 if seed is None else seed,
        args.out,
        size=args.size,
        depth=args.depth,
        n_folds=min(args.folds, args.cases),
        counts=args.counts,
    )
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run, _ = train(config, args.data, out)
    print(f"checkpoint written to {out}; validation {run.validation}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate(args.checkpoint, args.data, args.drfs, cases=args.cases, out_csv=out / "metrics.csv", with_input=args.with_input)
    for drf, value in summarise(rows).items():
        print(f"DRF x{drf}: mean PSNR {value:.3f} dB")
    return EXIT_OK


def _to_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    lo, hi = float(np.min(image)), float(np.max(image))
    span = hi - lo
    scaled = np.zeros_like(image) if span == 0 else (image - lo) / span
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    with open(path.with_suffix(".txt"), "w") as fh:
        fh.write(f"min {lo!r}\nmax {hi!r}\n")


def kernel_visuals(model, case, drf: int, sites: Sequence[tuple[int, int]]) -> dict[str, np.ndarray]:
    """Per level: channel-mean code vector, channel-mean kernel rows at each
    site (given in full-resolution coordinates) and channel-mean kernel features."""
    net = model.net
    cfg = net.config
    samples = slab_samples(case, drf, cfg.slices)
    mid = len(samples) // 2
    dtype = net.dtype
    net.eval()
    with no_grad():
        _, internals = net(
            (samples.pet[mid : mid + 1] / model.pet_scale).astype(dtype),
            samples.t1[mid : mid + 1].astype(dtype),
            samples.t2[mid : mid + 1].astype(dtype),
            compute_b=True,
        )
    h0, w0 = samples.pet.shape[1:3]
    for y, x in sites:
        if not (0 <= y < h0 and 0 <= x < w0):
            raise IndexError(f"site ({y}, {x}) outside the {h0}x{w0} grid")
    images = {}
    for level in range(cfg.levels + 1):
        alpha = internals["f_pet"][level].data[0].astype(np.float64)
        b = internals["b"][level].data[0].astype(np.float64)
        h, w, channels = alpha.shape
        table = build_patch_table(h, w, cfg.patch_sizes[level], cfg.strides[level])
        kernels = [make_kernel(b[:, :, c, :], table, cfg.kernel_family, cfg.sigma) for c in range(channels)]
        images[f"level{level}_alpha"] = alpha.mean(axis=-1)
        for k, (y, x) in enumerate(sites):
            site = (y >> level, x >> level)
            images[f"level{level}_row{k}"] = np.mean([kernel_row(K, site) for K in kernels], axis=0)
        images[f"level{level}_fk"] = internals["f_k"][level].data[0].astype(np.float64).mean(axis=-1)
    return images


def cmd_viz_kernel(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if not 0 <= args.case < len(manifest["cases"]):
        raise UsageError(f"case {args.case} outside [0, {len(manifest['cases'])})")
    case = load_case(args.data, manifest["cases"][args.case], [args.drf])
    if args.drf not in case.low_dose:
        raise MissingArtifactError(f"dataset has no DRF {args.drf}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = kernel_visuals(model, case, args.drf, args.sites)
    for name, image in images.items():
        _to_png(image, out / f"{name}.png")
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cell_name(family: str, patch_top: int, gamma: tuple[float, float], seed: int) -> str:
    return f"{family}_p{patch_top}_gmax{gamma[0]:g}_gmin{gamma[1]:g}_seed{seed}"


ABLATE_FIELDS = ["family", "patch_top", "gamma_max", "gamma_min", "seed", "drf", "psnr", "ssim"]


def run_ablation(
    config: ExperimentConfig,
    data_dir,
    out_dir,
    families: Sequence[str],
    patches: Sequence[int],
    gammas: Sequence[tuple[float, float]],
    seeds: Sequence[int],
    drfs: Sequence[int],
) -> list[dict]:
    """One training per cell; cells with a completed ``cell.json`` are reused."""
    out = Path(out_dir)
    manifest = load_manifest(data_dir)
    rows = []
    for family, patch_top, gamma, seed in itertools.product(families, patches, gammas, seeds):
        cdir = out / "cells" / cell_name(family, patch_top, gamma, seed)
        record_path = cdir / "cell.json"
        if record_path.exists():
            with open(record_path) as fh:
                record = json.load(fh)
            log.info("reusing %s", cdir.name)
        else:
            cfg = clone_config(
                config,
                **{
                    "network.kernel_family": family,
                    "network.patch_top": patch_top,
                    "constraints.gamma_max": gamma[0],
                    "constraints.gamma_min": gamma[1],
                    "training.seed": seed,
                },
            )
            run, model = train(cfg, data_dir)
            results = evaluate_model(model, data_dir, manifest, run.fold["test"], drfs, cfg.training.train_drf)
            record = {
                "config": cfg.to_dict(),
                "psnr": {str(k): v for k, v in summarise(results, "psnr").items()},
                "ssim": {str(k): v for k, v in summarise(results, "ssim").items()},
                "rows": results,
            }
            cdir.mkdir(parents=True, exist_ok=True)
            tmp = cdir / "cell.json.tmp"
            with open(tmp, "w") as fh:
                json.dump(record, fh, indent=1, sort_keys=True)
            tmp.replace(record_path)
        for drf in drfs:
            key = str(drf)
            rows.append(
                {
                    "family": family,
                    "patch_top": patch_top,
                    "gamma_max": gamma[0],
                    "gamma_min": gamma[1],
                    "seed": seed,
                    "drf": drf,
                    "psnr": record["psnr"].get(key, ""),
                    "ssim": record["ssim"].get(key, ""),
                }
            )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_ablate(args) -> int:
    config = _experiment(args)
    seeds = args.seeds
    if seeds is None:
        seeds = [config.training.seed]
    Path(args.out).mkdir(parents=True, exist_ok=True)
    rows = run_ablation(config, args.data, args.out, args.families, args.patches, args.gammas, seeds, args.drfs)
    print(f"{len(rows)} summary rows written to {Path(args.out) / 'summary.csv'}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom dataset")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--drfs", type=_int_list, default=[20, 100, 1000])
    p.add_argument("--counts", type=float, default=5e6)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    def experiment_flags(p):
        p.add_argument("--config", help="experiment.json")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--fold", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-batches", type=int)
        p.add_argument("--gamma-max", type=float)
        p.add_argument("--gamma-min", type=float)

    p = sub.add_parser("train", help="train on one cross-validation fold")
    experiment_flags(p)
    p.add_argument("--patch-top", type=int)
    p.add_argument("--family", choices=("linear", "rbf"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over DRFs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--drfs", type=_int_list, default=[20, 100, 1000])
    p.add_argument("--cases", type=_int_list)
    p.add_argument("--with-input", action="store_true", help="also score the low-dose input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-kernel", help="render code vectors, kernel rows and kernel features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--case", type=int, default=0)
    p.add_argument("--drf", type=int, default=20)
    p.add_argument("--sites", type=_site, nargs=2, default=[(32, 24), (32, 40)], metavar="Y,X")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_kernel)

    p = sub.add_parser("ablate", help="sweep patch size, kernel family and constraint weights")
    experiment_flags(p)
    p.add_argument("--patches", type=_int_list, default=[1, 8])
    p.add_argument("--families", type=_str_list, default=["linear"])
    p.add_argument("--gammas", type=_gamma_pairs, default=[(0.0, 0.0)])
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--drfs", type=_int_list, default=[20, 1000])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "families", None):
        bad = [f for f in args.families if f not in ("linear", "rbf")]
        if bad:
            print(f"dkn: unknown kernel family {bad}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigSchemaError, ConfigError, UsageError, IndexError, DomainError, ValueError) as exc:
        print(f"dkn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"dkn: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalAbort as exc:
        print(f"dkn: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
