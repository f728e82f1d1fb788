"""Command-line entry point: ``trail <subcommand> [options]``.

Exit codes: 0 success, 1 contract or configuration error, 2 quality gate or
bound verification failure, 3 some images failed (the rest completed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from trail import pipeline
from trail._validation import ConfigurationError, ContractError, TrainingGateError
from trail.checkpoint import CheckpointError
from trail.config import RunConfig

EXIT_OK, EXIT_CONTRACT, EXIT_GATE, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("trail")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig(base_dir=str(Path.cwd()))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output = str(Path(args.out).resolve())
    return cfg


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_init_config(args):
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigurationError(f"{path} exists; pass --force to overwrite")
    RunConfig().save(path)
    print(path)
    return EXIT_OK


def cmd_make_dataset(args):
    print(pipeline.make_dataset(_load_config(args)))
    return EXIT_OK


def cmd_prepare(args):
    manifest = pipeline.prepare(_load_config(args))
    print(json.dumps({k: v.get("sha256") if isinstance(v, dict) else v for k, v in manifest.items()}, indent=2))
    return EXIT_OK


def cmd_attack(args):
    cfg = _load_config(args)
    method = args.method or "trail"
    eps = args.pgd_epsilon
    if args.match_ssim:
        if method != "pgd":
            raise ConfigurationError("--match-ssim applies to --method pgd")
        eps, achieved, target = pipeline.matched_pgd_epsilon(cfg, args.match_ssim)
        print(f"pgd epsilon {eps:.6f} ({eps * 255:.2f}/255): ssim {achieved:.4f} vs {args.match_ssim} {target:.4f}")
    status = pipeline.attack(cfg, method, n_images=args.n_images, pgd_epsilon=eps, resume=args.resume)
    print(f"{method}: {status['done']} images done, {len(status['failed'])} failed")
    for i, err in status["failed"].items():
        print(f"  image {i}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if status["failed"] else EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    summary, errors = pipeline.evaluate(cfg.path("output"))
    print(pipeline.format_summary(summary))
    for name, err in errors.items():
        print(f"corrupt result file {name}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    report = pipeline.sweep(cfg, t_stars=args.values, n_images=args.n_images)
    for r in report["rows"]:
        print(f"t*={r['t_star']:3d}  asr={r['asr']:.3f}  ssim={r['ssim']:.4f}")
    print(f"spearman(t*, asr)={report['spearman_asr']:.3f}  spearman(t*, ssim)={report['spearman_ssim']:.3f}")
    return EXIT_OK


def cmd_verify_bound(args):
    report = pipeline.bound(_load_config(args))
    for mode, r in report["modes"].items():
        for row in r["rows"]:
            print(
                f"{mode:6s} t*={row['t_star']:2d} bound={row['bound']:.3f} "
                f"max_drift={row['max_sq_drift']:.3f} violation_rate={row['violation_rate']:.3f} "
                f"{'PASS' if row['pass'] else 'FAIL'}"
            )
    print("PASS" if report["pass"] else "FAIL")
    return EXIT_OK if report["pass"] else EXIT_GATE


def cmd_plot(args):
    cfg = _load_config(args)
    src = Path(args.csv) if args.csv else cfg.path("output") / "sweep" / "sweep.csv"
    dest = Path(args.png) if args.png else src.with_suffix(".png")
    print(pipeline.plot_sweep(src, dest))
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--workers", type=int, help="image-level worker processes")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trail", description="Diffusion-based transferable adversarial images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default configuration")
    p.add_argument("path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config, config=None, seed=None, workers=None, out=None, verbose=False)

    p = sub.add_parser("make-dataset", parents=[common], help="render the procedural toy dataset")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("prepare", parents=[common], help="train codec, denoisers and classifier zoo")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("attack", parents=[common], help="attack test images")
    p.add_argument("--method", choices=pipeline.METHODS, default="trail")
    p.add_argument("--n-images", type=int)
    p.add_argument("--pgd-epsilon", type=float, help="L-inf budget for --method pgd")
    p.add_argument("--match-ssim", metavar="METHOD", help="tune the PGD budget to METHOD's mean SSIM")
    p.add_argument("--resume", action="store_true", help="keep existing records and skip those images")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common], help="transfer matrix, ASR and JPEG tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-tstar", parents=[common], help="ASR and SSIM against t*")
    p.add_argument("--values", type=_int_list, help="comma-separated t* values")
    p.add_argument("--n-images", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-bound", parents=[common], help="Monte-Carlo check of the drift bound")
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("plot", parents=[common], help="plot a sweep CSV")
    p.add_argument("csv", nargs="?")
    p.add_argument("--png")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except TrainingGateError as exc:
        print(f"gate failure in stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (ConfigurationError, ContractError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
