"""Command-line entry point: ``radhop <command> [--config PATH] [overrides]``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration or input
error, 3 fitting infeasible (too few raw features), 4 degenerate pipeline
state (no ROIs).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .gradcheck import run_gradcheck
from .metrics import write_report
from .net import load_net
from .phantom import generate_dataset
from .pipeline import (PipelineError, evaluate, fit_stage1, fit_stage2, infer, load_stage1,
                       preprocess, read_rois, write_rois)
from .radiomics import FeatureBudgetError
from .volume import VolumeError, load_manifest

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_FEATURES, EXIT_DEGENERATE = 0, 1, 2, 3, 4

logger = logging.getLogger("radhop")


class _Context:
    def __init__(self, cfg: PipelineConfig, base: Path):
        self.cfg = cfg
        self.base = base

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @property
    def model_dir(self):
        return self.path(self.cfg.paths.model_dir)

    def net_path(self):
        return self.model_dir / f"radhopnet_{self.cfg.stage2.loss}.json"

    def cases(self, manifest):
        return preprocess(load_manifest(self.path(manifest)), self.cfg)


def cmd_gen_phantoms(ctx: _Context, args) -> int:
    cfg = ctx.cfg
    out = ctx.path(args.out or cfg.paths.data_dir)
    n = cfg.n_cases if args.n is None else args.n
    try:
        manifests = generate_dataset(cfg.phantom, n, cfg.split, cfg.seed, out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(" ".join(f"{k}={len(v)}" for k, v in manifests.items()), f"-> {out}")
    return EXIT_OK


def cmd_fit_stage1(ctx: _Context, args) -> int:
    cases = ctx.cases(ctx.cfg.paths.train_manifest)
    s1 = fit_stage1(cases, ctx.cfg, ctx.model_dir)
    widths = {k: m.radhop.n_features_out_ for k, m in s1.radiomics.items()}
    print(f"stage 1 fitted on {len(cases)} cases; raw features {widths} -> {ctx.model_dir}")
    return EXIT_OK


def _stage1(ctx):
    try:
        return load_stage1(ctx.model_dir)
    except FileNotFoundError as exc:
        raise ConfigError(f"stage-1 models not found ({exc.filename}); run fit-stage1 first") from exc


def cmd_fit_stage2(ctx: _Context, args) -> int:
    s1 = _stage1(ctx)
    train = ctx.cases(ctx.cfg.paths.train_manifest)
    val = ctx.cases(ctx.cfg.paths.val_manifest)
    _, log = fit_stage2(train, val, s1, ctx.cfg, ctx.model_dir, ctx.net_path().name)
    best = max(log, key=lambda r: r.val_auroc) if log else None
    msg = f"best epoch {best.epoch} val AUROC {best.val_auroc:.4f}" if best else "no epochs run"
    print(f"stage 2 ({ctx.cfg.stage2.loss}) trained: {msg} -> {ctx.net_path()}")
    return EXIT_OK


def cmd_infer(ctx: _Context, args) -> int:
    s1 = _stage1(ctx)
    if not ctx.net_path().is_file():
        raise ConfigError(f"network not found: {ctx.net_path()}; run fit-stage2 first")
    net = load_net(ctx.net_path())
    cases = ctx.cases(args.manifest or ctx.cfg.paths.test_manifest)
    results = infer(cases, s1, net, ctx.cfg)
    out = ctx.path(args.out) if args.out else ctx.path(ctx.cfg.paths.report_dir) / "rois.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rois(out, results)
    print(f"{sum(map(len, results.values()))} ROIs over {len(cases)} cases -> {out}")
    return EXIT_OK


def cmd_evaluate(ctx: _Context, args) -> int:
    cases = ctx.cases(args.manifest or ctx.cfg.paths.test_manifest)
    report_dir = ctx.path(ctx.cfg.paths.report_dir)
    rois_path = ctx.path(args.rois) if args.rois else report_dir / "rois.json"
    if not rois_path.is_file():
        raise ConfigError(f"ROI file not found: {rois_path}")
    try:
        results = evaluate(cases, read_rois(rois_path),
                           report_dir / "overlays" if ctx.cfg.eval.overlays else None)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    write_report(report_dir, results)
    print(f"{'variant':<8} {'AUROC':>8} {'AP':>8}")
    for name, r in results.items():
        auc = "n/a" if r.auroc is None else f"{r.auroc:.4f}"
        print(f"{name:<8} {auc:>8} {r.ap:>8.4f}")
    return EXIT_OK


def cmd_gradcheck(ctx: _Context, args) -> int:
    start = time.perf_counter()
    report = run_gradcheck(trials=args.trials, seed=ctx.cfg.seed, gamma=ctx.cfg.stage2.gamma)
    print(json.dumps(report.to_dict(), indent=1))
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} coordinates "
          f"({time.perf_counter() - start:.1f}s): {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "fit-stage1": cmd_fit_stage1,
    "fit-stage2": cmd_fit_stage2,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--loss", choices=("wrmse", "mse"), help="Stage-2 loss variant")
    common.add_argument("--gamma", type=float, help="wrMSE exponent")
    common.add_argument("--threads", type=int, help="worker threads for per-slice / per-ROI work")
    common.add_argument("--overlays", action="store_true", help="write PPM detection overlays")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="radhop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-phantoms", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, help="number of cases")
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    sub.add_parser("fit-stage1", parents=[common], help="fit radiomics and the voxel classifier")
    sub.add_parser("fit-stage2", parents=[common], help="train the residue regressor")
    p = sub.add_parser("infer", parents=[common], help="detect and correct ROIs")
    p.add_argument("--manifest", help="cases to process (default: paths.test_manifest)")
    p.add_argument("--out", help="ROI JSON path (default: <report_dir>/rois.json)")
    p = sub.add_parser("evaluate", parents=[common], help="score ROI predictions")
    p.add_argument("--manifest", help="ground-truth cases (default: paths.test_manifest)")
    p.add_argument("--rois", help="ROI JSON from infer (default: <report_dir>/rois.json)")
    p = sub.add_parser("gradcheck", parents=[common], help="verify analytic gradients")
    p.add_argument("--trials", type=int, default=30)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.loss, args.gamma, args.threads, args.overlays)
        base = Path(args.config).resolve().parent if args.config else Path.cwd()
        return COMMANDS[args.command](_Context(cfg, base), args)
    except (ConfigError, VolumeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FeatureBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FEATURES
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
