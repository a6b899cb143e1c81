"""Command line entry point: ``sevgrade <command> [options]``.

Exit codes: 0 success, 1 user error (bad config, missing inputs, missing
upstream stage), 2 internal error.
"""
import argparse
import logging
import sys

from sevgrade.ablation import PRESETS, run_ablation
from sevgrade.config import PROFILES, load_config
from sevgrade.dataset import convert_oai_table
from sevgrade.errors import ConfigError, SevgradeError
from sevgrade.evaluation import format_table
from sevgrade.pipeline import (Run, collect_results, configure_determinism, load_data, prepare,
                               report_rows_for, run_all, write_cross_seed_report)

LOGGER = logging.getLogger("sevgrade")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(SevgradeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--profile", choices=sorted(PROFILES), help="base profile (default: desk)")
    common.add_argument("--seed", type=int, action="append",
                        help="run only this seed (repeatable); default: every seed in the config")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="sevgrade", description="Anomaly-detection based knee OA severity grading.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("prepare", parents=[common], help="generate or validate the dataset manifest")
    p.add_argument("--oai-table", help="OAI readings export to convert into the configured manifest first")
    sub.add_parser("train-stage1", parents=[common], help="train the self-supervised ensemble")

    p = sub.add_parser("pseudo-label", parents=[common], help="vote and denoise pseudo anomalies")
    p.add_argument("--target", choices=("oa", "sev"), required=True)
    p.add_argument("--iter", type=int, default=1, dest="iteration")
    p.add_argument("--m", type=float, help="fixed margin (overrides the config)")
    p.add_argument("--statement", help="text statement for the denoising provider")
    p.add_argument("--percentile", type=float)
    p.add_argument("--no-denoise", action="store_true")

    p = sub.add_parser("train-stage3", parents=[common], help="dual-centre training")
    p.add_argument("--target", choices=("oa", "sev"), required=True)
    p.add_argument("--iter", type=int, default=1, dest="iteration")
    p.add_argument("--no-denoise", action="store_true", help="train on the raw pseudo labels")

    p = sub.add_parser("score", parents=[common], help="score the evaluation split")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("evaluate", parents=[common], help="metrics, figures and the cross-seed table")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("ablation", parents=[common], help="run an ablation preset")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("run-all", parents=[common], help="every stage, then evaluate")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config(args):
    overrides = {"output_dir": args.output_dir} if args.output_dir else None
    return load_config(args.config, args.profile, overrides)


def _runs(cfg, args):
    manifest = load_data(cfg)
    return [Run(cfg, seed, manifest) for seed in (args.seed or cfg.seeds)]


def _dispatch(args):
    cfg = _config(args)
    configure_determinism()
    cmd = args.command
    if cmd == "prepare":
        if args.oai_table:
            if cfg.manifest_path() is None:
                raise ConfigError("--oai-table needs dataset.manifest set to the output path")
            convert_oai_table(args.oai_table, cfg.manifest_path(), image_side=cfg.stage1.encoder.input_side)
        manifest = prepare(cfg)
        for split in ("train", "val", "test"):
            print(f"{split}\t{len(manifest.split(split))}")
    elif cmd == "train-stage1":
        for run in _runs(cfg, args):
            members = run.train_stage1()
            for k, m in enumerate(members):
                print(f"{run.seed}\t{k}\t{len(m.loss_curve)}\t{m.loss_curve[-1]:.6f}\t{m.cd_max:.6f}")
    elif cmd == "pseudo-label":
        for run in _runs(cfg, args):
            labels = run.pseudo_label(args.target, args.iteration, m=args.m, statement=args.statement,
                                      percentile=args.percentile, denoised=not args.no_denoise)
            print(f"{run.seed}\t{args.target}\t{args.iteration}\t{labels.m_used:.6f}"
                  f"\t{len(labels.accepted)}\t{len(labels.rejected_by_denoise)}")
    elif cmd == "train-stage3":
        for run in _runs(cfg, args):
            stage = run.train_stage3(args.target, args.iteration, denoised=not args.no_denoise)
            print(f"{run.seed}\t{args.target}\t{args.iteration}\t{len(stage.loss_curve)}"
                  f"\t{stage.centre_distance:.6f}")
    elif cmd == "score":
        for run in _runs(cfg, args):
            reports, _, meta = run.score(args.split)
            print(f"{run.seed}\t{len(reports)}\t{run.root / 'scores' / 'scores.csv'}\tt={meta['t']:.6f}")
    elif cmd == "evaluate":
        results = [run.evaluate(figures=not args.no_figures) for run in _runs(cfg, args)] \
            if args.seed else collect_results(cfg)
        path = write_cross_seed_report(cfg, results)
        print(format_table(report_rows_for(results)), end="")
        print(path)
    elif cmd == "ablation":
        path = run_ablation(cfg, args.preset, seeds=args.seed, figures=not args.no_figures)
        txt = path.with_suffix(".txt")
        print(txt.read_text(), end="")
        print(path)
    elif cmd == "run-all":
        path = run_all(cfg, seeds=args.seed, figures=not args.no_figures)
        print(path.with_suffix(".txt").read_text(), end="")
        print(path)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USER
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except SevgradeError as exc:
        LOGGER.error("%s", exc)
        return EXIT_USER
    except Exception:  # anything else is a bug
        LOGGER.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
