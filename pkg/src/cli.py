"""
Command line entry point: complete, train, eval, sweep, ablate, gradcheck, gen-synthetic.

Exit codes: 0 ok, 1 usage, 2 data or config problem, 3 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from src.config.pipeline_config import PipelineConfig
from src.config.settings import settings
from src.errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, BPDepthError, DataError
from src.service.completion_service import CompletionService
from src.service.evaluation_service import (
    Evaluator,
    ablation_run,
    ablation_table,
    average_reports,
    compute_metrics,
    sparsity_sweep,
    sweep_table,
)
from src.service.gradcheck_service import GradcheckService
from src.service.synthetic_service import PiecewisePlanarGenerator, load_scenes, save_scenes
from src.service.training_service import TrainingService, load_model
from src.utility.formats import read_pfm, read_sparse_csv, write_pfm, write_pgm_preview, write_rows

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _scene_dir(args, cfg: PipelineConfig) -> Path:
    return Path(args.scenes or cfg.paths.scenes or settings.SCENE_DIRECTORY)


def _output_dir(args, cfg: PipelineConfig) -> Path:
    return Path(args.output or cfg.paths.output or settings.OUTPUT_DIRECTORY)


def _checkpoint(args, cfg: PipelineConfig) -> Optional[str]:
    return args.checkpoint or cfg.paths.checkpoint or settings.CHECKPOINT_PATH


def cmd_complete(args, cfg: PipelineConfig) -> int:
    image = read_pfm(args.image)
    height, width = image.shape[:2]
    sparse = read_sparse_csv(args.sparse, height, width)
    service = CompletionService(cfg, _checkpoint(args, cfg))
    depth = service.complete(image, sparse)
    write_pfm(args.output, depth)
    if args.preview:
        write_pgm_preview(args.preview, depth)
    logger.info(f"Dense depth written to {args.output}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(_scene_dir(args, cfg))
    output = _output_dir(args, cfg)
    result = TrainingService(cfg, progress=args.progress).train(scenes, steps=args.steps, output_dir=output)
    cfg.save(output / "config.json")
    logger.info(f"Loss curve {result.loss_csv}, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    if args.pred is not None:
        if args.gt is None:
            raise UsageError("eval --pred needs --gt")
        pred, gt = read_pfm(args.pred), read_pfm(args.gt)
        if pred.shape != gt.shape:
            raise DataError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in size")
        reports = [compute_metrics(pred, gt, gt > 0, cfg.thetas, cfg.metric_units)]
    else:
        scenes = load_scenes(_scene_dir(args, cfg))
        model = load_model(cfg, _checkpoint(args, cfg))
        reports = Evaluator(model, cfg, workers=args.workers).evaluate(scenes)
    report = average_reports(reports)
    rows = [[str(i), *r.row()] for i, r in enumerate(reports)] + [["mean", *report.row()]]
    write_rows(args.output, ["sample", *report.header()], rows)
    logger.info(f"Metrics over {len(reports)} samples written to {args.output}: rmse {report.rmse:.6g}")
    return EXIT_OK


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(_scene_dir(args, cfg))
    model = load_model(cfg, _checkpoint(args, cfg))
    evaluator = Evaluator(model, cfg, workers=args.workers)
    counts = args.counts or cfg.sweep_counts
    repeats = args.repeats or cfg.sweep_repeats
    rows = sparsity_sweep(evaluator, scenes, counts, repeats, cfg.seed)
    write_rows(args.output, *sweep_table(rows))
    logger.info(f"Sweep over {len(counts)} counts x {repeats} repeats written to {args.output}")
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(_scene_dir(args, cfg))
    rows = ablation_run(cfg, scenes, steps=args.steps)
    write_rows(args.output, *ablation_table(rows))
    logger.info(f"Ablation of {len(rows)} cells written to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    reports = GradcheckService(seed=args.seed, max_entries=args.max_entries, progress=args.progress).run(
        include_pipeline=not args.ops_only)
    for report in reports:
        print(report.summary())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for {failed}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_synthetic(args, cfg: PipelineConfig) -> int:
    generator = PiecewisePlanarGenerator(height=args.height, width=args.width)
    scenes = generator.generate(args.count, args.seed)
    manifest = save_scenes(args.output or _scene_dir(args, cfg), scenes, seed=args.seed)
    logger.info(f"Scene manifest {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="bpdepth", description=settings.APP_DESCRIPTION)
    parser.add_argument("--config", help="run config JSON (default: $BPDEPTH_CONFIG, then desk defaults)")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    complete = commands.add_parser("complete", help="complete an image PFM and sparse CSV into dense depth")
    complete.add_argument("--image", required=True, help="HxWx3 image PFM")
    complete.add_argument("--sparse", required=True, help='sparse points CSV with header "x,y,depth_m"')
    complete.add_argument("--checkpoint")
    complete.add_argument("--output", required=True, help="dense depth PFM")
    complete.add_argument("--preview", help="optional 8-bit PGM preview")
    complete.set_defaults(handler=cmd_complete)

    train = commands.add_parser("train", help="train on a scene directory")
    train.add_argument("--scenes")
    train.add_argument("--output", help="run directory for loss.csv, model.ckpt and config.json")
    train.add_argument("--steps", type=int)
    train.add_argument("--progress", action="store_true")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="metrics of a prediction PFM, or of a checkpoint on scenes")
    evaluate.add_argument("--pred")
    evaluate.add_argument("--gt")
    evaluate.add_argument("--scenes")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--workers", type=int)
    evaluate.add_argument("--output", required=True, help="metrics CSV")
    evaluate.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", help="sparsity sweep of a checkpoint")
    sweep.add_argument("--scenes")
    sweep.add_argument("--checkpoint")
    sweep.add_argument("--counts", type=int, nargs="+")
    sweep.add_argument("--repeats", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--output", required=True, help="sweep CSV")
    sweep.set_defaults(handler=cmd_sweep)

    ablate = commands.add_parser("ablate", help="train and compare propagation variants and stage toggles")
    ablate.add_argument("--scenes")
    ablate.add_argument("--steps", type=int)
    ablate.add_argument("--output", required=True, help="comparison CSV")
    ablate.set_defaults(handler=cmd_ablate)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every backward rule")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--max-entries", type=int, default=3, help="coordinates sampled per tensor")
    gradcheck.add_argument("--ops-only", action="store_true")
    gradcheck.add_argument("--progress", action="store_true")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    synthetic = commands.add_parser("gen-synthetic", help="write seeded synthetic scenes and their manifest")
    synthetic.add_argument("--output")
    synthetic.add_argument("--scenes")
    synthetic.add_argument("--count", type=int, default=4)
    synthetic.add_argument("--seed", type=int, default=0)
    synthetic.add_argument("--height", type=int, default=32)
    synthetic.add_argument("--width", type=int, default=32)
    synthetic.set_defaults(handler=cmd_gen_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.resolve(args.config)
        return args.handler(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"bpdepth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BPDepthError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
