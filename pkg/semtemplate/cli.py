"""
Command-line entry point.

Commands: gen, train, template, fit, transfer, eval. Exit codes: 0 ok, 1 usage,
2 data or configuration error, 3 numerical failure.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .core.config import LossWeights, RunConfig, format_config, load_config
from .core.errors import (
    ConfigurationError,
    DataFormatError,
    DomainError,
    NumericalError,
    TrainingAborted,
)
from .core.fields import TemplateModel, shape_field
from .geometry.mesh import marching_cubes
from .geometry.sample import ShapeSample
from .geometry.synth import DEFAULT_TAU, FAMILIES, generate_family
from .storage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .storage.formats import (
    SHAPE_SUFFIX,
    CsvLogWriter,
    format_csv,
    quantize_sample,
    read_colors,
    read_dataset,
    read_keypoints,
    read_labels,
    read_shape,
    write_colors,
    write_dataset,
    write_keypoints,
    write_labels,
    write_obj,
    write_text_atomic,
)
from .storage.run_store import RunStore, TrainingRecorder
from .training.trainer import TrainingEngine, fit_latent
from .transfer.correspondence import (
    DEFAULT_NEIGHBORS,
    CorrespondenceModel,
    correspondence_uncertainty,
    label_errors,
    split_uncertainty,
    transfer_attributes,
    transfer_keypoints,
)
from .transfer.metrics import TransferReport, part_iou, pck
from .workflows.evaluation import run_evaluation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

CHECKPOINT_NAME = "model.pdck"
LAST_GOOD_NAME = "last_good.pdck"
LOG_NAME = "train_log.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


# Commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    samples = generate_family(
        args.family, args.count, args.seed,
        n_surface=args.surface, n_query=args.query, tau=args.tau,
    )
    write_dataset(args.out, [quantize_sample(s) for s in samples])
    return EXIT_OK


def _check_dataset(dataset: List[ShapeSample], config: RunConfig) -> int:
    if not dataset:
        raise DomainError(f"Dataset {config.dataset} has no shape files")
    n_parts = config.field.n_parts or dataset[0].n_parts
    for sample in dataset:
        if sample.n_parts != n_parts:
            raise DataFormatError(f"Shape '{sample.name}' has {sample.n_parts} parts, expected {n_parts}")
    return n_parts


def cmd_train(args) -> int:
    config = load_config(args.config)
    dataset = read_dataset(config.dataset)
    n_parts = _check_dataset(dataset, config)
    names = [s.name for s in dataset]
    out_dir = Path(config.output_dir)
    write_text_atomic(out_dir / "config.txt", format_config(config))

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.shape_names != names:
            raise ConfigurationError("Resume checkpoint was trained on a different set of shapes")
        if ckpt.model.config != config.field or ckpt.model.n_parts != n_parts:
            raise ConfigurationError("Resume checkpoint does not match the configured model")
        engine = TrainingEngine(config, ckpt.model, dataset, ckpt.params, ckpt.optimizer, ckpt.step)
        logger.info(f"Resuming from {args.resume} at step {ckpt.step}")
    else:
        model = TemplateModel(config.field, n_parts, len(dataset))
        engine = TrainingEngine(config, model, dataset)

    engine.add_event_listener(CsvLogWriter(out_dir / LOG_NAME))
    if config.run_db:
        engine.add_event_listener(TrainingRecorder(RunStore(config.run_db)))

    try:
        result = asyncio.run(engine.run())
    except TrainingAborted as e:
        save_checkpoint(out_dir / LAST_GOOD_NAME, Checkpoint(engine.model, e.last_good, e.step, None, names))
        raise

    save_checkpoint(
        out_dir / CHECKPOINT_NAME,
        Checkpoint(engine.model, result.params, result.step, result.optimizer, names),
    )
    return EXIT_OK


def _shape_code(ckpt: Checkpoint, sample: ShapeSample, steps: int, lr: float, seed: int) -> np.ndarray:
    """Stored code for a training shape, a freshly fitted one otherwise"""
    index = ckpt.shape_index(sample.name)
    if index is not None:
        return np.asarray(ckpt.params.block("latent")[index], dtype=np.float64)
    logger.info(f"Shape '{sample.name}' is not in the checkpoint, fitting a latent code")
    return fit_latent(ckpt.model, ckpt.params, sample, LossWeights(), steps=steps, lr=lr, seed=seed).z


def cmd_template(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.shape_index is None:
        field_fn = lambda points: ckpt.model.template_sdf(ckpt.params, points)
    else:
        if not 0 <= args.shape_index < len(ckpt.shape_names):
            raise ConfigurationError(f"Shape index {args.shape_index} out of range [0, {len(ckpt.shape_names)})")
        if args.dataset is None:
            raise ConfigurationError("--shape-index needs --dataset to look up the shape's semantic features")
        name = ckpt.shape_names[args.shape_index]
        sample = read_shape(Path(args.dataset) / f"{name}{SHAPE_SUFFIX}")
        z = ckpt.params.block("latent")[args.shape_index]
        field_fn = shape_field(ckpt.model, ckpt.params, z, sample.feature_fn())

    mesh = marching_cubes(field_fn, args.resolution)
    write_obj(args.out, mesh)
    if not mesh.is_empty:
        logger.info(f"Mesh Euler characteristic: {mesh.euler_characteristic()}")
    return EXIT_OK


def cmd_fit(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    sample = read_shape(args.shape)
    fit = fit_latent(ckpt.model, ckpt.params, sample, LossWeights(), steps=args.steps, lr=args.lr, seed=args.seed)

    latents = ckpt.params.block("latent").copy()
    names = list(ckpt.shape_names)
    index = ckpt.shape_index(sample.name)
    if index is None:
        latents = np.concatenate([latents, fit.z[None, :]], axis=0)
        names.append(sample.name)
    else:
        latents[index] = fit.z
    model, params = ckpt.model.with_latents(ckpt.params, latents)
    save_checkpoint(args.out, Checkpoint(model, params, ckpt.step, None, names))
    return EXIT_OK


def _transfer_source_values(args, source: ShapeSample):
    if args.attribute == "label":
        if args.labels:
            return read_labels(args.labels)
        if source.labels is None:
            raise DataFormatError(f"Source shape '{source.name}' has no part labels (pass --labels)")
        return source.labels
    if args.attribute == "color":
        if not args.colors:
            raise ConfigurationError("Colour transfer needs --colors")
        return read_colors(args.colors)
    if args.keypoints:
        return read_keypoints(args.keypoints)
    if len(source.keypoints) == 0:
        raise FileNotFoundError(
            f"No keypoints for source shape '{source.name}': pass --keypoints or add "
            f"{source.name}.kp next to the shape file"
        )
    return source.keypoints


def cmd_transfer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    source = read_shape(args.source)
    target = read_shape(args.target)
    values = _transfer_source_values(args, source)

    corr = CorrespondenceModel(ckpt.model, ckpt.params)
    src = corr.deform_shape(source, _shape_code(ckpt, source, args.steps, args.lr, args.seed))
    tgt = corr.deform_shape(target, _shape_code(ckpt, target, args.steps, args.lr, args.seed))
    gamma = LossWeights().uncertainty_gamma

    if args.attribute == "keypoints":
        predicted = transfer_keypoints(values, src, tgt, corr)
        report = TransferReport(uncertainty=correspondence_uncertainty([src], tgt, gamma))
        if len(target.keypoints) and len(predicted):
            report.pck = pck(predicted, target.keypoints)
        if args.out:
            write_keypoints(args.out, predicted)
    else:
        categorical = args.attribute == "label"
        result = transfer_attributes(src, values, tgt, n=args.n, categorical=categorical, gamma=gamma)
        report = TransferReport(uncertainty=result.uncertainty)
        if categorical and target.labels is not None:
            report.iou = part_iou(result.values, target.labels, ckpt.model.n_parts)
            wrong = label_errors(result.values, target.labels)
            report.uncertainty_correct, report.uncertainty_wrong = split_uncertainty(result.uncertainty, wrong)
        if args.out:
            (write_labels if categorical else write_colors)(args.out, result.values)

    text = format_csv(("metric", "value"), [(name, repr(float(v))) for name, v in report.rows()])
    if args.report:
        write_text_atomic(args.report, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not (args.pck or args.miou or args.chamfer):
        args.pck = args.miou = args.chamfer = True
    run = asyncio.run(run_evaluation(
        args.checkpoint, args.dataset, args.out,
        chamfer=args.chamfer, pck=args.pck, miou=args.miou,
        shots=args.shots, neighbors=args.n, resolution=args.resolution,
        fit_steps=args.steps, fit_lr=args.lr, seed=args.seed,
    ))
    if args.run_db:
        asyncio.run(RunStore(args.run_db).save_pipeline_run(run))
    return EXIT_OK


# Parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semtemplate", description="Semantic-aware implicit template learning")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--family", choices=sorted(FAMILIES), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--surface", type=int, default=2048)
    p.add_argument("--query", type=int, default=2048)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train template and deformation fields")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("template", help="extract the template (or a shape) mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--shape-index", type=int)
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_template)

    def fit_options(p):
        p.add_argument("--steps", type=int, default=300)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fit", help="fit a latent code for an unseen shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--out", required=True)
    fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("transfer", help="transfer labels, colours or keypoints between shapes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--attribute", choices=("label", "color", "keypoints"), default="label")
    p.add_argument("--n", type=int, default=DEFAULT_NEIGHBORS)
    p.add_argument("--keypoints")
    p.add_argument("--labels")
    p.add_argument("--colors")
    p.add_argument("--out")
    p.add_argument("--report")
    fit_options(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="batch evaluation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pck", action="store_true")
    p.add_argument("--miou", action="store_true")
    p.add_argument("--chamfer", action="store_true")
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--n", type=int, default=DEFAULT_NEIGHBORS)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--run-db")
    fit_options(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE

    configure_logging(args.verbose)
    try:
        return args.func(args)
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (DataFormatError, DomainError, ConfigurationError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
