"""
Batch evaluation pipeline: fit codes, reconstruct, transfer keypoints and part
labels, write a per-shape CSV report.

Stages are registered in the shared stage registry and chained by
``create_evaluation_pipeline``; the metric stages run only when their flag is set.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..core.config import LossWeights, worker_count
from ..core.errors import DomainError
from ..core.fields import shape_field
from ..core.pipeline import PipelineEngine
from ..core.registry import stage_registry
from ..geometry.mesh import marching_cubes
from ..geometry.sample import ShapeSample
from ..geometry.spatial import chamfer
from ..storage.checkpoint import Checkpoint, load_checkpoint
from ..storage.formats import format_csv, read_dataset, write_text_atomic_async
from ..training.trainer import fit_latent
from ..transfer.correspondence import (
    CorrespondenceModel,
    correspondence_uncertainty,
    deform_many,
    label_errors,
    split_uncertainty,
    transfer_attributes,
    transfer_keypoints,
)
from ..transfer.metrics import DEFAULT_THRESHOLDS, miou, pck

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "shape", "chamfer_x1e3", "pck_0.05", "pck_0.1", "miou",
    "uncertainty_mean", "uncertainty_correct", "uncertainty_wrong",
)
CHAMFER_SCALE = 1e3
CHAMFER_SAMPLES = 2048


def create_evaluation_pipeline() -> Dict[str, Any]:
    """
    Evaluation pipeline definition.

    1. Load the checkpoint and the dataset
    2. Look up or fit a latent code per shape
    3. Reconstruction Chamfer (x10^3) of each shape's extracted mesh
    4. Keypoint transfer PCK from the next shape in the dataset
    5. Few-shot part label transfer mIoU
    6. Write the report
    """
    return {
        "name": "evaluation",
        "start_stage": "load",
        "stages": [
            {
                "id": "load",
                "entry": "load_inputs",
                "params": {"checkpoint_path": "$state.checkpoint_path", "dataset_path": "$state.dataset_path"},
            },
            {
                "id": "fit_codes",
                "entry": "fit_codes",
                "params": {
                    "checkpoint": "$state.checkpoint",
                    "samples": "$state.samples",
                    "steps": "$state.fit_steps",
                    "lr": "$state.fit_lr",
                    "seed": "$state.seed",
                },
            },
            {
                "id": "reconstruction",
                "entry": "reconstruction_chamfer",
                "when": {"type": "truthy", "key": "chamfer"},
                "params": {
                    "checkpoint": "$state.checkpoint",
                    "samples": "$state.samples",
                    "codes": "$state.codes",
                    "resolution": "$state.resolution",
                    "seed": "$state.seed",
                },
            },
            {
                "id": "keypoints",
                "entry": "keypoint_transfer",
                "when": {"type": "truthy", "key": "pck"},
                "params": {
                    "checkpoint": "$state.checkpoint",
                    "samples": "$state.samples",
                    "codes": "$state.codes",
                    "gamma": "$state.uncertainty_gamma",
                },
            },
            {
                "id": "labels",
                "entry": "label_transfer",
                "when": {"type": "truthy", "key": "miou"},
                "params": {
                    "checkpoint": "$state.checkpoint",
                    "samples": "$state.samples",
                    "codes": "$state.codes",
                    "shots": "$state.shots",
                    "n": "$state.neighbors",
                    "gamma": "$state.uncertainty_gamma",
                },
            },
            {
                "id": "report",
                "entry": "write_report",
                "params": {
                    "samples": "$state.samples",
                    "chamfer_scores": "$state.chamfer_x1e3",
                    "pck_scores": "$state.pck_scores",
                    "miou_scores": "$state.miou_scores",
                    "uncertainty": "$state.uncertainty",
                    "out_path": "$state.out_path",
                },
            },
        ],
        "edges": [
            {"from": "load", "to": "fit_codes"},
            {"from": "fit_codes", "to": "reconstruction"},
            {"from": "reconstruction", "to": "keypoints"},
            {"from": "keypoints", "to": "labels"},
            {"from": "labels", "to": "report"},
        ],
    }


@stage_registry.entry("load_inputs", "Load a checkpoint and an evaluation dataset")
def load_inputs(checkpoint_path: str, dataset_path: str) -> Dict[str, Any]:
    checkpoint = load_checkpoint(checkpoint_path)
    samples = read_dataset(dataset_path)
    if not samples:
        raise DomainError(f"Evaluation dataset {dataset_path} is empty")
    return {"checkpoint": checkpoint, "samples": samples}


@stage_registry.entry("fit_codes", "Stored latent codes for known shapes, fitted ones otherwise")
def fit_codes(checkpoint: Checkpoint, samples: List[ShapeSample], steps: int = 300, lr: float = 1e-3, seed: int = 0) -> Dict[str, Any]:
    corr = CorrespondenceModel(checkpoint.model, checkpoint.params)
    weights = LossWeights()

    def code_for(item) -> np.ndarray:
        i, sample = item
        index = checkpoint.shape_index(sample.name)
        if index is not None:
            return corr.code(index)
        fit = fit_latent(checkpoint.model, checkpoint.params, sample, weights, steps=steps, lr=lr, seed=seed + i)
        return fit.z

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        codes = list(pool.map(code_for, enumerate(samples)))
    n_known = sum(checkpoint.shape_index(s.name) is not None for s in samples)
    logger.info(f"Latent codes ready: {n_known} stored, {len(samples) - n_known} fitted")
    return {"codes": codes}


@stage_registry.entry("reconstruction_chamfer", "Chamfer distance of reconstructed meshes")
def reconstruction_chamfer(
    checkpoint: Checkpoint,
    samples: List[ShapeSample],
    codes: List[np.ndarray],
    resolution: int = 64,
    seed: int = 0,
) -> Dict[str, Any]:
    scores = []
    for i, (sample, z) in enumerate(zip(samples, codes)):
        field_fn = shape_field(checkpoint.model, checkpoint.params, z, sample.feature_fn())
        mesh = marching_cubes(field_fn, resolution)
        if mesh.is_empty:
            logger.warning(f"Empty reconstruction for shape '{sample.name}'")
            scores.append(float("nan"))
            continue
        points = mesh.sample_surface(CHAMFER_SAMPLES, np.random.default_rng([seed, i]))
        scores.append(CHAMFER_SCALE * float(chamfer(points, sample.surface)))
    return {"chamfer_x1e3": scores}


@stage_registry.entry("keypoint_transfer", "PCK of keypoints transferred from the next shape")
def keypoint_transfer(
    checkpoint: Checkpoint,
    samples: List[ShapeSample],
    codes: List[np.ndarray],
    gamma: float = 10.0,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, Any]:
    corr = CorrespondenceModel(checkpoint.model, checkpoint.params)
    deformed = deform_many(corr, samples, codes)
    scores: List[Optional[Dict[float, float]]] = []
    uncert: List[float] = []
    n = len(samples)
    for i, target in enumerate(deformed):
        source = deformed[(i + 1) % n]
        u = correspondence_uncertainty([source], target, gamma)
        uncert.append(float(u.mean()))
        if len(source.sample.keypoints) == 0 or len(target.sample.keypoints) == 0:
            scores.append(None)
            continue
        predicted = transfer_keypoints(source.sample.keypoints, source, target, corr)
        scores.append(pck(predicted, target.sample.keypoints, thresholds))
    return {"pck_scores": scores, "uncertainty": {"mean": uncert}}


@stage_registry.entry("label_transfer", "Few-shot part label transfer")
def label_transfer(
    checkpoint: Checkpoint,
    samples: List[ShapeSample],
    codes: List[np.ndarray],
    shots: int = 5,
    n: int = 10,
    gamma: float = 10.0,
) -> Dict[str, Any]:
    labelled = [i for i, s in enumerate(samples) if s.labels is not None]
    if len(labelled) < 2:
        raise DomainError("Part label transfer needs at least two labelled shapes")
    sources = labelled[:min(shots, len(labelled) - 1)]

    corr = CorrespondenceModel(checkpoint.model, checkpoint.params)
    deformed = deform_many(corr, samples, codes)
    src_shapes = [deformed[i] for i in sources]
    src_labels = [samples[i].labels for i in sources]

    scores: List[Optional[float]] = [None] * len(samples)
    mean_u = [float("nan")] * len(samples)
    right_u = [float("nan")] * len(samples)
    wrong_u = [float("nan")] * len(samples)
    for i, target in enumerate(deformed):
        if i in sources:
            continue
        result = transfer_attributes(src_shapes, src_labels, target, n=n, categorical=True, gamma=gamma)
        mean_u[i] = result.mean_uncertainty
        wrong = label_errors(result.values, samples[i].labels)
        if wrong is not None:
            scores[i] = miou(result.values, samples[i].labels, checkpoint.model.n_parts)
            right_u[i], wrong_u[i] = split_uncertainty(result.uncertainty, wrong)

    logger.info(f"Label transfer from {len(sources)} source shape(s)")
    return {
        "miou_scores": scores,
        "uncertainty": {"mean": mean_u, "correct": right_u, "wrong": wrong_u},
    }


def _cell(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


def report_rows(
    samples: Sequence[ShapeSample],
    chamfer_scores: Optional[Sequence[float]] = None,
    pck_scores: Optional[Sequence[Optional[Dict[float, float]]]] = None,
    miou_scores: Optional[Sequence[Optional[float]]] = None,
    uncertainty: Optional[Dict[str, Sequence[float]]] = None,
) -> List[List[str]]:
    uncertainty = uncertainty or {}
    rows = []
    for i, sample in enumerate(samples):
        scores = pck_scores[i] if pck_scores else None
        rows.append([
            sample.name,
            _cell(chamfer_scores[i] if chamfer_scores else None),
            _cell(scores.get(0.05) if scores else None),
            _cell(scores.get(0.1) if scores else None),
            _cell(miou_scores[i] if miou_scores else None),
            *(_cell(uncertainty[key][i]) if key in uncertainty else "" for key in ("mean", "correct", "wrong")),
        ])
    return rows


@stage_registry.entry("write_report", "Write the per-shape evaluation report")
async def write_report(
    samples: List[ShapeSample],
    out_path: str,
    chamfer_scores: Optional[List[float]] = None,
    pck_scores: Optional[List[Optional[Dict[float, float]]]] = None,
    miou_scores: Optional[List[Optional[float]]] = None,
    uncertainty: Optional[Dict[str, List[float]]] = None,
) -> Dict[str, Any]:
    rows = report_rows(samples, chamfer_scores, pck_scores, miou_scores, uncertainty)
    path = await write_text_atomic_async(out_path, format_csv(REPORT_COLUMNS, rows))
    logger.info(f"Wrote evaluation report for {len(rows)} shapes to {path}")
    return {"report_path": str(path), "report_rows": rows}


def register_evaluation_pipeline(engine: PipelineEngine) -> str:
    """Register the evaluation pipeline with the engine"""
    return engine.create_pipeline(create_evaluation_pipeline())


async def run_evaluation(
    checkpoint_path: str,
    dataset_path: str,
    out_path: str,
    chamfer: bool = False,
    pck: bool = False,
    miou: bool = False,
    shots: int = 5,
    neighbors: int = 10,
    resolution: int = 64,
    fit_steps: int = 300,
    fit_lr: float = 1e-3,
    seed: int = 0,
    uncertainty_gamma: float = 10.0,
    listeners: Sequence = (),
):
    engine = PipelineEngine()
    for listener in listeners:
        engine.add_event_listener(listener)
    pipeline_id = register_evaluation_pipeline(engine)
    return await engine.run_pipeline(pipeline_id, {
        "checkpoint_path": str(checkpoint_path),
        "dataset_path": str(dataset_path),
        "out_path": str(Path(out_path)),
        "chamfer": chamfer,
        "pck": pck,
        "miou": miou,
        "shots": shots,
        "neighbors": neighbors,
        "resolution": resolution,
        "fit_steps": fit_steps,
        "fit_lr": fit_lr,
        "seed": seed,
        "uncertainty_gamma": uncertainty_gamma,
    })
