"""
Async training engine for the auto-decoder objective, plus test-time latent fitting.

The engine emits ``training_started``, ``step_completed``, ``epoch_completed``,
``training_completed`` and ``training_failed`` events to its listeners.
"""

import asyncio
import inspect
import logging
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.autodiff import ParamLayout, ParamVector, value_and_grad
from ..core.config import LossWeights, RunConfig
from ..core.errors import ConfigurationError, DomainError, NumericalError, TrainingAborted
from ..core.fields import TemplateModel
from ..core.losses import BatchItem, LossBreakdown, total_loss
from ..core.state import RunStatus, StepRecord, TrainingRun
from ..geometry.sample import ShapeSample
from .optimizer import OptimizerState, adam_step, clip_grad_norm, latent_row_mask

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    params: ParamVector
    optimizer: OptimizerState
    run: TrainingRun
    step: int

    @property
    def records(self) -> List[StepRecord]:
        return self.run.records


def epoch_batches(n_shapes: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled batches for one epoch; a lone leftover shape joins the previous batch"""
    order = np.random.default_rng([seed, epoch]).permutation(n_shapes)
    batches = [order[i:i + batch_size] for i in range(0, n_shapes, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def record_from(breakdown: LossBreakdown, step: int, epoch: int) -> StepRecord:
    return StepRecord(step=step, epoch=epoch, **breakdown.as_dict())


class TrainingEngine:
    """Runs Adam over network weights, latent codes and part priors"""

    def __init__(
        self,
        config: RunConfig,
        model: TemplateModel,
        dataset: Sequence[ShapeSample],
        params: Optional[ParamVector] = None,
        optimizer: Optional[OptimizerState] = None,
        start_step: int = 0,
    ):
        if not dataset:
            raise DomainError("Cannot train on an empty dataset")
        if model.n_shapes != len(dataset):
            raise ConfigurationError(
                f"Model has {model.n_shapes} latent codes for {len(dataset)} shapes"
            )
        self.config = config
        self.model = model
        self.dataset = list(dataset)
        self.params = params if params is not None else model.init_params(config.train.seed)
        self.optimizer = optimizer if optimizer is not None else OptimizerState.zeros(model.layout)
        self.start_step = start_step
        self.event_listeners: List[Callable] = []

    def add_event_listener(self, listener: Callable) -> None:
        """Add event listener for training events"""
        self.event_listeners.append(listener)

    async def emit_event(self, event_type: str, data: Dict[str, Any]) -> None:
        """Emit event to all listeners"""
        for listener in self.event_listeners:
            try:
                result = listener(event_type, data)
                if inspect.isawaitable(result):
                    await result
            except Exception as e:
                logger.error(f"Event listener error: {e}")

    def make_batch(self, indices: Sequence[int], step: int) -> List[BatchItem]:
        """Per-step point subsampling, reseeded from (seed, step, shape)"""
        train = self.config.train
        return [
            BatchItem(
                int(i),
                self.dataset[i].subsample(
                    np.random.default_rng([train.seed, step, int(i)]),
                    train.surface_points,
                    train.query_points,
                ),
            )
            for i in indices
        ]

    def loss_and_grad(self, params: ParamVector, batch: List[BatchItem]) -> Tuple[float, ParamVector, LossBreakdown]:
        weights = self.config.weights
        return value_and_grad(
            lambda leaves: total_loss(self.model, leaves, batch, weights), params
        )

    def train_step(self, batch: List[BatchItem]) -> LossBreakdown:
        """Evaluate, check, clip and apply one Adam update"""
        train = self.config.train
        loss, grad, breakdown = self.loss_and_grad(self.params, batch)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad.data)):
            raise NumericalError(f"Non-finite loss or gradient ({breakdown})", breakdown.as_dict())

        grad, _ = clip_grad_norm(grad, train.clip_norm)
        mask = latent_row_mask(self.model.layout, [item.index for item in batch])
        self.params, self.optimizer = adam_step(
            self.params, grad, self.optimizer, train.lr,
            train.beta1, train.beta2, train.eps, mask=mask,
        )
        return breakdown

    async def run(self, run_id: Optional[str] = None) -> TrainingResult:
        """Train until the epoch budget or the step budget runs out"""
        train = self.config.train
        run = TrainingRun(
            run_id=run_id or str(uuid.uuid4()),
            config=self.config.model_dump(),
            start_step=self.start_step,
            current_step=self.start_step,
        )
        run.status = RunStatus.RUNNING
        step = self.start_step
        n_shapes = len(self.dataset)
        per_epoch = len(epoch_batches(n_shapes, train.batch_size, train.seed, 0))
        max_steps = train.max_steps if train.max_steps is not None else train.epochs * per_epoch
        last_good = self.params.copy()

        try:
            await self.emit_event("training_started", {
                "run_id": run.run_id,
                "start_step": step,
                "n_shapes": n_shapes,
                "n_params": self.model.layout.size,
                "config": run.config,
            })

            for epoch in range(step // per_epoch, train.epochs):
                if step >= max_steps:
                    break
                epoch_records = []
                batches = epoch_batches(n_shapes, train.batch_size, train.seed, epoch)
                for indices in batches[step - epoch * per_epoch:]:
                    if step >= max_steps:
                        break
                    batch = self.make_batch(indices, step)
                    last_good = self.params.copy()
                    try:
                        breakdown = self.train_step(batch)
                    except NumericalError as e:
                        raise TrainingAborted(
                            f"Training diverged at step {step}: {e}",
                            breakdown=e.breakdown, last_good=last_good, step=step,
                        ) from e

                    record = record_from(breakdown, step, epoch)
                    step += 1
                    run.records.append(record)
                    run.current_step = step
                    epoch_records.append(record)
                    if step % train.log_every == 0:
                        logger.info(f"Step {record.step} (epoch {epoch}): {breakdown}")
                    await self.emit_event("step_completed", {
                        "run_id": run.run_id,
                        "record": record,
                    })

                if epoch_records:
                    mean_total = float(np.mean([r.total for r in epoch_records]))
                    logger.info(f"Epoch {epoch} done: mean total loss {mean_total:.6g}")
                    await self.emit_event("epoch_completed", {
                        "run_id": run.run_id,
                        "epoch": epoch,
                        "mean_total": mean_total,
                        "step": step,
                    })

            run.status = RunStatus.COMPLETED
            run.completed_at = datetime.now()
            await self.emit_event("training_completed", {
                "run_id": run.run_id,
                "step": step,
                "status": "completed",
            })

        except Exception as e:
            run.status = RunStatus.FAILED
            run.error = str(e)
            run.completed_at = datetime.now()
            if isinstance(e, TrainingAborted):
                self.params = e.last_good
            await self.emit_event("training_failed", {
                "run_id": run.run_id,
                "step": step,
                "error": str(e),
            })
            logger.error(f"Training run {run.run_id} failed: {e}")
            raise

        return TrainingResult(self.params, self.optimizer, run, step)


def train(
    dataset: Sequence[ShapeSample],
    config: RunConfig,
    listeners: Sequence[Callable] = (),
    model: Optional[TemplateModel] = None,
) -> TrainingResult:
    """Synchronous entry point: build a model for the dataset and train it"""
    if not dataset:
        raise DomainError("Cannot train on an empty dataset")
    n_parts = config.field.n_parts or dataset[0].n_parts
    for sample in dataset:
        if sample.n_parts != n_parts:
            raise ConfigurationError(
                f"Shape '{sample.name}' has {sample.n_parts} parts, expected {n_parts}"
            )
    model = model or TemplateModel(config.field, n_parts, len(dataset))
    engine = TrainingEngine(config, model, dataset)
    for listener in listeners:
        engine.add_event_listener(listener)
    return asyncio.run(engine.run())


# Test-time latent optimisation ----------------------------------------------

@dataclass
class FitResult:
    z: np.ndarray
    best_loss: float
    history: List[float] = field(default_factory=list)


def fit_latent(
    model: TemplateModel,
    params: ParamVector,
    sample: ShapeSample,
    weights: LossWeights,
    steps: int = 300,
    lr: float = 1e-3,
    seed: int = 0,
    n_surface: int = 512,
    n_query: int = 512,
    z_init: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Optimise a fresh latent code for an unseen shape on rec + gamma7 * c.

    Network weights and part priors stay frozen; the best code seen is returned,
    and a divergent step ends the fit early.
    """
    if z_init is None:
        rng = np.random.default_rng([seed, 7])
        z_init = rng.normal(0.0, model.config.init_std, size=model.config.latent_dim)
    layout = ParamLayout([("z", (model.config.latent_dim,))])
    z = ParamVector(layout, np.array(z_init, dtype=np.float64))
    state = OptimizerState.zeros(layout)
    frozen = {block.name: params.block(block.name) for block in params.layout}

    best_z, best_loss = z.data.copy(), float("inf")
    history: List[float] = []
    for step in range(steps):
        sub = sample.subsample(np.random.default_rng([seed, step]), n_surface, n_query)
        batch = [BatchItem(0, sub)]

        def loss_fn(leaves):
            return total_loss(model, frozen, batch, weights, latents={0: leaves["z"]}, terms=["rec", "c"])

        loss, grad, _ = value_and_grad(loss_fn, z)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad.data)):
            logger.warning(f"Latent fit diverged at step {step}, keeping the best code")
            break
        history.append(loss)
        if loss < best_loss:
            best_z, best_loss = z.data.copy(), loss
        z, state = adam_step(z, grad, state, lr)

    if steps == 0:
        best_loss = float("nan")
    logger.info(f"Latent fit finished after {len(history)} steps, best loss {best_loss:.6g}")
    return FitResult(best_z, best_loss, history)
