"""
Stage-graph engine for multi-step jobs such as batch evaluation.

A pipeline is a set of stages joined by (optionally conditional) edges. Stage
parameters may reference state values as ``"$state.<key>"``; a stage's dict
result is merged into the state. A stage with a ``when`` condition that does not
hold is recorded as skipped and the walk continues along its edges.
"""

from typing import Any, Callable, Dict, List, Optional
import inspect
import logging
import uuid
from datetime import datetime
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .registry import Registry, stage_registry
from .state import PipelineRun, PipelineState, RunStatus, StageExecution

logger = logging.getLogger(__name__)

STATE_REF = "$state."
MAX_STAGE_VISITS = 100

Condition = Callable[[PipelineState], bool]


def resolve(value: Any, state: PipelineState) -> Any:
    """Replace a ``$state.key`` reference with the state value"""
    if isinstance(value, str) and value.startswith(STATE_REF):
        return state.get(value[len(STATE_REF):])
    return value


class ConditionalRouter:
    """Builds predicates over the pipeline state"""

    COMPARISONS = {
        "gt": lambda a, b: a > b,
        "lt": lambda a, b: a < b,
        "gte": lambda a, b: a >= b,
        "lte": lambda a, b: a <= b,
    }

    @classmethod
    def create_condition(cls, condition_type: str, key: str, value: Any = None) -> Condition:
        if condition_type not in ("eq", "ne", "exists", "not_exists", "truthy", "falsy") and condition_type not in cls.COMPARISONS:
            raise ConfigurationError(f"Unknown condition type '{condition_type}'")

        def condition_func(state: PipelineState) -> bool:
            state_value = state.get(key)
            other = resolve(value, state)
            if condition_type == "eq":
                return state_value == other
            if condition_type == "ne":
                return state_value != other
            if condition_type == "exists":
                return state_value is not None
            if condition_type == "not_exists":
                return state_value is None
            if condition_type == "truthy":
                return bool(state_value)
            if condition_type == "falsy":
                return not state_value
            if state_value is None or other is None:
                return False
            return cls.COMPARISONS[condition_type](state_value, other)

        return condition_func

    @classmethod
    def from_definition(cls, definition: Optional[Dict[str, Any]]) -> Optional[Condition]:
        if definition is None:
            return None
        return cls.create_condition(definition["type"], definition["key"], definition.get("value"))


@dataclass
class Edge:
    from_stage: str
    to_stage: str
    condition: Optional[Condition] = None


@dataclass
class Stage:
    id: str
    entry: str
    params: Dict[str, Any] = field(default_factory=dict)
    when: Optional[Condition] = None
    description: str = ""


class PipelineGraph:
    """Stages and edges of one pipeline"""

    def __init__(self, registry: Registry):
        self.registry = registry
        self.stages: Dict[str, Stage] = {}
        self.edges: List[Edge] = []
        self.start_stage: Optional[str] = None

    @classmethod
    def from_definition(cls, definition: Dict[str, Any], registry: Registry) -> "PipelineGraph":
        graph = cls(registry)
        for stage_def in definition.get("stages", []):
            if stage_def["entry"] not in registry:
                raise ConfigurationError(f"Stage '{stage_def['id']}' uses unknown entry '{stage_def['entry']}'")
            if stage_def["id"] in graph.stages:
                raise ConfigurationError(f"Duplicate stage id '{stage_def['id']}'")
            graph.stages[stage_def["id"]] = Stage(
                id=stage_def["id"],
                entry=stage_def["entry"],
                params=dict(stage_def.get("params", {})),
                when=ConditionalRouter.from_definition(stage_def.get("when")),
                description=stage_def.get("description", ""),
            )

        for edge_def in definition.get("edges", []):
            for end in (edge_def["from"], edge_def["to"]):
                if end not in graph.stages:
                    raise ConfigurationError(f"Edge refers to unknown stage '{end}'")
            graph.edges.append(Edge(
                from_stage=edge_def["from"],
                to_stage=edge_def["to"],
                condition=ConditionalRouter.from_definition(edge_def.get("condition")),
            ))

        graph.start_stage = definition.get("start_stage")
        if not graph.start_stage and graph.stages:
            graph.start_stage = next(iter(graph.stages))
        return graph

    async def execute(self, run: PipelineRun, emit: Callable) -> None:
        if not self.start_stage:
            raise ConfigurationError("Pipeline has no start stage")

        current = self.start_stage
        visits = 0
        while current:
            visits += 1
            if visits > MAX_STAGE_VISITS:
                logger.warning(f"Stopping pipeline {run.pipeline_id} after {MAX_STAGE_VISITS} stage visits")
                break
            run.current_stage = current
            await self._execute_stage(self.stages[current], run, emit)

            next_stages = self._next_stages(current, run.state)
            if len(next_stages) > 1:
                logger.warning(f"Several edges leave stage {current}, following {next_stages[0]}")
            current = next_stages[0] if next_stages else None

    async def _execute_stage(self, stage: Stage, run: PipelineRun, emit: Callable) -> None:
        execution = StageExecution(stage_id=stage.id, started_at=datetime.now())
        run.stage_executions.append(execution)

        if stage.when is not None and not stage.when(run.state):
            execution.status = RunStatus.SKIPPED
            execution.completed_at = datetime.now()
            await emit("stage_skipped", {"run_id": run.run_id, "stage_id": stage.id})
            logger.info(f"Stage {stage.id} skipped")
            return

        execution.status = RunStatus.RUNNING
        await emit("stage_started", {"run_id": run.run_id, "stage_id": stage.id, "entry": stage.entry})

        try:
            params = {key: resolve(value, run.state) for key, value in stage.params.items()}
            result = await self.registry.execute(stage.entry, **params)

            if isinstance(result, dict):
                run.state.update(result)
                execution.output_keys = sorted(result)
            elif result is not None:
                run.state.set(f"{stage.id}_result", result)
                execution.output_keys = [f"{stage.id}_result"]

            execution.status = RunStatus.COMPLETED
            execution.completed_at = datetime.now()
            await emit("stage_completed", {
                "run_id": run.run_id,
                "stage_id": stage.id,
                "output_keys": execution.output_keys,
            })
            logger.info(f"Stage {stage.id} completed")

        except Exception as e:
            execution.status = RunStatus.FAILED
            execution.error = str(e)
            execution.completed_at = datetime.now()
            await emit("stage_failed", {"run_id": run.run_id, "stage_id": stage.id, "error": str(e)})
            logger.error(f"Stage {stage.id} failed: {e}")
            raise

    def _next_stages(self, current: str, state: PipelineState) -> List[str]:
        return [
            edge.to_stage
            for edge in self.edges
            if edge.from_stage == current and (edge.condition is None or edge.condition(state))
        ]


class PipelineEngine:
    """Registers pipelines and runs them with event notifications"""

    def __init__(self, registry: Optional[Registry] = None):
        self.registry = registry or stage_registry
        self.pipelines: Dict[str, PipelineGraph] = {}
        self.runs: Dict[str, PipelineRun] = {}
        self.event_listeners: List[Callable] = []

    def add_event_listener(self, listener: Callable) -> None:
        """Add event listener for pipeline events"""
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

    def create_pipeline(self, definition: Dict[str, Any], pipeline_id: Optional[str] = None) -> str:
        pipeline_id = pipeline_id or definition.get("name") or str(uuid.uuid4())
        graph = PipelineGraph.from_definition(definition, self.registry)
        self.pipelines[pipeline_id] = graph
        logger.info(f"Created pipeline {pipeline_id} with {len(graph.stages)} stages")
        return pipeline_id

    async def run_pipeline(self, pipeline_id: str, initial_state: Dict[str, Any]) -> PipelineRun:
        if pipeline_id not in self.pipelines:
            raise ConfigurationError(f"Pipeline {pipeline_id} not found")

        graph = self.pipelines[pipeline_id]
        run = PipelineRun(
            run_id=str(uuid.uuid4()),
            pipeline_id=pipeline_id,
            state=PipelineState(data=dict(initial_state)),
        )
        run.status = RunStatus.RUNNING
        self.runs[run.run_id] = run

        try:
            await self.emit_event("pipeline_started", {"run_id": run.run_id, "pipeline_id": pipeline_id})
            await graph.execute(run, self.emit_event)

            run.status = RunStatus.COMPLETED
            run.completed_at = datetime.now()
            await self.emit_event("pipeline_completed", {"run_id": run.run_id, "status": "completed"})

        except Exception as e:
            run.status = RunStatus.FAILED
            run.error = str(e)
            run.completed_at = datetime.now()
            await self.emit_event("pipeline_failed", {"run_id": run.run_id, "error": str(e)})
            logger.error(f"Pipeline run {run.run_id} failed: {e}")
            raise

        return run

    def get_run(self, run_id: str) -> Optional[PipelineRun]:
        return self.runs.get(run_id)
