"""
Stage graphs, conditions and the batch evaluation pipeline.
"""

import asyncio
import csv

import pytest

from semtemplate.core.errors import ConfigurationError, DomainError
from semtemplate.core.fields import TemplateModel
from semtemplate.core.pipeline import ConditionalRouter, PipelineEngine, PipelineGraph
from semtemplate.core.registry import Registry
from semtemplate.core.state import PipelineState, RunStatus
from semtemplate.storage.checkpoint import Checkpoint, save_checkpoint
from semtemplate.storage.formats import quantize_sample, write_dataset
from semtemplate.workflows.evaluation import REPORT_COLUMNS, report_rows, run_evaluation


@pytest.fixture
def stages():
    registry = Registry(kind="stage")

    @registry.entry("double")
    def double(value):
        return {"value": 2 * value}

    @registry.entry("label")
    async def label(value):
        return f"v={value}"

    @registry.entry("explode")
    def explode():
        raise RuntimeError("stage broke")

    return registry


def engine_with(registry, definition):
    events = []
    engine = PipelineEngine(registry)
    engine.add_event_listener(lambda event_type, data: events.append((event_type, data.get("stage_id"))))
    return engine, engine.create_pipeline(definition), events


@pytest.mark.parametrize("kind, value, state_value, expected", [
    ("eq", 3, 3, True),
    ("ne", 3, 3, False),
    ("gt", 2, 3, True),
    ("lte", 2, 3, False),
    ("exists", None, 0, True),
    ("not_exists", None, None, True),
    ("truthy", None, 0, False),
    ("falsy", None, [], True),
    ("gt", 2, None, False),
])
def test_conditions(kind, value, state_value, expected):
    condition = ConditionalRouter.create_condition(kind, "x", value)
    assert condition(PipelineState(data={"x": state_value})) is expected


def test_condition_compares_against_state_reference():
    condition = ConditionalRouter.create_condition("lt", "x", "$state.limit")
    assert condition(PipelineState(data={"x": 1, "limit": 2}))
    with pytest.raises(ConfigurationError):
        ConditionalRouter.create_condition("between", "x")


def test_graph_definition_errors(stages):
    with pytest.raises(ConfigurationError):
        PipelineGraph.from_definition({"stages": [{"id": "a", "entry": "missing"}]}, stages)
    with pytest.raises(ConfigurationError):
        PipelineGraph.from_definition(
            {"stages": [{"id": "a", "entry": "double"}, {"id": "a", "entry": "label"}]}, stages
        )
    with pytest.raises(ConfigurationError):
        PipelineGraph.from_definition(
            {"stages": [{"id": "a", "entry": "double"}], "edges": [{"from": "a", "to": "b"}]}, stages
        )


def test_registry_rejects_duplicates(stages):
    with pytest.raises(ValueError):
        stages.register("double", lambda: None)
    assert stages.metadata("label")["async"]


def test_state_flows_through_stages(stages):
    engine, pipeline_id, events = engine_with(stages, {
        "name": "chain",
        "stages": [
            {"id": "first", "entry": "double", "params": {"value": "$state.value"}},
            {"id": "second", "entry": "double", "params": {"value": "$state.value"},
             "when": {"type": "gt", "key": "value", "value": 100}},
            {"id": "name", "entry": "label", "params": {"value": "$state.value"}},
        ],
        "edges": [{"from": "first", "to": "second"}, {"from": "second", "to": "name"}],
    })

    run = asyncio.run(engine.run_pipeline(pipeline_id, {"value": 5}))

    assert run.status == RunStatus.COMPLETED
    assert run.state.get("value") == 10
    assert run.state.get("name_result") == "v=10"
    assert [e.status for e in run.stage_executions] == [
        RunStatus.COMPLETED, RunStatus.SKIPPED, RunStatus.COMPLETED,
    ]
    assert events == [
        ("pipeline_started", None),
        ("stage_started", "first"),
        ("stage_completed", "first"),
        ("stage_skipped", "second"),
        ("stage_started", "name"),
        ("stage_completed", "name"),
        ("pipeline_completed", None),
    ]
    assert engine.get_run(run.run_id) is run


def test_conditional_edges_pick_branch(stages):
    engine, pipeline_id, _ = engine_with(stages, {
        "stages": [
            {"id": "start", "entry": "double", "params": {"value": 1}},
            {"id": "big", "entry": "label", "params": {"value": "big"}},
            {"id": "small", "entry": "label", "params": {"value": "small"}},
        ],
        "edges": [
            {"from": "start", "to": "big", "condition": {"type": "gt", "key": "value", "value": 5}},
            {"from": "start", "to": "small", "condition": {"type": "lte", "key": "value", "value": 5}},
        ],
    })
    run = asyncio.run(engine.run_pipeline(pipeline_id, {}))
    assert [e.stage_id for e in run.stage_executions] == ["start", "small"]
    assert run.state.get("small_result") == "v=small"


def test_failing_stage_fails_the_run(stages):
    engine, pipeline_id, events = engine_with(stages, {
        "name": "broken",
        "stages": [{"id": "boom", "entry": "explode"}],
    })

    with pytest.raises(RuntimeError):
        asyncio.run(engine.run_pipeline(pipeline_id, {}))

    assert events[-2:] == [("stage_failed", "boom"), ("pipeline_failed", None)]
    run = next(iter(engine.runs.values()))
    assert run.status == RunStatus.FAILED
    assert run.error == "stage broke"
    with pytest.raises(ConfigurationError):
        asyncio.run(engine.run_pipeline("nope", {}))


# Evaluation ----------------------------------------------------------------

def test_report_rows_leave_missing_metrics_blank(spheres):
    rows = report_rows(spheres[:2], chamfer_scores=[1.5, 2.0], miou_scores=[None, 0.5])
    assert rows[0] == [spheres[0].name, "1.5", "", "", "", "", "", ""]
    assert rows[1][4] == "0.5"


@pytest.fixture
def eval_inputs(tmp_path, tiny_field, spheres):
    samples = [quantize_sample(s) for s in spheres[:3]]
    write_dataset(tmp_path / "data", samples)
    model = TemplateModel(tiny_field, n_parts=2, n_shapes=2)
    ckpt = Checkpoint(model, model.init_params(0), step=3, shape_names=[s.name for s in samples[:2]])
    save_checkpoint(tmp_path / "model.pdck", ckpt)
    return tmp_path


def test_evaluation_writes_one_row_per_shape(eval_inputs, spheres):
    out = eval_inputs / "report.csv"

    run = asyncio.run(run_evaluation(
        eval_inputs / "model.pdck", eval_inputs / "data", out,
        chamfer=True, pck=True, miou=True,
        shots=1, neighbors=3, resolution=8, fit_steps=2,
    ))

    assert run.status == RunStatus.COMPLETED
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [row[0] for row in rows[1:]] == [s.name for s in spheres[:3]]
    miou_cells = [row[4] for row in rows[1:]]
    assert miou_cells[0] == ""
    assert all(0.0 <= float(cell) <= 1.0 for cell in miou_cells[1:])
    pck_cells = [row[3] for row in rows[1:]]
    assert all(0.0 <= float(cell) <= 100.0 for cell in pck_cells)


def test_evaluation_skips_disabled_metrics(eval_inputs):
    out = eval_inputs / "report.csv"

    run = asyncio.run(run_evaluation(
        eval_inputs / "model.pdck", eval_inputs / "data", out, miou=True, shots=1, fit_steps=0,
    ))

    statuses = {e.stage_id: e.status for e in run.stage_executions}
    assert statuses["reconstruction"] == RunStatus.SKIPPED
    assert statuses["keypoints"] == RunStatus.SKIPPED
    assert statuses["labels"] == RunStatus.COMPLETED
    assert run.state.get("chamfer_x1e3") is None


def test_evaluation_of_empty_dataset(tmp_path, eval_inputs):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DomainError):
        asyncio.run(run_evaluation(eval_inputs / "model.pdck", tmp_path / "empty", tmp_path / "r.csv"))
    assert not (tmp_path / "r.csv").exists()
