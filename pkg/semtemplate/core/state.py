from typing import Dict, List, Any, Optional
from pydantic import BaseModel, Field
from datetime import datetime
from enum import Enum


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


LOSS_COLUMNS = (
    "total", "rec", "pdc_geo", "pdc_sem", "scale", "geo",
    "smooth", "normal", "c", "emb", "r_mean",
)


class StepRecord(BaseModel):
    """Loss breakdown of one optimisation step (unweighted terms)"""
    step: int
    epoch: int = 0
    total: float
    rec: float = 0.0
    pdc_geo: float = 0.0
    pdc_sem: float = 0.0
    scale: float = 0.0
    geo: float = 0.0
    smooth: float = 0.0
    normal: float = 0.0
    c: float = 0.0
    emb: float = 0.0
    r_mean: float = 1.0

    def csv_row(self) -> List[str]:
        return [str(self.step)] + [repr(float(getattr(self, name))) for name in LOSS_COLUMNS]


class TrainingRun(BaseModel):
    """Tracks one training run"""
    run_id: str
    status: RunStatus = RunStatus.PENDING
    config: Dict[str, Any] = Field(default_factory=dict)
    records: List[StepRecord] = Field(default_factory=list)
    start_step: int = 0
    current_step: int = 0
    created_at: datetime = Field(default_factory=datetime.now)
    completed_at: Optional[datetime] = None
    error: Optional[str] = None


class PipelineState(BaseModel):
    """State that flows through the stages of a pipeline"""
    data: Dict[str, Any] = Field(default_factory=dict)
    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)

    def get(self, key: str, default: Any = None) -> Any:
        """Get value from state data"""
        return self.data.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set value in state data"""
        self.data[key] = value
        self.updated_at = datetime.now()

    def update(self, updates: Dict[str, Any]) -> None:
        """Update multiple values in state"""
        self.data.update(updates)
        self.updated_at = datetime.now()

    def summary(self) -> Dict[str, Any]:
        """JSON-safe subset of the state (scalars, strings, flat lists of them)"""
        safe: Dict[str, Any] = {}
        for key, value in self.data.items():
            if isinstance(value, (str, int, float, bool)) or value is None:
                safe[key] = value
            elif isinstance(value, (list, tuple)) and all(
                isinstance(v, (str, int, float, bool)) for v in value
            ):
                safe[key] = list(value)
        return safe


class StageExecution(BaseModel):
    """Tracks execution of a single pipeline stage"""
    stage_id: str
    status: RunStatus = RunStatus.PENDING
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    error: Optional[str] = None
    output_keys: List[str] = Field(default_factory=list)


class PipelineRun(BaseModel):
    """Tracks a complete pipeline execution"""
    run_id: str
    pipeline_id: str
    status: RunStatus = RunStatus.PENDING
    state: PipelineState
    stage_executions: List[StageExecution] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)
    completed_at: Optional[datetime] = None
    current_stage: Optional[str] = None
    error: Optional[str] = None
