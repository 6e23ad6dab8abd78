import json
import logging
from datetime import datetime
from typing import Any, Dict, List, Optional

import aiosqlite

from ..core.state import (
    LOSS_COLUMNS,
    PipelineRun,
    PipelineState,
    RunStatus,
    StageExecution,
    StepRecord,
    TrainingRun,
)

logger = logging.getLogger(__name__)


def _iso(value: Optional[datetime]) -> Optional[str]:
    return value.isoformat() if value else None


def _dt(value: Optional[str]) -> Optional[datetime]:
    return datetime.fromisoformat(value) if value else None


class RunStore:
    """SQLite history of training runs and evaluation pipeline runs"""

    def __init__(self, db_path: str = "runs.db"):
        self.db_path = db_path
        self._initialized = False

    async def initialize(self):
        """Initialize database tables"""
        if self._initialized:
            return

        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("""
                CREATE TABLE IF NOT EXISTS training_runs (
                    run_id TEXT PRIMARY KEY,
                    status TEXT NOT NULL,
                    config TEXT NOT NULL,
                    start_step INTEGER NOT NULL,
                    current_step INTEGER NOT NULL,
                    error TEXT,
                    created_at TIMESTAMP,
                    completed_at TIMESTAMP
                )
            """)

            columns = ", ".join(f"{name} REAL" for name in LOSS_COLUMNS)
            await db.execute(f"""
                CREATE TABLE IF NOT EXISTS step_records (
                    run_id TEXT NOT NULL,
                    step INTEGER NOT NULL,
                    epoch INTEGER NOT NULL,
                    {columns},
                    PRIMARY KEY (run_id, step),
                    FOREIGN KEY (run_id) REFERENCES training_runs (run_id)
                )
            """)

            await db.execute("""
                CREATE TABLE IF NOT EXISTS pipeline_runs (
                    run_id TEXT PRIMARY KEY,
                    pipeline_id TEXT NOT NULL,
                    status TEXT NOT NULL,
                    state TEXT NOT NULL,
                    current_stage TEXT,
                    error TEXT,
                    created_at TIMESTAMP,
                    completed_at TIMESTAMP
                )
            """)

            await db.execute("""
                CREATE TABLE IF NOT EXISTS stage_executions (
                    execution_id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    stage_id TEXT NOT NULL,
                    status TEXT NOT NULL,
                    started_at TIMESTAMP,
                    completed_at TIMESTAMP,
                    error TEXT,
                    output_keys TEXT,
                    FOREIGN KEY (run_id) REFERENCES pipeline_runs (run_id)
                )
            """)

            await db.commit()

        self._initialized = True
        logger.info(f"Run store ready at {self.db_path}")

    # Training runs -------------------------------------------------------

    async def save_training_run(self, run: TrainingRun) -> None:
        """Insert or replace a training run and all of its step records"""
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("""
                INSERT OR REPLACE INTO training_runs
                (run_id, status, config, start_step, current_step, error, created_at, completed_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (
                run.run_id,
                run.status.value,
                json.dumps(run.config),
                run.start_step,
                run.current_step,
                run.error,
                _iso(run.created_at),
                _iso(run.completed_at),
            ))

            await db.execute("DELETE FROM step_records WHERE run_id = ?", (run.run_id,))
            placeholders = ", ".join("?" for _ in range(3 + len(LOSS_COLUMNS)))
            await db.executemany(
                f"INSERT INTO step_records (run_id, step, epoch, {', '.join(LOSS_COLUMNS)}) "
                f"VALUES ({placeholders})",
                [
                    (run.run_id, r.step, r.epoch, *(getattr(r, name) for name in LOSS_COLUMNS))
                    for r in run.records
                ],
            )
            await db.commit()

        logger.info(f"Saved training run {run.run_id} ({len(run.records)} steps)")

    async def get_training_run(self, run_id: str) -> Optional[TrainingRun]:
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute("""
                SELECT status, config, start_step, current_step, error, created_at, completed_at
                FROM training_runs WHERE run_id = ?
            """, (run_id,)) as cursor:
                row = await cursor.fetchone()
            if not row:
                return None

            async with db.execute(
                f"SELECT step, epoch, {', '.join(LOSS_COLUMNS)} FROM step_records "
                "WHERE run_id = ? ORDER BY step",
                (run_id,),
            ) as cursor:
                step_rows = await cursor.fetchall()

        records = [
            StepRecord(step=r[0], epoch=r[1], **dict(zip(LOSS_COLUMNS, r[2:])))
            for r in step_rows
        ]
        return TrainingRun(
            run_id=run_id,
            status=RunStatus(row[0]),
            config=json.loads(row[1]),
            start_step=row[2],
            current_step=row[3],
            error=row[4],
            created_at=_dt(row[5]),
            completed_at=_dt(row[6]),
            records=records,
        )

    async def list_training_runs(self) -> List[Dict[str, Any]]:
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute(
                "SELECT run_id, status, current_step, created_at, completed_at "
                "FROM training_runs ORDER BY created_at DESC"
            ) as cursor:
                rows = await cursor.fetchall()

        return [
            {
                "run_id": row[0],
                "status": row[1],
                "current_step": row[2],
                "created_at": row[3],
                "completed_at": row[4],
            }
            for row in rows
        ]

    # Pipeline runs -------------------------------------------------------

    async def save_pipeline_run(self, run: PipelineRun) -> None:
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("""
                INSERT OR REPLACE INTO pipeline_runs
                (run_id, pipeline_id, status, state, current_stage, error, created_at, completed_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (
                run.run_id,
                run.pipeline_id,
                run.status.value,
                json.dumps(run.state.summary()),
                run.current_stage,
                run.error,
                _iso(run.created_at),
                _iso(run.completed_at),
            ))

            await db.execute("DELETE FROM stage_executions WHERE run_id = ?", (run.run_id,))
            for execution in run.stage_executions:
                await db.execute("""
                    INSERT INTO stage_executions
                    (run_id, stage_id, status, started_at, completed_at, error, output_keys)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                """, (
                    run.run_id,
                    execution.stage_id,
                    execution.status.value,
                    _iso(execution.started_at),
                    _iso(execution.completed_at),
                    execution.error,
                    json.dumps(execution.output_keys),
                ))

            await db.commit()

        logger.info(f"Saved pipeline run {run.run_id}")

    async def get_pipeline_run(self, run_id: str) -> Optional[PipelineRun]:
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            async with db.execute("""
                SELECT pipeline_id, status, state, current_stage, error, created_at, completed_at
                FROM pipeline_runs WHERE run_id = ?
            """, (run_id,)) as cursor:
                row = await cursor.fetchone()
            if not row:
                return None

            async with db.execute("""
                SELECT stage_id, status, started_at, completed_at, error, output_keys
                FROM stage_executions WHERE run_id = ?
                ORDER BY execution_id
            """, (run_id,)) as cursor:
                exec_rows = await cursor.fetchall()

        executions = [
            StageExecution(
                stage_id=r[0],
                status=RunStatus(r[1]),
                started_at=_dt(r[2]),
                completed_at=_dt(r[3]),
                error=r[4],
                output_keys=json.loads(r[5]) if r[5] else [],
            )
            for r in exec_rows
        ]
        return PipelineRun(
            run_id=run_id,
            pipeline_id=row[0],
            status=RunStatus(row[1]),
            state=PipelineState(data=json.loads(row[2])),
            current_stage=row[3],
            error=row[4],
            created_at=_dt(row[5]),
            completed_at=_dt(row[6]),
            stage_executions=executions,
        )

    async def delete_training_run(self, run_id: str) -> bool:
        await self.initialize()

        async with aiosqlite.connect(self.db_path) as db:
            await db.execute("DELETE FROM step_records WHERE run_id = ?", (run_id,))
            result = await db.execute("DELETE FROM training_runs WHERE run_id = ?", (run_id,))
            await db.commit()
            return result.rowcount > 0


class TrainingRecorder:
    """Async training event listener that mirrors a run into the store"""

    def __init__(self, store: RunStore):
        self.store = store
        self.run: Optional[TrainingRun] = None

    async def __call__(self, event_type: str, data: Dict[str, Any]) -> None:
        if event_type == "training_started":
            self.run = TrainingRun(
                run_id=data["run_id"],
                status=RunStatus.RUNNING,
                config=data.get("config", {}),
                start_step=data["start_step"],
                current_step=data["start_step"],
            )
            await self.store.save_training_run(self.run)
        elif self.run is None:
            return
        elif event_type == "step_completed":
            self.run.records.append(data["record"])
            self.run.current_step = data["record"].step + 1
        elif event_type in ("training_completed", "training_failed"):
            self.run.status = RunStatus.COMPLETED if event_type == "training_completed" else RunStatus.FAILED
            self.run.error = data.get("error")
            self.run.completed_at = datetime.now()
            await self.store.save_training_run(self.run)
