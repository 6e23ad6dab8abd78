"""
Text formats: shape files, keypoints, labels, colours, OBJ meshes and CSV logs.

Numbers are written with 9 significant digits; every file is written to a
temporary sibling first and renamed into place.
"""

import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import aiofiles
import aiofiles.os
import numpy as np

from ..core.errors import DataFormatError
from ..core.state import LOSS_COLUMNS, StepRecord
from ..geometry.mesh import Mesh
from ..geometry.sample import KeypointSet, ShapeSample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SHAPE_MAGIC = "pdc-shape"
SHAPE_VERSION = 1
SHAPE_SUFFIX = ".shape"
KEYPOINT_SUFFIX = ".kp"
LOG_HEADER = ("step",) + LOSS_COLUMNS


def fmt(value: float) -> str:
    return f"{float(value):.9g}"


def quantize(values: np.ndarray) -> np.ndarray:
    """Round every entry to what the text formats can represent"""
    values = np.asarray(values, dtype=np.float64)
    return np.array([float(fmt(v)) for v in values.ravel()], dtype=np.float64).reshape(values.shape)


def quantize_sample(sample: ShapeSample) -> ShapeSample:
    """Copy of a sample that survives a write/read cycle unchanged"""
    return ShapeSample(
        surface=quantize(sample.surface),
        surface_features=quantize(sample.surface_features),
        query=quantize(sample.query),
        sdf=quantize(sample.sdf),
        query_features=quantize(sample.query_features),
        normals=None if sample.normals is None else quantize(sample.normals),
        labels=None if sample.labels is None else np.asarray(sample.labels, dtype=np.int64),
        keypoints=KeypointSet(list(sample.keypoints.names), quantize(sample.keypoints.points)),
        name=sample.name,
    )


# Atomic writes -----------------------------------------------------------

def write_bytes_atomic(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_text_atomic(path: PathLike, text: str) -> Path:
    return write_bytes_atomic(path, text.encode("utf-8"))


async def write_text_atomic_async(path: PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    async with aiofiles.open(tmp, "w", encoding="utf-8", newline="\n") as f:
        await f.write(text)
    await aiofiles.os.replace(tmp, path)
    return path


def _read_lines(path: PathLike) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def _floats(tokens: Sequence[str], path: PathLike, lineno: int) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise DataFormatError(f"{path}:{lineno}: bad number ({e})") from e


# Shape files -------------------------------------------------------------

def format_shape(sample: ShapeSample) -> str:
    if sample.normals is None:
        raise DataFormatError(f"Shape '{sample.name}' needs surface normals to be written")
    k = sample.n_parts
    lines = [f"{SHAPE_MAGIC} {SHAPE_VERSION} k={k}"]
    for i in range(sample.n_surface):
        row = ["S"] + [fmt(v) for v in sample.surface[i]] + [fmt(v) for v in sample.normals[i]]
        row += [fmt(v) for v in sample.surface_features[i]]
        if sample.labels is not None:
            row.append(str(int(sample.labels[i])))
        lines.append(" ".join(row))
    for i in range(sample.n_query):
        row = ["Q"] + [fmt(v) for v in sample.query[i]] + [fmt(sample.sdf[i])]
        row += [fmt(v) for v in sample.query_features[i]]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def parse_shape(text: str, name: str = "", path: PathLike = "<string>") -> ShapeSample:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty shape file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != SHAPE_MAGIC or not header[2].startswith("k="):
        raise DataFormatError(f"{path}:1: expected '{SHAPE_MAGIC} {SHAPE_VERSION} k=<k>'")
    if header[1] != str(SHAPE_VERSION):
        raise DataFormatError(f"{path}:1: unsupported shape file version {header[1]}")
    try:
        k = int(header[2][2:])
    except ValueError as e:
        raise DataFormatError(f"{path}:1: bad part count '{header[2]}'") from e

    surface, query, labels = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        kind, rest = tokens[0], tokens[1:]
        if kind == "S":
            if len(rest) == 6 + k + 1:
                try:
                    labels.append(int(rest[-1]))
                except ValueError as e:
                    raise DataFormatError(f"{path}:{lineno}: bad label '{rest[-1]}'") from e
                rest = rest[:-1]
            elif len(rest) != 6 + k:
                raise DataFormatError(f"{path}:{lineno}: surface line needs {6 + k} or {7 + k} values")
            surface.append(_floats(rest, path, lineno))
        elif kind == "Q":
            if len(rest) != 4 + k:
                raise DataFormatError(f"{path}:{lineno}: query line needs {4 + k} values")
            query.append(_floats(rest, path, lineno))
        else:
            raise DataFormatError(f"{path}:{lineno}: unknown record type '{kind}'")

    if labels and len(labels) != len(surface):
        raise DataFormatError(f"{path}: labels present on only {len(labels)} of {len(surface)} surface lines")
    S = np.array(surface, dtype=np.float64).reshape(-1, 6 + k)
    Q = np.array(query, dtype=np.float64).reshape(-1, 4 + k)
    return ShapeSample(
        surface=S[:, :3],
        normals=S[:, 3:6],
        surface_features=S[:, 6:],
        query=Q[:, :3],
        sdf=Q[:, 3],
        query_features=Q[:, 4:],
        labels=np.array(labels, dtype=np.int64) if labels else None,
        name=name,
    )


def write_shape(path: PathLike, sample: ShapeSample) -> Path:
    return write_text_atomic(path, format_shape(sample))


def read_shape(path: PathLike) -> ShapeSample:
    """Shape file plus its keypoint file next to it, when one exists"""
    path = Path(path)
    sample = parse_shape("\n".join(_read_lines(path)), name=path.stem, path=path)
    kp_path = path.with_suffix(KEYPOINT_SUFFIX)
    if kp_path.exists():
        sample.keypoints = read_keypoints(kp_path)
    return sample


# Keypoints, labels, colours ------------------------------------------------

def format_keypoints(keypoints: KeypointSet) -> str:
    return "".join(f"{name} {fmt(p[0])} {fmt(p[1])} {fmt(p[2])}\n" for name, p in keypoints)


def read_keypoints(path: PathLike) -> KeypointSet:
    names, points = [], []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 4:
            raise DataFormatError(f"{path}:{lineno}: expected 'name x y z'")
        names.append(tokens[0])
        points.append(_floats(tokens[1:], path, lineno))
    return KeypointSet(names, np.array(points, dtype=np.float64).reshape(-1, 3))


def write_keypoints(path: PathLike, keypoints: KeypointSet) -> Path:
    return write_text_atomic(path, format_keypoints(keypoints))


def read_labels(path: PathLike) -> np.ndarray:
    values = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            values.append(int(line))
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: bad label '{line.strip()}'") from e
    return np.array(values, dtype=np.int64)


def write_labels(path: PathLike, labels: Iterable[int]) -> Path:
    return write_text_atomic(path, "".join(f"{int(v)}\n" for v in labels))


def read_colors(path: PathLike) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'r g b'")
        rows.append(_floats(tokens, path, lineno))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_colors(path: PathLike, colors: np.ndarray) -> Path:
    return write_text_atomic(path, "".join(" ".join(fmt(v) for v in row) + "\n" for row in colors))


def write_obj(path: PathLike, mesh: Mesh) -> Path:
    path = write_text_atomic(path, mesh.to_obj())
    logger.info(f"Wrote mesh with {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {path}")
    return path


# Datasets ----------------------------------------------------------------

def write_dataset(directory: PathLike, samples: Sequence[ShapeSample]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for sample in samples:
        if not sample.name:
            raise DataFormatError("Dataset samples need names")
        path = write_shape(directory / f"{sample.name}{SHAPE_SUFFIX}", sample)
        if len(sample.keypoints):
            write_keypoints(path.with_suffix(KEYPOINT_SUFFIX), sample.keypoints)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} shapes to {directory}")
    return paths


def read_dataset(directory: PathLike) -> List[ShapeSample]:
    """All shape files of a directory, in file-name order"""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {directory}")
    samples = [read_shape(path) for path in sorted(directory.glob(f"*{SHAPE_SUFFIX}"))]
    logger.info(f"Loaded {len(samples)} shapes from {directory}")
    return samples


# CSV logs and reports ----------------------------------------------------

def format_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def read_training_log(path: PathLike) -> List[StepRecord]:
    lines = _read_lines(path)
    if not lines or tuple(lines[0].split(",")) != LOG_HEADER:
        raise DataFormatError(f"{path}: not a training log")
    records = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        values = _floats(row[1:], path, lineno)
        records.append(StepRecord(step=int(row[0]), **dict(zip(LOSS_COLUMNS, values))))
    return records


class CsvLogWriter:
    """
    Training event listener that keeps the CSV loss log current.

    The whole log is rewritten atomically after every epoch and when training ends;
    on resume the rows before the starting step are kept.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.rows: List[List[str]] = []

    def __call__(self, event_type: str, data: Dict[str, Any]) -> None:
        if event_type == "training_started":
            self.rows = []
            start = data.get("start_step", 0)
            if start and self.path.exists():
                self.rows = [r.csv_row() for r in read_training_log(self.path) if r.step < start]
        elif event_type == "step_completed":
            self.rows.append(data["record"].csv_row())
        elif event_type in ("epoch_completed", "training_completed", "training_failed"):
            self.flush()

    def flush(self) -> Optional[Path]:
        return write_text_atomic(self.path, format_csv(LOG_HEADER, self.rows))
