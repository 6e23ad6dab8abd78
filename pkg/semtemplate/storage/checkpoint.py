"""
Binary checkpoints.

Layout (little-endian):

    magic ``PDCK``, uint32 version
    dimension header: uint32 latent dim, prior dim, part count, shape count,
        width count, then that many uint32 widths (template net, deformation net)
    uint32 length + UTF-8 JSON header (field config, block list, step, shape names)
    float64 parameter blocks in declared order, optional Adam moments
    uint64 blake2b checksum over everything before it

The dimension header is checked against the JSON header on load.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from ..core.autodiff import ParamVector
from ..core.config import FieldConfig
from ..core.errors import CheckpointError
from ..core.fields import TemplateModel
from ..training.optimizer import OptimizerState
from .formats import write_bytes_atomic

logger = logging.getLogger(__name__)

MAGIC = b"PDCK"
VERSION = 2
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DIMS = struct.Struct("<5I")


@dataclass(frozen=True)
class Dimensions:
    latent_dim: int
    prior_dim: int
    n_parts: int
    n_shapes: int
    widths: Tuple[int, ...]

    @classmethod
    def of(cls, model: TemplateModel) -> "Dimensions":
        return cls(
            model.config.latent_dim,
            model.config.prior_dim,
            model.n_parts,
            model.n_shapes,
            tuple(model.template_net.widths + model.deform_net.widths),
        )

    def pack(self) -> bytes:
        head = _DIMS.pack(self.latent_dim, self.prior_dim, self.n_parts, self.n_shapes, len(self.widths))
        return head + struct.pack(f"<{len(self.widths)}I", *self.widths)

    @classmethod
    def unpack_from(cls, buffer: bytes, offset: int) -> Tuple["Dimensions", int]:
        """Parse a dimension header at ``offset``; returns it and the offset just past it"""
        try:
            latent_dim, prior_dim, n_parts, n_shapes, n_widths = _DIMS.unpack_from(buffer, offset)
            offset += _DIMS.size
            widths = struct.unpack_from(f"<{n_widths}I", buffer, offset)
        except struct.error as e:
            raise CheckpointError(f"Truncated dimension header: {e}") from e
        return cls(latent_dim, prior_dim, n_parts, n_shapes, tuple(widths)), offset + 4 * n_widths


def read_dimensions(blob: bytes) -> Dimensions:
    """Dimension header of an encoded checkpoint, without decoding the rest"""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)")
    return Dimensions.unpack_from(blob, 8)[0]


@dataclass
class Checkpoint:
    model: TemplateModel
    params: ParamVector
    step: int = 0
    optimizer: Optional[OptimizerState] = None
    shape_names: List[str] = field(default_factory=list)

    def shape_index(self, name: str) -> Optional[int]:
        return self.shape_names.index(name) if name in self.shape_names else None

    def same_as(self, other: "Checkpoint") -> bool:
        """Bit-exact comparison of parameters, optimizer state and header fields"""
        if (
            self.model.config != other.model.config
            or self.model.n_parts != other.model.n_parts
            or self.params.layout != other.params.layout
            or self.step != other.step
            or self.shape_names != other.shape_names
            or (self.optimizer is None) != (other.optimizer is None)
        ):
            return False
        if not np.array_equal(self.params.data, other.params.data):
            return False
        if self.optimizer is not None:
            return (
                self.optimizer.step == other.optimizer.step
                and np.array_equal(self.optimizer.m, other.optimizer.m)
                and np.array_equal(self.optimizer.v, other.optimizer.v)
            )
        return True


def _checksum(payload: bytes) -> int:
    return _U64.unpack(hashlib.blake2b(payload, digest_size=8).digest())[0]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    header = {
        "field": model.config.model_dump(),
        "n_parts": model.n_parts,
        "n_shapes": model.n_shapes,
        "blocks": [[name, list(shape)] for name, shape in model.layout.describe()],
        "step": int(ckpt.step),
        "optimizer": ckpt.optimizer is not None,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer is not None else 0,
        "shape_names": list(ckpt.shape_names),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        _U32.pack(VERSION),
        Dimensions.of(model).pack(),
        _U32.pack(len(header_bytes)),
        header_bytes,
    ]
    parts.append(ckpt.params.data.astype("<f8").tobytes())
    if ckpt.optimizer is not None:
        parts.append(ckpt.optimizer.m.astype("<f8").tobytes())
        parts.append(ckpt.optimizer.v.astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + _U64.pack(_checksum(payload))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 2 * _U32.size + _U64.size or blob[:4] != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)")
    payload, (stored,) = blob[:-_U64.size], _U64.unpack(blob[-_U64.size:])
    if _checksum(payload) != stored:
        raise CheckpointError("Checkpoint checksum mismatch, refusing to load")

    (version,) = _U32.unpack_from(payload, 4)
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    dims, offset = Dimensions.unpack_from(payload, 8)
    try:
        (header_len,) = _U32.unpack_from(payload, offset)
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint header: {e}") from e
    start, offset = offset + _U32.size, offset + _U32.size + header_len
    try:
        header = json.loads(payload[start:offset].decode("utf-8"))
        config = FieldConfig(**header["field"])
        model = TemplateModel(config, header["n_parts"], header["n_shapes"])
    except (ValueError, KeyError, ValidationError) as e:
        raise CheckpointError(f"Bad checkpoint header: {e}") from e
    if Dimensions.of(model) != dims:
        raise CheckpointError(f"Dimension header {dims} disagrees with the stored field config")

    blocks = [(name, tuple(shape)) for name, shape in header["blocks"]]
    if blocks != model.layout.describe():
        raise CheckpointError("Checkpoint block list does not match the model layout")

    size = model.layout.size
    n_arrays = 3 if header["optimizer"] else 1
    if len(payload) - offset != n_arrays * size * 8:
        raise CheckpointError(
            f"Checkpoint body has {len(payload) - offset} bytes, expected {n_arrays * size * 8}"
        )
    arrays = np.frombuffer(payload, dtype="<f8", offset=offset).astype(np.float64).reshape(n_arrays, size)

    optimizer = None
    if header["optimizer"]:
        optimizer = OptimizerState(arrays[1].copy(), arrays[2].copy(), int(header["optimizer_step"]))
    return Checkpoint(
        model=model,
        params=ParamVector(model.layout, arrays[0].copy()),
        step=int(header["step"]),
        optimizer=optimizer,
        shape_names=list(header["shape_names"]),
    )


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = write_bytes_atomic(path, encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint {path} (step {ckpt.step}, {ckpt.model.layout.size} parameters)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = decode_checkpoint(path.read_bytes())
    logger.info(f"Loaded checkpoint {path} (step {ckpt.step}, {len(ckpt.shape_names)} shapes)")
    return ckpt
