"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic          4 bytes, b"LBKD"
    version        uint32 (currently 1)
    json_len       uint64, then that many UTF-8 bytes of metadata JSON
    tensor_count   uint64
    per tensor:
        name_len   uint64, then UTF-8 name bytes
        rank       uint64
        extents    rank * uint64
        dtype      uint8 (0 = float32, 1 = float64)
        payload    raw little-endian row-major values

The metadata JSON carries the model configuration, optional head spec,
vocabulary pieces, rng state, epoch index, and best-metric record, with
sorted keys so identical runs write identical bytes.  Optimizer moments,
when saved, ride along as tensors named ``opt.m.<param>`` / ``opt.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import EncoderParams, ModelConfig, TaskHeadSpec, validate_shapes
from .optim import AdamWState

MAGIC = b"LBKD"
FORMAT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: EncoderParams
    mlm_head: bool
    head: TaskHeadSpec | None = None
    vocab_pieces: list[str] | None = None
    optimizer: AdamWState | None = None
    rng: dict | None = None
    epoch: int = 0
    best_metric: float | None = None


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _write_u64(f, value: int) -> None:
    f.write(struct.pack("<Q", value))


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    tag = _TAG_FOR_KIND.get(np.dtype(arr.dtype))
    if tag is None:
        raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
    name_bytes = name.encode("utf-8")
    _write_u64(f, len(name_bytes))
    f.write(name_bytes)
    _write_u64(f, arr.ndim)
    for extent in arr.shape:
        _write_u64(f, extent)
    f.write(struct.pack("<B", tag))
    f.write(np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag]).tobytes())


def save_checkpoint(
    path,
    config: ModelConfig,
    params: EncoderParams,
    mlm_head: bool = True,
    head: TaskHeadSpec | None = None,
    vocab_pieces: list[str] | None = None,
    optimizer: AdamWState | None = None,
    rng: dict | None = None,
    epoch: int = 0,
    best_metric: float | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict(),
        "mlm_head": mlm_head,
        "head": head.to_dict() if head is not None else None,
        "vocab": vocab_pieces,
        "rng": rng,
        "epoch": epoch,
        "best_metric": best_metric,
        "optimizer_step": optimizer.t if optimizer is not None else None,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = list(params.items())
    if optimizer is not None:
        tensors += [("opt.m." + k, v) for k, v in optimizer.m.items()]
        tensors += [("opt.v." + k, v) for k, v in optimizer.v.items()]

    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, FORMAT_VERSION)
        _write_u64(f, len(blob))
        f.write(blob)
        _write_u64(f, len(tensors))
        for name, arr in tensors:
            _write_tensor(f, name, arr)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint ended while reading {what} ({len(data)}/{n} bytes)"
        )
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointMagicError(
                f"bad checkpoint magic {magic!r}, expected {MAGIC!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )
        (json_len,) = struct.unpack("<Q", _read_exact(f, 8, "metadata length"))
        try:
            meta = json.loads(_read_exact(f, json_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc

        (count,) = struct.unpack("<Q", _read_exact(f, 8, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for t in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(f, 8, f"tensor {t} name length"))
            name = _read_exact(f, name_len, f"tensor {t} name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(f, 8, f"{name} rank"))
            extents = struct.unpack(
                "<" + "Q" * rank, _read_exact(f, 8 * rank, f"{name} extents")
            )
            (tag,) = struct.unpack("<B", _read_exact(f, 1, f"{name} dtype"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"tensor {name} has unknown dtype tag {tag}")
            dtype = _DTYPE_TAGS[tag]
            n_bytes = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(f, n_bytes, f"{name} payload")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(extents).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after the declared tensor list")

    config = ModelConfig.from_dict(meta["model"])
    head = TaskHeadSpec.from_dict(meta["head"]) if meta.get("head") else None
    mlm_head = bool(meta.get("mlm_head", False))

    param_tensors = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    params = EncoderParams(param_tensors)
    validate_shapes(params, config, mlm_head=mlm_head, task_head=head)

    optimizer = None
    if meta.get("optimizer_step") is not None:
        optimizer = AdamWState(
            m={k[len("opt.m.") :]: v for k, v in tensors.items() if k.startswith("opt.m.")},
            v={k[len("opt.v.") :]: v for k, v in tensors.items() if k.startswith("opt.v.")},
            t=int(meta["optimizer_step"]),
        )

    return Checkpoint(
        config=config,
        params=params,
        mlm_head=mlm_head,
        head=head,
        vocab_pieces=meta.get("vocab"),
        optimizer=optimizer,
        rng=meta.get("rng"),
        epoch=int(meta.get("epoch", 0)),
        best_metric=meta.get("best_metric"),
    )
