"""Binary checkpoints.

Layout: the magic line ``SGCK1\\n``, a little-endian uint64 header length, a
JSON header (scalars, rng state and a name/shape directory), then every
tensor as little-endian float64 in directory order.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import AblationFlags, ModelConfig
from .optim import OptimizerState
from .training import SceneModel, TrainState

MAGIC = b"SGCK1\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _directory(state: TrainState):
    entries = []
    for name, p in state.model.named_parameters():
        entries.append(("param", name, p.data))
    for name, b in state.model.named_buffers():
        entries.append(("buffer", name, b))
    opt = state.optimizer
    for name, m in opt.first_moment.items():
        entries.append(("moment1", name, m))
    for name, v in opt.second_moment.items():
        entries.append(("moment2", name, v))
    return entries


def dumps_state(state: TrainState) -> bytes:
    entries = _directory(state)
    header = {
        "version": VERSION,
        "mode": state.mode,
        "epoch": state.epoch,
        "rng_seed": state.rng_seed,
        "rng_state": state.rng.bit_generator.state,
        "flags": dataclasses.asdict(state.flags),
        "model_config": dataclasses.asdict(state.model.cfg),
        "optimizer": state.optimizer.scalars(),
        "tensors": [{"kind": k, "name": n, "shape": list(np.shape(a))} for k, n, a in entries],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for _, _, a in entries:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> bytes:
    data = dumps_state(state)
    Path(path).write_bytes(data)
    return data


def _model_config(d: dict) -> ModelConfig:
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def loads_state(data: bytes, source: str = "<bytes>", expected: ModelConfig | None = None) -> TrainState:
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not an SGCK1 checkpoint")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{source}: truncated before header length")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + hlen:
        raise CheckpointError(f"{source}: truncated inside header")
    try:
        header = json.loads(data[off:off + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    off += hlen
    if header.get("version") != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {header.get('version')}")

    cfg = _model_config(header["model_config"])
    flags = AblationFlags(**header["flags"])
    mode = header["mode"]
    model = SceneModel(expected or cfg, flags, header["rng_seed"], with_decoder=mode == "pretrain")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    scalars = header["optimizer"]
    opt = OptimizerState(**scalars)

    seen = set()
    for entry in header["tensors"]:
        kind, name, shape = entry["kind"], entry["name"], tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        if len(data) < off + size:
            raise CheckpointError(f"{source}: truncated in tensor {kind}:{name}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
        off += size
        target = params.get(name) if kind in ("param", "moment1", "moment2") else None
        if kind == "buffer":
            if name not in buffers:
                raise CheckpointError(f"{source}: unknown buffer {name!r}")
            if np.shape(buffers[name]) != shape:
                raise CheckpointError(f"{source}: buffer {name!r} has shape {shape}, "
                                      f"model expects {np.shape(buffers[name])}")
            model.set_buffer(name, arr)
            continue
        if target is None:
            raise CheckpointError(f"{source}: unknown tensor {name!r}")
        if target.shape != shape:
            raise CheckpointError(f"{source}: tensor {name!r} has shape {shape}, model expects {target.shape}")
        if kind == "param":
            target.data = arr
            seen.add(name)
        elif kind == "moment1":
            opt.first_moment[name] = arr
        else:
            opt.second_moment[name] = arr
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{source}: missing tensors {sorted(missing)}")
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(model, opt, mode, header["epoch"], flags, header["rng_seed"], rng)


def load_checkpoint(path, expected: ModelConfig | None = None) -> TrainState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads_state(data, str(path), expected)
