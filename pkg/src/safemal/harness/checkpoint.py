"""Acquisition-function checkpoints.

Layout::

    SAFEMAL-CKPT\\n
    version <int>\\n
    dims <state_dim> <action_dim> <horizon> <hidden> <z_dim> <q_hidden...>\\n
    tensor <name> <shape, comma separated>\\n      (one line per tensor)
    end\\n
    <row-major float64 little-endian payload>
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..acquisition import AcquisitionParams, init_acquisition

MAGIC = b"SAFEMAL-CKPT"
VERSION = 1
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _dims(params: AcquisitionParams) -> list[int]:
    q_hidden = [layer.out_dim for layer in params.q_head.layers[:-1]]
    return [params.state_dim, params.action_dim, params.horizon,
            params.encoder.hidden_dim, params.z_dim, *q_hidden]


def save_checkpoint(params: AcquisitionParams, path) -> Path:
    path = Path(path)
    lines = [MAGIC.decode(), f"version {VERSION}", "dims " + " ".join(map(str, _dims(params)))]
    for name, arr in zip(params.names(), params.arrays()):
        lines.append(f"tensor {name} " + ",".join(map(str, arr.shape)))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE).tobytes() for a in params.arrays())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return path


def _parse_header(raw: bytes):
    first = raw.split(b"\n", 1)[0]
    if first != MAGIC:
        raise CorruptCheckpointError("bad magic string; not a checkpoint file")
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CorruptCheckpointError("header is truncated (no end marker)")
    try:
        lines = raw[:end].decode().split("\n")[1:]
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError("header is not text") from exc
    if not lines or not lines[0].startswith("version "):
        raise CorruptCheckpointError("missing version line")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise CorruptCheckpointError("malformed version line") from exc
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        if not lines[1].startswith("dims "):
            raise ValueError
        dims = [int(v) for v in lines[1].split()[1:]]
        tensors = []
        for line in lines[2:]:
            tag, name, shape = line.split(" ")
            if tag != "tensor":
                raise ValueError
            tensors.append((name, tuple(int(s) for s in shape.split(",") if s)))
    except (IndexError, ValueError) as exc:
        raise CorruptCheckpointError("malformed header line") from exc
    if len(dims) < 5:
        raise CorruptCheckpointError("dims line is too short")
    return dims, tensors, end + len(b"\nend\n")


def load_checkpoint(path) -> AcquisitionParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    dims, tensors, offset = _parse_header(raw)
    D, J, T, hidden, z_dim, *q_hidden = dims
    try:
        template = init_acquisition(D, J, T, np.random.default_rng(0), hidden, z_dim, q_hidden)
    except ValueError as exc:
        raise CheckpointShapeError(f"dims {dims} do not describe a valid network") from exc
    expected = list(zip(template.names(), (a.shape for a in template.arrays())))
    if [n for n, _ in tensors] != [n for n, _ in expected]:
        raise CheckpointShapeError("tensor names do not match the network layout")
    for (name, shape), (_, want) in zip(tensors, expected):
        if shape != want:
            raise CheckpointShapeError(f"tensor {name}: shape {shape}, expected {want}")
    sizes = [int(np.prod(s)) for _, s in tensors]
    if len(raw) - offset != 8 * sum(sizes):
        raise CorruptCheckpointError(
            f"payload has {len(raw) - offset} bytes, expected {8 * sum(sizes)}")
    arrays = []
    for (_, shape), n in zip(tensors, sizes):
        arrays.append(np.frombuffer(raw, _LE, n, offset).reshape(shape).astype(float))
        offset += 8 * n
    return template.from_arrays(arrays)


def describe_checkpoint(path) -> str:
    dims, tensors, _ = _parse_header(Path(path).read_bytes())
    out = [f"version {VERSION}", f"state_dim={dims[0]} action_dim={dims[1]} horizon={dims[2]} "
           f"hidden={dims[3]} z_dim={dims[4]} q_hidden={tuple(dims[5:])}"]
    out += [f"  {name}: {shape}" for name, shape in tensors]
    out.append(f"parameters: {sum(int(np.prod(s)) for _, s in tensors)}")
    return "\n".join(out)
