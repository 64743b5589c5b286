"""Checkpoint files: a one-line JSON header followed by flat binary arrays.

The header records the format version, the training config echo (enough to
rebuild the model, the foresight settings, and the normalizer), the epoch,
the optimizer step count, and an ordered array table (name, shape).  The
binary body is the little-endian float64 bytes of every array concatenated
in table order, so a checkpoint round-trips bit-exactly and two saves of the
same state are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numerics import AdamState

CHECKPOINT_VERSION = 1
_MAGIC = "foresight-rnn-checkpoint"
_DTYPE = "<f8"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: dict, opt_state: AdamState | None,
                    config_echo: dict, epoch: int) -> None:
    arrays = [(name, params[name]) for name in params]
    if opt_state is not None:
        arrays += [(f"adam.m.{name}", opt_state.m[name]) for name in params]
        arrays += [(f"adam.v.{name}", opt_state.v[name]) for name in params]
    header = {
        "magic": _MAGIC,
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "adam_step": None if opt_state is None else int(opt_state.step),
        "config": config_echo,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
        "dtype": _DTYPE,
    }
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
                    for _, a in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(body)


def load_checkpoint(path, expected_spec=None):
    """Read a checkpoint; returns (params, opt_state | None, config_echo, epoch).

    expected_spec: optional iterable of (name, shape, ...) entries (the
    model's parameter table); mismatches fail listing every offending array.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from e
    if header.get("magic") != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')} "
            f"(expected {CHECKPOINT_VERSION})")

    itemsize = np.dtype(_DTYPE).itemsize
    expected_bytes = sum(
        int(np.prod(entry["shape"], dtype=np.int64)) * itemsize
        for entry in header["arrays"])
    if len(body) != expected_bytes:
        raise CheckpointError(
            f"{path}: truncated binary body, expected {expected_bytes} bytes, "
            f"got {len(body)}")

    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(
            body, dtype=_DTYPE, count=n, offset=offset).reshape(shape).copy()
        offset += n * itemsize

    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    if expected_spec is not None:
        _check_spec(path, params, expected_spec)
    opt_state = None
    if header.get("adam_step") is not None:
        opt_state = AdamState(
            step=int(header["adam_step"]),
            m={k: arrays[f"adam.m.{k}"] for k in params},
            v={k: arrays[f"adam.v.{k}"] for k in params},
        )
    return params, opt_state, header["config"], int(header["epoch"])


def _check_spec(path, params: dict, expected_spec) -> None:
    expected = {entry[0]: tuple(entry[1]) for entry in expected_spec}
    problems = []
    for name, shape in sorted(expected.items()):
        if name not in params:
            problems.append(f"missing array '{name}'")
        elif params[name].shape != shape:
            problems.append(f"array '{name}' has shape "
                            f"{tuple(params[name].shape)}, expected {shape}")
    for name in sorted(params):
        if name not in expected:
            problems.append(f"unexpected array '{name}'")
    if problems:
        raise CheckpointError(
            f"{path}: checkpoint does not match the model configuration: "
            + "; ".join(problems))
