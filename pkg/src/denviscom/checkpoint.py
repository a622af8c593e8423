"""Versioned binary checkpoints with cross-task transfer.

Layout: magic ``DVCM``, u32 version, u32 header length, a JSON header
(task, config snapshot, parameter manifest in storage order), the raw
payload (each parameter row-major float64 little-endian), and a trailing
SHA-256 digest over everything before it.  Heads are parameter-free, so a
flow checkpoint transfers to disparity by rewriting the task field alone;
the payload bytes are untouched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .fileio import FormatError

MAGIC = b"DVCM"
VERSION = 1


class CheckpointMismatchError(ValueError):
    """Configs or parameter sets disagree; the message carries the diff."""


@dataclass
class Checkpoint:
    task: str
    config: ModelConfig
    params: dict[str, np.ndarray]  # name -> float64 array, insertion order = storage order
    version: int = VERSION

    @classmethod
    def from_model(cls, model, task: str) -> "Checkpoint":
        params = {name: t.numpy().astype(np.float64).copy() for name, t in model.parameters().items()}
        return cls(task=task, config=model.config, params=params)

    def apply_to_model(self, model) -> None:
        if model.config != self.config:
            raise CheckpointMismatchError(
                "checkpoint config does not match model config:\n" + config_diff(self.config, model.config)
            )
        model.load_parameters(self.params)


def config_diff(a: ModelConfig, b: ModelConfig) -> str:
    da, db = a.to_dict(), b.to_dict()
    lines = [f"  {key}: {da[key]!r} vs {db[key]!r}" for key in da if da[key] != db[key]]
    return "\n".join(lines) if lines else "  (configs identical)"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in ckpt.params.items()]
    header = json.dumps(
        {"task": ckpt.task, "config": ckpt.config.to_dict(), "params": manifest},
        sort_keys=True,
    ).encode()
    payload = b"".join(arr.astype("<f8").tobytes() for arr in ckpt.params.values())
    body = MAGIC + struct.pack("<II", ckpt.version, len(header)) + header + payload
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise FormatError(f"not a checkpoint file: bad magic {raw[:4]!r}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch: file corrupted")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(body[12 : 12 + header_len].decode())
    config = ModelConfig.from_dict(header["config"])

    params: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise FormatError(f"checkpoint truncated in parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(body):
        raise FormatError(f"checkpoint has {len(body) - offset} trailing payload bytes")
    return Checkpoint(task=header["task"], config=config, params=params, version=version)


def transfer_checkpoint(src: Checkpoint, dst_task: str, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Re-task a checkpoint; the parameter payload is copied verbatim.

    Heads are parameter-free, so the transfer is total: every encoder /
    positional / trunk-block entry carries over.  If ``expected_config`` is
    given it must match the source config exactly.
    """
    if expected_config is not None and expected_config != src.config:
        raise CheckpointMismatchError(
            "transfer target config incompatible with source:\n" + config_diff(src.config, expected_config)
        )
    return Checkpoint(task=dst_task, config=src.config, params=dict(src.params), version=src.version)
