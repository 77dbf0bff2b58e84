"""Self-describing binary checkpoint container.

Byte layout (little-endian):

    magic    8 bytes  b"JBCK0001"
    u32      header length
    header   UTF-8 JSON with sorted keys: version tag, iteration counter,
             schedule state, l0 reference (+ sample count), config
             snapshot, model description, and an index of the array blobs
             (name, dtype, shape, offset, nbytes)
    payload  raw array bytes in index order

Arrays are stored under stable sorted names ("model/<param>",
"optim/<param>/momentum", "rng/torch"), so saving, loading and saving
again produces identical bytes and checkpoints are portable across runs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DataError

_MAGIC = b"JBCK0001"


@dataclass
class CheckpointData:
    header: dict
    arrays: dict

    @property
    def iteration(self) -> int:
        return self.header["iteration"]

    @property
    def l0(self) -> Optional[dict]:
        return self.header["l0"]

    @property
    def config(self) -> dict:
        return self.header["config"]


def _array_blobs(named_arrays) -> tuple:
    index = []
    blobs = []
    offset = 0
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return index, blobs


def checkpoint_bytes(
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer],
    iteration: int,
    schedule: dict,
    l0: Optional[dict],
    config: dict,
    model_desc: dict,
    torch_rng_state: Optional[torch.Tensor] = None,
) -> bytes:
    arrays = {}
    for name, param in model.named_parameters():
        arrays[f"model/{name}"] = param.detach().cpu().numpy()
    for name, buf in model.named_buffers():
        arrays[f"model_buffers/{name}"] = buf.detach().cpu().numpy()

    if optimizer is not None:
        params = dict(model.named_parameters())
        for name in sorted(params):
            state = optimizer.state.get(params[name], {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                arrays[f"optim/{name}/momentum"] = buf.detach().cpu().numpy()

    if torch_rng_state is not None:
        arrays["rng/torch"] = torch_rng_state.numpy()

    index, blobs = _array_blobs(arrays)
    header = {
        "version": 1,
        "iteration": int(iteration),
        "schedule": schedule,
        "l0": l0,
        "config": config,
        "model": model_desc,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes, *blobs])


def save_checkpoint(path, *args, **kwargs) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(*args, **kwargs))


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
        if header.get("version") != 1:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        payload_start = f.tell()
        arrays = {}
        for rec in header["arrays"]:
            f.seek(payload_start + rec["offset"])
            blob = f.read(rec["nbytes"])
            if len(blob) != rec["nbytes"]:
                raise DataError(f"{path}: array {rec['name']} truncated")
            arrays[rec["name"]] = np.frombuffer(blob, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    return CheckpointData(header=header, arrays=arrays)


def load_model_state(ckpt: CheckpointData, model: torch.nn.Module) -> None:
    """Copy checkpointed parameters and buffers into an existing model."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, param in params.items():
        key = f"model/{name}"
        if key not in ckpt.arrays:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        with torch.no_grad():
            param.copy_(torch.from_numpy(ckpt.arrays[key]))
    for name, buf in buffers.items():
        key = f"model_buffers/{name}"
        if key in ckpt.arrays:
            with torch.no_grad():
                buf.copy_(torch.from_numpy(ckpt.arrays[key]))


def load_optimizer_state(
    ckpt: CheckpointData, model: torch.nn.Module, optimizer: torch.optim.Optimizer
) -> None:
    params = dict(model.named_parameters())
    for name, param in params.items():
        key = f"optim/{name}/momentum"
        if key in ckpt.arrays:
            optimizer.state[param] = {
                "momentum_buffer": torch.from_numpy(ckpt.arrays[key]).clone()
            }


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
