"""Binary checkpoints: magic + version + JSON header + raw tensor records.

Layout (all integers little-endian):

    bytes 0-3   magic b"RGLA"
    u32         format version (currently 1)
    u32         header length, then that many bytes of JSON
    per tensor: u32 name length, name utf8, u8 dtype code, u8 ndim,
                u32 per dim, then the raw little-endian element bytes

The header carries the model config, the training step, the numpy data
stream state, and the optimizer hyperparameters; tensor records carry
model weights, optimizer moments, and the torch RNG state.  Serialization
is canonical (sorted keys, fixed tensor order), so saving, loading, and
saving again reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Dict, Optional

import numpy as np
import torch

from .model import ModelConfig, TransformerLM, build_model

MAGIC = b"RGLA"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_TORCH_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64, 3: torch.uint8}


def _write_tensor(fh: BinaryIO, name: str, tensor: torch.Tensor) -> None:
    code = _DTYPE_CODES.get(tensor.dtype)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {tensor.dtype} for {name!r}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", code, tensor.dim()))
    for size in tensor.shape:
        fh.write(struct.pack("<I", size))
    fh.write(
        np.ascontiguousarray(tensor.detach().cpu().numpy()).astype(_NP_DTYPES[code]).tobytes()
    )


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def _read_tensor(reader: _Reader) -> tuple[str, torch.Tensor]:
    name = reader.take(reader.u32()).decode("utf-8")
    code, ndim = reader.u8(), reader.u8()
    if code not in _NP_DTYPES:
        raise ValueError(f"unknown dtype code {code} for tensor {name!r}")
    shape = tuple(reader.u32() for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(_NP_DTYPES[code]).itemsize
    raw = reader.take(count * itemsize)
    arr = np.frombuffer(raw, dtype=_NP_DTYPES[code]).reshape(shape).copy()
    return name, torch.from_numpy(arr).to(_TORCH_DTYPES[code])


def save_checkpoint(
    path: str,
    model: TransformerLM,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    data_rng_state: Optional[dict] = None,
) -> None:
    tensors: Dict[str, torch.Tensor] = {}
    for name, tensor in model.state_dict().items():
        tensors[f"model.{name}"] = tensor

    param_groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        param_groups = state["param_groups"]
        for idx in sorted(state["state"]):
            for key, value in sorted(state["state"][idx].items()):
                if isinstance(value, torch.Tensor):
                    tensors[f"opt.{idx}.{key}"] = value

    tensors["rng.torch"] = torch.get_rng_state()

    header = {
        "model_config": model.config.to_dict(),
        "step": step,
        "data_rng_state": data_rng_state,
        "optimizer_param_groups": param_groups,
        "tensor_count": len(tensors),
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_raw)))
        fh.write(header_raw)
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path: str) -> dict:
    """Rebuild the model (and optimizer state, if present) from a file.

    Returns {"model", "config", "step", "optimizer_state", "data_rng_state",
    "torch_rng"}; optimizer_state is ready for AdamW.load_state_dict.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ValueError(f"{path!r} is not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(reader.take(reader.u32()).decode("utf-8"))

    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(header["tensor_count"]):
        name, tensor = _read_tensor(reader)
        tensors[name] = tensor
    if reader.pos != len(data):
        raise ValueError("trailing bytes after the last tensor record")

    config = ModelConfig.from_dict(header["model_config"])
    model = build_model(config, seed=0)
    model.load_state_dict(
        {
            name[len("model.") :]: t
            for name, t in tensors.items()
            if name.startswith("model.")
        }
    )

    optimizer_state = None
    if header["optimizer_param_groups"] is not None:
        state: Dict[int, dict] = {}
        for name, tensor in tensors.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = tensor
        optimizer_state = {
            "state": state,
            "param_groups": header["optimizer_param_groups"],
        }

    return {
        "model": model,
        "config": config,
        "step": header["step"],
        "optimizer_state": optimizer_state,
        "data_rng_state": header["data_rng_state"],
        "torch_rng": tensors.get("rng.torch"),
    }
