"""Versioned binary checkpoints with a plain-text header.

Layout::

    FLOWMT-CKPT v1\\n
    header_bytes <N>\\n
    <N bytes of JSON: config, vocabulary, metrics cursor, tensor table>
    <raw little-endian tensor data, in table order>

The JSON header is written with sorted keys and the tensor table follows
the model's state-dict order, so save -> load -> save reproduces the file
byte for byte. Writes go to a temporary file in the target directory and
are renamed into place, so a crash never leaves a partial checkpoint.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict
from .errors import DataError
from .model import TranslationModel
from .vocab import Vocabulary

MAGIC = b"FLOWMT-CKPT v1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointBundle:
    model: TranslationModel
    config: Config
    metrics_cursor: int


def save_checkpoint(path: str | Path, model: TranslationModel, config: Config,
                    metrics_cursor: int = 0) -> None:
    path = Path(path)
    state = model.state_dict()
    table = []
    blobs = []
    for name, tensor in state.items():
        if tensor.dtype not in _DTYPES:
            raise DataError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        dtype = _DTYPES[tensor.dtype]
        array = tensor.detach().cpu().contiguous().numpy()
        blobs.append(np.ascontiguousarray(array).astype(dtype, copy=False).tobytes())
        table.append({"name": name, "shape": list(tensor.shape), "dtype": dtype})
    header = json.dumps(
        {
            "config": config.to_dict(),
            "vocab": model.vocab.state(),
            "metrics_cursor": int(metrics_cursor),
            "tensors": table,
        },
        sort_keys=True, separators=(",", ":")).encode("utf-8")

    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."),
                                    prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + b"\n")
            fh.write(f"header_bytes {len(header)}\n".encode("ascii"))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    magic_end = raw.find(b"\n")
    if magic_end < 0 or raw[:magic_end] != MAGIC:
        found = raw[:magic_end] if 0 <= magic_end <= 64 else raw[:32]
        raise DataError(
            f"checkpoint {path}: unsupported format or version "
            f"(expected {MAGIC.decode()!r}, found {found.decode('utf-8', 'replace')!r})")
    size_end = raw.find(b"\n", magic_end + 1)
    size_line = raw[magic_end + 1:size_end]
    if not size_line.startswith(b"header_bytes "):
        raise DataError(f"checkpoint {path}: malformed header length line")
    header_len = int(size_line.split()[1])
    header_start = size_end + 1
    try:
        header = json.loads(raw[header_start:header_start + header_len])
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path}: corrupt header: {exc}") from exc

    config = config_from_dict(header["config"])
    vocab = Vocabulary.from_state(header["vocab"])
    torch.manual_seed(0)  # construction RNG is irrelevant; weights are overwritten
    model = TranslationModel(vocab, config.model, config.flows)

    offset = header_start + header_len
    state = {}
    for entry in header["tensors"]:
        dtype = _TORCH_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"checkpoint {path}: unknown tensor dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(entry["dtype"]).itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"checkpoint {path}: truncated tensor data at {entry['name']}")
        array = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(shape)
        state[entry["name"]] = torch.from_numpy(array.copy()).to(dtype)
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"checkpoint {path}: {len(raw) - offset} trailing bytes")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise DataError(f"checkpoint {path}: state mismatch: {exc}") from exc
    model.eval()
    return CheckpointBundle(model, config, int(header["metrics_cursor"]))
