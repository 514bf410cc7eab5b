"""Binary checkpoints: magic, version, JSON header, then little-endian float32 blobs."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, Optimizer, OptimizerConfig
from .errors import FormatError, StorageError

MAGIC = b"MJTO"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    model: Denoiser
    step: int = 0
    calibration: tuple = (0.0, 1.0)
    optimizer: Optimizer | None = None
    extra: dict = field(default_factory=dict)


def _blob_table(groups: dict) -> tuple[list, list]:
    table, blobs, offset = [], [], 0
    for group, arrays in groups.items():
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            table.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    return table, blobs


def save_checkpoint(path, ckpt: Checkpoint):
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ckpt.model.config).items()}
    groups = {"param": ckpt.model.params}
    header = {"format": VERSION, "model": cfg, "fusion": ckpt.model.config.fusion,
              "step": int(ckpt.step), "calibration": [float(c) for c in ckpt.calibration],
              "extra": ckpt.extra}
    if ckpt.optimizer is not None:
        groups["opt"] = ckpt.optimizer.state
        header["optimizer"] = asdict(ckpt.optimizer.config)
    table, blobs = _blob_table(groups)
    header["blobs"] = table
    head = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
            fh.write(head)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    base = _PREFIX.size + hlen
    groups: dict = {"param": {}, "opt": {}}
    for entry in header["blobs"]:
        group, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = base + entry["offset"]
        if start + 4 * count > len(raw):
            raise FormatError(f"{path}: blob {entry['name']} runs past the end of the file")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        groups[group][name] = arr.astype(np.float32)
    mcfg = {k: tuple(v) if isinstance(v, list) else v for k, v in header["model"].items()}
    try:
        model = Denoiser(DenoiserConfig(**mcfg), groups["param"])
    except Exception as exc:
        raise FormatError(f"{path}: header dims do not match parameter blobs: {exc}") from exc
    opt = None
    if "optimizer" in header:
        opt = Optimizer(OptimizerConfig(**header["optimizer"]), groups["opt"])
    return Checkpoint(model, header["step"], tuple(header["calibration"]), opt, header.get("extra", {}))
