"""Checkpoint container: "TCKPT1" magic, a little-endian u64 length-prefixed
canonical JSON index (name -> dtype, shape, offset, trainable flag), then the
tensors concatenated as TNS1 blobs at those offsets.

Saving the result of a load reproduces the file byte for byte: the index is
serialized with sorted keys and tensors are laid out in name order.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import Adam
from .tensorfile import decode_tensor

MAGIC = b"TCKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class VersionError(CheckpointError):
    pass


class KeyMismatchError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


class ConfigHashError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict                 # name -> float64 array (model state)
    trainable: dict               # name -> bool
    opt_tensors: dict = field(default_factory=dict)   # adam moment buffers
    extra: dict = field(default_factory=dict)         # scalars: steps, lr, lora meta
    epoch: int = 0
    config_hash: str = ""
    tag: str = ""
    version: int = VERSION


def _encode_tensor(arr: np.ndarray) -> bytes:
    from .tensorfile import MAGIC as TNS_MAGIC, _CODES, _DTYPES
    code = _CODES[np.dtype(arr.dtype)]
    header = TNS_MAGIC + bytes([code, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = io.BytesIO()
    index_tensors = {}
    sections = (("tensors", ckpt.tensors), ("opt_tensors", ckpt.opt_tensors))
    for section, tensors in sections:
        index_tensors[section] = {}
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            blob = _encode_tensor(arr)
            index_tensors[section][name] = {
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": payload.tell(),
                "trainable": bool(ckpt.trainable.get(name, False)),
            }
            payload.write(blob)
    index = {
        "version": ckpt.version,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "tag": ckpt.tag,
        "extra": ckpt.extra,
        "tensors": index_tensors["tensors"],
        "opt_tensors": index_tensors["opt_tensors"],
    }
    index_bytes = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(index_bytes)))
        f.write(index_bytes)
        f.write(payload.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:6]!r}")
    (index_len,) = struct.unpack("<Q", blob[6:14])
    index = json.loads(blob[14:14 + index_len].decode())
    if index["version"] != VERSION:
        raise VersionError(f"{path}: format version {index['version']}, "
                           f"this build reads {VERSION}")
    payload = blob[14 + index_len:]

    def read_section(section: str) -> tuple[dict, dict]:
        tensors, flags = {}, {}
        for name, meta in index[section].items():
            # decode from the exact slice so truncation is caught per tensor
            start = meta["offset"]
            itemsize = np.dtype(meta["dtype"]).itemsize
            length = 6 + 4 * len(meta["shape"]) + itemsize * int(np.prod(meta["shape"], dtype=np.int64))
            arr = decode_tensor(payload[start:start + length], name=f"{path}:{name}")
            if list(arr.shape) != list(meta["shape"]):
                raise TensorShapeError(f"{path}:{name} shape {arr.shape} != index "
                                       f"{meta['shape']}")
            tensors[name] = arr
            flags[name] = bool(meta["trainable"])
        return tensors, flags

    tensors, trainable = read_section("tensors")
    opt_tensors, _ = read_section("opt_tensors")
    return Checkpoint(tensors=tensors, trainable=trainable, opt_tensors=opt_tensors,
                      extra=index["extra"], epoch=index["epoch"],
                      config_hash=index["config_hash"], tag=index["tag"],
                      version=index["version"])


def config_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def checkpoint_from_model(model, epoch: int = 0, config_hash: str = "", tag: str = "",
                          optimizer: Adam | None = None, extra: dict | None = None) -> Checkpoint:
    tensors = {}
    trainable = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data.copy()
        trainable[name] = p.requires_grad
    opt_tensors = {}
    meta = dict(extra or {})
    if optimizer is not None:
        steps = {}
        for name, state in optimizer.slots.items():
            opt_tensors[f"adam/{name}/m"] = state.m.copy()
            opt_tensors[f"adam/{name}/v"] = state.v.copy()
            steps[name] = state.step
        meta["adam_steps"] = steps
        meta["adam_lr"] = optimizer.lr
        meta["adam_weight_decay"] = optimizer.weight_decay
    return Checkpoint(tensors=tensors, trainable=trainable, opt_tensors=opt_tensors,
                      extra=meta, epoch=epoch, config_hash=config_hash, tag=tag)


def load_into_model(ckpt: Checkpoint, model, expect_config_hash: str | None = None,
                    force: bool = False) -> None:
    """Strict restore by name: values and trainable flags both come back."""
    if expect_config_hash is not None and not force \
            and ckpt.config_hash and ckpt.config_hash != expect_config_hash:
        raise ConfigHashError(f"checkpoint config hash {ckpt.config_hash} does not "
                              f"match {expect_config_hash}; pass force to override")
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(ckpt.tensors))
    unexpected = sorted(set(ckpt.tensors) - set(model_params))
    if missing or unexpected:
        raise KeyMismatchError(f"missing from checkpoint: {missing}; "
                               f"unexpected in checkpoint: {unexpected}")
    for name, p in model_params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.data.shape:
            raise TensorShapeError(f"{name}: checkpoint shape {arr.shape} != "
                                   f"model shape {p.data.shape}")
        p.data = arr.astype(np.float64).copy()
        p.requires_grad = ckpt.trainable[name]


def load_optimizer_state(ckpt: Checkpoint, optimizer: Adam) -> None:
    steps = ckpt.extra.get("adam_steps", {})
    for name, state in optimizer.slots.items():
        m = ckpt.opt_tensors.get(f"adam/{name}/m")
        v = ckpt.opt_tensors.get(f"adam/{name}/v")
        if m is None or v is None:
            raise KeyMismatchError(f"optimizer state for {name!r} missing from checkpoint")
        state.m = m.copy()
        state.v = v.copy()
        state.step = int(steps.get(name, 0))
