"""Binary containers for checkpoints, datasets and predictions.

All integers and floats are little-endian; tensors are raw f32 payloads.

Checkpoint (``TBCKPT01``)::

    magic[8] version:u32 count:u32
    count x { name_len:u32 name:utf8 rank:u32 extents:u64[rank] payload:f32[prod] }
    epoch:i64 cycle:i32 t_c:i32 train_loss:f32 flags:u32     (flags bit 0: bn stale)

Dataset (``TBDATA01``)::

    magic[8] version:u32 count:u32
    count x { rank:u32 extents:u64[rank] image:f32[prod] h:u32 w:u32 label:u8[h*w] seed:u64 domain:u8 }

Prediction (``TBPRED01``)::

    magic[8] version:u32 header_len:u32 header:utf8-json
    count x { seed:u64 probs:f32[C*H*W] entropy:f32[H*W] }
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .synthdata import DOMAINS, Dataset
from .tensor import ParamSet

CKPT_MAGIC = b"TBCKPT01"
DATA_MAGIC = b"TBDATA01"
PRED_MAGIC = b"TBPRED01"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def _check_header(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}; expected {magic!r}")
    (version,) = _unpack(fh, "<I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}; expected {VERSION}")


def _write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = _unpack(fh, "<I")
    shape = _unpack(fh, f"<{rank}Q") if rank else ()
    n = int(np.prod(shape)) if shape else 1
    buf = _read_exact(fh, 4 * n)
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class CkptMeta:
    epoch: int
    cycle: int
    t_c: int
    train_loss: float


def save_checkpoint(path, params: ParamSet, meta: CkptMeta) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name in params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            _write_tensor(fh, params[name])
        fh.write(struct.pack("<qiifI", meta.epoch, meta.cycle, meta.t_c, meta.train_loss,
                             1 if params.bn_stale else 0))


def load_checkpoint(path) -> tuple[ParamSet, CkptMeta]:
    with open(path, "rb") as fh:
        _check_header(fh, CKPT_MAGIC)
        (count,) = _unpack(fh, "<I")
        entries = {}
        for _ in range(count):
            (nlen,) = _unpack(fh, "<I")
            name = _read_exact(fh, nlen).decode("utf-8")
            if name in entries:
                raise FormatError(f"duplicate tensor name {name!r}")
            entries[name] = _read_tensor(fh)
        epoch, cycle, t_c, loss, flags = _unpack(fh, "<qiifI")
        if fh.read(1):
            raise FormatError("trailing bytes after metadata block")
    return ParamSet(entries, bn_stale=bool(flags & 1)), CkptMeta(epoch, cycle, t_c, loss)


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_t{epoch:05d}.bin"


# --------------------------------------------------------------------------
# datasets


def save_dataset(path, data: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(data)))
        for i in range(len(data)):
            _write_tensor(fh, data.images[i])
            lab = np.ascontiguousarray(data.labels[i], dtype=np.uint8)
            fh.write(struct.pack("<II", *lab.shape))
            fh.write(lab.tobytes())
            fh.write(struct.pack("<QB", int(data.seeds[i]), DOMAINS.index(data.domains[i])))


def load_dataset(path) -> Dataset:
    images, labels, seeds, domains = [], [], [], []
    with open(path, "rb") as fh:
        _check_header(fh, DATA_MAGIC)
        (count,) = _unpack(fh, "<I")
        for _ in range(count):
            images.append(_read_tensor(fh))
            h, w = _unpack(fh, "<II")
            labels.append(np.frombuffer(_read_exact(fh, h * w), dtype=np.uint8).reshape(h, w))
            seed, dom = _unpack(fh, "<QB")
            if dom >= len(DOMAINS):
                raise FormatError(f"unknown domain tag {dom}")
            seeds.append(seed)
            domains.append(DOMAINS[dom])
        if fh.read(1):
            raise FormatError("trailing bytes after last sample")
    if not images:
        raise FormatError("dataset file holds no samples")
    return Dataset(np.stack(images), np.stack(labels).copy(), np.array(seeds, dtype=np.uint64), domains)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# predictions


@dataclass
class PredictionFile:
    header: dict
    seeds: np.ndarray
    probs: np.ndarray  # (N, C, H, W)
    entropy: np.ndarray  # (N, H, W)
    extra: dict = field(default_factory=dict)


def save_predictions(path, pred: PredictionFile) -> None:
    n, c, h, w = pred.probs.shape
    header = dict(pred.header, count=n, num_classes=c, height=h, width=w)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PRED_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for i in range(n):
            fh.write(struct.pack("<Q", int(pred.seeds[i])))
            fh.write(np.ascontiguousarray(pred.probs[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(pred.entropy[i], dtype="<f4").tobytes())


def load_predictions(path) -> PredictionFile:
    with open(path, "rb") as fh:
        _check_header(fh, PRED_MAGIC)
        (hlen,) = _unpack(fh, "<I")
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        n, c, h, w = (header[k] for k in ("count", "num_classes", "height", "width"))
        seeds = np.zeros(n, dtype=np.uint64)
        probs = np.zeros((n, c, h, w), dtype=np.float32)
        ent = np.zeros((n, h, w), dtype=np.float32)
        for i in range(n):
            (seeds[i],) = _unpack(fh, "<Q")
            probs[i] = np.frombuffer(_read_exact(fh, 4 * c * h * w), dtype="<f4").reshape(c, h, w)
            ent[i] = np.frombuffer(_read_exact(fh, 4 * h * w), dtype="<f4").reshape(h, w)
        if fh.read(1):
            raise FormatError("trailing bytes after last prediction")
    return PredictionFile(header, seeds, probs, ent)
