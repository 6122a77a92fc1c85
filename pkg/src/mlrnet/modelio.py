"""Versioned binary model files.

Layout (all integers unsigned little-endian, all reals float64 little-endian):

    b"MLR1"  version:u32  n_members:u32
    per member:
        depth:u32  d:u32  J:u32  head:u8 (0 ridge, 1 dense)
        for each hidden layer: W (rows x cols), b (cols)
        log_lambda  W_out (J)
    meta_len:u64  meta (UTF-8 JSON: task, ensemble kind, member info, transform state)

Hidden layer shapes follow from (depth, d, J): the first is d x J, the
rest J x J. Depth 1 has no hidden layer and W_out has length d.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import core
from .data import RawTable, TransformState
from .ensemble import Member, ensemble_predict
from .errors import DataError, IoError, NotFinalized

MAGIC = b"MLR1"
VERSION = 1
_F8 = np.dtype("<f8")


@dataclass
class SavedModel:
    models: list                      # TrainedModel per kept member
    transform: Optional[TransformState]
    kind: str = "single"
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.models[0].task

    def raw(self, x) -> np.ndarray:
        return ensemble_predict(self.models, x, "bag", output="raw")

    def predict(self, x) -> np.ndarray:
        return ensemble_predict(self.models, x, "bag")

    def predict_proba(self, x) -> np.ndarray:
        return ensemble_predict(self.models, x, "bag", output="proba")

    def encode(self, raw: RawTable) -> np.ndarray:
        if self.transform is None:
            raise DataError("model file carries no transform state")
        return self.transform.transform_features(raw)


def _write_array(buf: bytearray, a) -> None:
    buf += np.ascontiguousarray(a, dtype=_F8).tobytes()


def save_model(path, models: list, transform: Optional[TransformState] = None,
               kind: str = "single", meta: Optional[dict] = None) -> Path:
    """Write finalised members plus transform state; returns the path.

    ``models`` holds TrainedModel or ensemble Member objects.
    """
    models = [m.model if isinstance(m, Member) else m for m in models]
    if not models:
        raise ValueError("nothing to save")
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(models))
    info = []
    for m in models:
        w_out = m.w_out
        if w_out is None:
            raise NotFinalized("cannot save a model without output weights")
        p = m.params
        depth = len(p.weights) + 1
        d = p.weights[0].shape[0] if p.weights else len(w_out)
        J = p.weights[0].shape[1] if p.weights else d
        dense = p.out is not None
        buf += struct.pack("<IIIB", depth, d, J, int(dense))
        for W, b in zip(p.weights, p.biases):
            _write_array(buf, W)
            _write_array(buf, b)
        buf += struct.pack("<d", float(p.log_lambda))
        _write_array(buf, np.ravel(w_out))
        info.append({"task": m.task, "config": asdict(m.config) if m.config is not None else None})
    doc = {"kind": kind, "members": info, "meta": meta or {},
           "transform": transform.to_dict() if transform is not None else None}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    buf += struct.pack("<Q", len(blob))
    buf += blob
    path = Path(path)
    try:
        path.write_bytes(bytes(buf))
    except OSError as exc:
        raise IoError(f"cannot write model file {path}: {exc}") from exc
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("model file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype=_F8).astype(np.float64).reshape(shape)


def load_model(path) -> SavedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read model file {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DataError(f"{path} is not a model file (bad magic)")
    version, n_members = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported model file version {version}")
    raw_members = []
    for _ in range(n_members):
        depth, d, J, dense = r.unpack("<IIIB")
        weights, biases = [], []
        fan_in = d
        for _ in range(depth - 1):
            weights.append(r.array(fan_in, J))
            biases.append(r.array(J))
            fan_in = J
        (log_lambda,) = r.unpack("<d")
        w_out = r.array(fan_in)
        raw_members.append((weights, biases, log_lambda, w_out, bool(dense)))
    (blob_len,) = r.unpack("<Q")
    doc = json.loads(r.take(blob_len).decode("utf-8"))
    if r.pos != len(data):
        raise DataError("trailing bytes after model file payload")
    models = []
    for (weights, biases, log_lambda, w_out, dense), info in zip(raw_members, doc["members"]):
        out = w_out[:, None].copy() if dense else None
        params = core.ModelParams(weights, biases, log_lambda, out)
        config = core.MlrConfig(**info["config"]) if info.get("config") else None
        models.append(core.TrainedModel(params, info["task"], w_out, config))
    transform = TransformState.from_dict(doc["transform"]) if doc.get("transform") else None
    return SavedModel(models, transform, doc["kind"], doc.get("meta", {}))
