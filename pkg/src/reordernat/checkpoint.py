"""Binary checkpoints.

Layout::

    b"RNATCKPT"                 8-byte magic
    uint32 version              little-endian
    uint32 meta_len
    meta_len bytes of JSON      model config, train config, step, mode, tensor census
    float64 payload             parameters, then Adam m, then Adam v, in census order

Everything numeric is little-endian.  Writes go to a temporary file that is
renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, build_model

MAGIC = b"RNATCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sII")
_LE = np.dtype("<f8")


class CheckpointError(Exception):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    step: int = 0
    mode: str = "dgd"
    adam: dict | None = None  # {"t": int, "m": [arrays], "v": [arrays]} in params order
    extra: dict = field(default_factory=dict)

    def build_model(self):
        """Fresh model carrying copies of the stored parameters."""
        model = build_model(ModelConfig.from_dict(self.model_config))
        load_parameters(model, self.params)
        return model


def load_parameters(model, params: dict[str, np.ndarray]) -> None:
    """Overwrite ``model``'s parameters in place from a name -> array map."""
    named = dict(model.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) ^ set(params))
        raise CheckpointError(f"parameter names differ: {', '.join(missing[:8])}")
    for n, t in named.items():
        if t.shape != params[n].shape:
            raise CheckpointError(f"{n}: shape {params[n].shape} vs model {t.shape}")
        t.data[...] = params[n]


def from_model(model, train_config: dict | None = None, step: int = 0, mode: str = "dgd", optimizer=None, extra=None) -> Checkpoint:
    params = {n: t.data.copy() for n, t in model.named_parameters()}
    adam = None
    if optimizer is not None:
        st = optimizer.state()
        adam = {"t": st["t"], "m": [a.copy() for a in st["m"]], "v": [a.copy() for a in st["v"]]}
    return Checkpoint(model.config.to_dict(), params, dict(train_config or {}), step, mode, adam, dict(extra or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    names = list(ckpt.params)
    meta = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "mode": ckpt.mode,
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
        "adam_t": None if ckpt.adam is None else int(ckpt.adam["t"]),
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [_HEAD.pack(MAGIC, VERSION, len(blob)), blob]
    arrays = [ckpt.params[n] for n in names]
    if ckpt.adam is not None:
        arrays += list(ckpt.adam["m"]) + list(ckpt.adam["v"])
    chunks += [np.ascontiguousarray(a, dtype=_LE).tobytes() for a in arrays]

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header", len(raw))
    magic, version, meta_len = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}", 8)
    pos = _HEAD.size
    if pos + meta_len > len(raw):
        raise CheckpointError(f"{path}: metadata runs past end of file", len(raw))
    try:
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata: {e}", pos) from e
    pos += meta_len

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: tensor data truncated", pos)
        a = np.frombuffer(raw, dtype=_LE, count=n // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += n
        return a

    census = [(n, tuple(s)) for n, s in meta["tensors"]]
    params = {n: take(s) for n, s in census}
    adam = None
    if meta.get("adam_t") is not None:
        m = [take(s) for _, s in census]
        v = [take(s) for _, s in census]
        adam = {"t": meta["adam_t"], "m": m, "v": v}
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes", pos)

    ckpt = Checkpoint(meta["model_config"], params, meta["train_config"], meta["step"], meta["mode"], adam, meta.get("extra", {}))
    _check_census(ckpt, path)
    return ckpt


def _check_census(ckpt: Checkpoint, path) -> None:
    """Stored tensor shapes must be exactly what the stored config builds."""
    try:
        cfg = ModelConfig.from_dict(ckpt.model_config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config: {e}") from e
    want = {n: t.shape for n, t in build_model(cfg).named_parameters()}
    have = {n: a.shape for n, a in ckpt.params.items()}
    if want != have:
        diffs = sorted(n for n in set(want) | set(have) if want.get(n) != have.get(n))
        raise CheckpointError(f"{path}: parameter census does not match config: {', '.join(diffs[:8])}")
