"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"RELM" | u32 version
    section config    : u32 length | UTF-8 JSON {"kind", "config"}
    section vocab     : u32 length | UTF-8 vocabulary text (may be empty)
    section metadata  : u32 length | UTF-8 JSON
    section params    : u32 count  | tensor*
    section optimizer : u32 count  | tensor*
    b"END\\0" | u32 crc32 of every preceding byte

    tensor := u16 name length | name | u8 dtype code | u8 ndim | u32 dim* | raw bytes

JSON is written with sorted keys and no whitespace, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bpe import Vocabulary
from .errors import (CheckpointFormatError, CheckpointInconsistentError, CheckpointTruncatedError,
                     ConfigMismatchError)
from .transformer import LmModel, ModelConfig, NmtModel, _Model
from .tensor import Parameter

MAGIC = b"RELM"
VERSION = 1
TRAILER = b"END\0"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {v.type: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    vocab: Vocabulary | None
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def model(self) -> _Model:
        cls = {"lm": LmModel, "nmt": NmtModel}[self.kind]
        frozen = set(self.metadata.get("frozen", ()))
        params = {n: Parameter(a.copy(), n, n not in frozen) for n, a in self.params.items()}
        return cls(self.config, params, self.vocab)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.type)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    vocab_text = ckpt.vocab.dumps() if ckpt.vocab is not None else ""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_json({"kind": ckpt.kind, "config": ckpt.config.to_dict()}), vocab_text.encode("utf-8"),
                 _json(ckpt.metadata)):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(_pack_tensors(ckpt.params))
    parts.append(_pack_tensors(ckpt.optimizer))
    body = b"".join(parts)
    return body + TRAILER + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: file ends at byte {len(self.buf)}, "
                                           f"needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(struct.unpack("<H", self.take(2))[0]).decode("utf-8")
            code, ndim = struct.unpack("<BB", self.take(2))
            if code not in _DTYPES:
                raise CheckpointFormatError(f"{self.path}: tensor {name} has unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if len(buf) < 8:
        raise CheckpointTruncatedError(f"{path}: only {len(buf)} bytes")
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a RELM checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.blob())
    vocab_text = r.blob().decode("utf-8")
    metadata = json.loads(r.blob())
    params = r.tensors()
    optimizer = r.tensors()
    body_end = r.pos
    if r.take(4) != TRAILER or r.u32() != zlib.crc32(buf[:body_end]) or r.pos != len(buf):
        raise CheckpointTruncatedError(f"{path}: trailer missing or checksum mismatch (truncated or corrupt)")
    config = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary.loads(vocab_text) if vocab_text else None
    emb = params.get("embeddings.token")
    if emb is None or emb.shape[0] != config.vocab_size:
        raise CheckpointInconsistentError(f"{path}: embedding rows disagree with vocab_size={config.vocab_size}")
    if vocab is not None and len(vocab) != emb.shape[0]:
        raise CheckpointInconsistentError(f"{path}: vocabulary has {len(vocab)} entries, "
                                          f"embedding has {emb.shape[0]} rows")
    return Checkpoint(header["kind"], config, vocab, params, optimizer, metadata)


def save_checkpoint(path, model: _Model, optimizer=None, metadata=None) -> Checkpoint:
    """Write ``model`` (and optionally Adam state) atomically to ``path``."""
    meta = dict(metadata or {})
    frozen = [n for n, p in model.params.items() if not p.trainable]
    if frozen:
        meta["frozen"] = frozen
    opt_arrays = {}
    if optimizer is not None:
        meta["optimizer_step"] = optimizer.state.step
        opt_arrays = optimizer.state_arrays()
    ckpt = Checkpoint(model.kind, model.config, model.vocab, model.state_dict(), opt_arrays, meta)
    write_checkpoint(path, ckpt)
    return ckpt


def write_checkpoint(path, ckpt: Checkpoint):
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | dict | None = None) -> Checkpoint:
    """Read and verify a checkpoint; optionally insist on a given model config."""
    with open(path, "rb") as f:
        buf = f.read()
    ckpt = decode_checkpoint(buf, str(path))
    if expected_config is not None:
        want = expected_config.to_dict() if isinstance(expected_config, ModelConfig) else dict(expected_config)
        have = ckpt.config.to_dict()
        for key in sorted(want):
            if want[key] != have.get(key):
                raise ConfigMismatchError(key, want[key], have.get(key))
    return ckpt
