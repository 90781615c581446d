"""Binary checkpoint files.

Layout (little-endian)::

    b"NNCK"  u32 version
    u32 header_len, header_len bytes of UTF-8 canonical JSON {kind, meta, spec}
    u32 n_records
    per record: u32 name_len, name, u32 rank, rank x u64 extents, f32 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import CAE, CNN, ModelSpec

MAGIC = b"NNCK"
VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    kind: str = "cnn"  # "cnn", "cae" or "two_cycle"

    def header_text(self) -> str:
        return json.dumps(
            {"kind": self.kind, "meta": self.meta, "spec": self.spec.to_dict()},
            sort_keys=True,
            separators=(",", ":"),
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        header = self.header_text().encode("utf-8")
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise DataError("checkpoint truncated")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise DataError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", take(8))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(bytes(take(hlen)).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32)
        if pos != len(view):
            raise DataError("trailing bytes after last checkpoint record")
        return cls(
            spec=ModelSpec.from_dict(header["spec"]),
            tensors=tensors,
            meta=header.get("meta", {}),
            kind=header.get("kind", "cnn"),
        )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def cnn_checkpoint(net: CNN, meta=None) -> Checkpoint:
    return Checkpoint(net.spec, {k: v.copy() for k, v in net.state().items()}, dict(meta or {}), "cnn")


def cae_checkpoint(cae: CAE, meta=None) -> Checkpoint:
    return Checkpoint(cae.spec, {k: v.copy() for k, v in cae.state().items()}, dict(meta or {}), "cae")


def restore_cnn(ckpt: Checkpoint, prefix="", dtype=np.float32) -> CNN:
    net = CNN(ckpt.spec, rng=0, dtype=dtype)
    if prefix:
        state = {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    else:
        state = ckpt.tensors
    return net.load_state(state)


def restore_cae(ckpt: Checkpoint, dtype=np.float32) -> CAE:
    if ckpt.kind != "cae":
        raise DataError(f"expected an autoencoder checkpoint, got kind {ckpt.kind!r}")
    return CAE(ckpt.spec, rng=0, dtype=dtype).load_state(ckpt.tensors)
