"""Checkpoint files: a readable text header followed by a little-endian float64 blob.

Header layout::

    diffedit-checkpoint 1
    module: denoiser
    config_hash: 3f9c...
    seed: 0
    meta: {"width": 256, ...}
    tensor: block0.w1 256,256 0
    ...
    end

Tensor lines give name, comma-separated shape and the element offset into
the blob. Names may not contain whitespace.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "diffedit-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    module: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def header(self) -> bytes:
        lines = [f"{MAGIC} {VERSION}", f"module: {self.module}", f"config_hash: {self.config_hash}",
                 f"seed: {int(self.seed)}", f"meta: {json.dumps(self.meta, sort_keys=True)}"]
        offset = 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            if not name or any(c.isspace() for c in name):
                raise CheckpointError(f"invalid tensor name {name!r}")
            shape = ",".join(str(n) for n in arr.shape)
            lines.append(f"tensor: {name} {shape} {offset}")
            offset += arr.size
        lines.append("end")
        return ("\n".join(lines) + "\n").encode()

    def to_bytes(self) -> bytes:
        parts = [self.header()]
        for name in sorted(self.tensors):
            parts.append(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path) -> str:
        """Write the file and return its sha256 digest."""
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        fields, manifest, pos = {}, [], 0
        first = True
        while True:
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CheckpointError(f"{source}: truncated header")
            line = data[pos:nl].decode("utf-8", errors="replace")
            pos = nl + 1
            if first:
                magic, _, ver = line.partition(" ")
                if magic != MAGIC:
                    raise CheckpointError(f"{source}: not a checkpoint file")
                if ver != str(VERSION):
                    raise CheckpointError(f"{source}: unsupported format version {ver}")
                first = False
                continue
            if line == "end":
                break
            key, sep, value = line.partition(": ")
            if not sep:
                raise CheckpointError(f"{source}: malformed header line {line!r}")
            if key == "tensor":
                try:
                    name, shape, offset = value.split(" ")
                    dims = tuple(int(n) for n in shape.split(",")) if shape else ()
                    manifest.append((name, dims, int(offset)))
                except ValueError:
                    raise CheckpointError(f"{source}: malformed tensor line {line!r}") from None
            else:
                fields[key] = value
        for key in ("module", "config_hash", "seed", "meta"):
            if key not in fields:
                raise CheckpointError(f"{source}: header lacks {key!r}")
        blob = data[pos:]
        total = sum(int(np.prod(s)) for _, s, _ in manifest)
        if len(blob) != 8 * total:
            raise CheckpointError(f"{source}: blob holds {len(blob)} bytes, manifest needs {8 * total}")
        flat = np.frombuffer(blob, dtype="<f8")
        tensors = {}
        for name, dims, off in manifest:
            n = int(np.prod(dims))
            if off < 0 or off + n > total:
                raise CheckpointError(f"{source}: tensor {name} lies outside the blob")
            tensors[name] = flat[off:off + n].reshape(dims).astype(np.float64)
        return cls(fields["module"], tensors, json.loads(fields["meta"]), fields["config_hash"],
                   int(fields["seed"]))

    @classmethod
    def load(cls, path, module: str | None = None) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        ckpt = cls.from_bytes(path.read_bytes(), str(path))
        if module is not None and ckpt.module != module:
            raise CheckpointError(f"{path}: holds a {ckpt.module!r} checkpoint, expected {module!r}")
        return ckpt


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
