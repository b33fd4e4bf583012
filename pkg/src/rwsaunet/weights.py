"""Binary weight container.

Layout (all integers little-endian uint32)::

    b"RWSA" | version | len | config JSON | n_entries
    n_entries x ( len | UTF-8 name | ndim | dims... | float32 LE values, row-major )
    n_ties x ( len | alias | len | canonical )   preceded by n_ties

Only canonical parameters are stored; tied aliases are listed in the tie table
and re-established by the model on load.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RWSA"
VERSION = 1


class WeightsError(ValueError):
    pass


@dataclass
class WeightStore:
    config: dict
    entries: dict = field(default_factory=dict)   # name -> float32 array, in model order
    ties: dict = field(default_factory=dict)      # alias -> canonical

    @classmethod
    def from_model(cls, model) -> "WeightStore":
        entries = {name: np.asarray(p.data, dtype=np.float32) for name, p in model.named_parameters()}
        return cls(model.cfg.as_dict(), entries, dict(model.ties))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        u32 = lambda n: buf.write(struct.pack("<I", n))  # noqa: E731

        def text(s):
            b = s.encode("utf-8")
            u32(len(b))
            buf.write(b)
        buf.write(MAGIC)
        u32(VERSION)
        text(json.dumps(self.config, sort_keys=True))
        u32(len(self.entries))
        for name, arr in self.entries.items():
            text(name)
            u32(arr.ndim)
            for d in arr.shape:
                u32(d)
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        u32(len(self.ties))
        for alias, canon in self.ties.items():
            text(alias)
            text(canon)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise WeightsError("truncated weights file")
            out = view[pos:pos + n]
            pos += n
            return out

        def u32():
            return struct.unpack("<I", take(4))[0]

        def text():
            try:
                return bytes(take(u32())).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise WeightsError("corrupt string in weights file") from exc
        if bytes(take(4)) != MAGIC:
            raise WeightsError("not an RWSA weights file")
        version = u32()
        if version != VERSION:
            raise WeightsError(f"unsupported weights version {version}")
        try:
            config = json.loads(text())
        except json.JSONDecodeError as exc:
            raise WeightsError("corrupt config echo") from exc
        entries = {}
        for _ in range(u32()):
            name = text()
            shape = tuple(u32() for _ in range(u32()))
            n = int(np.prod(shape))
            entries[name] = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape).astype(np.float32)
        ties = {}
        for _ in range(u32()):
            alias = text()
            ties[alias] = text()
        if pos != len(view):
            raise WeightsError("trailing bytes after tie table")
        for alias, canon in ties.items():
            if canon not in entries:
                raise WeightsError(f"tie {alias} -> {canon}: canonical entry missing")
        return cls(config, entries, ties)

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return content_hash(data)

    @classmethod
    def load(cls, path) -> "WeightStore":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise WeightsError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data)

    def apply(self, model) -> None:
        """Copy values into ``model`` after checking config, names, shapes and ties."""
        expected = model.cfg.as_dict()
        if self.config != json.loads(json.dumps(expected)):
            diff = sorted(k for k in set(expected) | set(self.config) if self.config.get(k) != expected.get(k))
            raise WeightsError(f"weights were saved for a different configuration (differs in {diff})")
        params = dict(model.named_parameters())
        if list(params) != list(self.entries):
            missing = sorted(set(params) - set(self.entries))
            extra = sorted(set(self.entries) - set(params))
            raise WeightsError(f"parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
        if self.ties != model.ties:
            raise WeightsError("tie table does not match the model's sharing structure")
        for name, p in params.items():
            if p.shape != self.entries[name].shape:
                raise WeightsError(f"{name}: shape {self.entries[name].shape}, model expects {p.shape}")
        for name, p in params.items():
            p.data[...] = self.entries[name]


def content_hash(data: bytes) -> str:
    """Git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_model(model, path) -> str:
    return WeightStore.from_model(model).save(path)


def load_into(model, path) -> None:
    WeightStore.load(path).apply(model)
