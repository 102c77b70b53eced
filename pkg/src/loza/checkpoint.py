"""Binary checkpoints.

Layout (all integers little-endian)::

    b"LOZA" | u32 version | u64 header_len | header JSON (utf-8) | payload

The header holds the model config, the layer modes, free-form metadata and a
tensor manifest ``[{name, shape, offset, nbytes}]``; offsets are byte offsets
into the payload, which is the concatenation of little-endian float64 arrays
in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, mode_from_dict, param_shapes
from .numerics import Tensor

MAGIC = b"LOZA"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class IntegrityError(IOError):
    """The checkpoint bytes are malformed or truncated."""


class IncompatibilityError(ValueError):
    """A well-formed checkpoint does not match what the caller expects."""


@dataclass
class Checkpoint:
    config: ModelConfig
    modes: list[dict]
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, m: Model, **metadata) -> "Checkpoint":
        return cls(m.cfg, [md.to_dict() for md in m.modes], m.state(), dict(metadata))

    def to_model(self) -> Model:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.config, params, [mode_from_dict(d) for d in self.modes])

    def check_compatible(self, cfg: ModelConfig) -> None:
        mine, theirs = self.config.to_dict(), cfg.to_dict()
        mine.pop("seed")
        theirs.pop("seed")
        if mine != theirs:
            diff = sorted(k for k in mine if mine[k] != theirs.get(k))
            raise IncompatibilityError(f"checkpoint config differs from expected in: {', '.join(diff)}")

    def to_bytes(self) -> bytes:
        manifest, chunks, offset = [], [], 0
        for name, arr in self.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "config": self.config.to_dict(),
            "modes": self.modes,
            "metadata": self.metadata,
            "tensors": manifest,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < _PREFIX.size:
            raise IntegrityError(f"truncated prefix: {len(buf)} bytes, need {_PREFIX.size} (offset 0)")
        magic, version, hlen = _PREFIX.unpack_from(buf, 0)
        if magic != MAGIC:
            raise IntegrityError(f"bad magic {magic!r} at offset 0")
        if version != VERSION:
            raise IntegrityError(f"unsupported version {version} at offset 4")
        h0 = _PREFIX.size
        if len(buf) < h0 + hlen:
            raise IntegrityError(f"truncated header: expected {hlen} bytes at offset {h0}, file ends at {len(buf)}")
        try:
            header = json.loads(buf[h0 : h0 + hlen].decode())
            config = ModelConfig.from_dict(header["config"])
            modes = header["modes"]
            manifest = header["tensors"]
            metadata = header.get("metadata", {})
        except (ValueError, KeyError, TypeError) as e:
            raise IntegrityError(f"corrupt header at offset {h0}: {e}") from e
        if len(modes) != config.n_layers:
            raise IntegrityError(f"header lists {len(modes)} modes for {config.n_layers} layers")
        # validate modes eagerly so a bad header never yields a model
        try:
            for d in modes:
                mode_from_dict(d)
        except (ValueError, KeyError, TypeError) as e:
            raise IntegrityError(f"corrupt layer mode in header: {e}") from e

        p0 = h0 + hlen
        payload = memoryview(buf)[p0:]
        expected = 0
        params = {}
        for entry in manifest:
            name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
            if off != expected:
                raise IntegrityError(f"tensor {name!r}: offset {off} overlaps or leaves a gap (expected {expected})")
            if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise IntegrityError(f"tensor {name!r}: {nbytes} bytes do not fit shape {list(shape)}")
            if off + nbytes > len(payload):
                raise IntegrityError(
                    f"truncated payload: tensor {name!r} needs bytes [{p0 + off}, {p0 + off + nbytes}) "
                    f"but file ends at offset {len(buf)}"
                )
            params[name] = np.frombuffer(payload[off : off + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
            expected = off + nbytes
        if expected != len(payload):
            raise IntegrityError(f"payload is {len(payload)} bytes, manifest accounts for {expected} (offset {p0 + expected})")

        want = param_shapes(config)
        if set(want) != set(params):
            missing = sorted(set(want) - set(params))
            extra = sorted(set(params) - set(want))
            raise IntegrityError(f"manifest does not match config: missing {missing}, extra {extra}")
        for name, shape in want.items():
            if params[name].shape != shape:
                raise IntegrityError(f"tensor {name!r}: shape {params[name].shape}, config expects {shape}")
        return cls(config, modes, params, metadata)


def save_checkpoint(m: Model | Checkpoint, path: str | Path, **metadata) -> None:
    ck = m if isinstance(m, Checkpoint) else Checkpoint.from_model(m, **metadata)
    Path(path).write_bytes(ck.to_bytes())


def read_checkpoint(path: str | Path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    ck = Checkpoint.from_bytes(Path(path).read_bytes())
    if expect is not None:
        ck.check_compatible(expect)
    return ck


def load_checkpoint(path: str | Path, expect: Optional[ModelConfig] = None) -> Model:
    return read_checkpoint(path, expect).to_model()
