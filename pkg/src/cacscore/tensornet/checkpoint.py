"""CACSNET1 checkpoint files.

Layout: 8-byte magic ``CACSNET1``, little-endian u32 metadata length, UTF-8
JSON metadata, then every tensor listed in ``metadata["tensors"]`` as
little-endian float64 in that order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ConvNet, LayerConfig
from .optim import AdamState

MAGIC = b"CACSNET1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    config: LayerConfig
    state: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    optimizer: AdamState | None = None

    def build(self) -> ConvNet:
        net = ConvNet(self.config, 0)
        net.load_state(self.state)
        return net

    @property
    def n_params(self) -> int:
        return int(sum(v.size for k, v in self.state.items() if not k.startswith("buffer:")))

    def to_bytes(self) -> bytes:
        tensors = dict(self.state)
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "epsilon": o.epsilon, "t": o.t}
            for k in o.m:
                tensors[f"adam.m:{k}"] = o.m[k]
                tensors[f"adam.v:{k}"] = o.v[k]
        meta = {
            "config": self.config.to_json(),
            "metadata": self.metadata,
            "optimizer": opt,
            "tensors": [[k, list(v.shape)] for k, v in tensors.items()],
        }
        header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
        return MAGIC + struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a CACSNET1 checkpoint")
        (hlen,) = struct.unpack("<I", data[8:12])
        meta = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        tensors = {}
        for name, shape in meta["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if pos + nbytes > len(data):
                raise CheckpointError("checkpoint payload is truncated")
            tensors[name] = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
            pos += nbytes
        if pos != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")
        state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        optimizer = None
        if meta.get("optimizer"):
            o = meta["optimizer"]
            optimizer = AdamState(o["lr"], o["beta1"], o["beta2"], o["epsilon"], o["t"])
            for k, v in tensors.items():
                if k.startswith("adam.m:"):
                    optimizer.m[k[7:]] = v
                elif k.startswith("adam.v:"):
                    optimizer.v[k[7:]] = v
        return cls(LayerConfig.from_json(meta["config"]), state, meta.get("metadata", {}), optimizer)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())
