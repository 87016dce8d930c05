"""Named parameter collection with a versioned binary checkpoint format.

Checkpoint layout: one JSON header line (schema version, run seed, ordered
name -> shape manifest), then the raw little-endian float32 buffers
concatenated in manifest order.
"""
from __future__ import annotations

import json

import numpy as np

from ..errors import ConfigError
from .autodiff import Node

CHECKPOINT_SCHEMA_VERSION = 1


class ParamStore:
    """Ordered mapping name -> trainable Node, plus optimizer state slots."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}
        self.opt_state: dict[str, dict] = {}

    def create(self, name: str, array: np.ndarray) -> Node:
        if name in self._nodes:
            raise ConfigError(f"duplicate parameter name {name!r}")
        node = Node(np.asarray(array, dtype=np.float32), op=f"param:{name}")
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def names(self):
        return list(self._nodes)

    def nodes(self):
        return self._nodes.values()

    def items(self):
        return self._nodes.items()

    def n_values(self) -> int:
        return sum(n.value.size for n in self._nodes.values())

    def zero_grads(self) -> None:
        for node in self._nodes.values():
            node.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, node in self._nodes.items():
            out.create(name, node.value.copy())
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, node in self._nodes.items():
            fresh = Node(node.value.astype(dtype), op=node.op)
            out._nodes[name] = fresh
        return out

    def load_values(self, other: "ParamStore") -> None:
        for name, node in self._nodes.items():
            node.value = other[name].value.astype(node.value.dtype).copy()

    # -- serialization ------------------------------------------------------

    def save(self, path, run_seed: int = 0) -> None:
        header = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "run_seed": int(run_seed),
            "dtype": "float32",
            "params": [[name, list(node.value.shape)] for name, node in self._nodes.items()],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for node in self._nodes.values():
                fh.write(np.ascontiguousarray(node.value, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParamStore", int]:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
                raise ConfigError(
                    f"unsupported checkpoint schema {header.get('schema_version')!r}"
                )
            store = cls()
            for name, shape in header["params"]:
                size = int(np.prod(shape)) if shape else 1
                buf = fh.read(size * 4)
                if len(buf) != size * 4:
                    raise ConfigError(f"truncated checkpoint at parameter {name!r}")
                arr = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
                store.create(name, arr)
        return store, int(header["run_seed"])
