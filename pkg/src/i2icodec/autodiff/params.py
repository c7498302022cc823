"""Named parameter collections, Adam, and the on-disk parameter format.

Parameter file layout (all integers little-endian)::

    b"I2PT"            magic
    u8                 format version (1)
    u32 + bytes        UTF-8 JSON metadata
    u32                record count
    per record:
      u16 + bytes      UTF-8 name
      u8               rank
      rank * u32       extents
      prod(extents) * f32 values
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tensor import ShapeError, Tensor

MAGIC = b"I2PT"
VERSION = 1


class ParamFormatError(ValueError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamTree:
    """Flat, ordered mapping of dotted names to leaf tensors plus Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str | Iterable[str] = "") -> list[str]:
        prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
        return [n for n in self.params if n.startswith(prefixes)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Collect gradients, substituting zeros for parameters the graph never reached."""
        names = self.params if names is None else names
        out = {}
        for n in names:
            t = self.params[n]
            out[n] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = self.params if names is None else names
        return {n: self.params[n].data.copy() for n in names}

    def astype(self, dtype) -> "ParamTree":
        out = ParamTree()
        for n, t in self.params.items():
            out.add(n, t.data.astype(dtype))
        return out

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def adam_step(params: ParamTree, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              slot: str | None = None) -> None:
    """In-place Adam update with bias correction for every parameter in ``grads``.

    ``slot`` keeps a separate set of moments (stored under ``"<slot>:<name>"``), so
    one parameter can be driven by several objectives of very different scale.
    """
    if not (0 <= beta1 < 1 and 0 < beta2 < 1):
        raise ValueError(f"invalid Adam betas ({beta1}, {beta2})")
    if lr < 0 or eps <= 0:
        raise ValueError("Adam needs lr >= 0 and eps > 0")
    for name, g in grads.items():
        p = params.params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        key = name if slot is None else f"{slot}:{name}"
        st = params.adam.get(key)
        if st is None:
            st = params.adam[key] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        g = g.astype(p.data.dtype, copy=False)
        st.step += 1
        st.m *= beta1
        st.m += (1 - beta1) * g
        st.v *= beta2
        st.v += (1 - beta2) * g * g
        mhat = st.m / (1 - beta1 ** st.step)
        vhat = st.v / (1 - beta2 ** st.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)


# -- initialisation --------------------------------------------------------

def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32,
                   gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- serialisation ---------------------------------------------------------

def dumps(arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise ParamFormatError("bad magic: not a parameter file")
    pos = 4
    try:
        version, mlen = struct.unpack_from("<BI", blob, pos)
        if version != VERSION:
            raise ParamFormatError(f"unsupported parameter format version {version}")
        pos += 5
        meta = json.loads(blob[pos:pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise ParamFormatError(f"record {name!r} truncated at byte {pos}")
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ParamFormatError(f"truncated parameter file at byte {pos}") from exc
    if pos != len(blob):
        raise ParamFormatError(f"{len(blob) - pos} trailing bytes after last record")
    return arrays, meta


def tree_from_arrays(arrays: Mapping[str, np.ndarray]) -> ParamTree:
    tree = ParamTree()
    for n, a in arrays.items():
        tree.add(n, np.array(a, dtype=np.float32))
    return tree


def fingerprint(blob: bytes) -> bytes:
    """32-byte content digest used to tie sender and receiver to one model."""
    return hashlib.sha256(blob).digest()
