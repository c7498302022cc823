"""A network configuration bound to its parameters, with content fingerprinting."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .autodiff.params import ParamFormatError, ParamTree, dumps, fingerprint, loads, tree_from_arrays
from .networks import NetConfig, Networks, init_params

MODEL_KIND = "i2icodec-model"


class CheckpointError(ValueError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


# read once: changing the umask later from a worker thread would race other writers
_UMASK = _umask()


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Model:
    cfg: NetConfig
    params: ParamTree

    @classmethod
    def initialize(cls, cfg: NetConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    @property
    def nets(self) -> Networks:
        return Networks(self.cfg, self.params)

    def to_bytes(self) -> bytes:
        return dumps(self.params.snapshot(), {"kind": MODEL_KIND, "net": self.cfg.to_dict()})

    @property
    def fingerprint(self) -> bytes:
        return fingerprint(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        try:
            arrays, meta = loads(blob)
        except ParamFormatError as exc:
            raise CheckpointError(str(exc)) from exc
        if meta.get("kind") != MODEL_KIND or "net" not in meta:
            raise CheckpointError("parameter file carries no network configuration")
        cfg = NetConfig.from_dict(meta["net"])
        expected = init_params(cfg, 0)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise CheckpointError(f"checkpoint does not match its configuration "
                                  f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})")
        for name in expected:
            if arrays[name].shape != expected[name].shape:
                raise CheckpointError(f"parameter {name!r} has shape {arrays[name].shape}, "
                                      f"expected {expected[name].shape}")
        return cls(cfg, tree_from_arrays({n: arrays[n] for n in expected}))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Model":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
