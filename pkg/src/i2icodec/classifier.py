"""Two-layer convolutional domain classifier used to score translations."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamTree, adam_step, dumps, fan_in_uniform, loads, tree_from_arrays
from .autodiff.tensor import Tensor, no_grad
from .model import atomic_write
from .training import ConfigError

KIND = "i2icodec-classifier"


def init_classifier(channels: int, num_domains: int, seed: int = 0, widths=(16, 32)) -> ParamTree:
    rng = np.random.default_rng(seed)
    p = ParamTree()
    p.add("cls.c0.w", fan_in_uniform(rng, (widths[0], channels, 5, 5)))
    p.add("cls.c0.b", np.zeros(widths[0], np.float32))
    p.add("cls.c1.w", fan_in_uniform(rng, (widths[1], widths[0], 3, 3)))
    p.add("cls.c1.b", np.zeros(widths[1], np.float32))
    p.add("cls.fc.w", fan_in_uniform(rng, (num_domains, widths[1])))
    p.add("cls.fc.b", np.zeros(num_domains, np.float32))
    return p


def logits(params: ParamTree, x: Tensor) -> Tensor:
    h = ops.leaky_relu(ops.conv2d(x, params["cls.c0.w"], params["cls.c0.b"], stride=2, padding=2))
    h = ops.leaky_relu(ops.conv2d(h, params["cls.c1.w"], params["cls.c1.b"], stride=2, padding=1))
    return ops.linear(ops.global_mean(h), params["cls.fc.w"], params["cls.fc.b"])


def cross_entropy(lg: Tensor, y: np.ndarray) -> Tensor:
    shift = lg.data.max(axis=1, keepdims=True)
    z = ops.sub(lg, shift)
    lse = ops.log(ops.sum(ops.exp(z), axis=1))
    picked = ops.select_rows(ops.reshape(z, z.shape + (1,)), y)
    return ops.mean(ops.sub(lse, ops.reshape(picked, (z.shape[0],))))


@dataclass
class DomainClassifier:
    params: ParamTree
    num_domains: int
    image_size: int
    trained: bool = False

    @classmethod
    def create(cls, image_size: int, num_domains: int, channels: int = 3, seed: int = 0):
        return cls(init_classifier(channels, num_domains, seed), num_domains, image_size)

    def fit(self, images: np.ndarray, labels: np.ndarray, steps: int = 2000, batch: int = 32,
            lr: float = 2e-3, seed: int = 0) -> list[float]:
        rng = np.random.default_rng(seed)
        losses = []
        for _ in range(steps):
            idx = rng.integers(0, len(labels), size=batch)
            self.params.zero_grad()
            loss = cross_entropy(logits(self.params, Tensor(images[idx])), labels[idx])
            loss.backward()
            adam_step(self.params, self.params.grads(), lr)
            losses.append(loss.item())
        self.params.zero_grad()
        self.trained = True
        return losses

    def predict(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        if not self.trained:
            raise ConfigError("the reference classifier has not been trained")
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                out.append(np.argmax(logits(self.params, Tensor(images[i:i + chunk])).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))

    def to_bytes(self) -> bytes:
        meta = {"kind": KIND, "num_domains": self.num_domains, "image_size": self.image_size,
                "trained": self.trained}
        return dumps(self.params.snapshot(), meta)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DomainClassifier":
        with open(path, "rb") as fh:
            arrays, meta = loads(fh.read())
        if meta.get("kind") != KIND:
            raise ConfigError(f"{path} is not a classifier file")
        return cls(tree_from_arrays(arrays), int(meta["num_domains"]), int(meta["image_size"]),
                   bool(meta["trained"]))


def domain_score(translations: np.ndarray, targets, classifier: DomainClassifier) -> float:
    """Fraction of translations the reference classifier assigns to their target domain."""
    targets = np.asarray(targets)
    pred = classifier.predict(translations)
    if pred.shape != targets.shape:
        raise ValueError(f"{len(pred)} translations but {targets.size} target labels")
    return float(np.mean(pred == targets))
