"""Quantisation proxies, the mode-conditional hyperprior, and CDF tables.

The main latent ``z`` is modelled as a zero-mean Gaussian whose per-element
scale comes from a hyper-latent ``h``; ``h`` itself is modelled by a
per-channel factorized density, one per operating mode.  Likelihoods are
bin probabilities of unit-width intervals centred on the (noisy or rounded)
values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .autodiff import ops
from .autodiff.params import ParamTree
from .autodiff.tensor import Tensor
from .networks import Mode, NetConfig, conv

LIKELIHOOD_FLOOR = 1e-9
TABLE_PRECISION = 16
TABLE_TOTAL = 1 << TABLE_PRECISION
SIGMA_LEVELS = 64
GAUSS_SUPPORT = 32     # main latent symbols coded directly in [-32, 32]
HYPER_SUPPORT = 32


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class LatentCode:
    continuous: np.ndarray
    quantized: np.ndarray | None = None
    dequantized: np.ndarray | None = None


def quantize(z, phase: str, rng: np.random.Generator | None = None):
    """Additive uniform noise while training, rounding (half away from zero) at inference.

    Training returns a differentiable :class:`Tensor` (identity gradient);
    inference returns a :class:`LatentCode` with integer ``quantized`` values.
    """
    if phase == "training":
        if rng is None:
            raise ValueError("training-phase quantization needs an rng")
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        noise = rng.uniform(-0.5, 0.5, size=z.shape).astype(z.dtype)
        return ops.add(z, noise)
    if phase == "inference":
        data = z.data if isinstance(z, Tensor) else np.asarray(z)
        q = round_half_away(data).astype(np.int64)
        return LatentCode(continuous=data, quantized=q, dequantized=q.astype(data.dtype))
    raise ValueError(f"unknown quantization phase {phase!r}")


# -- factorized prior ----------------------------------------------------------

def _prior_depth(params: ParamTree, prefix: str) -> int:
    k = 0
    while f"{prefix}.H{k}" in params:
        k += 1
    return k


def prior_logits(params: ParamTree, m: Mode, x: Tensor) -> Tensor:
    """Logit of the cumulative function for a (C, 1, M) batch of per-channel values."""
    prefix = f"prior.{Mode.parse(m).name}"
    depth = _prior_depth(params, prefix)
    h = x
    for k in range(depth):
        mat = ops.softplus(params[f"{prefix}.H{k}"])
        h = ops.add(ops.matmul(mat, h), params[f"{prefix}.b{k}"])
        if k < depth - 1:
            h = ops.add(h, ops.mul(ops.tanh(params[f"{prefix}.a{k}"]), ops.tanh(h)))
    return h


def _channels_first(h: Tensor) -> tuple[Tensor, tuple]:
    n, c, hh, ww = h.shape
    flat = ops.reshape(ops.transpose(h, (1, 0, 2, 3)), (c, 1, n * hh * ww))
    return flat, (n, c, hh, ww)


def _restore(p: Tensor, shape) -> Tensor:
    n, c, hh, ww = shape
    return ops.transpose(ops.reshape(p, (c, n, hh, ww)), (1, 0, 2, 3))


def factorized_likelihood(params: ParamTree, m: Mode, h: Tensor) -> Tensor:
    """Probability of the unit bin around each element of a (N, C, h, w) tensor."""
    flat, shape = _channels_first(h)
    lower = prior_logits(params, m, ops.sub(flat, 0.5))
    upper = prior_logits(params, m, ops.add(flat, 0.5))
    # evaluate in the tail where the sigmoid is least saturated
    sign = -np.sign(lower.data + upper.data)
    sign[sign == 0] = 1
    sign = sign.astype(flat.dtype)
    p = ops.abs(ops.sub(ops.sigmoid(ops.mul(upper, sign)), ops.sigmoid(ops.mul(lower, sign))))
    return _restore(p, shape)


def factorized_cdf(params: ParamTree, m: Mode, channel: int, points: np.ndarray) -> np.ndarray:
    """Cumulative function of one channel at arbitrary points (float64, no graph)."""
    prefix = f"prior.{Mode.parse(m).name}"
    depth = _prior_depth(params, prefix)
    h = np.asarray(points, dtype=np.float64).reshape(1, -1)
    for k in range(depth):
        mat = np.logaddexp(0, params[f"{prefix}.H{k}"].data[channel].astype(np.float64))
        h = mat @ h + params[f"{prefix}.b{k}"].data[channel].astype(np.float64)
        if k < depth - 1:
            h = h + np.tanh(params[f"{prefix}.a{k}"].data[channel].astype(np.float64)) * np.tanh(h)
    return special.expit(h.reshape(-1))


# -- hyperprior transforms -----------------------------------------------------

def hyper_analysis(params: ParamTree, z: Tensor) -> Tensor:
    h = ops.leaky_relu(conv(params, "hyper.a0", ops.abs(z), stride=2))
    return conv(params, "hyper.a1", h, stride=2)


def hyper_synthesis(params: ParamTree, h_hat: Tensor, sigma_min: float) -> Tensor:
    """Per-element Gaussian scale of z, floored at ``sigma_min``."""
    t = ops.leaky_relu(conv(params, "hyper.s0", ops.resample(h_hat, 2, "up")))
    t = conv(params, "hyper.s1", ops.resample(t, 2, "up"))
    return ops.add(ops.softplus(t), sigma_min)


def gaussian_likelihood(z: Tensor, sigma: Tensor) -> Tensor:
    """Mass of N(0, sigma^2) on [z - 1/2, z + 1/2]."""
    a = ops.abs(z)
    upper = ops.normal_cdf(ops.div(ops.sub(0.5, a), sigma))
    lower = ops.normal_cdf(ops.div(ops.sub(-0.5, a), sigma))
    return ops.sub(upper, lower)


@dataclass
class Likelihoods:
    z: Tensor   # (N, C_z, h, w)
    h: Tensor   # (N, C_h, h/4, w/4)
    sigma: Tensor


class EntropyModel:
    """C_P(z; m): shared hyper transforms with one factorized prior per mode."""

    def __init__(self, cfg: NetConfig, params: ParamTree):
        self.cfg = cfg
        self.params = params

    def likelihood(self, z_tilde, m: Mode, phase: str = "training",
                   rng: np.random.Generator | None = None, hyper_source=None) -> Likelihoods:
        """Per-element probabilities of a noisy (training) or rounded (inference) latent.

        The hyper-latent is computed from ``hyper_source`` (default: ``z_tilde``)
        and noise-quantized with ``rng`` in the training phase, rounded otherwise.
        """
        m = Mode.parse(m)
        z = _batch(z_tilde)
        src = z if hyper_source is None else _batch(hyper_source)
        h = hyper_analysis(self.params, src)
        if phase == "training":
            h_tilde = quantize(h, "training", rng)
        elif phase == "inference":
            h_tilde = Tensor(quantize(h, "inference").dequantized)
        else:
            raise ValueError(f"unknown phase {phase!r}")
        sigma = hyper_synthesis(self.params, h_tilde, self.cfg.sigma_min)
        pz = ops.clamp_min(gaussian_likelihood(z, sigma), LIKELIHOOD_FLOOR)
        ph = ops.clamp_min(factorized_likelihood(self.params, m, h_tilde), LIKELIHOOD_FLOOR)
        return Likelihoods(pz, ph, sigma)

    def rate_bits(self, z_tilde, m: Mode, phase: str = "training",
                  rng: np.random.Generator | None = None, hyper_source=None) -> Tensor:
        """Per-image information content in bits (z and h together), shape (N,)."""
        return rate_from_likelihoods(self.likelihood(z_tilde, m, phase, rng, hyper_source))

    def rate_estimate(self, z_tilde, m: Mode, phase: str = "training",
                      rng: np.random.Generator | None = None, hyper_source=None) -> Tensor:
        """Total bits over all elements of the batch."""
        return ops.sum(self.rate_bits(z_tilde, m, phase, rng, hyper_source))


def _batch(z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, np.float32))
    return ops.reshape(z, (1,) + z.shape) if z.ndim == 3 else z


_INV_LN2 = 1.0 / np.log(2.0)


def rate_from_likelihoods(lk: Likelihoods) -> Tensor:
    nats_z = ops.neg(ops.sum(ops.log(lk.z), axis=(1, 2, 3)))
    nats_h = ops.neg(ops.sum(ops.log(lk.h), axis=(1, 2, 3)))
    return ops.mul(ops.add(nats_z, nats_h), _INV_LN2)


def bits_of(p) -> float:
    """-log2 p summed."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    return float(-np.log2(p).sum())


# -- CDF tables ----------------------------------------------------------------

@dataclass
class CdfTable:
    """Integer cumulative frequencies for symbols ``offset .. offset + n_regular - 1``.

    With ``escape`` set, one extra symbol (index ``n_regular``) stands for every
    value outside that range; the coder then appends the raw value.
    """

    cdf: np.ndarray   # (n_symbols + 1,) int64, cdf[0] = 0, cdf[-1] = TABLE_TOTAL
    offset: int
    escape: bool = True

    @property
    def n_symbols(self) -> int:
        return len(self.cdf) - 1

    @property
    def n_regular(self) -> int:
        return self.n_symbols - (1 if self.escape else 0)

    def frequencies(self) -> np.ndarray:
        return np.diff(self.cdf)

    def probabilities(self) -> np.ndarray:
        return self.frequencies() / float(self.cdf[-1])


def pmf_to_cdf(pmf: np.ndarray, precision: int = TABLE_PRECISION) -> np.ndarray:
    """Quantise a pmf to integer frequencies summing to 2**precision, each >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pmf = np.clip(pmf, 0, None)
    total = 1 << precision
    n = len(pmf)
    if n > total:
        raise ValueError("alphabet larger than the table precision allows")
    if pmf.sum() <= 0:
        pmf = np.ones(n)
    pmf = pmf / pmf.sum()
    freq = np.maximum(1, np.floor(pmf * (total - n)).astype(np.int64) + 1)
    # settle the remainder deterministically on the most probable symbols
    order = np.argsort(-pmf, kind="stable")
    diff = total - int(freq.sum())
    i = 0
    while diff != 0:
        j = order[i % n]
        if diff > 0:
            freq[j] += 1
            diff -= 1
        elif freq[j] > 1:
            freq[j] -= 1
            diff += 1
        i += 1
    return np.concatenate([[0], np.cumsum(freq)]).astype(np.int64)


def sigma_grid(sigma_min: float, levels: int = SIGMA_LEVELS) -> np.ndarray:
    """Logarithmic grid from sigma_min to 64 * sigma_min."""
    return sigma_min * np.exp(np.linspace(0.0, np.log(64.0), levels))


def sigma_indexes(sigma: np.ndarray, sigma_min: float, levels: int = SIGMA_LEVELS) -> np.ndarray:
    """Nearest grid level in log space, clipped to the grid."""
    sigma = np.asarray(sigma, dtype=np.float64)
    pos = np.log(np.maximum(sigma, sigma_min) / sigma_min) / np.log(64.0) * (levels - 1)
    return np.clip(np.floor(pos + 0.5), 0, levels - 1).astype(np.int64)


def gaussian_tables(sigma_min: float, support: int = GAUSS_SUPPORT,
                    levels: int = SIGMA_LEVELS) -> list[CdfTable]:
    values = np.arange(-support, support + 1, dtype=np.float64)
    tables = []
    for sigma in sigma_grid(sigma_min, levels):
        pmf = special.ndtr((values + 0.5) / sigma) - special.ndtr((values - 0.5) / sigma)
        tail = max(0.0, 1.0 - pmf.sum())
        tables.append(CdfTable(pmf_to_cdf(np.append(pmf, tail)), offset=-support))
    return tables


def factorized_tables(params: ParamTree, m: Mode, channels: int,
                      support: int = HYPER_SUPPORT) -> list[CdfTable]:
    values = np.arange(-support, support + 1, dtype=np.float64)
    tables = []
    for c in range(channels):
        upper = factorized_cdf(params, m, c, values + 0.5)
        lower = factorized_cdf(params, m, c, values - 0.5)
        pmf = upper - lower
        lo_tail = factorized_cdf(params, m, c, np.array([-support - 0.5]))[0]
        hi_tail = 1.0 - factorized_cdf(params, m, c, np.array([support + 0.5]))[0]
        tables.append(CdfTable(pmf_to_cdf(np.append(pmf, lo_tail + hi_tail)), offset=-support))
    return tables


@dataclass
class TableSet:
    hyper: list[CdfTable]      # one per hyper channel
    gaussian: list[CdfTable]   # one per sigma level


def build_cdf_tables(params: ParamTree, cfg: NetConfig, m: Mode) -> TableSet:
    """Deterministic coding tables for mode ``m`` derived from a checkpoint."""
    return TableSet(hyper=factorized_tables(params, m, cfg.hyper_channels),
                    gaussian=gaussian_tables(cfg.sigma_min))
