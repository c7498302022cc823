"""Content encoder, style encoder, mapping network, decoder and discriminators.

All networks are pure functions of a :class:`ParamTree`; parameter names are
prefixed by the network they belong to so that optimisers and audits can
partition the tree:

========  ==============================================
prefix    network
========  ==============================================
enc.      mode-adaptive content encoder
dec.      mode- and style-adaptive decoder
map.      mapping network (seed -> style)
sty.      style encoder (reference image -> style)
hyper.    hyperprior analysis / synthesis transforms
prior.A.  factorized prior of the hyper-latent, mode A
prior.T.  factorized prior of the hyper-latent, mode T
disc.T.   translation discriminator
disc.A.   autoencoding discriminator
========  ==============================================
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamTree, fan_in_uniform
from .autodiff.tensor import ShapeError, Tensor


class Mode(enum.IntEnum):
    A = 0  # autoencoding
    T = 1  # translation

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                pass
        elif isinstance(value, (int, np.integer)) and value in (0, 1):
            return cls(int(value))
        raise ValueError(f"unknown mode {value!r}; expected 'A' or 'T'")


class StyleOrigin(enum.Enum):
    LATENT = "latent-guided"
    REFERENCE = "reference-guided"


@dataclass
class StyleVector:
    values: np.ndarray  # (D_s,)
    origin: StyleOrigin
    domain: int


@dataclass(frozen=True)
class AdaptationParams:
    scale: Tensor  # (N, C) or (C,)
    shift: Tensor


@dataclass
class NetConfig:
    image_size: int = 64
    image_channels: int = 3
    stages: int = 4
    base_width: int = 16
    max_width: int = 64
    latent_channels: int = 8
    hyper_channels: int = 8
    style_dim: int = 16
    seed_dim: int = 8
    num_domains: int = 2
    mapping_hidden: int = 64
    style_hidden: int = 64
    disc_base_width: int = 16
    prior_filters: tuple[int, ...] = (3, 3, 3)
    sigma_min: float = 0.11
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.prior_filters = tuple(self.prior_filters)
        if self.num_domains < 2:
            raise ValueError("num_domains must be at least 2")
        if self.image_size % (2 ** self.stages):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{self.stages}")
        if self.latent_size % 4:
            raise ValueError("latent extent must be divisible by 4 for the hyperprior")

    @property
    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** i, self.max_width) for i in range(self.stages + 1)]

    @property
    def disc_widths(self) -> list[int]:
        return [min(self.disc_base_width * 2 ** i, self.max_width) for i in range(self.stages + 1)]

    @property
    def latent_size(self) -> int:
        return self.image_size // 2 ** self.stages

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    @property
    def hyper_shape(self) -> tuple[int, int, int]:
        return (self.hyper_channels, self.latent_size // 4, self.latent_size // 4)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior_filters"] = list(self.prior_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network fields: {sorted(unknown)}")
        return cls(**d)


# -- parameter construction --------------------------------------------------

def _conv(tree: ParamTree, rng, name: str, cin: int, cout: int, k: int, gain: float = 1.0):
    tree.add(f"{name}.w", fan_in_uniform(rng, (cout, cin, k, k), gain=gain))
    tree.add(f"{name}.b", np.zeros(cout, np.float32))


def _dense(tree: ParamTree, rng, name: str, nin: int, nout: int, gain: float = 1.0):
    tree.add(f"{name}.w", fan_in_uniform(rng, (nout, nin), gain=gain))
    tree.add(f"{name}.b", np.zeros(nout, np.float32))


def _adaptation(tree: ParamTree, rng, name: str, ncond: int, channels: int):
    # u starts at 1 and r at 0, nudged by a small mode/style dependent term
    tree.add(f"{name}.u.w", fan_in_uniform(rng, (channels, ncond), gain=0.1))
    tree.add(f"{name}.u.b", np.ones(channels, np.float32))
    tree.add(f"{name}.r.w", fan_in_uniform(rng, (channels, ncond), gain=0.1))
    tree.add(f"{name}.r.b", np.zeros(channels, np.float32))


def _resblock(tree: ParamTree, rng, name: str, channels: int, ncond: int):
    _conv(tree, rng, f"{name}.conv1", channels, channels, 3)
    _adaptation(tree, rng, f"{name}.ada", ncond, channels)
    _conv(tree, rng, f"{name}.conv2", channels, channels, 3, gain=0.5)


def init_params(cfg: NetConfig, seed: int = 0) -> ParamTree:
    """Fan-in scaled uniform weights, zero biases, identity-ish adaptation units."""
    rng = np.random.default_rng(seed)
    tree = ParamTree()
    w = cfg.widths
    enc_cond = 2
    dec_cond = 2 + cfg.style_dim

    _conv(tree, rng, "enc.stem", cfg.image_channels, w[0], 3)
    for i in range(cfg.stages):
        _resblock(tree, rng, f"enc.block{i}", w[i], enc_cond)
        _conv(tree, rng, f"enc.down{i}", w[i], w[i + 1], 3)
    _resblock(tree, rng, "enc.bottleneck", w[-1], enc_cond)
    _conv(tree, rng, "enc.out", w[-1], cfg.latent_channels, 1)

    _conv(tree, rng, "dec.in", cfg.latent_channels, w[-1], 1)
    _resblock(tree, rng, "dec.bottleneck", w[-1], dec_cond)
    for i in reversed(range(cfg.stages)):
        _conv(tree, rng, f"dec.up{i}", w[i + 1], w[i], 3)
        _resblock(tree, rng, f"dec.block{i}", w[i], dec_cond)
    _conv(tree, rng, "dec.out", w[0], cfg.image_channels, 3)

    h = cfg.mapping_hidden
    for i in range(4):
        _dense(tree, rng, f"map.fc{i}", cfg.seed_dim if i == 0 else h, h)
    for y in range(cfg.num_domains):
        _dense(tree, rng, f"map.head{y}", h, cfg.style_dim)

    _conv(tree, rng, "sty.stem", cfg.image_channels, w[0], 3)
    for i in range(cfg.stages):
        _conv(tree, rng, f"sty.conv{i}", w[i], w[i + 1], 3)
    _dense(tree, rng, "sty.fc", w[-1], cfg.style_hidden)
    for y in range(cfg.num_domains):
        _dense(tree, rng, f"sty.head{y}", cfg.style_hidden, cfg.style_dim)

    ch, cz = cfg.hyper_channels, cfg.latent_channels
    _conv(tree, rng, "hyper.a0", cz, ch, 3)
    _conv(tree, rng, "hyper.a1", ch, ch, 3)
    _conv(tree, rng, "hyper.s0", ch, ch, 3)
    _conv(tree, rng, "hyper.s1", ch, cz, 3)

    for mode in Mode:
        _factorized_prior(tree, rng, f"prior.{mode.name}", ch, cfg.prior_filters)

    dw = cfg.disc_widths
    for task in ("T", "A"):
        _conv(tree, rng, f"disc.{task}.stem", cfg.image_channels, dw[0], 3)
        for i in range(cfg.stages):
            _conv(tree, rng, f"disc.{task}.conv{i}", dw[i], dw[i + 1], 3)
        flat = dw[-1] * cfg.latent_size ** 2
        _dense(tree, rng, f"disc.{task}.head", flat, cfg.num_domains)
    return tree


def _factorized_prior(tree: ParamTree, rng, name: str, channels: int, filters: tuple[int, ...],
                      init_scale: float = 10.0):
    dims = (1,) + tuple(filters) + (1,)
    scale = init_scale ** (1.0 / (len(filters) + 1))
    for k in range(len(filters) + 1):
        # softplus(raw) == 1 / (scale * fan_in) spreads the initial density
        init = np.log(np.expm1(1.0 / scale / dims[k + 1]))
        tree.add(f"{name}.H{k}", np.full((channels, dims[k + 1], dims[k]), init, np.float32))
        tree.add(f"{name}.b{k}", rng.uniform(-0.5, 0.5, (channels, dims[k + 1], 1)).astype(np.float32))
        if k < len(filters):
            tree.add(f"{name}.a{k}", np.zeros((channels, dims[k + 1], 1), np.float32))


# -- building blocks ---------------------------------------------------------

def conv(params: ParamTree, name: str, x: Tensor, stride: int = 1) -> Tensor:
    wt = params[f"{name}.w"]
    pad = wt.shape[-1] // 2
    return ops.conv2d(x, wt, params[f"{name}.b"], stride=stride, padding=pad)


def dense(params: ParamTree, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def mode_onehot(m: Mode, n: int, dtype=np.float32) -> np.ndarray:
    onehot = np.zeros((n, 2), dtype)
    onehot[:, int(m)] = 1
    return onehot


def adaptation(params: ParamTree, name: str, cond: Tensor) -> AdaptationParams:
    """Per-channel (scale, shift) as linear functions of the conditioning vector."""
    return AdaptationParams(dense(params, f"{name}.u", cond), dense(params, f"{name}.r", cond))


def modulate(o: Tensor, ada: AdaptationParams) -> Tensor:
    """o' = u * o + r with per-channel u, r broadcast over space."""
    u, r = ada.scale, ada.shift
    if o.ndim == 3:
        if u.shape != (o.shape[0],):
            raise ShapeError(f"adaptation for {u.shape} channels, feature has {o.shape[0]}")
        return ops.add(ops.mul(o, ops.reshape(u, (-1, 1, 1))), ops.reshape(r, (-1, 1, 1)))
    n, c = o.shape[:2]
    if u.shape != (n, c):
        raise ShapeError(f"adaptation of shape {u.shape} does not fit feature {o.shape}")
    return ops.add(ops.mul(o, ops.reshape(u, (n, c, 1, 1))), ops.reshape(r, (n, c, 1, 1)))


def ada_res_block(params: ParamTree, name: str, o: Tensor, cond: Tensor | None = None,
                  ada: AdaptationParams | None = None, eps: float = 1e-5) -> Tensor:
    """o + conv2(lrelu(modulate(instance_norm(conv1(o)))))."""
    if o.ndim not in (3, 4):
        raise ShapeError(f"ada_res_block expects a rank-3/4 feature, got {o.shape}")
    if ada is None:
        ada = adaptation(params, f"{name}.ada", cond)
    t = conv(params, f"{name}.conv1", o)
    t = ops.normalize_instance(t, eps)
    t = modulate(t, ada)
    t = conv(params, f"{name}.conv2", ops.leaky_relu(t))
    return ops.add(o, t)


def encoder_condition(m: Mode, n: int, dtype=np.float32) -> Tensor:
    return Tensor(mode_onehot(m, n, dtype))


def decoder_condition(m: Mode, s: Tensor | None, n: int, style_dim: int, dtype=np.float32) -> Tensor:
    onehot = Tensor(mode_onehot(m, n, dtype))
    if m == Mode.A or s is None:
        # autoencoding ignores style: the style slot is identically zero
        return ops.concat([onehot, Tensor(np.zeros((n, style_dim), dtype))], axis=1)
    return ops.concat([onehot, s], axis=1)


def _check_labels(y, k: int, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.dtype.kind not in "iu":
        raise ValueError(f"domain labels must be integers, got {y.dtype}")
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if (y < 0).any() or (y >= k).any():
        raise ValueError(f"domain label out of range [0, {k}): {y.tolist()}")
    return y.astype(np.int64)


def _image_batch(cfg: NetConfig, x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    single = x.ndim == 3
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != cfg.image_shape:
        raise ShapeError(f"expected image(s) of shape {cfg.image_shape}, got {x.shape}")
    return x, single


# -- networks ----------------------------------------------------------------

class Networks:
    """The generator-side and discriminator networks bound to one parameter tree."""

    def __init__(self, cfg: NetConfig, params: ParamTree):
        self.cfg = cfg
        self.params = params

    @property
    def dtype(self):
        return self.params["enc.stem.w"].dtype

    def content_encode(self, x, m: Mode) -> Tensor:
        cfg, p = self.cfg, self.params
        xb, single = _image_batch(cfg, x)
        m = Mode.parse(m)
        cond = encoder_condition(m, xb.shape[0], self.dtype)
        h = ops.leaky_relu(conv(p, "enc.stem", xb))
        for i in range(cfg.stages):
            h = ada_res_block(p, f"enc.block{i}", h, cond, eps=cfg.norm_eps)
            h = ops.resample(h, 2, "down")
            h = ops.leaky_relu(conv(p, f"enc.down{i}", h))
        h = ada_res_block(p, "enc.bottleneck", h, cond, eps=cfg.norm_eps)
        z = conv(p, "enc.out", h)
        return ops.reshape(z, z.shape[1:]) if single else z

    def decode(self, z_hat, s, m: Mode) -> Tensor:
        """Image in (0, 1); ``s`` is required for mode T and ignored for mode A."""
        cfg, p = self.cfg, self.params
        m = Mode.parse(m)
        z = z_hat if isinstance(z_hat, Tensor) else Tensor(np.asarray(z_hat, dtype=self.dtype))
        single = z.ndim == 3
        if single:
            z = ops.reshape(z, (1,) + z.shape)
        if z.shape[1:] != cfg.latent_shape:
            raise ShapeError(f"expected latent of shape {cfg.latent_shape}, got {z.shape[1:]}")
        n = z.shape[0]
        if m == Mode.T:
            if s is None:
                raise ValueError("translation mode needs a style vector")
            s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=self.dtype))
            if s.ndim == 1:
                s = ops.reshape(s, (1, -1))
            if s.shape != (n, cfg.style_dim):
                raise ShapeError(f"style batch {s.shape} does not match ({n}, {cfg.style_dim})")
        cond = decoder_condition(m, s if m == Mode.T else None, n, cfg.style_dim, self.dtype)
        h = ops.leaky_relu(conv(p, "dec.in", z))
        h = ada_res_block(p, "dec.bottleneck", h, cond, eps=cfg.norm_eps)
        for i in reversed(range(cfg.stages)):
            h = ops.resample(h, 2, "up")
            h = ops.leaky_relu(conv(p, f"dec.up{i}", h))
            h = ada_res_block(p, f"dec.block{i}", h, cond, eps=cfg.norm_eps)
        img = ops.sigmoid(conv(p, "dec.out", ops.leaky_relu(h)))
        return ops.reshape(img, img.shape[1:]) if single else img

    def style_from_latent(self, w, y) -> Tensor:
        cfg, p = self.cfg, self.params
        w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=self.dtype))
        single = w.ndim == 1
        if single:
            w = ops.reshape(w, (1, -1))
        if w.shape[1] != cfg.seed_dim:
            raise ShapeError(f"seed length {w.shape[1]} != {cfg.seed_dim}")
        y = _check_labels(y, cfg.num_domains, w.shape[0])
        h = w
        for i in range(4):
            h = ops.leaky_relu(dense(p, f"map.fc{i}", h))
        s = self._domain_head("map", h, y)
        return ops.reshape(s, (cfg.style_dim,)) if single else s

    def style_from_reference(self, x_ref, y) -> Tensor:
        cfg, p = self.cfg, self.params
        xb, single = _image_batch(cfg, x_ref)
        y = _check_labels(y, cfg.num_domains, xb.shape[0])
        h = ops.leaky_relu(conv(p, "sty.stem", xb))
        for i in range(cfg.stages):
            h = ops.resample(h, 2, "down")
            h = ops.leaky_relu(conv(p, f"sty.conv{i}", h))
        h = ops.leaky_relu(dense(p, "sty.fc", ops.global_mean(h)))
        s = self._domain_head("sty", h, y)
        return ops.reshape(s, (cfg.style_dim,)) if single else s

    def _domain_head(self, prefix: str, h: Tensor, y: np.ndarray) -> Tensor:
        heads = [dense(self.params, f"{prefix}.head{k}", h) for k in range(self.cfg.num_domains)]
        stacked = ops.concat([ops.reshape(t, (t.shape[0], 1, t.shape[1])) for t in heads], axis=1)
        return ops.select_rows(stacked, y)

    def discriminate(self, x, y, which: str) -> Tensor:
        """Logit of the branch selected by ``y`` in discriminator ``which`` ('T' or 'A')."""
        cfg, p = self.cfg, self.params
        which = Mode.parse(which).name
        xb, single = _image_batch(cfg, x)
        y = _check_labels(y, cfg.num_domains, xb.shape[0])
        pre = f"disc.{which}"
        h = ops.leaky_relu(conv(p, f"{pre}.stem", xb))
        for i in range(cfg.stages):
            h = ops.resample(h, 2, "down")
            h = ops.leaky_relu(conv(p, f"{pre}.conv{i}", h))
        logits = dense(p, f"{pre}.head", ops.reshape(h, (h.shape[0], -1)))
        out = ops.select_rows(logits, y)
        return ops.reshape(out, ()) if single else out


GENERATOR_PREFIXES = ("enc.", "dec.", "map.", "sty.", "hyper.", "prior.")
