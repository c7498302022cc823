"""Loss terms, the mode-switched objective, and the two training schedules.

Translation branch (mode T)::

    total_T = adv + g_sty*sty - g_ds*ds + g_cyc*cyc + lambda_T*rate

Autoencoding branch (mode A)::

    total_A = distortion_scale*mse + lambda_A*rate + beta*adv2

Rates are bits per pixel of noise-quantized latents (z and h together).
Adversarial terms are non-saturating logistic losses; discriminators carry an
R1 penalty on real images.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.params import AdamState, ParamTree, adam_step, dumps, loads
from .autodiff.tensor import Tensor, no_grad
from .data import DatasetSpec, Split
from .entropy import EntropyModel, quantize
from .model import CheckpointError, Model, atomic_write
from .networks import Mode, NetConfig, Networks

SCHEDULES = ("i2icodec", "ui2icodec")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted name at fault, when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass
class OptimConfig:
    lr: float = 1e-4
    lr_mapping: float = 5e-5
    lr_disc: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 8


@dataclass
class TrainConfig:
    schedule: str = "ui2icodec"
    gamma_sty: float = 1.0
    gamma_ds: float = 1.0
    gamma_cyc: float = 1.0
    lambda_t: float = 0.1
    lambda_a: float = 15.0
    beta: float = 1.0
    r1_weight: float = 1.0
    ds_anneal: bool = True
    distortion_scale: float = 255.0 ** 2
    pretrain_iters: int = 2500
    joint_iters: int = 5000
    enable_a: bool = True
    enable_t: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    optim: OptimConfig = field(default_factory=OptimConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    data_seed: int = 0
    data_dir: str | None = None

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}", "schedule")
        for name in ("gamma_sty", "gamma_ds", "gamma_cyc", "lambda_t", "lambda_a", "beta",
                     "r1_weight", "distortion_scale"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite number >= 0, got {v!r}", name)
        for name in ("pretrain_iters", "joint_iters", "checkpoint_every", "seed", "data_seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}", name)
        if self.optim.batch_size < 1:
            raise ConfigError("optim.batch_size must be positive", "optim.batch_size")
        if self.net.num_domains < 2:
            raise ConfigError("translation needs at least two domains", "net.num_domains")
        if self.data.image_size != self.net.image_size:
            raise ConfigError(f"data.image_size {self.data.image_size} != net.image_size "
                              f"{self.net.image_size}", "data.image_size")
        if self.data.num_domains != self.net.num_domains:
            raise ConfigError("dataset and network disagree on the number of domains", "net.num_domains")

    @property
    def total_iters(self) -> int:
        pre = self.pretrain_iters if self.schedule == "ui2icodec" else 0
        return pre + self.joint_iters

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["data"]["radius_range"] = list(self.data.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"optim": OptimConfig, "net": NetConfig, "data": DatasetSpec}
        for key, typ in nested.items():
            if key in d:
                sub = d[key] or {}
                if not isinstance(sub, dict):
                    raise ConfigError(f"{key} must be a mapping", key)
                unknown = sorted(set(sub) - {f.name for f in fields(typ)})
                if unknown:
                    raise ConfigError(f"unknown field {key}.{unknown[0]}", f"{key}.{unknown[0]}")
                try:
                    d[key] = typ(**sub)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}", key) from exc
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown field {unknown[0]}", unknown[0])
        return cls(**d)


# -- loss report ---------------------------------------------------------------

REPORT_FIELDS = ("iteration", "phase", "mode", "adv", "sty", "ds", "cyc", "rate_bits", "rate_bpp",
                 "rd_distortion", "adv2", "gamma_ds", "total_T", "total_A", "total", "d_loss", "r1")


@dataclass
class LossReport:
    iteration: int
    phase: str
    mode: Mode
    adv: float = 0.0
    sty: float = 0.0
    ds: float = 0.0
    cyc: float = 0.0
    rate_bits: float = 0.0      # mean bits per image, z and h
    rate_bpp: float = 0.0
    rd_distortion: float = 0.0  # plain MSE
    adv2: float = 0.0
    gamma_ds: float = 0.0
    total_T: float = 0.0
    total_A: float = 0.0
    d_loss: float = 0.0
    r1: float = 0.0

    @property
    def total(self) -> float:
        return self.total_T if self.mode == Mode.T else self.total_A

    def row(self) -> list[str]:
        out = []
        for name in REPORT_FIELDS:
            v = getattr(self, name)
            if name == "mode":
                out.append(Mode.parse(v).name)
            elif isinstance(v, float):
                out.append(repr(float(v)))
            else:
                out.append(str(v))
        return out


# -- loss building blocks ------------------------------------------------------

def nonsat_generator(logits: Tensor) -> Tensor:
    return ops.mean(ops.softplus(ops.neg(logits)))


def nonsat_discriminator(real: Tensor, fake: Tensor) -> Tensor:
    return ops.add(ops.mean(ops.softplus(ops.neg(real))), ops.mean(ops.softplus(fake)))


def l1(a: Tensor, b: Tensor) -> Tensor:
    return ops.mean(ops.abs(ops.sub(a, b)))


def _take(t: Tensor, start: int, stop: int) -> Tensor:
    return ops.getitem(t, slice(start, stop))


def sample_targets(rng: np.random.Generator, y_src: np.ndarray, k: int) -> np.ndarray:
    """A target domain different from the source, uniformly among the other k - 1."""
    if k < 2:
        raise ConfigError("target-domain sampling needs at least two domains")
    shift = rng.integers(1, k, size=len(y_src))
    return (np.asarray(y_src) + shift) % k


@dataclass
class TranslationTerms:
    adv: Tensor
    sty: Tensor
    ds: Tensor
    cyc: Tensor
    rate_bits: Tensor   # per image
    rate_bpp: Tensor
    total: Tensor
    fake: Tensor        # first translation, for the discriminator step
    y_tar: np.ndarray


def loss_translation(nets: Networks, x: Tensor, y_src: np.ndarray, cfg: TrainConfig,
                     rng: np.random.Generator, gamma_ds: float | None = None) -> TranslationTerms:
    """Assemble the translation objective on one batch; randomness comes from ``rng`` only."""
    ncfg = nets.cfg
    n = x.shape[0]
    gamma_ds = cfg.gamma_ds if gamma_ds is None else gamma_ds
    dtype = nets.dtype
    y_tar = sample_targets(rng, y_src, ncfg.num_domains)
    w = rng.standard_normal((2 * n, ncfg.seed_dim)).astype(dtype)
    entropy = EntropyModel(ncfg, nets.params)

    z = nets.content_encode(x, Mode.T)
    z_t = quantize(z, "training", rng)
    rate_bits = entropy.rate_bits(z_t, Mode.T, "training", rng, hyper_source=z)
    rate_bpp = ops.div(ops.mean(rate_bits), float(ncfg.image_size ** 2))

    y2 = np.concatenate([y_tar, y_tar])
    s12 = nets.style_from_latent(Tensor(w), y2)
    fakes = nets.decode(ops.concat([z_t, z_t], axis=0), s12, Mode.T)
    fake, fake2 = _take(fakes, 0, n), _take(fakes, n, 2 * n)
    s1 = _take(s12, 0, n)

    adv = nonsat_generator(nets.discriminate(fake, y_tar, "T"))
    sty = l1(s1, nets.style_from_reference(fake, y_tar))
    ds = l1(fake, fake2)

    s_src = nets.style_from_reference(x, y_src)
    zc = quantize(nets.content_encode(fake, Mode.T), "training", rng)
    cyc = l1(x, nets.decode(zc, s_src, Mode.T))

    total = ops.add(ops.add(ops.add(adv, ops.mul(sty, cfg.gamma_sty)), ops.mul(ds, -gamma_ds)),
                    ops.add(ops.mul(cyc, cfg.gamma_cyc), ops.mul(rate_bpp, cfg.lambda_t)))
    return TranslationTerms(adv, sty, ds, cyc, rate_bits, rate_bpp, total, fake, y_tar)


@dataclass
class AutoencodingTerms:
    mse: Tensor
    rate_bits: Tensor
    rate_bpp: Tensor
    adv2: Tensor
    total: Tensor
    recon: Tensor


def loss_autoencoding(nets: Networks, x: Tensor, y_src: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator, distortion_only: bool = False) -> AutoencodingTerms:
    ncfg = nets.cfg
    z = nets.content_encode(x, Mode.A)
    z_t = quantize(z, "training", rng)
    recon = nets.decode(z_t, None, Mode.A)
    mse = ops.mse(recon, x)
    distortion = ops.mul(mse, cfg.distortion_scale)
    if distortion_only:
        zero = Tensor(np.zeros((), dtype=nets.dtype))
        return AutoencodingTerms(mse, Tensor(np.zeros(x.shape[0], nets.dtype)), zero, zero,
                                 distortion, recon)
    entropy = EntropyModel(ncfg, nets.params)
    rate_bits = entropy.rate_bits(z_t, Mode.A, "training", rng, hyper_source=z)
    rate_bpp = ops.div(ops.mean(rate_bits), float(ncfg.image_size ** 2))
    adv2 = nonsat_generator(nets.discriminate(recon, y_src, "A"))
    total = ops.add(ops.add(distortion, ops.mul(rate_bpp, cfg.lambda_a)), ops.mul(adv2, cfg.beta))
    return AutoencodingTerms(mse, rate_bits, rate_bpp, adv2, total, recon)


# -- discriminator update --------------------------------------------------------

def _disc_param_grads(nets: Networks, names: list[str], x: np.ndarray, y: np.ndarray,
                      which: str, masks: list) -> dict[str, np.ndarray]:
    nets.params.zero_grad()
    with ops.activation_tape(masks):
        ops.sum(nets.discriminate(Tensor(x), y, which)).backward()
    return nets.params.grads(names)


def r1_penalty_grads(nets: Networks, x: np.ndarray, y: np.ndarray, which: str,
                     weight: float) -> tuple[float, dict[str, np.ndarray]]:
    """Value and parameter gradient of weight/2 * mean_n |d D(x_n) / d x_n|^2.

    The parameter gradient is the Hessian-vector product (d/dx grad_theta D) g
    with g the input gradient.  With the leaky-ReLU pattern of ``x`` frozen the
    discriminator is affine in its input, so grad_theta D is affine in x and a
    central difference along g gives the product exactly.
    """
    names = nets.params.names(f"disc.{which}.")
    xt = Tensor(x, requires_grad=True)
    nets.params.zero_grad()
    with ops.activation_tape() as masks:
        ops.sum(nets.discriminate(xt, y, which)).backward()
    g = xt.grad
    n = x.shape[0]
    g64 = g.astype(np.float64)
    value = 0.5 * weight * float((g64 ** 2).sum()) / n
    rms = math.sqrt(float((g64 ** 2).mean()))
    if weight == 0 or rms == 0:
        nets.params.zero_grad()
        return value, {k: np.zeros_like(nets.params[k].data) for k in names}
    eps = 1.0 / rms
    plus = _disc_param_grads(nets, names, x + (eps * g).astype(x.dtype), y, which, masks)
    minus = _disc_param_grads(nets, names, x - (eps * g).astype(x.dtype), y, which, masks)
    scale = weight / (n * 2 * eps)
    grads = {k: ((plus[k].astype(np.float64) - minus[k]) * scale).astype(x.dtype) for k in names}
    nets.params.zero_grad()
    return value, grads


def discriminator_step(nets: Networks, real: np.ndarray, y_real: np.ndarray, fake: np.ndarray,
                       y_fake: np.ndarray, which: str, cfg: TrainConfig) -> tuple[float, float]:
    names = nets.params.names(f"disc.{which}.")
    nets.params.zero_grad()
    loss = nonsat_discriminator(nets.discriminate(Tensor(real), y_real, which),
                                nets.discriminate(Tensor(fake), y_fake, which))
    loss.backward()
    grads = nets.params.grads(names)
    r1, r1_grads = r1_penalty_grads(nets, real, y_real, which, cfg.r1_weight)
    total = {k: grads[k] + r1_grads[k] for k in names}
    o = cfg.optim
    adam_step(nets.params, total, o.lr_disc, o.beta1, o.beta2, o.eps)
    nets.params.zero_grad()
    return float(loss.item()), r1


# -- parameter partitions --------------------------------------------------------

def generator_names(params: ParamTree, m: Mode, distortion_only: bool = False) -> list[str]:
    if distortion_only:
        return params.names(("enc.", "dec."))
    if Mode.parse(m) == Mode.A:
        return params.names(("enc.", "dec.", "hyper.", "prior.A."))
    return params.names(("enc.", "dec.", "map.", "sty.", "hyper.", "prior.T."))


def _generator_update(params: ParamTree, names: list[str], o: OptimConfig, m: Mode) -> None:
    # per-mode moments: the A objective's gradients on shared weights are thousands of
    # times larger than the T objective's and would otherwise swamp its step size
    grads = params.grads(names)
    mapping = {k: v for k, v in grads.items() if k.startswith("map.")}
    rest = {k: v for k, v in grads.items() if not k.startswith("map.")}
    slot = Mode.parse(m).name
    adam_step(params, rest, o.lr, o.beta1, o.beta2, o.eps, slot=slot)
    if mapping:
        adam_step(params, mapping, o.lr_mapping, o.beta1, o.beta2, o.eps, slot=slot)
    params.zero_grad()


# -- training state --------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model: Model
    iteration: int
    rng_data: np.random.Generator
    rng_a: np.random.Generator
    rng_t: np.random.Generator

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        init_seq, data_seq, a_seq, t_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        init_seed = int(init_seq.generate_state(1)[0])
        model = Model.initialize(cfg.net, init_seed)
        return cls(cfg, model, 0, np.random.default_rng(data_seq), np.random.default_rng(a_seq),
                   np.random.default_rng(t_seq))

    @property
    def nets(self) -> Networks:
        return self.model.nets

    @property
    def phase(self) -> str:
        if self.cfg.schedule == "ui2icodec" and self.iteration < self.cfg.pretrain_iters:
            return "pretrain"
        return "joint"

    def joint_index(self) -> int:
        pre = self.cfg.pretrain_iters if self.cfg.schedule == "ui2icodec" else 0
        return self.iteration - pre

    def gamma_ds(self) -> float:
        if not self.cfg.ds_anneal or self.cfg.joint_iters == 0:
            return self.cfg.gamma_ds
        return self.cfg.gamma_ds * max(0.0, 1.0 - self.joint_index() / self.cfg.joint_iters)

    def sample_batch(self, data: Split) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rng_data.integers(0, len(data), size=self.cfg.optim.batch_size)
        x = data.images[idx].astype(self.nets.dtype)
        return x, data.labels[idx]

    # -- serialisation --
    def train_bytes(self) -> bytes:
        arrays = {}
        steps = {}
        for name, st in self.model.params.adam.items():
            arrays[f"m/{name}"] = st.m
            arrays[f"v/{name}"] = st.v
            steps[name] = st.step
        meta = {"kind": "i2icodec-train", "iteration": self.iteration, "adam_steps": steps,
                "rng": {"data": self.rng_data.bit_generator.state, "A": self.rng_a.bit_generator.state,
                        "T": self.rng_t.bit_generator.state},
                "config": self.cfg.to_dict()}
        return dumps(arrays, meta)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        atomic_write(path.with_name(path.name + ".train"), self.train_bytes())
        self.model.save(path)

    @classmethod
    def load(cls, path: str | os.PathLike, cfg: TrainConfig | None = None) -> "TrainState":
        path = Path(path)
        model = Model.load(path)
        side = path.with_name(path.name + ".train")
        if not side.is_file():
            raise CheckpointError(f"no training state beside {path} (expected {side.name})")
        arrays, meta = loads(side.read_bytes())
        if meta.get("kind") != "i2icodec-train":
            raise CheckpointError(f"{side} is not a training-state file")
        saved_cfg = TrainConfig.from_dict(meta["config"])
        cfg = cfg or saved_cfg
        if cfg.net != model.cfg:
            raise ConfigError("checkpoint network does not match the training configuration")
        for name, step in meta["adam_steps"].items():
            model.params.adam[name] = AdamState(arrays[f"m/{name}"].copy(), arrays[f"v/{name}"].copy(),
                                                int(step))
        rngs = []
        for key in ("data", "A", "T"):
            g = np.random.default_rng()
            g.bit_generator.state = meta["rng"][key]
            rngs.append(g)
        return cls(cfg, model, int(meta["iteration"]), *rngs)


# -- steps ---------------------------------------------------------------------------

def train_step_pretrain(state: TrainState, x: np.ndarray, y: np.ndarray) -> LossReport:
    """Distortion-only A-mode update of the content encoder and decoder."""
    nets, cfg = state.nets, state.cfg
    terms = loss_autoencoding(nets, Tensor(x), y, cfg, state.rng_a, distortion_only=True)
    nets.params.zero_grad()
    terms.total.backward()
    _generator_update(nets.params, generator_names(nets.params, Mode.A, True), cfg.optim, Mode.A)
    mse = terms.mse.item()
    return LossReport(state.iteration, "pretrain", Mode.A, rd_distortion=mse,
                      total_A=terms.total.item())


def train_step_autoencoding(state: TrainState, x: np.ndarray, y: np.ndarray) -> LossReport:
    nets, cfg = state.nets, state.cfg
    terms = loss_autoencoding(nets, Tensor(x), y, cfg, state.rng_a)
    nets.params.zero_grad()
    terms.total.backward()
    _generator_update(nets.params, generator_names(nets.params, Mode.A), cfg.optim, Mode.A)
    d_loss, r1 = discriminator_step(nets, x, y, terms.recon.data, y, "A", cfg)
    return LossReport(state.iteration, "joint", Mode.A, rate_bits=float(terms.rate_bits.data.mean()),
                      rate_bpp=terms.rate_bpp.item(), rd_distortion=terms.mse.item(),
                      adv2=terms.adv2.item(), total_A=terms.total.item(), d_loss=d_loss, r1=r1)


def train_step_translation(state: TrainState, x: np.ndarray, y: np.ndarray) -> LossReport:
    nets, cfg = state.nets, state.cfg
    gamma_ds = state.gamma_ds()
    terms = loss_translation(nets, Tensor(x), y, cfg, state.rng_t, gamma_ds)
    nets.params.zero_grad()
    terms.total.backward()
    _generator_update(nets.params, generator_names(nets.params, Mode.T), cfg.optim, Mode.T)
    d_loss, r1 = discriminator_step(nets, x, y, terms.fake.data, terms.y_tar, "T", cfg)
    return LossReport(state.iteration, "joint", Mode.T, adv=terms.adv.item(), sty=terms.sty.item(),
                      ds=terms.ds.item(), cyc=terms.cyc.item(),
                      rate_bits=float(terms.rate_bits.data.mean()), rate_bpp=terms.rate_bpp.item(),
                      gamma_ds=gamma_ds, total_T=terms.total.item(), d_loss=d_loss, r1=r1)


def train_step_unified(state: TrainState, data: Split) -> list[LossReport]:
    """One iteration: an A pass then a T pass on the same batch, each with its own D update."""
    x, y = state.sample_batch(data)
    reports = []
    if state.phase == "pretrain":
        reports.append(train_step_pretrain(state, x, y))
    else:
        if state.cfg.enable_a and state.cfg.schedule == "ui2icodec":
            reports.append(train_step_autoencoding(state, x, y))
        if state.cfg.enable_t:
            reports.append(train_step_translation(state, x, y))
    state.iteration += 1
    return reports


# -- runs ------------------------------------------------------------------------------

def _truncate_log(path: Path, iteration: int) -> None:
    """Drop rows at or beyond ``iteration`` so a resumed run continues the log seamlessly."""
    if not path.is_file():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) < iteration]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(kept)
    atomic_write(path, buf.getvalue().encode())


def checkpoint_name(iteration: int) -> str:
    return f"step_{iteration:06d}.i2p"


def run_training(cfg: TrainConfig, data: Split, out_dir: str | os.PathLike,
                 resume: str | os.PathLike | None = None, until: int | None = None,
                 progress: Callable[[TrainState, list[LossReport]], None] | None = None) -> TrainState:
    """Run (or resume) a schedule, writing ``loss_log.csv``, periodic checkpoints and ``model.i2p``.

    ``until`` stops early after that many total iterations (used to test resumption).
    """
    if data.images.shape[1:] != cfg.net.image_shape:
        raise ConfigError(f"dataset images {data.images.shape[1:]} do not match the network "
                          f"input {cfg.net.image_shape}")
    if data.labels.size and int(data.labels.max()) >= cfg.net.num_domains:
        raise ConfigError("dataset labels exceed the configured number of domains")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"
    if resume is not None:
        state = TrainState.load(resume, cfg)
        _truncate_log(log_path, state.iteration)
    else:
        state = TrainState.fresh(cfg)
        atomic_write(log_path, (",".join(REPORT_FIELDS) + "\n").encode())
    stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
    with log_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.iteration < stop:
            reports = train_step_unified(state, data)
            for r in reports:
                writer.writerow(r.row())
            fh.flush()
            if progress is not None:
                progress(state, reports)
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                state.save(out / checkpoint_name(state.iteration))
    state.save(out / "model.i2p")
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True).encode())
    return state


def read_loss_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
