"""Image to container and back: analysis, quantisation, entropy coding, synthesis.

Coding order is fixed: the hyper-latent first (its tables do not depend on
anything else in the stream), then the main latent, both in channel-major
raster order.  Each main-latent element is coded with the Gaussian table of
its quantised scale index, which the receiver recomputes from the decoded
hyper-latent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, no_grad
from .container import Container, ContainerError, Header, fixed_overhead_bytes, pack, unpack
from .entropy import (EntropyModel, TableSet, build_cdf_tables, hyper_analysis, hyper_synthesis,
                      quantize, sigma_indexes)
from .model import Model
from .networks import Mode
from .range_coder import SymbolStream, rc_decode, rc_encode


class CodecError(ValueError):
    pass


@dataclass
class Encoded:
    blob: bytes
    estimate_bits: float   # entropy-model bits of both latents + exact non-payload bytes
    mode: Mode

    @property
    def bits(self) -> int:
        return 8 * len(self.blob)


class Codec:
    """Sender and receiver for one frozen model; coding tables are built once per mode."""

    def __init__(self, model: Model):
        self.model = model
        self.cfg = model.cfg
        self._tables: dict[Mode, TableSet] = {}

    def tables(self, m: Mode) -> TableSet:
        m = Mode.parse(m)
        if m not in self._tables:
            self._tables[m] = build_cdf_tables(self.model.params, self.cfg, m)
        return self._tables[m]

    def _sigma_ids(self, h_hat: np.ndarray) -> np.ndarray:
        # always one image at a time so sender and receiver run the same arithmetic
        dtype = self.model.nets.dtype
        with no_grad():
            sigma = hyper_synthesis(self.model.params, Tensor(h_hat[None].astype(dtype)),
                                    self.cfg.sigma_min)
        return sigma_indexes(sigma.data[0], self.cfg.sigma_min)

    def encode(self, images, mode, styles=None, targets=None) -> list[Encoded]:
        """Encode a batch (or a single (C, H, W) image).

        ``styles`` are sender-side style vectors, carried in the container;
        ``None`` leaves the style to the receiver.  Mode A takes neither styles
        nor targets.
        """
        m = Mode.parse(mode)
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
            styles = None if styles is None else np.asarray(styles).reshape(1, -1)
            targets = None if targets is None else list(np.atleast_1d(targets))
        n = x.shape[0]
        if m == Mode.A:
            if styles is not None or (targets is not None and any(int(t) != 0 for t in targets)):
                raise CodecError("autoencoding mode takes no style or target domain")
            targets = [0] * n
        else:
            if targets is None:
                raise CodecError("translation mode needs a target domain label")
            targets = [int(t) for t in targets]
            for t in targets:
                if not 0 <= t < self.cfg.num_domains:
                    raise CodecError(f"target domain {t} outside 0..{self.cfg.num_domains - 1}")
            if styles is not None:
                styles = np.asarray(styles, dtype=np.float32).reshape(n, -1)
                if styles.shape[1] != self.cfg.style_dim:
                    raise CodecError(f"style has {styles.shape[1]} values, model uses {self.cfg.style_dim}")

        nets, params = self.model.nets, self.model.params
        entropy = EntropyModel(self.cfg, params)
        with no_grad():
            z = nets.content_encode(Tensor(x), m)
            code = quantize(z, "inference")
            est = entropy.rate_bits(Tensor(code.dequantized), m, "inference", hyper_source=z).data
            h_hat = quantize(hyper_analysis(params, z), "inference").quantized
        tables = self.tables(m)
        q = code.quantized
        out = []
        for i in range(n):
            hyper_ids = np.repeat(np.arange(h_hat.shape[1]), h_hat[i, 0].size)
            hyper_payload = rc_encode(SymbolStream(h_hat[i].ravel().tolist(), hyper_ids.tolist()),
                                      tables.hyper)
            ids = self._sigma_ids(h_hat[i].astype(np.float32)).ravel()
            main_payload = rc_encode(SymbolStream(q[i].ravel().tolist(), ids.tolist()), tables.gaussian)
            style = None if styles is None else styles[i]
            header = Header(m, self.cfg.image_size, self.cfg.image_size,
                            tuple(q.shape[1:]), tuple(h_hat.shape[1:]), targets[i])
            blob = pack(Container(header, hyper_payload, main_payload, style))
            fixed = 8 * fixed_overhead_bytes(0 if style is None else style.size)
            out.append(Encoded(blob, float(est[i]) + fixed, m))
        return out

    def parse(self, blob: bytes) -> Container:
        c = unpack(blob)
        h = c.header
        if (h.width, h.height) != (self.cfg.image_size, self.cfg.image_size):
            raise CodecError(f"container is {h.width}x{h.height}, model codes "
                             f"{self.cfg.image_size}x{self.cfg.image_size}")
        if h.latent_dims != self.cfg.latent_shape or h.hyper_dims != self.cfg.hyper_shape:
            raise CodecError("container latent dimensions do not match the model")
        if h.target >= self.cfg.num_domains:
            raise CodecError(f"target domain {h.target} outside the model's range")
        if c.has_style and c.style.size != self.cfg.style_dim:
            raise CodecError(f"container style has {c.style.size} values, model uses {self.cfg.style_dim}")
        return c

    def decode_latent(self, blob: bytes) -> tuple[Container, np.ndarray]:
        """Entropy-decode a container to its header and the dequantised latent."""
        c = self.parse(blob)
        tables = self.tables(c.header.mode)
        ch, hh, hw = c.header.hyper_dims
        hyper_ids = np.repeat(np.arange(ch), hh * hw).tolist()
        try:
            h_vals = rc_decode(c.hyper_payload, tables.hyper, hyper_ids)
            h_hat = np.asarray(h_vals, dtype=np.int64).reshape(ch, hh, hw)
            ids = self._sigma_ids(h_hat.astype(np.float32)).ravel().tolist()
            z_vals = rc_decode(c.main_payload, tables.gaussian, ids)
        except ValueError as exc:
            raise CodecError(f"payload decoding failed: {exc}") from exc
        return c, np.asarray(z_vals, dtype=np.float32).reshape(c.header.latent_dims)

    def synthesize(self, z_hat: np.ndarray, mode, styles=None) -> np.ndarray:
        """Decoder network on one latent; with a (K, D_s) style batch, K images."""
        m = Mode.parse(mode)
        with no_grad():
            if m == Mode.A or styles is None or np.ndim(styles) == 1:
                return self.model.nets.decode(Tensor(z_hat), styles, m).data
            k = len(styles)
            z = np.broadcast_to(z_hat, (k,) + z_hat.shape).copy()
            return self.model.nets.decode(Tensor(z), np.asarray(styles, np.float32), m).data

    def decode(self, blob: bytes, style=None) -> np.ndarray:
        """Reconstruct a (C, H, W) image; ``style`` is the receiver-side style, if any."""
        c = self.parse(blob)
        m = c.header.mode
        s = None
        if m == Mode.T:
            if c.has_style:
                s = c.style
            elif style is not None:
                s = np.asarray(style, dtype=np.float32).reshape(-1)
                if s.size != self.cfg.style_dim:
                    raise CodecError(f"style has {s.size} values, model uses {self.cfg.style_dim}")
            else:
                raise CodecError("translation-mode container carries no style; "
                                 "a receiver-side style is required")
        _, z_hat = self.decode_latent(blob)
        return self.synthesize(z_hat, m, s)


def style_batch(model: Model, seeds: np.ndarray, targets) -> np.ndarray:
    """Latent-guided styles for a batch of seeds."""
    with no_grad():
        return model.nets.style_from_latent(Tensor(np.asarray(seeds, np.float32)), targets).data

