"""Command-line entry points: train, encode, decode, eval, serve, send, data."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .classifier import DomainClassifier
from .codec import Codec, CodecError, style_batch
from .config import ConfigFileError, add_override_flags, collect_overrides, load_config
from .container import ContainerError
from .data import Dataset, DatasetError, generate_dataset, load_dataset
from .evaluation import SweepEntry, rd_sweep
from .imageio import load_png, save_png
from .model import CheckpointError, Model, atomic_write
from .networks import Mode
from .training import ConfigError, TrainConfig, run_training

ENV_CHECKPOINT_DIR = "I2ICODEC_CHECKPOINT_DIR"
DEFAULT_CHECKPOINT = "model.i2p"


class CliError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------

def resolve_checkpoint(value: str | None) -> Path:
    base = os.environ.get(ENV_CHECKPOINT_DIR)
    if value is None:
        if not base:
            raise CliError(f"no --checkpoint given and {ENV_CHECKPOINT_DIR} is not set")
        return Path(base) / DEFAULT_CHECKPOINT
    p = Path(value)
    if not p.exists() and base and not p.is_absolute():
        alt = Path(base) / p
        if alt.exists():
            return alt
    return p


def load_model(value: str | None) -> Model:
    return Model.load(resolve_checkpoint(value))


def read_image(path: str, model: Model) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input image not found: {p}")
    try:
        x = load_png(p, model.cfg.image_channels)
    except OSError as exc:
        raise CliError(f"cannot read image {p}: {exc}") from exc
    if x.shape != model.cfg.image_shape:
        raise CliError(f"image {p} is {x.shape[2]}x{x.shape[1]}, the model codes "
                       f"{model.cfg.image_size}x{model.cfg.image_size}")
    return x


def seed_vector(seed: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


def style_from_args(model: Model, seed: int | None, ref: str | None, target: int) -> np.ndarray | None:
    if seed is not None and ref is not None:
        raise CliError("give either a style seed or a reference image, not both")
    if seed is not None:
        return style_batch(model, seed_vector(seed, model.cfg.seed_dim)[None], [target])[0]
    if ref is not None:
        from .autodiff.tensor import Tensor, no_grad
        x = read_image(ref, model)
        with no_grad():
            return model.nets.style_from_reference(Tensor(x[None]), [target]).data[0]
    return None


def parse_style_source(text: str) -> tuple[str, str | None]:
    if text == "receiver":
        return "receiver", None
    kind, sep, arg = text.partition(":")
    if sep and kind in ("seed", "ref") and arg:
        return kind, arg
    raise argparse.ArgumentTypeError("style source must be 'receiver', 'seed:N' or 'ref:PATH'")


def encode_from_args(args, model: Model) -> tuple[bytes, Mode]:
    mode = Mode.parse(args.mode)
    x = read_image(args.input, model)
    kind, arg = args.style
    if mode == Mode.A:
        if args.target is not None or kind != "receiver":
            raise CliError("mode A takes no target domain or style; the arguments are contradictory")
        return Codec(model).encode(x, mode)[0].blob, mode
    if args.target is None:
        raise CliError("mode T needs --target")
    if not 0 <= args.target < model.cfg.num_domains:
        raise CliError(f"--target {args.target} outside 0..{model.cfg.num_domains - 1}")
    style = None
    if kind == "seed":
        try:
            style = style_from_args(model, int(arg), None, args.target)
        except ValueError as exc:
            raise CliError(f"bad style seed {arg!r}") from exc
    elif kind == "ref":
        style = style_from_args(model, None, arg, args.target)
    enc = Codec(model).encode(x, mode, None if style is None else style[None], [args.target])[0]
    return enc.blob, mode


def dataset_for(cfg: TrainConfig) -> Dataset:
    if cfg.data_dir:
        ds = load_dataset(cfg.data_dir)
        if ds.spec.image_size != cfg.net.image_size:
            raise ConfigError(f"dataset at {cfg.data_dir} has {ds.spec.image_size}px images, "
                              f"network expects {cfg.net.image_size}px")
        return ds
    return generate_dataset(cfg.data, cfg.data_seed)


# -- subcommands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    out = Path(args.out) if args.out else Path(os.environ.get(ENV_CHECKPOINT_DIR) or f"runs/{Path(args.config).stem}")
    ds = dataset_for(cfg)

    def progress(state, reports):
        if args.verbose and (state.iteration % args.verbose == 0):
            print(f"iter {state.iteration}: " + ", ".join(f"{r.mode.name} total={r.total:.4f}" for r in reports),
                  flush=True)
    state = run_training(cfg, ds.train, out, resume=args.resume, until=args.until, progress=progress)
    print(f"trained {state.iteration} iterations; checkpoint {out / 'model.i2p'}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.checkpoint)
    blob, mode = encode_from_args(args, model)
    atomic_write(args.output, blob)
    bpp = 8.0 * len(blob) / model.cfg.image_size ** 2
    print(f"wrote {args.output}: {len(blob)} bytes, {bpp:.4f} bpp, mode {mode.name}")
    return 0


def cmd_decode(args) -> int:
    model = load_model(args.checkpoint)
    p = Path(args.input)
    if not p.is_file():
        raise CliError(f"bitstream not found: {p}")
    blob = p.read_bytes()
    codec = Codec(model)
    c = codec.parse(blob)
    style = None
    if c.header.mode == Mode.T and not c.has_style:
        style = style_from_args(model, args.style_seed, args.style_ref, c.header.target)
        if style is None:
            raise CliError("this translation bitstream carries no style; give --style-seed or --style-ref")
    image = codec.decode(blob, style)
    png = save_png(args.output, image)
    print(f"wrote {args.output} sha256={hashlib.sha256(png).hexdigest()}")
    return 0


def _lambdas_for(ckpt: Path, cfg: TrainConfig) -> tuple[float, float]:
    side = ckpt.parent / "config.json"
    if side.is_file():
        d = json.loads(side.read_text())
        return float(d.get("lambda_t", cfg.lambda_t)), float(d.get("lambda_a", cfg.lambda_a))
    return cfg.lambda_t, cfg.lambda_a


def cmd_eval(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    ds = dataset_for(cfg)
    ckpts = [resolve_checkpoint(c) for c in (args.checkpoint or [None])]
    entries = []
    for c in ckpts:
        lt, la = _lambdas_for(c, cfg)
        entries.append(SweepEntry(c.parent.name or c.stem, Model.load(c), lt, la))
    out = Path(args.out)
    if args.classifier:
        classifier = DomainClassifier.load(args.classifier)
    else:
        classifier = DomainClassifier.create(cfg.net.image_size, cfg.net.num_domains)
        classifier.fit(ds.train.images, ds.train.labels)
        classifier.save(out / "classifier.i2p")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    points, summary = rd_sweep(entries, ds.test, classifier, out, modes=modes, limit=args.limit)
    for row in summary:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    print(f"wrote {len(points)} rows to {out / 'rd_points.csv'}")
    return 0


def _receiver_style(model: Model, args):
    if args.style_seed is None and args.style_ref is None:
        return None
    return lambda target: style_from_args(model, args.style_seed, args.style_ref, target)


def cmd_serve(args) -> int:
    from .transport import Receiver, make_server

    model = load_model(args.checkpoint)
    receiver = Receiver(model, args.out_dir, _receiver_style(model, args))
    server = make_server(args.address, receiver, concurrent=args.concurrent)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port} fingerprint={receiver.fingerprint.hex()}", flush=True)
    try:
        if args.max_sessions:
            for _ in range(args.max_sessions):
                server.handle_request()
        else:
            server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_send(args) -> int:
    from .transport import send

    model = load_model(args.checkpoint)
    blob, mode = encode_from_args(args, model)
    reply = send(args.address, blob, model.fingerprint, mode)
    print(f"status={reply.status.name} digest={reply.digest.hex()} {reply.message}")
    return 0 if reply.ok else 3


def cmd_data(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    ds = generate_dataset(cfg.data, cfg.data_seed, args.out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test images to {args.out}")
    return 0


# -- parser --------------------------------------------------------------------------

def _add_encode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="8-bit PNG image")
    p.add_argument("--checkpoint", help=f"model file (default ${ENV_CHECKPOINT_DIR}/{DEFAULT_CHECKPOINT})")
    p.add_argument("--mode", choices=["A", "T"], default="A")
    p.add_argument("--target", type=int, help="target domain label (mode T)")
    p.add_argument("--style", type=parse_style_source, default=("receiver", None),
                   help="style source for mode T: receiver (default), seed:N or ref:PATH")


def _add_receiver_style_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--style-seed", type=int, help="receiver-side style from this seed")
    p.add_argument("--style-ref", help="receiver-side style from this reference image")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2icodec", description="Unified image codec and translator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training schedule from a YAML config")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default: checkpoint dir or runs/<config name>)")
    p.add_argument("--resume", help="checkpoint to resume from (its .train file must sit beside it)")
    p.add_argument("--until", type=int, help="stop after this many total iterations")
    p.add_argument("--verbose", type=int, default=0, metavar="N", help="print losses every N iterations")
    add_override_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode an image to a bitstream file")
    _add_encode_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream file to a PNG")
    p.add_argument("input")
    p.add_argument("--checkpoint")
    p.add_argument("-o", "--output", required=True)
    _add_receiver_style_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="rate-distortion sweep over checkpoints")
    p.add_argument("config")
    p.add_argument("--checkpoint", action="append", help="repeatable")
    p.add_argument("--out", default="eval")
    p.add_argument("--classifier", help="trained reference classifier (trained on the fly if omitted)")
    p.add_argument("--modes", default="A,T")
    p.add_argument("--limit", type=int, help="evaluate only the first N test images")
    add_override_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="receive and decode bitstreams over TCP")
    p.add_argument("--address", default="127.0.0.1:7878")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", default="received")
    p.add_argument("--concurrent", action="store_true", help="one thread per session")
    p.add_argument("--max-sessions", type=int, default=0, help="exit after N sessions (0 = forever)")
    _add_receiver_style_args(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", help="encode an image and stream it to a receiver")
    p.add_argument("--address", default="127.0.0.1:7878")
    _add_encode_args(p)
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("data", help="write the synthetic dataset as PNG files plus a manifest")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    add_override_flags(p)
    p.set_defaults(func=cmd_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigFileError, ConfigError, CheckpointError, CodecError, ContainerError,
            DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
