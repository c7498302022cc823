"""Rate-distortion / rate-translation sweeps over trained checkpoints."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .classifier import DomainClassifier
from .codec import Codec, style_batch
from .data import Split
from .imageio import quantize_image
from .metrics import bpp, diversity_score, msssim, psnr
from .model import CheckpointError, Model, atomic_write
from .networks import Mode
from .training import ConfigError

N_STYLES = 8


@dataclass
class RDPoint:
    checkpoint: str
    lambda_t: float
    lambda_a: float
    mode: str
    image: int
    bpp: float
    estimate_bpp: float
    psnr: float
    msssim: float
    diversity: float
    domain_score: float


RD_FIELDS = tuple(f.name for f in fields(RDPoint))


@dataclass
class SweepEntry:
    label: str
    model: Model
    lambda_t: float = float("nan")
    lambda_a: float = float("nan")


def load_entry(label: str, path: str | os.PathLike, lambda_t=float("nan"), lambda_a=float("nan")) -> SweepEntry:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return SweepEntry(label, Model.load(path), lambda_t, lambda_a)


def translation_targets(labels: np.ndarray, k: int) -> np.ndarray:
    """Each test image is translated into the next domain."""
    return (np.asarray(labels) + 1) % k


def evaluate_autoencoding(codec: Codec, test: Split, classifier: DomainClassifier | None,
                          entry: SweepEntry, seed: int = 0, batch: int = 50) -> list[RDPoint]:
    cfg = codec.cfg
    pixels = cfg.image_size ** 2
    rng = np.random.default_rng(seed)
    points = []
    for start in range(0, len(test), batch):
        x = test.images[start:start + batch]
        encoded = codec.encode(x, Mode.A)
        for j, e in enumerate(encoded):
            i = start + j
            _, z_hat = codec.decode_latent(e.blob)
            styles = style_batch(codec.model, rng.standard_normal((N_STYLES, cfg.seed_dim)),
                                 np.full(N_STYLES, test.labels[i]))
            outs = [quantize_image(codec.synthesize(z_hat, Mode.A, s)) for s in styles]
            rec = outs[0]
            score = float("nan")
            if classifier is not None:
                score = float(classifier.predict(rec)[0] == test.labels[i])
            points.append(RDPoint(entry.label, entry.lambda_t, entry.lambda_a, "A", i,
                                  bpp(len(e.blob), cfg.image_size, cfg.image_size),
                                  e.estimate_bits / pixels, psnr(x[j], rec), msssim(x[j], rec),
                                  diversity_score(outs), score))
    return points


def evaluate_translation(codec: Codec, test: Split, classifier: DomainClassifier | None,
                         entry: SweepEntry, seed: int = 0, batch: int = 50) -> list[RDPoint]:
    """Receiver-side style: the container carries content only; N_STYLES seeds are decoded per image."""
    cfg = codec.cfg
    pixels = cfg.image_size ** 2
    rng = np.random.default_rng(seed)
    targets = translation_targets(test.labels, cfg.num_domains)
    points = []
    for start in range(0, len(test), batch):
        x = test.images[start:start + batch]
        encoded = codec.encode(x, Mode.T, None, targets[start:start + batch])
        for j, e in enumerate(encoded):
            i = start + j
            _, z_hat = codec.decode_latent(e.blob)
            styles = style_batch(codec.model, rng.standard_normal((N_STYLES, cfg.seed_dim)),
                                 np.full(N_STYLES, targets[i]))
            outs = quantize_image(codec.synthesize(z_hat, Mode.T, styles))
            score = float("nan")
            if classifier is not None:
                score = float(np.mean(classifier.predict(outs) == targets[i]))
            points.append(RDPoint(entry.label, entry.lambda_t, entry.lambda_a, "T", i,
                                  bpp(len(e.blob), cfg.image_size, cfg.image_size),
                                  e.estimate_bits / pixels, float("nan"), float("nan"),
                                  diversity_score(list(outs)), score))
    return points


def summarize(points: list[RDPoint]) -> list[dict]:
    groups: dict[tuple, list[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.checkpoint, p.mode), []).append(p)
    rows = []
    for (label, mode), ps in groups.items():
        row = {"checkpoint": label, "mode": mode, "lambda_t": ps[0].lambda_t,
               "lambda_a": ps[0].lambda_a, "images": len(ps)}
        for name in ("bpp", "estimate_bpp", "psnr", "msssim", "diversity", "domain_score"):
            row[name] = float(np.mean([getattr(p, name) for p in ps]))
        row["estimate_error"] = float(np.mean([abs(p.bpp - p.estimate_bpp) / p.bpp for p in ps]))
        rows.append(row)
    return rows


def write_points(points: list[RDPoint], path: str | os.PathLike) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RD_FIELDS)
    for p in points:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(p).values()])
    atomic_write(path, buf.getvalue().encode())


def read_points(path: str | os.PathLike) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(RDPoint(r["checkpoint"], float(r["lambda_t"]), float(r["lambda_a"]), r["mode"],
                           int(r["image"]), *(float(r[k]) for k in RD_FIELDS[5:])))
    return out


def plot_curves(summary: list[dict], out_dir: str | os.PathLike) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written = []
    panels = [("A", "psnr", "PSNR (dB)", "rd_autoencoding.png"),
              ("T", "domain_score", "domain score", "rd_translation.png"),
              ("T", "diversity", "diversity (mean pairwise L1)", "rd_diversity.png")]
    for mode, key, ylabel, fname in panels:
        rows = sorted((r for r in summary if r["mode"] == mode), key=lambda r: r["bpp"])
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.plot([r["bpp"] for r in rows], [r[key] for r in rows], "o-")
        for r in rows:
            lam = r["lambda_a"] if mode == "A" else r["lambda_t"]
            ax.annotate(f"{lam:g}", (r["bpp"], r[key]), textcoords="offset points", xytext=(4, 4))
        ax.set_xlabel("bits per pixel (container)")
        ax.set_ylabel(ylabel)
        ax.set_title(f"mode {mode}")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out / fname
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=100)
        plt.close(fig)
        atomic_write(path, buf.getvalue())
        written.append(path)
    return written


def rd_sweep(entries: list[SweepEntry], test: Split, classifier: DomainClassifier | None,
             out_dir: str | os.PathLike | None = None, modes=("A", "T"), seed: int = 0,
             limit: int | None = None) -> tuple[list[RDPoint], list[dict]]:
    """Encode every test image to a real container per checkpoint and mode, decode, and score."""
    if not entries:
        raise ConfigError("rd_sweep needs at least one checkpoint")
    if limit is not None:
        test = Split(test.images[:limit], test.labels[:limit], test.params[:limit])
    points: list[RDPoint] = []
    for entry in entries:
        if entry.model.cfg.image_shape != test.images.shape[1:]:
            raise CheckpointError(f"checkpoint {entry.label} codes {entry.model.cfg.image_shape}, "
                                  f"test images are {test.images.shape[1:]}")
        codec = Codec(entry.model)
        for m in modes:
            if Mode.parse(m) == Mode.A:
                points += evaluate_autoencoding(codec, test, classifier, entry, seed)
            else:
                points += evaluate_translation(codec, test, classifier, entry, seed)
    summary = summarize(points)
    if out_dir is not None:
        out = Path(out_dir)
        write_points(points, out / "rd_points.csv")
        buf = io.StringIO()
        if summary:
            w = csv.DictWriter(buf, fieldnames=list(summary[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(summary)
        atomic_write(out / "rd_summary.csv", buf.getvalue().encode())
        plot_curves(summary, out)
    return points, summary
