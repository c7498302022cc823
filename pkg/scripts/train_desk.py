"""Rebuild the desk-scale artifacts used by the acceptance suite.

Trains the three λ configurations, copies each final checkpoint to
``artifacts/desk_<name>/``, trains the reference domain classifier and runs
the rate-distortion sweep into ``artifacts/eval/``.

    python3 scripts/train_desk.py [--only NAME ...] [--skip-train]
"""
import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from i2icodec.classifier import DomainClassifier
from i2icodec.config import load_config
from i2icodec.data import generate_dataset
from i2icodec.evaluation import SweepEntry, rd_sweep
from i2icodec.model import Model
from i2icodec.training import run_training

ROOT = Path(__file__).resolve().parents[1]
RUNS = ("lt01_la15", "lt005_la5", "lt05_la30")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", nargs="*", default=list(RUNS), choices=RUNS)
    ap.add_argument("--runs-dir", default=str(ROOT / "runs"))
    ap.add_argument("--artifacts", default=str(ROOT / "artifacts"))
    ap.add_argument("--skip-train", action="store_true", help="reuse finished runs")
    args = ap.parse_args(argv)
    art = Path(args.artifacts)
    art.mkdir(parents=True, exist_ok=True)

    for name in args.only:
        cfg = load_config(ROOT / "configs" / f"desk_{name}.yaml")
        run_dir = Path(args.runs_dir) / name
        if not args.skip_train:
            ds = generate_dataset(cfg.data, cfg.data_seed)
            t0 = time.time()

            def progress(state, reports, name=name, t0=t0):
                if state.iteration % 100 == 0:
                    parts = " ".join(f"{r.mode.name}:{r.total:.3f}/{r.rate_bpp:.3f}bpp" for r in reports)
                    print(f"{name} {state.iteration} {time.time() - t0:.0f}s {parts}", flush=True)

            run_training(cfg, ds.train, run_dir, progress=progress)
        dest = art / f"desk_{name}"
        dest.mkdir(exist_ok=True)
        for f in ("model.i2p", "config.json", "loss_log.csv"):
            shutil.copy2(run_dir / f, dest / f)

    cfg = load_config(ROOT / "configs" / "desk_lt01_la15.yaml")
    ds = generate_dataset(cfg.data, cfg.data_seed)
    clf_path = art / "classifier.i2p"
    if clf_path.is_file():
        clf = DomainClassifier.load(clf_path)
    else:
        clf = DomainClassifier.create(cfg.net.image_size, cfg.net.num_domains)
        clf.fit(ds.train.images, ds.train.labels)
        clf.save(clf_path)
    print(f"classifier test accuracy {clf.accuracy(ds.test.images, ds.test.labels):.4f}")

    entries = []
    for name in RUNS:
        path = art / f"desk_{name}" / "model.i2p"
        if path.is_file():
            c = json.loads((path.parent / "config.json").read_text())
            entries.append(SweepEntry(name, Model.load(path), c["lambda_t"], c["lambda_a"]))
    _, summary = rd_sweep(entries, ds.test, clf, art / "eval")
    for row in summary:
        print({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
