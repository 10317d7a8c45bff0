"""Command-line pipeline: gen-data, train-rl, train-sdl, labels-train, labels-predict, eval.

Stages talk to each other only through files. Every stage writes the fully
resolved configuration (``config.toml``) and ``run.json`` next to its outputs.
Exit codes: 0 success, 1 usage error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import zlib
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomlkit

from . import __version__
from .errors import DivergenceError, FormatError
from .labeler import (HashingEncoder, generate_pairs, label_manifest, read_label_map, read_reports,
                      reports_to_impressions, synthetic_corpus, templated_impression, train_encoder,
                      write_label_map, write_reports)
from .models import save_checkpoint
from .phantom import PRESETS, generate_dataset, load_split, read_manifest
from .rl import QLearningSpec, read_metrics_csv, train_rl, write_metrics_csv
from .sdl import SdlTrainConfig, predict_sdl, train_sdl, write_sdl_metrics_csv
from .stats import METHODS, compare

log = logging.getLogger("volq")

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"preset": "desk", "seed": 0, "train_normal": 40, "train_tumor": 50,
             "test_normal": 40, "test_tumor": 21, "corpus_per_class": 45},
    "rl": {"episodes": 145, "test_every": 10, "batch": 24, "lr": 1e-4, "gamma": 0.99,
           "buffer": 15000, "seed": 0},
    "sdl": {"epochs": 100, "batch": 24, "lr": 1e-4, "seed": 0},
    "nlp": {"epochs": 20, "lr": 1e-2, "margin": 0.5, "dim": 64, "buckets": 512, "seed": 0},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def resolve(section: str, args: argparse.Namespace) -> dict[str, Any]:
    """Flag > config file > built-in default, per key."""
    out = dict(DEFAULTS[section])
    if getattr(args, "config", None):
        doc = tomlkit.parse(Path(args.config).read_text()).unwrap()
        unknown = set(doc.get(section, {})) - set(out)
        if unknown:
            raise UsageError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        out.update(doc.get(section, {}))
    for key in out:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def version_string() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def record_run(out: Path, command: str, section: str, cfg: dict[str, Any], argv: Sequence[str],
               extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = tomlkit.document()
    doc.add(section, cfg)
    (out / "config.toml").write_text(tomlkit.dumps(doc))
    info = {"command": command, "seed": cfg.get("seed"), "version": version_string(),
            "argv": list(argv), **(extra or {})}
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n")


def _write_predictions(path: Path, ids, labels, preds) -> None:
    path.write_text("".join(json.dumps({"id": i, "label": int(l), "prediction": int(p)}) + "\n"
                            for i, l, p in zip(ids, labels, preds)))


def _read_predictions(path: str | Path) -> dict[str, tuple[int, int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            out[str(obj["id"])] = (int(obj["label"]), int(obj["prediction"]))
    return out


def _load_splits(manifest: str, labels_path: str | None):
    train, test = load_split(manifest, "train"), load_split(manifest, "test")
    if labels_path:
        labels = read_label_map(labels_path)
        train = train.with_labels(labels)
        if len(test):
            test = test.with_labels(labels)
        log.info("labels taken from %s", labels_path)
    return train, test


# subcommands -------------------------------------------------------------------

def cmd_gen_data(args, argv) -> None:
    cfg = resolve("data", args)
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; choose from {', '.join(PRESETS)}")
    out = Path(args.out)
    pconf = replace(PRESETS[cfg["preset"]], rng_seed=int(cfg["seed"]))
    counts = {"train": {0: cfg["train_normal"], 1: cfg["train_tumor"]},
              "test": {0: cfg["test_normal"], 1: cfg["test_tumor"]}}
    entries = generate_dataset(pconf, out, counts)
    rng_seed = int(cfg["seed"])
    # one unlabelled impression per volume, as a report archive would provide
    reports = []
    for e in entries:
        rng = np.random.default_rng([rng_seed, zlib.crc32(e.id.encode())])
        reports.append({"id": e.id, "impression": templated_impression(e.label, rng)})
    write_reports(reports, out / "reports.jsonl")
    corpus = synthetic_corpus(int(cfg["corpus_per_class"]), seed=rng_seed + 1)
    write_reports(({"id": c.id, "impression": c.text, "label": c.label} for c in corpus),
                  out / "corpus.jsonl")
    record_run(out, "gen-data", "data", cfg, argv, {"dims": list(pconf.out_dims), "volumes": len(entries)})
    log.info("wrote %d volumes of %s to %s", len(entries), pconf.out_dims, out)


def cmd_train_rl(args, argv) -> None:
    cfg = resolve("rl", args)
    train, test = _load_splits(args.manifest, args.labels)
    spec = QLearningSpec(gamma=cfg["gamma"], episodes=int(cfg["episodes"]), batch=int(cfg["batch"]),
                         test_every=int(cfg["test_every"]), lr=float(cfg["lr"]),
                         buffer_capacity=int(cfg["buffer"]))
    out = Path(args.out)
    record_run(out, "train-rl", "rl", cfg, argv, {"manifest": str(args.manifest), "labels": args.labels})
    res = train_rl(train, test, spec, seed=int(cfg["seed"]))
    save_checkpoint(out / "dqn.ckpt", res.net)
    write_metrics_csv(res.metrics, out / "metrics.csv")
    if res.final_eval is not None:
        ev = res.final_eval
        _write_predictions(out / "predictions.jsonl", ev.ids, ev.labels, ev.predictions)
        log.info("final test accuracy %.4f", ev.accuracy)


def cmd_train_sdl(args, argv) -> None:
    cfg = resolve("sdl", args)
    train, test = _load_splits(args.manifest, args.labels)
    conf = SdlTrainConfig(epochs=int(cfg["epochs"]), batch=int(cfg["batch"]), lr=float(cfg["lr"]),
                          seed=int(cfg["seed"]))
    out = Path(args.out)
    record_run(out, "train-sdl", "sdl", cfg, argv, {"manifest": str(args.manifest), "labels": args.labels})
    res = train_sdl(train, conf)
    save_checkpoint(out / "sdl.ckpt", res.net)
    write_sdl_metrics_csv(res.history, out / "sdl_metrics.csv")
    log.info("final train accuracy %.4f", res.history[-1].train_accuracy)
    if len(test):
        ev = predict_sdl(res.net, test)
        _write_predictions(out / "predictions.jsonl", ev.ids, ev.labels, ev.predictions)
        log.info("test accuracy %.4f", ev.accuracy)


def cmd_labels_train(args, argv) -> None:
    cfg = resolve("nlp", args)
    impressions = reports_to_impressions(read_reports(args.reports))
    pairs = generate_pairs(impressions)
    same = sum(p.same_class for p in pairs)
    log.info("%d pairs (%d same, %d different) from %d impressions",
             len(pairs), same, len(pairs) - same, len(impressions))
    enc = HashingEncoder(dim=int(cfg["dim"]), buckets=int(cfg["buckets"]), seed=int(cfg["seed"]))
    losses = train_encoder(enc, impressions, pairs, epochs=int(cfg["epochs"]), margin=float(cfg["margin"]),
                           lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    out = Path(args.out)
    record_run(out, "labels-train", "nlp", cfg, argv, {"pairs": len(pairs)})
    enc.save(out / "encoder.ckpt")
    write_reports(({"id": i.id, "impression": i.text, "label": i.label} for i in impressions),
                  out / "refs.jsonl")
    with open(out / "encoder_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(losses, 1))


def cmd_labels_predict(args, argv) -> None:
    enc_path = Path(args.encoder)
    enc = HashingEncoder.load(enc_path)
    refs_path = Path(args.refs) if args.refs else enc_path.parent / "refs.jsonl"
    refs = reports_to_impressions(read_reports(refs_path))
    reports = read_reports(args.reports)
    ids = [e.id for e in read_manifest(args.manifest)] if args.manifest else None
    labels = label_manifest(enc, refs, reports, ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_label_map(labels, out)
    low = sum(p.low_confidence for p in labels.values())
    log.info("labelled %d reports (%d low-confidence) -> %s", len(labels), low, out)


def cmd_eval(args, argv) -> None:
    a, b = _read_predictions(args.a), _read_predictions(args.b)
    if set(a) != set(b):
        only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
        raise ValueError(f"prediction files cover different ids; only in A: {only_a}; only in B: {only_b}")
    ids = sorted(a)
    conflicts = [i for i in ids if a[i][0] != b[i][0]]
    if conflicts:
        raise ValueError(f"true labels disagree between files for: {conflicts}")
    report = compare([a[i][0] for i in ids], [a[i][1] for i in ids], [b[i][1] for i in ids], args.method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    log.info("A %.4f vs B %.4f, b=%d c=%d, p=%.3g", report["accuracy_a"], report["accuracy_b"],
             report["b"], report["c"], report["p_value"])
    if args.metrics:
        rows = [r for r in read_metrics_csv(args.metrics) if r.test_accuracy is not None]
        curve = Path(args.curve) if args.curve else out.with_name("accuracy_curve.csv")
        with open(curve, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "test_accuracy"])
            w.writerows((r.episode, repr(r.test_accuracy)) for r in rows)


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate phantom volumes, manifest and reports")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("train-rl", help="train the Deep-Q classifier")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--labels", help="label map JSONL overriding manifest labels")
    r.add_argument("--episodes", type=int)
    r.add_argument("--test-every", dest="test_every", type=int)
    r.add_argument("--batch", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.set_defaults(func=cmd_train_rl)

    s = sub.add_parser("train-sdl", help="train the supervised baseline")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_train_sdl)

    lt = sub.add_parser("labels-train", help="fit the sentence encoder on labelled impressions")
    lt.add_argument("--reports", required=True)
    lt.add_argument("--out", required=True)
    lt.add_argument("--epochs", type=int)
    lt.add_argument("--lr", type=float)
    lt.add_argument("--margin", type=float)
    lt.add_argument("--seed", type=int)
    lt.add_argument("--config")
    lt.set_defaults(func=cmd_labels_train)

    lp = sub.add_parser("labels-predict", help="label report impressions with a trained encoder")
    lp.add_argument("--encoder", required=True)
    lp.add_argument("--refs", help="labelled reference impressions (default: refs.jsonl beside the encoder)")
    lp.add_argument("--reports", required=True)
    lp.add_argument("--manifest", help="require every report id to be a volume in this manifest")
    lp.add_argument("--out", required=True)
    lp.set_defaults(func=cmd_labels_predict)

    e = sub.add_parser("eval", help="compare two prediction files with McNemar's test")
    e.add_argument("--a", required=True, help="predictions of classifier A (e.g. RL)")
    e.add_argument("--b", required=True, help="predictions of classifier B (e.g. SDL)")
    e.add_argument("--method", choices=METHODS, default="exact")
    e.add_argument("--metrics", help="RL metrics CSV to turn into an accuracy curve")
    e.add_argument("--curve")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"volq: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"volq: training diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FormatError, KeyError) as exc:
        print(f"volq: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
