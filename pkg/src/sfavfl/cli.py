"""``sfavfl`` command line: train, attack, sweep, audit and synth.

Each command resolves a :class:`~sfavfl.config.RunConfig`, writes its CSV
outputs (and PNG figures unless ``run.plots = false``) into ``--out``, and
finishes with ``manifest.cfg``: the fully resolved configuration, which can be
fed back through ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .attack import SweepRow, attack_point, tradeoff_sweep
from .config import KEYBITS_ENV, RunConfig, resolve
from .data import ParseError, Split, ingest_csv, make_synthetic, train_test_split, write_csv
from .he import CryptoError, CodecError
from .numeric import InputError, ShapeError, StateError
from .protocol import CutLayerMode, Transcript, audit_secrets, session_roles, transcript_audit
from .training import ConfigError, TrainingError, VflModel, train_vfl

logger = logging.getLogger("sfavfl")

METRICS_FIELDS = ("epoch", "train_loss", "train_acc", "test_acc", "wall_time_ms")
AUDIT_FIELDS = ("check", "status", "offending_sequences")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


# ---------------------------------------------------------------- file output


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic_write(path, buf.getvalue())


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: str = "") -> None:
    insecure = " --insecure-test-keys" if min(cfg["he.key_bits"], cfg.attack_key_bits) < 2048 else ""
    header = (
        f"sfavfl {__version__} manifest for '{command}'\n"
        f"rerun: sfavfl {command} --config manifest.cfg --out DIR{insecure}\n"
        f"master seed {cfg['run.seed']}; all other streams derive from it by label"
    )
    if extra:
        header += "\n" + extra
    atomic_write(out / "manifest.cfg", cfg.to_text(header))


def metrics_rows(records, deterministic: bool):
    for r in records:
        wall = 0 if deterministic else int(round(r.wall_time * 1000))
        yield (r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy, wall)


# ---------------------------------------------------------------- data


def load_split(cfg: RunConfig) -> Split:
    if cfg["data.source"] == "synthetic":
        ds = make_synthetic(cfg.synthetic_spec())
        return train_test_split(ds, cfg["data.train_fraction"], cfg["run.seed"])
    return ingest_csv(cfg.dataset_spec())


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    split = load_split(cfg)
    base = cfg.experiment()
    grid = cfg["train.lr_grid"] or [base.learning_rate]
    results = []
    best = None
    for lr in grid:
        config = replace(base, learning_rate=lr)
        records = train_vfl(config, split.train, split.test)
        final = records[-1].test_accuracy if records else float("nan")
        logger.info("lr %g: final test accuracy %.4f", lr, final)
        results.append((lr, final))
        if len(grid) > 1:
            write_rows(out / f"metrics_lr{lr:g}.csv", METRICS_FIELDS, metrics_rows(records, base.deterministic))
        if best is None or final > best[1]:
            best = (lr, final, records)
    lr, final, records = best
    write_rows(out / "metrics.csv", METRICS_FIELDS, metrics_rows(records, base.deterministic))
    if len(grid) > 1:
        write_rows(out / "lr_grid.csv", ("learning_rate", "final_test_acc"), results)
    if cfg["run.plots"]:
        title = f"{base.protocol} height {base.height}, lr {lr:g}"
        plotting.training_curves(records, out / "curves.png", title)
        if len(grid) > 1:
            plotting.lr_grid(results, out / "lr_grid.png")
    print(f"final test accuracy {final:.4f} (lr {lr:g})")
    return EXIT_OK


def _attack_config(cfg: RunConfig):
    return replace(cfg.experiment(), epochs=cfg["attack.victim_epochs"])


def cmd_attack(cfg: RunConfig, out: Path, args) -> int:
    split = load_split(cfg)
    config = _attack_config(cfg)
    rows = attack_point(
        config,
        split,
        cfg.grn(),
        target_acc=cfg["attack.target_acc"],
        attack_train=cfg["attack.train_samples"],
        attack_test=cfg["attack.test_samples"],
        key_bits=cfg.attack_key_bits,
    )
    write_rows(out / "attack.csv", SweepRow.FIELDS, (r.as_tuple() for r in rows))
    for r in rows:
        print(f"{r.protocol} height {r.height} {r.variant}: mse {r.attack_mse:.4f} (random guess {r.baseline_mse:.4f})")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    split = load_split(cfg)
    seeds = cfg["sweep.seeds"] or [cfg["run.seed"]]
    rows = tradeoff_sweep(
        cfg["sweep.heights"],
        split,
        cfg["sweep.protocols"],
        _attack_config(cfg),
        cfg.grn(),
        seeds=seeds,
        target_acc=cfg["attack.target_acc"],
        attack_train=cfg["attack.train_samples"],
        attack_test=cfg["attack.test_samples"],
        key_bits=cfg.attack_key_bits,
        all_variants=cfg["attack.all_variants"],
        jobs=cfg["run.jobs"],
    )
    write_rows(out / "sweep.csv", SweepRow.FIELDS, (r.as_tuple() for r in rows))
    if cfg["run.plots"]:
        plotting.tradeoff(rows, out / "tradeoff.png")
    print(f"{len(rows)} sweep rows written to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, out: Path, args) -> int:
    # mock mode sends plaintext by design, so audit real Paillier unless told otherwise
    if cfg.origin["he.mode"] == "default":
        cfg.set("he.mode", "paillier", "audit")
    config = cfg.experiment()
    if args.transcript:
        transcript = Transcript.load(args.transcript)
        report = transcript_audit(transcript, config.mode)
    else:
        split = load_split(cfg)
        train = split.train
        model = VflModel(
            config, train.n_features, split.n_classes, capture=True, keep_plain_mask=True, record_secrets=True
        )
        bs = cfg["audit.batch_size"]
        for b in range(cfg["audit.batches"]):
            idx = np.arange(b * bs, min((b + 1) * bs, len(train)))
            if idx.size:
                model.train_step(train.x[idx], train.y[idx], config.learning_rate)
        session = model.session
        tmp = out / ".transcript.jsonl.tmp"
        session.transcript.dump(tmp)
        os.replace(tmp, out / "transcript.jsonl")
        secrets = audit_secrets(session) if config.mode is CutLayerMode.SFA_SUM else None
        report = transcript_audit(session.transcript, config.mode, session_roles(session), secrets)
    rows = [
        (name, "pass" if not bad else "fail", " ".join(map(str, bad)))
        for name, bad in report.checks.items()
    ]
    rows += [(name, "skipped", "") for name in report.skipped]
    write_rows(out / "audit.csv", AUDIT_FIELDS, rows)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    ds = make_synthetic(cfg.synthetic_spec())
    path = out / "synthetic.csv"
    tmp = out / ".synthetic.csv.tmp"
    write_csv(ds, tmp)
    os.replace(tmp, path)
    print(f"{len(ds)} rows x {ds.n_features} features written to {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--he", choices=("paillier", "mock"), help="encryption backend (he.mode)")
    common.add_argument("--protocol", choices=("splitnn", "sfa"), help="cut-layer protocol (model.protocol)")
    common.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    common.add_argument("--jobs", type=int, help="parallel sweep workers (run.jobs)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key; repeatable"
    )
    common.add_argument(
        "--insecure-test-keys", action="store_true", help=f"allow {KEYBITS_ENV} below 2048 (tests only)"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sfavfl", description="Split learning with secure forward aggregation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a VFL model and write per-epoch metrics")
    sub.add_parser("attack", parents=[common], help="train a victim and run the feature-reconstruction attack")
    sub.add_parser("sweep", parents=[common], help="accuracy vs reconstruction over bottom heights")
    audit = sub.add_parser("audit", parents=[common], help="record a short run and audit its transcript")
    audit.add_argument("--transcript", metavar="PATH", help="audit an existing transcript file instead")
    sub.add_parser("synth", parents=[common], help="write the synthetic dataset as CSV")
    return parser


def flag_overrides(args) -> dict:
    flags = {
        "run.seed": args.seed,
        "he.mode": args.he,
        "model.protocol": args.protocol,
        "run.out": args.out,
        "run.jobs": args.jobs,
    }
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        key, value = item.split("=", 1)
        flags[key.strip()] = value.strip()
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = resolve(args.config, flag_overrides(args), allow_insecure=args.insecure_test_keys)
        cfg.experiment().validate()
    except ConfigError as exc:
        print(f"sfavfl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"sfavfl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"sfavfl: input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CryptoError, CodecError, InputError, ShapeError, StateError, RuntimeError) as exc:
        print(f"sfavfl: {args.command} failed: {str(exc).splitlines()[0]}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(out, args.command, cfg)
    logger.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
