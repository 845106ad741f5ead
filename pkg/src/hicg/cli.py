"""Command-line entry point: ``hicg generate|preprocess|train|evaluate|recommend``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import ConfigError, DataError, HICGError
from .config import RunConfig, load_config
from .data import (
    Behavior,
    blind_samples,
    parse_event_log,
    preprocess,
    read_dataset,
    split_sessions,
    write_dataset,
)
from .evaluation import IKNN, SPop, evaluate, report_json
from .model import HICG
from .synthetic import SyntheticSpec, generate_synthetic
from .training import Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("hicg")


# --------------------------------------------------------------------------
# commands


def cmd_generate(spec: SyntheticSpec, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(generate_synthetic(spec))
    return out


def cmd_preprocess(cfg: RunConfig) -> dict:
    if not cfg.raw_input:
        raise ConfigError("raw_input is not set")
    events = []
    malformed = 0
    for adapter, path in cfg.inputs:
        try:
            with open(path, "rb") as fh:
                log_ = parse_event_log(fh, adapter, behaviors=cfg.behavior_list)
        except FileNotFoundError:
            raise DataError(f"raw input not found: {path}") from None
        events.extend(log_)
        malformed += log_.malformed
    ds = preprocess(
        events,
        behaviors=cfg.behavior_list,
        target=cfg.target_behavior,
        mode=cfg.session_mode,
        gap_ms=cfg.gap_ms if cfg.session_mode == "by_gap" else None,
        min_session_len=cfg.min_session_len,
        min_item_freq=cfg.min_item_freq,
        test_window_ms=cfg.test_window_ms,
        fraction=cfg.train_fraction,
        restrict_to_target=cfg.restrict_to_target,
    )
    if not ds.train_sessions:
        raise DataError("no training sessions left after filtering and splitting")
    extra = {
        "adapter": cfg.adapter,
        "n_malformed": malformed,
        "session_mode": cfg.session_mode,
        "session_gap_minutes": cfg.session_gap_minutes,
        "min_session_len": cfg.min_session_len,
        "min_item_freq": cfg.min_item_freq,
        "test_window_days": cfg.test_window_days,
        "train_fraction": cfg.train_fraction,
        "restrict_to_target": cfg.restrict_to_target,
    }
    return write_dataset(ds, cfg.processed_dir, extra)


def validation_split(sessions, fraction: float):
    """Hold out the most recently started ``fraction`` of sessions."""
    ordered = sorted(sessions, key=lambda s: s.start)
    n_val = int(round(len(ordered) * fraction))
    if n_val == 0:
        return ordered, []
    return ordered[:-n_val], ordered[-n_val:]


def run_dir(cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    path = Path(cfg.checkpoint_dir) / f"{stamp}-{cfg.digest()}"
    suffix = 1
    while path.exists():
        path = Path(cfg.checkpoint_dir) / f"{stamp}-{cfg.digest()}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def cmd_train(cfg: RunConfig, out_dir: Path | None = None, type_blind: bool = False):
    """Train per ``cfg``; returns (run directory, history)."""
    from .plotting import plot_training_curves

    ds = read_dataset(cfg.processed_dir)
    hp = cfg.hyperparams()
    train_s, valid_s = validation_split(ds.train_sessions, cfg.validation_fraction)
    train = split_sessions(train_s, ds.target_type, cfg.restrict_to_target)
    valid = split_sessions(valid_s, ds.target_type, cfg.restrict_to_target)
    if not train:
        raise DataError("no training samples")
    n_types = ds.n_types
    if type_blind:
        train, valid = blind_samples(train), blind_samples(valid)
        n_types = 1

    out = Path(out_dir) if out_dir else run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    torch.manual_seed(hp.seed)
    model = HICG(ds.n_items, n_types, hp.dim, hp.steps, hp.dropout)
    trainer = Trainer(model, hp)
    epoch_log = open(out / "epochs.log", "w")
    metrics_log = open(out / "metrics.jsonl", "w")

    def on_epoch(stats, report):
        line = stats.line()
        if report is not None:
            line += " " + report.line().replace("n=", "n_valid=")
        print(line, flush=True)
        epoch_log.write(stats.line() + "\n")
        epoch_log.flush()
        rec = {"epoch": stats.epoch, "l_rec": stats.l_rec, "l_cl": stats.l_cl,
               "l_total": stats.l_total, "secs": stats.secs, "steps": stats.steps}
        if report is not None:
            rec["valid"] = report.summary()
        metrics_log.write(json.dumps(rec) + "\n")
        metrics_log.flush()

    try:
        history = trainer.fit(train, valid or None, hp.epochs, patience=cfg.patience or None, callback=on_epoch)
    finally:
        epoch_log.close()
        metrics_log.close()
    save_checkpoint(model, hp, out / "checkpoint.pt", vocab_checksum=ds.vocab_checksum(),
                    extra={"mode": cfg.mode, "type_blind": type_blind})
    plot_training_curves(history, out / "curves.png")
    return out, history


def cmd_evaluate(cfg: RunConfig, checkpoint, baselines: bool = False, report_path=None) -> dict:
    from .plotting import plot_metrics

    ds = read_dataset(cfg.processed_dir)
    model, hp, payload = load_checkpoint(checkpoint, vocab_checksum=ds.vocab_checksum())
    samples = split_sessions(ds.test_sessions, ds.target_type, cfg.restrict_to_target)
    if payload["extra"].get("type_blind"):
        samples = blind_samples(samples)
    if not samples:
        raise DataError("no test samples")
    blocks = {"hicg": evaluate(model.predict, samples, cfg.ks, batch_size=500)}
    if baselines:
        blocks["s-pop"] = evaluate(SPop(ds.train_sessions, ds.n_items), samples, cfg.ks)
        blocks["iknn"] = evaluate(IKNN(ds.train_sessions, ds.n_items, cfg.iknn_neighbors), samples, cfg.ks)

    report_path = Path(report_path or cfg.report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    run_id = Path(checkpoint).resolve().parent.name
    report_path.write_text(report_json(blocks, run_id, {"checkpoint": str(checkpoint), **_echo(cfg)}) + "\n")
    tsv = metrics_table(blocks)
    report_path.with_suffix(".tsv").write_text(tsv)
    plot_metrics(blocks, report_path.with_suffix(".png"))
    sys.stdout.write(tsv)
    return blocks


def _echo(cfg: RunConfig) -> dict:
    return {line.split(" = ")[0]: line.split(" = ", 1)[1] for line in cfg.to_text().splitlines()}


def metrics_table(blocks) -> str:
    ks = next(iter(blocks.values())).ks
    header = ["model", "n"] + [f"{m}@{k}" for k in ks for m in ("HR", "MRR")]
    rows = ["\t".join(header)]
    for name, rep in blocks.items():
        vals = [name, str(rep.n)] + [f"{v:.6f}" for k in ks for v in (rep.hr[k], rep.mrr[k])]
        rows.append("\t".join(vals))
    return "\n".join(rows) + "\n"


def parse_inline_session(text: str, ds) -> list[Behavior]:
    """``tok[:behavior],tok[:behavior],...``; behavior defaults to the target type."""
    out = []
    for t, part in enumerate(p.strip() for p in text.split(",") if p.strip()):
        token, _, label = part.partition(":")
        label = label or ds.behavior_vocab.token(ds.target_type)
        if token not in ds.item_vocab:
            raise DataError(f"unknown item token {token!r}")
        if label not in ds.behavior_vocab:
            raise DataError(f"unknown behavior {label!r}")
        out.append(Behavior(ds.item_vocab.index(token), ds.behavior_vocab.index(label), t))
    if not out:
        raise DataError("empty session")
    return out


def cmd_recommend(cfg: RunConfig, checkpoint, session: str, k: int = 20, full: bool = False) -> list[tuple[str, float]]:
    from .data import TrainingSample

    ds = read_dataset(cfg.processed_dir)
    model, _, payload = load_checkpoint(checkpoint, vocab_checksum=ds.vocab_checksum())
    prefix = parse_inline_session(session, ds)
    if payload["extra"].get("type_blind"):
        prefix = [Behavior(b.item, 0, b.timestamp) for b in prefix]
    probs = model.predict(TrainingSample(tuple(prefix), 0, 0))
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    if not full:
        order = order[:k]
    return [(ds.item_vocab.token(i), float(probs[i])) for i in order]


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("hicg", "hicg-cl"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hicg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic canonical event file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-items", type=int, default=50)
    p.add_argument("--n-types", type=int, default=2)
    p.add_argument("--n-sessions", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--clusters", type=int, default=1)

    p = sub.add_parser("preprocess", help="raw events -> processed dataset")
    _common(p)
    p.add_argument("--input", help="override raw_input")
    p.add_argument("--out", help="override processed_dir")

    p = sub.add_parser("train", help="train a model on a processed dataset")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="explicit run directory")

    p = sub.add_parser("evaluate", help="HR/MRR of a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baselines", action="store_true", help="also evaluate S-POP and IKNN")
    p.add_argument("--k", help="comma-separated cutoffs, e.g. 5,20")
    p.add_argument("--report", help="override report_path")

    p = sub.add_parser("recommend", help="top-k items for an inline session")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help="item[:behavior],item[:behavior],...")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--full", action="store_true", help="print the whole catalogue")
    return parser


def _config(args, **extra) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), "mode": getattr(args, "mode", None), **extra}
    return load_config(args.config, overrides=overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            spec = SyntheticSpec(n_items=args.n_items, n_behavior_types=args.n_types, n_sessions=args.n_sessions,
                                 min_len=args.min_len, max_len=args.max_len, noise=args.noise,
                                 n_clusters=args.clusters, seed=args.seed)
            print(cmd_generate(spec, args.out))
        elif args.command == "preprocess":
            cfg = _config(args, raw_input=args.input, processed_dir=args.out)
            manifest = cmd_preprocess(cfg)
            print("\n".join(f"{k}={v}" for k, v in manifest.items()))
        elif args.command == "train":
            cfg = _config(args, epochs=args.epochs)
            out, _ = cmd_train(cfg, args.out)
            print(f"run_dir={out}")
        elif args.command == "evaluate":
            cfg = _config(args, eval_ks=args.k)
            cmd_evaluate(cfg, args.checkpoint, args.baselines, args.report)
        elif args.command == "recommend":
            cfg = _config(args)
            for token, score in cmd_recommend(cfg, args.checkpoint, args.session, args.k, args.full):
                print(f"{token}\t{score:.8g}")
    except HICGError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc), "exit_code": DataError.exit_code}),
              file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
