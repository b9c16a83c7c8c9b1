"""Command-line entry point: ``rffkit <command> ...``.

Exit codes: 0 success, 2 invalid input or config, 3 unreadable/unsuitable
data, 4 numerical failure, 1 anything else raised by the library.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import experiment as xp
from . import plots
from .config import ExperimentConfig, load_config
from .errors import DataError, RFFError, SpecError
from .models import load_checkpoint, save_checkpoint
from .pairs import PairDataset, build_pair_dataset
from .synth import read_rffd, write_rffd

log = logging.getLogger("rffkit")


# -- argument helpers ------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _k_range(text: str) -> list[int]:
    """``2..9`` or ``2,3,5``."""
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad K range {text!r}") from None
        if hi_i < lo_i:
            raise argparse.ArgumentTypeError(f"empty K range {text!r}")
        return list(range(lo_i, hi_i + 1))
    return _ints(text)


def _common(sub: bool) -> argparse.ArgumentParser:
    # subcommand copies default to SUPPRESS so a flag given before the command is not reset
    d = {"default": argparse.SUPPRESS} if sub else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)", **d)
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed", **d)
    p.add_argument("--out", metavar="DIR", help="output directory (default: current)", **d)
    p.add_argument("--quiet", action="store_true", help="only print results and errors", **d)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rffkit", description="RF fingerprinting experiments on synthetic emitters.",
                                 parents=[_common(False)])
    common = _common(True)
    cmds = ap.add_subparsers(dest="command", required=True)

    p = cmds.add_parser("synth", parents=[common], help="synthesise a labelled burst dataset")
    p.add_argument("path", nargs="?", help="output .rffd file (default: <out>/dataset.rffd)")

    p = cmds.add_parser("pairs", parents=[common], help="sample an EDA pair file from a dataset")
    p.add_argument("data")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=int)

    p = cmds.add_parser("train", parents=[common], help="train one task and write a checkpoint")
    p.add_argument("data")
    p.add_argument("--task", choices=["SEI", "EDA", "RFEC"])
    p.add_argument("--model", help="model kind")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pairs", help="pair file for EDA (otherwise pairs are generated)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=int)
    p.add_argument("--proportion", type=float, help="fraction of the training split to use")

    p = cmds.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--artifacts", type=lambda s: [a for a in s.split(",") if a],
                   help="comma-separated subset of the task's artifacts")
    p.add_argument("--k", type=_k_range, help="K values for the silhouette curve, e.g. 2..9")

    p = cmds.add_parser("sweep-snr", parents=[common], help="accuracy of a frozen model against SNR")
    p.add_argument("checkpoint")
    p.add_argument("--snr", type=_floats, help="comma-separated SNR values in dB")
    p.add_argument("--data", help="dataset whose metadata defines the population (default: checkpoint)")

    p = cmds.add_parser("osr", parents=[common], help="open-set EDA evaluation on held-out emitters")
    p.add_argument("data")
    p.add_argument("--heldout", type=_ints, help="comma-separated held-out emitter ids")
    p.add_argument("--proportions", type=_floats, help="comma-separated training proportions")
    return ap


# -- shared plumbing ----------------------------------------------------------------------

def _config(args, **overrides) -> ExperimentConfig:
    ov = {"seed": getattr(args, "seed", None), **overrides}
    return load_config(getattr(args, "config", None), ov)


def _out(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _run_id(prefix: str, *parts: str) -> str:
    return f"{prefix}-{hashlib.sha256('|'.join(parts).encode()).hexdigest()[:12]}"


def _load_data(path):
    ds = read_rffd(path)
    return ds, xp.file_hash(path)


def _write_manifest(rep: xp.Reporter, doc: dict) -> None:
    path = rep.path("manifest", "json")
    doc = dict(doc, run_id=rep.run_id, artifacts=sorted(set(rep.written)))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _census(ds) -> str:
    counts = ", ".join(f"{k}:{v}" for k, v in ds.census().items())
    snr = ds.meta.get("snr_db")
    return f"V={ds.V}  bursts={len(ds)}  burst_len={ds.burst_len}  per-class {{{counts}}}  snr_db={snr}"


# -- commands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    path = Path(args.path) if args.path else _out(args) / "dataset.rffd"
    ds = xp.make_dataset(cfg)
    ds.meta["config_hash"] = cfg.digest()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_rffd(path, ds)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    print(f"wrote {path}")
    print(_census(ds))
    return 0


def cmd_pairs(args) -> int:
    cfg = _config(args, **{"task.alpha": args.alpha, "task.gamma": args.gamma})
    ds, _ = _load_data(args.data)
    pairs = build_pair_dataset(ds.labels, cfg.task.alpha, cfg.task.gamma, cfg.seed, source=Path(args.data).name)
    path = _out(args) / f"{Path(args.data).stem}.pairs.json"
    pairs.save(path)
    print(f"wrote {path}: {len(pairs)} pairs, {int(pairs.y.sum())} matched")
    return 0


def cmd_train(args) -> int:
    over = {"task.kind": args.task, "model.kind": args.model, "train.epochs": args.epochs,
            "task.alpha": args.alpha, "task.gamma": args.gamma, "task.proportion": args.proportion}
    cfg = _config(args, **over)
    if args.pairs and cfg.task.kind != "EDA":
        raise SpecError("--pairs only applies to EDA training")
    ds, dhash = _load_data(args.data)
    pairs = PairDataset.load(args.pairs) if args.pairs else None
    rep = xp.Reporter(_out(args), _run_id(cfg.task.kind.lower(), cfg.digest(), dhash,
                                          xp.file_hash(args.pairs) if args.pairs else ""))
    out = xp.train_experiment(cfg, ds, pairs, log=log.info)
    out.model.meta["dataset_hash"] = dhash
    out.model.meta["config_hash"] = cfg.digest()
    pair_files = {}
    for name, ps in out.pairs.items():
        p = rep.path(f"pairs-{name}", "json")
        ps.save(p)
        pair_files[name] = p.name
    save_checkpoint(out.model, rep.path("checkpoint", "json"))
    xp.history_artifacts(rep, out.result)
    _write_manifest(rep, {
        "command": "train", "config": cfg.canonical(), "config_hash": cfg.digest(),
        "dataset": str(args.data), "dataset_hash": dhash, "pairs": pair_files or None,
        "pair_file": str(args.pairs) if args.pairs else None,
        "best_epoch": out.result.history.best_epoch, "metrics": out.metrics,
    })
    h = out.result.history
    print(f"run {rep.run_id}: best epoch {h.best_epoch} (valid loss {h.best_valid_loss:.6g})")
    print("  " + "  ".join(f"{k}={v:.4f}" for k, v in out.metrics.items() if isinstance(v, float)))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    ds, dhash = _load_data(args.data)
    arts = args.artifacts if args.artifacts is not None else cfg.eval.artifacts
    ks = args.k or cfg.eval.ks
    chash = xp.file_hash(args.checkpoint)
    rep = xp.Reporter(_out(args), _run_id("eval", chash, dhash, ",".join(arts or []), ",".join(map(str, ks))))
    metrics = xp.evaluate(model, ds, rep, arts, ks, cfg.seed, cfg.eval.msp_thresholds, dhash)
    _write_manifest(rep, {"command": "eval", "checkpoint": str(args.checkpoint), "checkpoint_hash": chash,
                          "dataset": str(args.data), "dataset_hash": dhash, "config_hash": cfg.digest(),
                          "best_epoch": model.meta.get("best_epoch"), "metrics": metrics})
    print(f"run {rep.run_id}: " + "  ".join(f"{k}={v:.4f}" for k, v in metrics.items() if isinstance(v, float)))
    return 0


def cmd_sweep_snr(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    snrs = args.snr if args.snr is not None else cfg.eval.snr
    if not snrs:
        raise SpecError("empty SNR list")
    meta = None
    if args.data:
        ds = read_rffd(args.data)
        meta = dict(ds.meta, emitters=[s.to_dict() for s in ds.specs])
    chash = xp.file_hash(args.checkpoint)
    rep = xp.Reporter(_out(args), _run_id("snr", chash, ",".join(map(repr, snrs)), str(args.data)))
    rows = xp.sweep(model, snrs, meta=meta)
    rep.csv("snr", ["snr_db", "accuracy"], rows)
    plots.lines(rep.path("snr", "svg"), [r[0] for r in rows], {"accuracy": [r[1] for r in rows]},
                "accuracy vs SNR", "SNR (dB)", "accuracy")
    _write_manifest(rep, {"command": "sweep-snr", "checkpoint": str(args.checkpoint), "checkpoint_hash": chash,
                          "best_epoch": model.meta.get("best_epoch"),
                          "metrics": {repr(s): a for s, a in rows}})
    for s, a in rows:
        print(f"{s:6.1f} dB  accuracy {a:.4f}")
    return 0


def cmd_osr(args) -> int:
    cfg = _config(args, **{"task.kind": "EDA", "osr.heldout": args.heldout,
                           "osr.proportions": args.proportions})
    ds, dhash = _load_data(args.data)
    base = _out(args)
    run_id = _run_id("osr", cfg.digest(), dhash)
    runs = xp.osr_experiment(cfg, ds, cfg.osr.heldout, cfg.osr.proportions, log=log.info)
    summary = []
    for r in runs:
        rep = xp.Reporter(base / f"{run_id}.p{r.proportion:g}", run_id)
        save_checkpoint(r.outcome.model, rep.path("checkpoint", "json"))
        xp.history_artifacts(rep, r.outcome.result)
        row = xp.osr_artifacts(rep, r)
        _write_manifest(rep, {"command": "osr", "config": cfg.canonical(), "config_hash": cfg.digest(),
                              "dataset": str(args.data), "dataset_hash": dhash,
                              "known": r.outcome.model.meta["known_labels"],
                              "heldout": r.outcome.model.meta["heldout_labels"],
                              "best_epoch": row["best_epoch"], "metrics": row})
        summary.append(row)
        print(f"p={r.proportion:g}: held-out AUC {row['auc']:.4f}  accuracy {row['accuracy']:.4f}"
              f"  -> {rep.dir}")
    xp.write_rows(base / f"{run_id}.summary.csv", ["proportion", "auc", "accuracy", "threshold", "best_epoch"],
                  [(s["proportion"], s["auc"], s["accuracy"], s["threshold"], s["best_epoch"]) for s in summary])
    return 0


COMMANDS = {"synth": cmd_synth, "pairs": cmd_pairs, "train": cmd_train, "eval": cmd_eval,
            "sweep-snr": cmd_sweep_snr, "osr": cmd_osr}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    if not log.handlers:
        log.addHandler(logging.StreamHandler(sys.stdout))
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except RFFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
