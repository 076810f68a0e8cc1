"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical abort. Progress goes to standard error; artifacts are only
written inside ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from .config import config_to_text, load_config
from .data import load_manifest, split_train_val, synth_generate
from .errors import DicovaError, NumericalAbort
from .eval import PredictionSet, ensemble_average, prediction_auc, roc_curve
from .harness import cross_validate, featurize, fine_tune, predict, train_model
from .nn.checkpoint import save_checkpoint

log = logging.getLogger("dicovanet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3

LOSS_FLAGS = {"ce": "cross_entropy", "focal": "focal"}
AUGMENT_FLAGS = {"none": "none", "dup": "duplicate", "gauss": "gaussian"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file (overrides the defaults)")
    common.add_argument("--out", metavar="DIR", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, metavar="N", help="master seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--manifest", metavar="CSV", required=True)
    training.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    training.add_argument("--augment", choices=sorted(AUGMENT_FLAGS))
    training.add_argument("--sigma", type=float, metavar="X", help="Gaussian augmentation std")
    training.add_argument("--lr", type=float, metavar="X", help="learning rate")
    training.add_argument("--epochs", type=int, metavar="N")
    training.add_argument("--freeze", metavar="PREFIX[,PREFIX...]", help="parameter name prefixes to freeze")
    training.add_argument("--cache", metavar="DIR", help="spectrogram cache directory")

    parser = _Parser(prog="dicovanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic two-class corpus")
    p.add_argument("--negatives", type=int, default=130)
    p.add_argument("--positives", type=int, default=10)
    p.add_argument("--folds", type=int, default=5, metavar="K")

    p = sub.add_parser("featurize", parents=[common], help="cache spectrograms for a manifest")
    p.add_argument("--manifest", metavar="CSV", required=True)

    for name, text in (("train", "train one model on all folds but --fold"),
                       ("fine-tune", "continue training from --init")):
        p = sub.add_parser(name, parents=[common, training], help=text)
        p.add_argument("--fold", type=int, default=1, help="held-out validation fold")
        p.add_argument("--init", metavar="CHECKPOINT", required=name == "fine-tune")

    p = sub.add_parser("cross-validate", parents=[common, training], help="one run per held-out fold")
    p.add_argument("--folds", type=int, metavar="K", help="use folds 1..K (default: all)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("predict", parents=[common], help="score a manifest with a checkpoint")
    p.add_argument("--manifest", metavar="CSV", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--cache", metavar="DIR")

    p = sub.add_parser("evaluate", parents=[common], help="AUC of a labelled prediction CSV")
    p.add_argument("--predictions", metavar="CSV", required=True)

    p = sub.add_parser("ensemble", parents=[common], help="average prediction CSVs")
    p.add_argument("--members", metavar="FILE[,FILE...]", required=True, type=_csv_list)
    return parser


# --------------------------------------------------------------------------
# helpers


def _out_dir(args, required=True):
    if args.out is None:
        if required:
            raise UsageError("--out is required for this command")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


def _require_file(path, what):
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _resolve_config(args):
    _require_file(args.config, "config file")
    _require_file(getattr(args, "init", None), "checkpoint")
    cfg = load_config(args.config)
    top = {}
    if args.seed is not None:
        top["master_seed"] = args.seed
    if getattr(args, "loss", None):
        top["loss"] = LOSS_FLAGS[args.loss]
    if getattr(args, "lr", None) is not None:
        top["lr"] = args.lr
    if getattr(args, "epochs", None) is not None:
        top["epochs"] = args.epochs
    if getattr(args, "freeze", None) is not None:
        top["freeze_prefixes"] = tuple(_csv_list(args.freeze))
    if getattr(args, "init", None):
        top["init_checkpoint"] = args.init
    aug = {}
    if getattr(args, "augment", None):
        aug["method"] = AUGMENT_FLAGS[args.augment]
    if getattr(args, "sigma", None) is not None:
        aug["noise_sigma"] = args.sigma
    if aug:
        top["augment"] = replace(cfg.augment, **aug)
    return cfg.with_(**top) if top else cfg


def _read_manifest(path):
    _require_file(path, "manifest")
    path = Path(path)
    return load_manifest(path.read_text(encoding="utf-8")), path.parent


def _summary(out: Path, command, cfg, extra=()):
    lines = [f"command={command}", f"config_digest={cfg.digest()}", f"seed={cfg.master_seed}"]
    lines += [f"{k}={v}" for k, v in extra]
    _write(out / "run.summary", "\n".join(lines) + "\n")
    _write(out / "config.ini", config_to_text(cfg))


def _write_run(out: Path, rec, ckpt, preds):
    _write(out / "history.csv", rec.history_csv())
    (out / "checkpoint.dcvn").write_bytes(save_checkpoint(ckpt))
    _write(out / "predictions.csv", preds.to_csv())
    _write(out / "roc.csv", roc_curve(preds.scores, preds.labels).to_csv())


# --------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args):
    out = _out_dir(args)
    cfg = _resolve_config(args)
    entries = synth_generate(args.negatives, args.positives, cfg.master_seed, cfg.dsp, out,
                             n_folds=args.folds)
    log.info("wrote %d clips and manifest.csv to %s", len(entries), out)
    return EXIT_OK


def cmd_featurize(args):
    out = _out_dir(args)
    cfg = _resolve_config(args)
    entries, root = _read_manifest(args.manifest)
    featurize(entries, root, cfg.dsp, cache_dir=out)
    log.info("cached %d spectrograms in %s", len(entries), out)
    return EXIT_OK


def _train_like(args, tune):
    out = _out_dir(args)
    cfg = _resolve_config(args)
    entries, root = _read_manifest(args.manifest)
    train, val = split_train_val(entries, args.fold)
    feats = featurize(entries, root, cfg.dsp, cache_dir=args.cache)
    if tune:
        rec, ckpt = fine_tune(cfg.init_checkpoint, train, val, cfg, feats)
    else:
        rec, ckpt = train_model(train, val, cfg, feats)
    preds = predict(ckpt, val, cfg.dsp, features=feats)
    _write_run(out, rec, ckpt, preds)
    _summary(out, args.command, cfg, [("fold", args.fold), ("best_epoch", rec.best_epoch),
                                      ("best_auc", repr(rec.best_auc))])
    log.info("best epoch %d, validation AUC %.4f", rec.best_epoch, rec.best_auc)
    return EXIT_OK


def cmd_cross_validate(args):
    out = _out_dir(args)
    cfg = _resolve_config(args)
    entries, root = _read_manifest(args.manifest)
    folds = None if args.folds is None else range(1, args.folds + 1)
    feats = featurize(entries, root, cfg.dsp, cache_dir=args.cache)
    results = cross_validate(entries, cfg, feats, folds=folds, workers=args.workers)
    rows = ["fold,best_epoch,best_auc"]
    for fold, rec, ckpt in results:
        _, val = split_train_val(entries, fold)
        fold_dir = out / f"fold{fold}"
        fold_dir.mkdir(exist_ok=True)
        _write_run(fold_dir, rec, ckpt, predict(ckpt, val, cfg.dsp, features=feats))
        rows.append(f"{fold},{rec.best_epoch},{rec.best_auc!r}")
    mean = statistics.fmean(rec.best_auc for _, rec, _ in results)
    _write(out / "folds.csv", "\n".join(rows) + "\n")
    _summary(out, args.command, cfg, [("folds", ",".join(str(f) for f, _, _ in results)),
                                      ("mean_auc", repr(mean))])
    log.info("mean validation AUC over %d folds: %.4f", len(results), mean)
    return EXIT_OK


def cmd_predict(args):
    out = _out_dir(args)
    cfg = _resolve_config(args)
    _require_file(args.checkpoint, "checkpoint")
    entries, root = _read_manifest(args.manifest)
    feats = featurize(entries, root, cfg.dsp, cache_dir=args.cache)
    preds = predict(args.checkpoint, entries, cfg.dsp, features=feats)
    _write(out / "predictions.csv", preds.to_csv())
    _summary(out, args.command, cfg, [("checkpoint", args.checkpoint)])
    return EXIT_OK


def _read_predictions(path):
    _require_file(path, "prediction file")
    return PredictionSet.from_csv(Path(path).read_text(encoding="utf-8"))


def cmd_evaluate(args):
    preds = _read_predictions(args.predictions)
    value = prediction_auc(preds)
    print(f"auc {value:.16f}")
    out = _out_dir(args, required=False)
    if out is not None:
        _write(out / "roc.csv", roc_curve(preds.scores, preds.labels).to_csv())
    return EXIT_OK


def cmd_ensemble(args):
    out = _out_dir(args)
    members = [_read_predictions(p) for p in args.members]
    ens = ensemble_average(members)
    _write(out / "predictions.csv", ens.to_csv())
    lines = ["command=ensemble", f"members={','.join(args.members)}"]
    if ens.labels is not None and len(set(ens.labels.tolist())) == 2:
        value = prediction_auc(ens)
        lines.append(f"auc={value!r}")
        print(f"auc {value:.16f}")
    _write(out / "run.summary", "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "featurize": cmd_featurize,
    "train": lambda a: _train_like(a, tune=False),
    "fine-tune": lambda a: _train_like(a, tune=True),
    "cross-validate": cmd_cross_validate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dicovanet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"dicovanet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (DicovaError, ValueError, OSError) as exc:
        print(f"dicovanet: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
