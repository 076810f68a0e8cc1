"""Seeded training, fine-tuning, cross-validation and inference."""

from __future__ import annotations

import logging
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import augment_minority, split_train_val
from .dsp import DspConfig, decode_spectrogram, encode_spectrogram, featurize_wav
from .errors import CheckpointError, ConfigError, DecodeError, NumericalAbort
from .eval import PredictionSet, auc
from .loss import compute_loss
from .nn.checkpoint import Checkpoint, check_compatible, load_checkpoint
from .nn.network import MiniResNet, set_frozen
from .optim import Adam

log = logging.getLogger(__name__)

Streams = namedtuple("Streams", ["init", "order", "augment"])

EVAL_CHUNK = 64


def derive_streams(master_seed, *key):
    """Three independent generators (init, batch order, augmentation).

    They are spawned from one SeedSequence keyed by the master seed plus
    any extra key (e.g. the fold number), so consuming one stream never
    shifts another.
    """
    root = np.random.SeedSequence([int(master_seed), *(int(k) for k in key)])
    return Streams(*(np.random.default_rng(child) for child in root.spawn(3)))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class RunRecord:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float = float("nan")
    checkpoint_path: str | None = None
    config_digest: str = ""
    seed: int = 0
    key: tuple = ()

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_auc"]
        lines += [f"{h.epoch},{h.train_loss!r},{h.val_auc!r}" for h in self.history]
        return "\n".join(lines) + "\n"

    def summary_line(self) -> str:
        key = ",".join(str(k) for k in self.key)
        return (f"best_epoch={self.best_epoch} best_auc={self.best_auc!r} seed={self.seed} "
                f"key={key} config={self.config_digest}")


# --------------------------------------------------------------------------
# features


def featurize(entries, root, dsp: DspConfig, cache_dir=None):
    """Spectrogram image per recording id.

    With ``cache_dir`` set, images are read from / written to
    ``<cache_dir>/<id>.dspc`` records.
    """
    root = Path(root)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    out = {}
    for e in entries:
        cached = cache / f"{e.recording_id}.dspc" if cache is not None else None
        if cached is not None and cached.exists():
            out[e.recording_id] = decode_spectrogram(cached.read_bytes(), e.recording_id)
            continue
        try:
            raw = (root / e.path).read_bytes()
            img = featurize_wav(raw, dsp, e.recording_id)
        except (OSError, DecodeError, ValueError) as exc:
            raise DecodeError(f"recording {e.recording_id!r} ({e.path}): {exc}") from exc
        if cached is not None:
            cached.write_bytes(encode_spectrogram(img))
        out[e.recording_id] = img
    return out


def _stack(images):
    return np.stack([img.values for img in images])[:, None, :, :]


def _features_for(entries, features):
    missing = [e.recording_id for e in entries if e.recording_id not in features]
    if missing:
        raise ConfigError(f"no features for recordings: {', '.join(missing[:5])}")
    return [features[e.recording_id] for e in entries]


def predict_array(model: MiniResNet, batch, chunk=EVAL_CHUNK):
    """Eval-mode probabilities, computed in fixed-size chunks."""
    out = [model.forward(batch[i:i + chunk], "eval") for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------
# training


def _augment_seed(cfg: TrainConfig, stream):
    draw = int(stream.integers(0, 2**32))
    return int(np.random.SeedSequence([cfg.augment.seed, draw]).generate_state(1)[0])


def _run(train, val, cfg: TrainConfig, features, key, model: MiniResNet):
    if not train:
        raise ConfigError("training set is empty")
    if not val:
        raise ConfigError("validation set is empty")
    val_labels = np.array([e.label for e in val])
    if len(set(val_labels.tolist())) < 2:
        raise ConfigError("validation set must contain both classes for AUC")

    streams = derive_streams(cfg.master_seed, *key)
    if model is None:
        model = MiniResNet(cfg.network, rng=streams.init)
    if cfg.freeze_prefixes:
        set_frozen(model.params, cfg.freeze_prefixes)
    opt = Adam(lr=cfg.lr)
    opt.init_moments(model.params)

    aug_cfg = replace(cfg.augment, seed=_augment_seed(cfg, streams.augment))
    pairs = augment_minority([(img, e.label) for img, e in zip(_features_for(train, features), train)],
                             aug_cfg)
    x_train = _stack([img for img, _ in pairs])
    y_train = np.array([lab for _, lab in pairs], dtype=np.float64)
    x_val = _stack(_features_for(val, features))
    model.check_input(x_val)

    digest = cfg.digest()
    record = RunRecord(config_digest=digest, seed=cfg.master_seed, key=tuple(key))
    best = None
    trainable = any(not p.frozen for p in model.params.values())
    for epoch in range(1, cfg.epochs + 1):
        order = streams.order.permutation(len(y_train))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            probs = model.forward(x_train[idx], "train")
            loss, dprobs = compute_loss(cfg.loss, probs, y_train[idx], cfg.focal)
            if not np.isfinite(loss):
                raise NumericalAbort(epoch, b, loss)
            losses.append(loss)
            if trainable:
                model.backward(dprobs)
                opt.step(model.params)
        val_auc = auc(predict_array(model, x_val), val_labels)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        record.history.append(EpochStats(epoch, train_loss, val_auc))
        log.info("key=%s seed=%d epoch %d/%d loss %.6f val_auc %.4f",
                 key, cfg.master_seed, epoch, cfg.epochs, train_loss, val_auc)
        if best is None or val_auc > record.best_auc:
            record.best_epoch, record.best_auc = epoch, val_auc
            best = Checkpoint.from_model(model, opt, {
                "seed": cfg.master_seed, "epoch": epoch, "config_digest": digest,
                "key": list(key), "val_auc": val_auc,
            })
    return record, best


def train_model(train, val, cfg: TrainConfig, features, key=()):
    """Train from a fresh initialization; returns (RunRecord, best Checkpoint)."""
    return _run(train, val, cfg, features, key, None)


def _as_checkpoint(init):
    if isinstance(init, Checkpoint):
        return init
    if isinstance(init, (bytes, bytearray)):
        return load_checkpoint(init)
    try:
        return load_checkpoint(Path(init).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {init}: {exc}") from exc


def fine_tune(init_checkpoint, train, val, cfg: TrainConfig, features, key=()):
    """Continue training from a checkpoint with ``cfg.freeze_prefixes`` frozen.

    Starts from the stored weights and running statistics with a fresh
    optimizer; frozen flags stored in the checkpoint are not carried over.
    """
    ckpt = _as_checkpoint(init_checkpoint)
    check_compatible(ckpt, cfg.network)
    model = ckpt.to_model(cfg.network)
    for p in model.params.values():
        p.frozen = False
    return _run(train, val, cfg, features, key, model)


def _cv_job(args):
    entries, fold, cfg, features = args
    train, val = split_train_val(entries, fold)
    return train_model(train, val, cfg, features, key=(fold,))


def check_folds(entries, folds=None):
    present = sorted({e.fold for e in entries})
    folds = present if folds is None else list(folds)
    if len(present) < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    for f in folds:
        labels = {e.label for e in entries if e.fold == f}
        if labels != {0, 1}:
            raise ConfigError(f"fold {f} validation slice lacks one class (labels present: {sorted(labels)})")
    return folds


def cross_validate(entries, cfg: TrainConfig, features, folds=None, workers=1):
    """One training run per held-out fold, keyed (seed, fold).

    Returns a list of (fold, RunRecord, Checkpoint). Folds are independent,
    so ``workers > 1`` runs them in a process pool with identical results.
    """
    folds = check_folds(entries, folds)
    jobs = [(entries, f, cfg, features) for f in folds]
    results = run_jobs(_cv_job, jobs, workers)
    return [(f, rec, ck) for f, (rec, ck) in zip(folds, results)]


def run_jobs(fn, jobs, workers=1):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# inference


def predict(checkpoint, entries, dsp: DspConfig, features=None, root=None):
    """Eval-mode scores in manifest order. Labels are attached but never read."""
    ckpt = _as_checkpoint(checkpoint)
    model = ckpt.to_model()
    if features is None:
        if root is None:
            raise ConfigError("predict needs either features or a root directory")
        features = featurize(entries, root, dsp)
    if not entries:
        return PredictionSet([], np.zeros(0), np.zeros(0, dtype=np.int64))
    x = _stack(_features_for(entries, features))
    scores = predict_array(model, x)
    return PredictionSet([e.recording_id for e in entries], scores, np.array([e.label for e in entries]))
