"""Acceptance suite: one recorded pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in an "acceptance criteria" section at the end of the session. The
synthetic-corpus criteria train on the order of a hundred networks and
are marked ``slow`` and use every available core unless
DICOVANET_WORKERS says otherwise.
"""

import os
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import synthbench as sb
from gradcheck import numeric_grad, rel_error

from dicovanet.cli import run as cli_run
from dicovanet.config import ENSEMBLE_SEEDS, TrainConfig
from dicovanet.data import ManifestEntry, split_train_val
from dicovanet.dsp import SpectrogramImage, decode_spectrogram, encode_spectrogram
from dicovanet.eval import PredictionSet, auc, ensemble_average, roc_curve
from dicovanet.harness import predict, train_model
from dicovanet.loss import FocalParams, cross_entropy, focal_loss
from dicovanet.nn import (
    Checkpoint,
    MiniResNet,
    NetworkSpec,
    ResidualBlockSpec,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    load_checkpoint,
    relu_backward,
    relu_forward,
    residual_block_backward,
    residual_block_forward,
    save_checkpoint,
    sigmoid_backward,
    sigmoid_forward,
)
from dicovanet.optim import Adam

# training runs are independent; results do not depend on the worker count
WORKERS = int(os.environ.get("DICOVANET_WORKERS", len(os.sched_getaffinity(0))))


# --------------------------------------------------------------------------
# loss equivalence


def test_loss_equivalence(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 65))
        p = rng.uniform(0.0, 1.0, m)
        y = rng.integers(0, 2, m)
        fl, _ = focal_loss(p, y, FocalParams(alpha=0.5, gamma=0.0))
        ce, _ = cross_entropy(p, y)
        worst = max(worst, abs(fl - 0.5 * ce))
    secs = time.perf_counter() - t0
    verdict("loss equivalence", worst <= 1e-12 and secs < 1.0,
            f"max |focal(g=0,a=.5) - CE/2| = {worst:.2e} over 1000 batches (tol 1e-12), {secs:.2f} s (< 1 s)")


# --------------------------------------------------------------------------
# gradient integrity


def _layer_errors(rng):
    errs = {}

    def check(name, analytic, loss, *arrays):
        errs[name] = max(rel_error(a, numeric_grad(loss, x)) for a, x in zip(analytic, arrays))

    for k, s in ((3, 1), (3, 2), (1, 2)):
        x, w, b = rng.standard_normal((2, 2, 5, 6)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
        proj = rng.standard_normal(conv2d_forward(x, w, b, s).shape)
        check(f"conv{k}x{k}/s{s}", conv2d_backward(proj, x, w, s),
              lambda: float(np.sum(proj * conv2d_forward(x, w, b, s))), x, w, b)

    for mode in ("train", "eval"):
        x = rng.standard_normal((3, 2, 3, 4))
        g, b = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        proj = rng.standard_normal(x.shape)

        def bn_loss():
            return float(np.sum(proj * batchnorm_forward(x, g, b, mode, rm.copy(), rv.copy())[0]))

        _, cache = batchnorm_forward(x, g, b, mode, rm.copy(), rv.copy())
        check(f"batchnorm/{mode}", batchnorm_backward(proj, cache), bn_loss, x, g, b)

    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    proj = rng.standard_normal(x.shape)
    check("relu", [relu_backward(proj, x)], lambda: float(np.sum(proj * relu_forward(x))), x)

    x = rng.standard_normal((2, 3, 4, 5))
    proj = rng.standard_normal((2, 3))
    check("avgpool", [global_avg_pool_backward(proj, x.shape)],
          lambda: float(np.sum(proj * global_avg_pool_forward(x))), x)

    x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    proj = rng.standard_normal((5, 2))
    check("dense", dense_backward(proj, x, w), lambda: float(np.sum(proj * dense_forward(x, w, b))), x, w, b)

    z = rng.standard_normal(6) * 3
    proj = rng.standard_normal(6)
    check("sigmoid", [sigmoid_backward(proj, sigmoid_forward(z))],
          lambda: float(np.sum(proj * sigmoid_forward(z))), z)

    for spec in (ResidualBlockSpec(2, 2), ResidualBlockSpec(2, 3, stride=2)):
        p = {}
        for name, shape in spec.param_shapes().items():
            p[name] = rng.uniform(0.5, 1.5, shape) if name.endswith("gamma") else rng.standard_normal(shape) * 0.5
        buf = {}
        for bn in spec.bn_names():
            buf[f"{bn}.running_mean"] = np.zeros(spec.out_channels)
            buf[f"{bn}.running_var"] = np.ones(spec.out_channels)
        x = rng.standard_normal((3, spec.in_channels, 4, 5))

        def block_loss():
            y, _ = residual_block_forward(x, spec, p, {k: v.copy() for k, v in buf.items()})
            return float(np.sum(proj_b * y))

        y, cache = residual_block_forward(x, spec, p, {k: v.copy() for k, v in buf.items()})
        proj_b = rng.standard_normal(y.shape)
        dx, grads = residual_block_backward(proj_b, cache)
        names = list(p)
        check(f"residual/{spec.shortcut}", [dx] + [grads[n] for n in names], block_loss, x, *[p[n] for n in names])

    y = rng.integers(0, 2, 7)
    y[:2] = (0, 1)
    for name, fn in (("cross_entropy", cross_entropy), ("focal", lambda q, t: focal_loss(q, t, FocalParams()))):
        q = rng.uniform(0.05, 0.95, 7)
        check(f"loss/{name}", [fn(q, y)[1]], lambda: fn(q, y)[0], q)
    return errs


def _network_error(spec, rng, per_tensor=None):
    """Worst per-tensor relative error of the end-to-end focal loss on 2 samples of 8x8."""
    model = MiniResNet(spec, rng=rng)
    for name, p in model.params.items():
        if name.endswith(("gamma", "beta", "bias")):
            p.value[:] = rng.uniform(0.5, 1.5, p.value.shape) if name.endswith("gamma") else \
                rng.standard_normal(p.value.shape) * 0.1
    x = rng.uniform(0.0, 1.0, (2, 1, 8, 8))
    y = np.array([0, 1])

    def loss():
        return focal_loss(model.forward(x, "train", update_stats=False), y)[0]

    _, dprobs = focal_loss(model.forward(x, "train", update_stats=False), y)
    dx = model.backward(dprobs)
    worst = 0.0
    targets = [("input", x, dx)] + [(n, p.value, p.grad) for n, p in model.params.items()]
    for name, value, grad in targets:
        idx = None
        if per_tensor is not None and value.size > per_tensor:
            idx = rng.choice(value.size, per_tensor, replace=False)
        num = numeric_grad(loss, value, indices=idx)
        worst = max(worst, rel_error(grad, num))
    return worst


def test_gradient_integrity(verdict):
    t0 = time.perf_counter()
    layer = _layer_errors(np.random.default_rng(1))
    reduced = _network_error(NetworkSpec(stem_channels=2, stage_channels=(2, 3, 4), blocks_per_stage=2),
                             np.random.default_rng(2))
    full = _network_error(NetworkSpec(), np.random.default_rng(3), per_tensor=12)
    secs = time.perf_counter() - t0
    worst_layer = max(layer, key=layer.get)
    ok = max(layer.values()) <= 1e-5 and reduced <= 1e-4 and full <= 1e-4 and secs < 120
    verdict("gradient integrity", ok,
            f"{len(layer)} layer checks, worst {worst_layer} {layer[worst_layer]:.1e} (tol 1e-5); "
            f"end-to-end reduced-width net {reduced:.1e}, full net sampled {full:.1e} (tol 1e-4); "
            f"{secs:.0f} s (< 120 s)")


# --------------------------------------------------------------------------
# residual identity


def test_residual_identity(verdict):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    exact = 0
    for c, h, w in ((1, 3, 3), (3, 4, 5), (16, 8, 8), (64, 2, 3)):
        spec = ResidualBlockSpec(c, c)
        p = {k: np.zeros(s) for k, s in spec.param_shapes().items()}
        buf = {}
        for bn in spec.bn_names():
            buf[f"{bn}.running_mean"] = np.zeros(c)
            buf[f"{bn}.running_var"] = np.ones(c)
        for mode in ("train", "eval"):
            x = rng.uniform(0.01, 3.0, (2, c, h, w))
            dy = rng.standard_normal(x.shape)
            _, cache = residual_block_forward(x, spec, p, buf, mode)
            dx, _ = residual_block_backward(dy, cache)
            exact += dx.tobytes() == dy.tobytes()
    secs = time.perf_counter() - t0
    verdict("residual identity", exact == 8 and secs < 1.0,
            f"{exact}/8 blocks pass the upstream gradient through bit-exactly, {secs:.2f} s (< 1 s)")


# --------------------------------------------------------------------------
# AUC oracle


def _brute_force(scores, labels):
    twice = sum(2 if p > n else 1 if p == n else 0
                for p, lp in zip(scores, labels) if lp == 1
                for n, ln in zip(scores, labels) if ln == 0)
    n_pos = int(np.sum(labels))
    return Fraction(twice, 2 * n_pos * (len(labels) - n_pos))


def test_auc_oracle(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_trap, exact, with_ties = 0.0, 0, 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = (0, 1)
        scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))
        with_ties += len(np.unique(scores)) < n
        value = auc(scores, labels)
        curve = roc_curve(scores, labels)
        trap = float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2))
        worst_trap = max(worst_trap, abs(value - trap))
        exact += value == float(_brute_force(scores.tolist(), labels.tolist()))
    secs = time.perf_counter() - t0
    verdict("AUC oracle", worst_trap <= 1e-12 and exact == 200 and secs < 5.0,
            f"200 sets ({with_ties} with ties): max |AUC - trapezoid| {worst_trap:.1e} (tol 1e-12), "
            f"{exact}/200 equal the O(n^2) count exactly, {secs:.2f} s (< 5 s)")


# --------------------------------------------------------------------------
# ensemble exactness


def _tiny_members():
    rng = np.random.default_rng(6)
    entries, feats = [], {}
    for i in range(30):
        label = int(i % 5 == 0)
        img = rng.uniform(0, 0.6, (16, 8))
        img[4:8] += 0.3 * label
        rid = f"r{i:02d}"
        feats[rid] = SpectrogramImage(np.clip(img, 0, 1), rid)
        entries.append(ManifestEntry(rid, f"{rid}.wav", label, i % 3 + 1))
    train, val = split_train_val(entries, 1)
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.01,
                      network=NetworkSpec(stem_channels=4, stage_channels=(4, 8, 8), blocks_per_stage=1))
    members = []
    for seed in ENSEMBLE_SEEDS:
        _, ckpt = train_model(train, val, cfg.with_(master_seed=seed), feats)
        preds = predict(ckpt, val, cfg.dsp, features=feats)
        order = np.random.default_rng(seed).permutation(len(preds.ids))
        members.append(PredictionSet([preds.ids[k] for k in order], preds.scores[order], preds.labels[order]))
    return members


def test_ensemble_exactness(verdict):
    members = _tiny_members()
    t0 = time.perf_counter()
    ens = ensemble_average(members)
    lookups = [dict(zip(m.ids, m.scores.tolist())) for m in members]
    oracle = {rid: float(sum(Fraction(lk[rid]) for lk in lookups) / len(lookups)) for rid in ens.ids}
    worst = max(abs(s - oracle[rid]) for rid, s in zip(ens.ids, ens.scores.tolist()))
    secs = time.perf_counter() - t0
    spread = float(np.ptp([m.by_id()[ens.ids[0]] for m in members]))
    verdict("ensemble exactness", worst <= 1e-15 and spread > 0 and secs < 1.0,
            f"{len(ens.ids)} ids, 4 members (seeds {', '.join(map(str, ENSEMBLE_SEEDS))}): "
            f"max |mean - exact mean| {worst:.1e} (tol 1e-15), {secs:.3f} s (< 1 s)")


# --------------------------------------------------------------------------
# format round-trips


def test_format_roundtrips(verdict):
    rng = np.random.default_rng(7)
    model = MiniResNet(NetworkSpec(), rng=rng)
    opt = Adam()
    probs = model.forward(rng.uniform(0, 1, (4, 1, 64, 13)), "train")
    model.backward(focal_loss(probs, np.array([0, 1, 0, 1]))[1])
    opt.step(model.params)
    ckpt = Checkpoint.from_model(model, opt, {"seed": 1001, "epoch": 1})
    csv_text = PredictionSet([f"id{i}" for i in range(50)], rng.uniform(0, 1, 50), rng.integers(0, 2, 50)).to_csv()
    img = SpectrogramImage(rng.uniform(0, 1, (64, 13)), "x")
    t0 = time.perf_counter()
    blob = save_checkpoint(ckpt)
    ckpt_ok = save_checkpoint(load_checkpoint(blob)) == blob
    csv_ok = PredictionSet.from_csv(csv_text).to_csv() == csv_text
    spec_bytes = encode_spectrogram(img)
    dspc_ok = encode_spectrogram(decode_spectrogram(spec_bytes)) == spec_bytes
    secs = time.perf_counter() - t0
    verdict("format round-trips", ckpt_ok and csv_ok and dspc_ok and secs < 1.0,
            f"checkpoint ({len(blob)} bytes) {ckpt_ok}, prediction CSV {csv_ok}, spectrogram cache {dspc_ok}; "
            f"{secs:.2f} s (< 1 s)")


# --------------------------------------------------------------------------
# end-to-end on the synthetic corpus


@pytest.mark.slow
def test_determinism(verdict, tmp_path):
    assert cli_run(["make-synthetic", "--out", str(tmp_path / "data")]) == 0
    manifest = str(tmp_path / "data" / "manifest.csv")
    t0 = time.perf_counter()
    for name in ("a", "b"):
        assert cli_run(["train", "--manifest", manifest, "--out", str(tmp_path / name)]) == 0
    secs = time.perf_counter() - t0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("checkpoint.dcvn", "predictions.csv")}
    verdict("determinism", all(same.values()),
            f"two default train runs: checkpoint identical {same['checkpoint.dcvn']}, "
            f"predictions identical {same['predictions.csv']}; {secs:.0f} s for both")


@pytest.fixture(scope="module")
def ensemble_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    return [sb.ensemble_repeat(root, s, TrainConfig(), workers=WORKERS) for s in sb.CORPUS_SEEDS]


@pytest.fixture(scope="module")
def cv_run(tmp_path_factory):
    t0 = time.perf_counter()
    mean, aucs = sb.cv_mean_auc(tmp_path_factory.mktemp("cv"), TrainConfig(), workers=WORKERS)
    return mean, aucs, time.perf_counter() - t0


@pytest.mark.slow
def test_synthetic_benchmark(verdict, cv_run, ensemble_runs):
    mean, aucs, cv_secs = cv_run
    wins = [r["ensemble_auc"] >= r["member_mean"] for r in ensemble_runs]
    strict = sum(r["ensemble_auc"] > r["member_mean"] for r in ensemble_runs)
    secs = cv_secs + sum(r["gauss_seconds"] for r in ensemble_runs)
    ok = mean >= 0.85 and sum(wins) >= 7 and secs < 30 * 60
    verdict("synthetic benchmark", ok,
            f"5-fold CV mean AUC {mean:.4f} (>= 0.85; folds {', '.join(f'{a:.3f}' for a in aucs)}); "
            f"ensemble >= member mean in {sum(wins)}/10 corpus seeds (>= 7; {strict} strictly); "
            f"{secs / 60:.1f} min (< 30 min)")


@pytest.mark.slow
def test_ablation_ordering(verdict, ensemble_runs):
    wins = [r["member_mean"] >= r["dup_mean"] for r in ensemble_runs]
    strict = sum(r["member_mean"] > r["dup_mean"] for r in ensemble_runs)
    gauss = statistics.fmean(r["member_mean"] for r in ensemble_runs)
    dup = statistics.fmean(r["dup_mean"] for r in ensemble_runs)
    verdict("ablation ordering", sum(wins) >= 7,
            f"Gaussian mean AUC >= duplication mean AUC in {sum(wins)}/10 corpus seeds (>= 7; {strict} strictly); "
            f"overall {gauss:.4f} vs {dup:.4f}")


@pytest.mark.slow
def test_fine_tuning_speedup(verdict, tmp_path):
    t0 = time.perf_counter()
    pairs = sb.finetune_pairs(tmp_path, TrainConfig(), workers=WORKERS)
    secs = time.perf_counter() - t0
    wins = sum(ft.best_epoch <= sc.best_epoch for _, ft, sc in pairs)
    detail = ", ".join(f"seed {s}: {ft.best_epoch} vs {sc.best_epoch}" for s, ft, sc in pairs)
    verdict("fine-tuning speedup", wins >= 3 and secs < 20 * 60,
            f"fine-tuned best epoch <= scratch best epoch in {wins}/4 seeds (>= 3; {detail}); "
            f"{secs / 60:.1f} min (< 20 min)")
