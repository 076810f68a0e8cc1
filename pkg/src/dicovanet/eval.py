"""ROC/AUC and seed-ensemble averaging of prediction sets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ManifestError


@dataclass
class PredictionSet:
    ids: list
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.ids),):
            raise ValueError("need exactly one score per id")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("prediction ids must be unique")
        if not np.all((self.scores >= 0.0) & (self.scores <= 1.0)):
            raise ValueError("scores must be finite and lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.scores.shape:
                raise ValueError("need exactly one label per id")

    def __len__(self):
        return len(self.ids)

    def by_id(self):
        return dict(zip(self.ids, self.scores))

    def to_csv(self) -> str:
        header = "id,score,label" if self.labels is not None else "id,score"
        lines = [header]
        for k, rid in enumerate(self.ids):
            row = f"{rid},{format(float(self.scores[k]), '.17g')}"
            if self.labels is not None:
                row += f",{int(self.labels[k])}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PredictionSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] not in (["id", "score"], ["id", "score", "label"]):
            raise ManifestError("row 1: prediction header must be id,score[,label]")
        has_label = len(rows[0]) == 3
        ids, scores, labels = [], [], []
        for rowno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(rows[0]):
                raise ManifestError(f"row {rowno}: expected {len(rows[0])} columns")
            try:
                scores.append(float(row[1]))
                if has_label:
                    labels.append(int(row[2]))
            except ValueError as exc:
                raise ManifestError(f"row {rowno}: {exc}") from None
            ids.append(row[0])
        return cls(ids, np.array(scores), np.array(labels, dtype=np.int64) if has_label else None)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = ["fpr,tpr"]
        lines += [f"{format(float(f), '.17g')},{format(float(t), '.17g')}" for f, t in zip(self.fpr, self.tpr)]
        return "\n".join(lines) + "\n"


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC is undefined unless both classes are present")
    return scores, labels.astype(bool), n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2.

    Computed from mid-ranks, so the numerator is an exact half-integer.
    """
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # 2 * mid-rank of each distinct value, kept integral
    ends = np.cumsum(counts)
    twice_rank = 2 * ends - counts + 1
    rank_sum_x2 = int(np.sum(twice_rank[inverse][pos]))
    u_x2 = rank_sum_x2 - n_pos * (n_pos + 1)
    return (u_x2 / 2) / (n_pos * n_neg)


def roc_curve(scores, labels) -> RocCurve:
    """ROC points from a descending threshold sweep with tied scores grouped."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0, tp[last_of_group]] / n_pos
    fpr = np.r_[0, fp[last_of_group]] / n_neg
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, area)


def prediction_auc(preds: PredictionSet) -> float:
    if preds.labels is None:
        raise ConfigError("prediction set carries no labels")
    return auc(preds.scores, preds.labels)


def ensemble_average(members) -> PredictionSet:
    """Per-id arithmetic mean of member scores, in the first member's id order.

    Sums use math.fsum, so the result does not depend on member order.
    """
    members = list(members)
    if not members:
        raise ConfigError("ensemble needs at least one member")
    ref = members[0]
    ref_ids = set(ref.ids)
    for k, mem in enumerate(members[1:], start=2):
        ids = set(mem.ids)
        if ids != ref_ids:
            diff = sorted(ids ^ ref_ids)
            raise ConfigError(f"member {k} covers a different id set; symmetric difference: {', '.join(diff)}")
    lookups = [m.by_id() for m in members]
    scores = np.array([math.fsum(lk[rid] for lk in lookups) / len(members) for rid in ref.ids])

    labels = None
    labelled = [m for m in members if m.labels is not None]
    if labelled:
        maps = [dict(zip(m.ids, m.labels)) for m in labelled]
        merged = []
        for rid in ref.ids:
            vals = {int(mp[rid]) for mp in maps}
            if len(vals) != 1:
                raise ConfigError(f"inconsistent labels for id {rid!r} across members")
            merged.append(vals.pop())
        labels = np.array(merged, dtype=np.int64)
    return PredictionSet(list(ref.ids), scores, labels)
