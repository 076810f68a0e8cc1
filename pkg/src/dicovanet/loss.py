"""Binary cross-entropy and focal loss with analytic gradients in p."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PROB_EPS = 1e-12


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"focal alpha must lie in [0, 1], got {self.alpha}")
        if not self.gamma >= 0.0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")


def _batch(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y)
    if p.ndim != 1 or p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return p, y.astype(np.float64)


def cross_entropy(p, y):
    """Mean binary cross-entropy. Returns (loss, dloss/dp)."""
    p, y = _batch(p, y)
    m = p.size
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / m
    return float(per.sum() / m), grad


def focal_loss(p, y, params: FocalParams = FocalParams()):
    """Mean two-sided binary focal loss. Returns (loss, dloss/dp).

    Per sample, with p_t = p for positives and 1 - p otherwise,
    l = -alpha_t * (1 - p_t)**gamma * log(p_t).
    """
    p, y = _batch(p, y)
    m = p.size
    a, g = params.alpha, params.gamma
    pos = y == 1.0
    pt = np.where(pos, p, 1.0 - p)
    at = np.where(pos, a, 1.0 - a)
    log_pt = np.where(pos, np.log(p), np.log1p(-p))
    q = 1.0 - pt
    mod = q ** g
    per = -at * mod * log_pt
    # dl/dp_t; the (1 - p_t)**(gamma - 1) term vanishes when gamma == 0
    dmod = g * q ** (g - 1.0) if g != 0.0 else np.zeros_like(q)
    dl_dpt = at * (dmod * log_pt - mod / pt)
    grad = np.where(pos, dl_dpt, -dl_dpt) / m
    return float(per.sum() / m), grad


def compute_loss(name, p, y, focal: FocalParams = FocalParams()):
    if name == "cross_entropy":
        return cross_entropy(p, y)
    if name == "focal":
        return focal_loss(p, y, focal)
    raise ConfigError(f"unknown loss {name!r}; expected cross_entropy or focal")
