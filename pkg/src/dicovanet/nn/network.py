"""MiniResNet: a small post-activation residual CNN with manual backprop."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import (
    _nchw_to_nhwc,
    _nhwc_to_nchw,
    batchnorm_backward_nhwc,
    batchnorm_forward_nhwc,
    conv2d_backward_nhwc,
    conv2d_forward_nhwc,
    dense_backward,
    dense_forward,
    global_avg_pool_backward_nhwc,
    global_avg_pool_forward_nhwc,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class FreezeWarning(UserWarning):
    """A freeze prefix matched no parameter."""


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    shortcut: str | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("block channel counts must be positive")
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        needs_projection = self.stride != 1 or self.in_channels != self.out_channels
        if self.shortcut is None:
            object.__setattr__(self, "shortcut", "projection" if needs_projection else "identity")
        elif self.shortcut not in ("identity", "projection"):
            raise ConfigError(f"shortcut must be identity or projection, got {self.shortcut!r}")
        elif self.shortcut == "identity" and needs_projection:
            raise ConfigError("identity shortcut requires stride 1 and equal channel counts")

    def param_shapes(self):
        shapes = {
            "conv1.weight": (self.out_channels, self.in_channels, 3, 3),
            "bn1.gamma": (self.out_channels,),
            "bn1.beta": (self.out_channels,),
            "conv2.weight": (self.out_channels, self.out_channels, 3, 3),
            "bn2.gamma": (self.out_channels,),
            "bn2.beta": (self.out_channels,),
        }
        if self.shortcut == "projection":
            shapes["shortcut.conv.weight"] = (self.out_channels, self.in_channels, 1, 1)
            shapes["shortcut.bn.gamma"] = (self.out_channels,)
            shapes["shortcut.bn.beta"] = (self.out_channels,)
        return shapes

    def bn_names(self):
        names = ["bn1", "bn2"]
        if self.shortcut == "projection":
            names.append("shortcut.bn")
        return names


@dataclass(frozen=True)
class NetworkSpec:
    """Stem conv, residual stages, global average pool, dense head.

    Stage s > 1 opens with a stride-2 projection block.
    """

    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    min_input_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels or self.blocks_per_stage < 1:
            raise ConfigError("network needs at least one stage with one block")

    def blocks(self):
        out = []
        prev = self.stem_channels
        for s, ch in enumerate(self.stage_channels, start=1):
            for b in range(1, self.blocks_per_stage + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                out.append((f"stage{s}.block{b}", ResidualBlockSpec(prev, ch, stride)))
                prev = ch
        return out

    def param_shapes(self):
        shapes = {
            "stem.weight": (self.stem_channels, self.in_channels, 3, 3),
            "stem.bias": (self.stem_channels,),
        }
        for prefix, block in self.blocks():
            for name, shape in block.param_shapes().items():
                shapes[f"{prefix}.{name}"] = shape
        shapes["head.weight"] = (self.stage_channels[-1], 1)
        shapes["head.bias"] = (1,)
        return shapes

    def buffer_shapes(self):
        shapes = {}
        for prefix, block in self.blocks():
            for bn in block.bn_names():
                ch = (block.out_channels,)
                shapes[f"{prefix}.{bn}.running_mean"] = ch
                shapes[f"{prefix}.{bn}.running_var"] = ch
        return shapes

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": self.blocks_per_stage,
            "min_input_size": self.min_input_size,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Parameter:
    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    def __repr__(self):
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


def init_parameters(spec: NetworkSpec, rng: np.random.Generator):
    """He-normal weights, zero biases and betas, unit gammas, in name order."""
    params = {}
    for name, shape in spec.param_shapes().items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif leaf == "gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Parameter(name, value)
    return params


def init_buffers(spec: NetworkSpec):
    return {
        name: (np.zeros(shape) if name.endswith("mean") else np.ones(shape))
        for name, shape in spec.buffer_shapes().items()
    }


# --------------------------------------------------------------------------
# residual block, channels-last


def _bn(x, p, buf, name, mode, update_stats):
    return batchnorm_forward_nhwc(
        x, p[f"{name}.gamma"], p[f"{name}.beta"], mode,
        buf[f"{name}.running_mean"], buf[f"{name}.running_var"],
        BN_MOMENTUM, BN_EPS, update_stats,
    )


def block_forward_nhwc(x, spec: ResidualBlockSpec, p, buf, mode, update_stats=True):
    """y = relu(h(x) + F(x)), F = conv-BN-ReLU-conv-BN.

    ``p`` and ``buf`` map block-local names (``conv1.weight``,
    ``bn1.running_mean``, ...) to arrays.
    """
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"block expects {spec.in_channels} input channels, got {x.shape[-1]}")
    c1 = conv2d_forward_nhwc(x, p["conv1.weight"], None, spec.stride)
    b1, bn1 = _bn(c1, p, buf, "bn1", mode, update_stats)
    a1 = relu_forward(b1)
    c2 = conv2d_forward_nhwc(a1, p["conv2.weight"], None, 1)
    branch, bn2 = _bn(c2, p, buf, "bn2", mode, update_stats)
    if spec.shortcut == "projection":
        sc = conv2d_forward_nhwc(x, p["shortcut.conv.weight"], None, spec.stride)
        short, bns = _bn(sc, p, buf, "shortcut.bn", mode, update_stats)
    else:
        short, bns = x, None
    if short.shape != branch.shape:
        raise ShapeError(f"shortcut output {short.shape} does not match residual branch {branch.shape}")
    pre = short + branch
    cache = (x, spec, p, c1, bn1, b1, a1, bn2, bns, pre)
    return relu_forward(pre), cache


def block_backward_nhwc(dy, cache):
    x, spec, p, c1, bn1, b1, a1, bn2, bns, pre = cache
    if dy.shape != pre.shape:
        raise ShapeError(f"block backward: gradient shape {dy.shape} does not match cached output {pre.shape}")
    grads = {}
    dpre = relu_backward(dy, pre)

    dc2, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward_nhwc(dpre, bn2)
    da1, grads["conv2.weight"], _ = conv2d_backward_nhwc(dc2, a1, p["conv2.weight"], 1, with_bias=False)
    db1 = relu_backward(da1, b1)
    dc1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward_nhwc(db1, bn1)
    dx, grads["conv1.weight"], _ = conv2d_backward_nhwc(dc1, x, p["conv1.weight"], spec.stride,
                                                        with_bias=False)

    if spec.shortcut == "projection":
        dsc, grads["shortcut.bn.gamma"], grads["shortcut.bn.beta"] = batchnorm_backward_nhwc(dpre, bns)
        dxs, grads["shortcut.conv.weight"], _ = conv2d_backward_nhwc(
            dsc, x, p["shortcut.conv.weight"], spec.stride, with_bias=False)
        dx = dxs + dx
    else:
        dx = dpre + dx
    return dx, grads


def residual_block_forward(x, spec: ResidualBlockSpec, params, buffers, mode="train"):
    """Public (N, C, H, W) entry point; returns (y, cache)."""
    y, cache = block_forward_nhwc(_nchw_to_nhwc(x), spec, params, buffers, mode)
    return _nhwc_to_nchw(y), cache


def residual_block_backward(dy, cache):
    dx, grads = block_backward_nhwc(_nchw_to_nhwc(dy), cache)
    return _nhwc_to_nchw(dx), grads


def residual_branch_nhwc(x, spec, p, buf, mode):
    """F(x) alone, without updating running statistics."""
    c1 = conv2d_forward_nhwc(x, p["conv1.weight"], None, spec.stride)
    a1 = relu_forward(_bn(c1, p, buf, "bn1", mode, False)[0])
    c2 = conv2d_forward_nhwc(a1, p["conv2.weight"], None, 1)
    return _bn(c2, p, buf, "bn2", mode, False)[0]


# --------------------------------------------------------------------------
# whole network


class MiniResNet:
    """Parameters, running statistics and the forward/backward passes.

    ``forward`` keeps the caches of the last call; ``backward`` consumes
    them and accumulates into ``Parameter.grad`` (overwriting, not adding).
    """

    def __init__(self, spec: NetworkSpec, params=None, buffers=None, rng=None):
        self.spec = spec
        if params is None:
            if rng is None:
                raise ValueError("need either params or an init rng")
            params = init_parameters(spec, rng)
        self.params = params
        self.buffers = init_buffers(spec) if buffers is None else buffers
        self._blocks = spec.blocks()
        self._cache = None
        self._probs = None

    def _local(self, prefix):
        n = len(prefix) + 1
        p = {k[n:]: v.value for k, v in self.params.items() if k.startswith(prefix + ".")}
        b = {k[n:]: v for k, v in self.buffers.items() if k.startswith(prefix + ".")}
        return p, b

    def check_input(self, batch):
        if batch.ndim != 4 or batch.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected batch of shape (N, {self.spec.in_channels}, H, W), got {batch.shape}")
        if min(batch.shape[2:]) < self.spec.min_input_size:
            raise ShapeError(
                f"input {batch.shape[2]}x{batch.shape[3]} is too small; "
                f"need at least {self.spec.min_input_size} on each side"
            )

    def logits(self, batch, mode="eval", update_stats=True):
        self.check_input(batch)
        x = _nchw_to_nhwc(np.asarray(batch, dtype=np.float64))
        stem_in = x
        stem_pre = conv2d_forward_nhwc(x, self.params["stem.weight"].value, self.params["stem.bias"].value)
        h = relu_forward(stem_pre)
        caches = []
        for prefix, block in self._blocks:
            p, b = self._local(prefix)
            h, cache = block_forward_nhwc(h, block, p, b, mode, update_stats)
            caches.append(cache)
        pool_in_shape = h.shape
        pooled = global_avg_pool_forward_nhwc(h)
        z = dense_forward(pooled, self.params["head.weight"].value, self.params["head.bias"].value)
        self._cache = (stem_in, stem_pre, caches, pool_in_shape, pooled)
        return z[:, 0]

    def forward(self, batch, mode="eval", update_stats=True):
        """Probabilities, one per batch row, clamped to [1e-12, 1 - 1e-12]."""
        p = sigmoid_forward(self.logits(batch, mode, update_stats))
        self._probs = p
        return p

    def backward(self, dprobs):
        """Back-propagate dL/dp from the last ``forward``; returns dL/dbatch."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        stem_in, stem_pre, caches, pool_in_shape, pooled = self._cache
        dz = sigmoid_backward(np.asarray(dprobs, dtype=np.float64), self._probs)[:, None]
        return self._backward_logits(dz, stem_in, stem_pre, caches, pool_in_shape, pooled)

    def _backward_logits(self, dz, stem_in, stem_pre, caches, pool_in_shape, pooled):
        P = self.params
        dpool, P["head.weight"].grad, P["head.bias"].grad = dense_backward(dz, pooled, P["head.weight"].value)
        dh = global_avg_pool_backward_nhwc(dpool, pool_in_shape)
        for (prefix, _), cache in zip(reversed(self._blocks), reversed(caches)):
            dh, grads = block_backward_nhwc(dh, cache)
            for k, g in grads.items():
                P[f"{prefix}.{k}"].grad = g
        dstem = relu_backward(dh, stem_pre)
        dx, P["stem.weight"].grad, P["stem.bias"].grad = conv2d_backward_nhwc(
            dstem, stem_in, P["stem.weight"].value, 1)
        return _nhwc_to_nchw(dx)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def n_parameters(self):
        return sum(p.value.size for p in self.params.values())


def network_forward(spec: NetworkSpec, params, batch, mode="eval", buffers=None):
    """Functional form: probabilities for ``batch`` under ``params``.

    Running statistics are not modified.
    """
    if buffers is None:
        buffers = init_buffers(spec)
    buffers = {k: v.copy() for k, v in buffers.items()}
    return MiniResNet(spec, params, buffers).forward(batch, mode)


def set_frozen(params, name_prefixes):
    """Mark every parameter whose name starts with one of the prefixes as frozen.

    Returns the number of parameters frozen. Prefixes matching nothing
    raise a FreezeWarning naming them; the others still apply.
    """
    prefixes = list(name_prefixes)
    for prefix in prefixes:
        if not isinstance(prefix, str) or not prefix or prefix != prefix.strip():
            raise ConfigError(f"invalid freeze prefix {prefix!r}")
    unmatched = [pre for pre in prefixes if not any(name.startswith(pre) for name in params)]
    if unmatched:
        warnings.warn(f"freeze prefixes matched no parameter: {', '.join(unmatched)}",
                      FreezeWarning, stacklevel=2)
    count = 0
    for name, p in params.items():
        if any(name.startswith(pre) for pre in prefixes):
            p.frozen = True
            count += 1
    return count
