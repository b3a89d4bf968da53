"""Per-task feature-transformation adapters appended to convolution outputs.

Each adapted layer with K channels gets two small grouped filter banks: a
3x3 group-wise bank that mixes spatial structure within groups of ``a``
channels, and a 1x1 point-wise bank that mixes across groups of ``b``
channels. The layer output is ``H = H_group + gamma * H_point`` with
``gamma`` in {0, 1}. Parameter cost per layer is ``9*a*K + b*K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class EftConfig:
    """Adapter hyperparameters: group sizes and the point-wise switch."""

    a: int = 2
    b: int = 1
    gamma: int = 1

    def __post_init__(self):
        if self.a < 1 or self.b < 1:
            raise ValueError(f"group sizes must be >= 1, got a={self.a}, b={self.b}")
        if self.gamma not in (0, 1):
            raise ValueError(f"gamma must be 0 or 1, got {self.gamma}")

    def validate_channels(self, k: int) -> None:
        if k % self.a:
            raise ShapeError(f"channel count K={k} not divisible by a={self.a}")
        if k % self.b:
            raise ShapeError(f"channel count K={k} not divisible by b={self.b}")


# Large-task preset from the source setup this design follows; the small
# default above is the scarce-data preset.
LARGE_TASK_CONFIG = EftConfig(a=8, b=16, gamma=1)


@dataclass
class EftLayerWeights:
    """Filter banks for one adapted layer: group-wise [3,3,a,K], point-wise [1,1,b,K]."""

    groupwise: Tensor
    pointwise: Tensor

    @property
    def channels(self) -> int:
        return self.groupwise.shape[-1]

    def tensors(self) -> tuple[Tensor, Tensor]:
        return self.groupwise, self.pointwise


def identity_groupwise(k: int, a: int, dtype=np.float32) -> np.ndarray:
    """Group-wise bank that reproduces its input: center tap 1 at the
    matching within-group channel, 0 elsewhere."""
    w = np.zeros((3, 3, a, k), dtype=dtype)
    for out_c in range(k):
        w[1, 1, out_c % a, out_c] = 1.0
    return w


def init_layer_weights(k: int, cfg: EftConfig, rng: np.random.Generator | None = None,
                       kind: str = "identity", scale: float = 0.05,
                       dtype=np.float32, requires_grad: bool = False) -> EftLayerWeights:
    """Fresh adapter weights for one layer.

    ``identity`` starts the layer as a no-op (group-wise identity, point-wise
    zero); ``random`` draws small Gaussians for both banks and needs ``rng``.
    """
    cfg.validate_channels(k)
    if kind == "identity":
        gw = identity_groupwise(k, cfg.a, dtype)
        pw = np.zeros((1, 1, cfg.b, k), dtype=dtype)
    elif kind == "random":
        if rng is None:
            raise ValueError("random init needs an rng")
        gw = (rng.standard_normal((3, 3, cfg.a, k)) * scale).astype(dtype)
        pw = (rng.standard_normal((1, 1, cfg.b, k)) * scale).astype(dtype)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return EftLayerWeights(Tensor(gw, requires_grad=requires_grad),
                           Tensor(pw, requires_grad=requires_grad))


def apply_groupwise(f: Tensor, w: Tensor, a: int) -> Tensor:
    """Convolve each group of ``a`` channels with its own 3x3 filters (pad 1)."""
    k = f.shape[-1]
    if k % a:
        raise ShapeError(f"channel count K={k} not divisible by a={a}")
    if w.shape != (3, 3, a, k):
        raise ShapeError(f"group-wise bank must be [3,3,{a},{k}], got {list(w.shape)}")
    return ad.conv2d(f, w, groups=k // a, padding=1)


def apply_pointwise(f: Tensor, w: Tensor, b: int) -> Tensor:
    """Convolve each group of ``b`` channels with its own 1x1 filters."""
    k = f.shape[-1]
    if k % b:
        raise ShapeError(f"channel count K={k} not divisible by b={b}")
    if w.shape != (1, 1, b, k):
        raise ShapeError(f"point-wise bank must be [1,1,{b},{k}], got {list(w.shape)}")
    return ad.conv2d(f, w, groups=k // b, padding=0)


def eft_forward(f: Tensor, weights: EftLayerWeights, cfg: EftConfig) -> Tensor:
    """Adapter output ``H = H_group + gamma * H_point``, same shape as input."""
    k = f.shape[-1]
    cfg.validate_channels(k)
    if weights.groupwise.shape[-1] != k:
        raise ShapeError(
            f"adapter built for K={weights.groupwise.shape[-1]} applied to K={k} channels")
    h = apply_groupwise(f, weights.groupwise, cfg.a)
    if cfg.gamma:
        h = ad.add(h, apply_pointwise(f, weights.pointwise, cfg.b))
    return h


def param_count(channel_schedule: list[int], cfg: EftConfig) -> int:
    """Total adapter parameters over a schedule of per-layer channel counts."""
    if not channel_schedule:
        raise ValueError("channel schedule must be non-empty")
    total = 0
    for k in channel_schedule:
        cfg.validate_channels(k)
        total += 9 * cfg.a * k + cfg.b * k
    return total


def resnet18_channel_schedule(include_shortcuts: bool = True) -> list[int]:
    """Output-channel counts of every convolution in a standard 18-layer
    residual net: the 64-wide stem, four stages of two basic blocks (two
    3x3 convs each), and optionally the three 1x1 projection shortcuts at
    stage transitions."""
    sched = [64] + [64] * 4 + [128] * 4 + [256] * 4 + [512] * 4
    if include_shortcuts:
        sched += [128, 256, 512]
    return sched


def per_task_param_count(channel_schedule: list[int], cfg: EftConfig,
                         norm_arrays_per_channel: int = 4) -> int:
    """Stored parameters per new task: adapters plus per-task normalization
    state (affine pair and running statistics for every adapted channel)."""
    return param_count(channel_schedule, cfg) + norm_arrays_per_channel * sum(channel_schedule)
