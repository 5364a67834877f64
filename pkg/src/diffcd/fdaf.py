"""Flow dual-alignment fusion.

For every pyramid level a small convolutional head predicts two displacement
fields from the concatenated temporal features: ``flow_ab`` samples B from A's
frame and ``flow_ba`` samples A from B's frame.  Each feature map is
backward-warped toward the other and the two absolute differences are
concatenated for the change classifier.

The head is evaluated on both input orders.  With ``g(A, B)`` the difference
of its two output channel pairs, ``flow_ab = max_flow * tanh((g(A, B) - g(B, A)) / 4)``
and ``flow_ba = -flow_ab``.  Exchanging A and B therefore exchanges the two flows
exactly, and identical inputs give zero flow, so an unchanged pair fuses to
exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from diffcd.denoiser import FeaturePyramid
from diffcd.errors import ConfigError, ContractError, ShapeError
from diffcd.numerics import (
    Rng, Tensor, abs_, add, bilinear_warp, concat, conv2d, relu, scale,
    reshape, standard_normal, sub, take, tanh,
)

MODES = ("dual", "off")
HIDDEN = 32


@dataclass
class FusedFeatures:
    levels: list[Tensor]
    mode: str
    flows: list[tuple[Tensor, Tensor]] = field(default_factory=list)


def init_flow_params(level_channels: Sequence[int], rng: Rng, hidden: int = HIDDEN) -> dict[str, Tensor]:
    """He-normal hidden layers; the output layer starts at zero so training
    begins from the identity alignment."""
    params = {}
    for lvl, c in enumerate(level_channels):
        shapes = [(hidden, 2 * c, 3, 3), (hidden, hidden, 3, 3), (4, hidden, 3, 3)]
        for i, shape in enumerate(shapes, start=1):
            fan_in = shape[1] * 9
            w = standard_normal(rng, shape) * np.sqrt(2.0 / fan_in) if i < 3 else np.zeros(shape)
            params[f"flow{lvl}.c{i}.w"] = Tensor(w, requires_grad=True)
            params[f"flow{lvl}.c{i}.b"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return params


def _head(params, lvl: int, feat_a: Tensor, feat_b: Tensor) -> Tensor:
    """Head outputs for ``concat(A, B)`` stacked over those for ``concat(B, A)``.

    The first convolution is linear in its input, so it is split by input
    half and each pyramid is convolved once for both orders.
    """
    p = f"flow{lvl}"
    n, c = feat_a.shape[:2]
    w1, b1 = params[f"{p}.c1.w"], params[f"{p}.c1.b"]
    hidden = w1.shape[0]
    if w1.shape[1] != 2 * c:
        raise ShapeError(f"flow head {p} expects {w1.shape[1] // 2} channels, got {c}")
    halves = concat([take(w1, 1, 0, c), take(w1, 1, c, 2 * c)], axis=0)
    u = conv2d(concat([feat_a, feat_b], axis=0), halves, padding=1)
    first = lambda t: take(t, 1, 0, hidden)
    second = lambda t: take(t, 1, hidden, 2 * hidden)
    u_a, u_b = take(u, 0, 0, n), take(u, 0, n, 2 * n)
    pre = concat([add(first(u_a), second(u_b)), add(first(u_b), second(u_a))], axis=0)
    h = relu(add(pre, reshape(b1, (1, hidden, 1, 1))))
    h = relu(conv2d(h, params[f"{p}.c2.w"], params[f"{p}.c2.b"], padding=1))
    return conv2d(h, params[f"{p}.c3.w"], params[f"{p}.c3.b"], padding=1)


def estimate_flows(feat_a: Tensor, feat_b: Tensor, params, level: int = 0,
                   max_flow: float = 8.0) -> tuple[Tensor, Tensor]:
    """Return ``(flow_ab, flow_ba)``, each (N, 2, h, w) in pixels, bounded by
    ``max_flow`` through a tanh.  ``flow_ba`` is exactly ``-flow_ab``."""
    if feat_a.shape != feat_b.shape:
        raise ShapeError(f"feature shapes differ: {feat_a.shape} vs {feat_b.shape}")
    n = feat_a.shape[0]
    raw = _head(params, level, feat_a, feat_b)
    fwd = take(raw, 0, 0, n)
    rev = take(raw, 0, n, 2 * n)
    g_ab = sub(take(fwd, 1, 0, 2), take(fwd, 1, 2, 4))
    g_ba = sub(take(rev, 1, 0, 2), take(rev, 1, 2, 4))
    flow_ab = scale(tanh(scale(sub(g_ab, g_ba), 0.25)), max_flow)
    return flow_ab, scale(flow_ab, -1.0)


def level_max_flow(max_flow: float, extent: int, size: int | None) -> float:
    """Flow bound in level pixels: ``max_flow`` image pixels, halved per halving of resolution."""
    return max_flow if size is None else max_flow * extent / size


def fdaf_fuse(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid, params, mode: str = "dual",
              max_flow: float = 8.0,
              flows: Sequence[tuple[Tensor, Tensor]] | None = None,
              size: int | None = None) -> FusedFeatures:
    """Fuse two pyramids level by level.

    ``dual`` emits ``concat(|warp(A, flow_ba) - B|, |A - warp(B, flow_ab)|)``;
    ``off`` skips alignment and emits ``concat(|A - B|, |A - B|)`` so the
    classifier input width is the same in both arms.  ``flows`` overrides the
    estimated ``(flow_ab, flow_ba)`` per level.  ``size`` is the image
    extent the pyramid came from; when given, ``max_flow`` is read in image
    pixels and scaled to each level's resolution.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown alignment mode {mode!r}; expected one of {MODES}")
    if len(pyr_a) != len(pyr_b):
        raise ContractError(f"pyramids have {len(pyr_a)} and {len(pyr_b)} levels")
    if flows is not None and len(flows) != len(pyr_a):
        raise ContractError("one flow pair per level is required")
    fused, used_flows = [], []
    for lvl, (a, b) in enumerate(zip(pyr_a.levels, pyr_b.levels)):
        if a.shape != b.shape:
            raise ContractError(f"level {lvl}: shapes {a.shape} and {b.shape} differ")
        if mode == "off":
            d = abs_(sub(a, b))
            fused.append(concat([d, d], axis=1))
            continue
        if flows is not None:
            flow_ab, flow_ba = flows[lvl]
        else:
            flow_ab, flow_ba = estimate_flows(a, b, params, lvl, level_max_flow(max_flow, a.shape[-1], size))
        a_to_b = bilinear_warp(a, flow_ba)
        b_to_a = bilinear_warp(b, flow_ab)
        fused.append(concat([abs_(sub(a_to_b, b)), abs_(sub(a, b_to_a))], axis=1))
        used_flows.append((flow_ab, flow_ba))
    return FusedFeatures(fused, mode, used_flows)
