"""Change classifier over fused features, its loss, and pixel metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from diffcd.errors import ConfigError, ContractError, ShapeError
from diffcd.fdaf import FusedFeatures
from diffcd.numerics import (
    Rng, Tensor, add, bce_with_logits, conv2d, relu, standard_normal, upsample_nearest,
)
from diffcd.numerics.tensor import sigmoid_array

HEAD_CHANNELS = 16


@dataclass
class ChangeMap:
    logits: Tensor  # (N, 1, H, W)

    @property
    def prob(self) -> np.ndarray:
        return sigmoid_array(self.logits.data)

    def mask(self, tau: float = 0.5) -> np.ndarray:
        return threshold(self.prob, tau)


def init_head_params(level_channels: Sequence[int], rng: Rng,
                     head_channels: int = HEAD_CHANNELS, prior: float = 0.1) -> dict[str, Tensor]:
    """He-normal convolutions; the output bias starts at the log-odds of
    ``prior`` so training does not begin by unlearning a 50% change rate."""
    if not 0.0 < prior < 1.0:
        raise ConfigError(f"prior must lie in (0, 1), got {prior}")
    params = {}
    for lvl, c in enumerate(level_channels):
        w = standard_normal(rng, (head_channels, c, 3, 3)) * np.sqrt(2.0 / (9 * c))
        params[f"cls{lvl}.w"] = Tensor(w, requires_grad=True)
        params[f"cls{lvl}.b"] = Tensor(np.zeros(head_channels), requires_grad=True)
    w = standard_normal(rng, (1, head_channels, 1, 1)) * np.sqrt(2.0 / head_channels)
    params["proj.w"] = Tensor(w, requires_grad=True)
    params["proj.b"] = Tensor(np.full(1, np.log(prior / (1.0 - prior))), requires_grad=True)
    return params


def classify(fused: FusedFeatures, params, size: int) -> ChangeMap:
    """Per-level 3x3 conv + ReLU, nearest upsample to ``size``, sum, 1x1 conv to logits."""
    total = None
    for lvl, feat in enumerate(fused.levels):
        key = f"cls{lvl}.w"
        if key not in params:
            raise ContractError(f"no classifier weights for level {lvl}")
        if feat.shape[1] != params[key].shape[1]:
            raise ShapeError(f"level {lvl} has {feat.shape[1]} channels, head expects {params[key].shape[1]}")
        extent = feat.shape[-1]
        if size % extent or feat.shape[-2] != extent:
            raise ShapeError(f"level extent {feat.shape[-2:]} does not divide output size {size}")
        h = relu(conv2d(feat, params[key], params[f"cls{lvl}.b"], padding=1))
        if size != extent:
            h = upsample_nearest(h, size // extent)
        total = h if total is None else add(total, h)
    if total is None:
        raise ContractError("no fused levels to classify")
    return ChangeMap(conv2d(total, params["proj.w"], params["proj.b"]))


def _check_binary(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ContractError(f"{what} must contain only 0 and 1")
    return m


def bce_loss(logits: Tensor, mask, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy, stable for any finite logits."""
    m = _check_binary(mask, "mask").astype(np.float64)
    if m.shape != logits.shape:
        raise ShapeError(f"mask {m.shape} and logits {logits.shape} differ")
    return bce_with_logits(logits, m, pos_weight)


def threshold(prob_map, tau: float) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {tau}")
    return (np.asarray(prob_map) >= tau).astype(np.uint8)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    tau: float | None = None
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int, tau: float | None = None) -> MetricsReport:
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    iou = ratio(tp, tp + fp + fn, "iou")
    oa = ratio(tp + tn, tp + fp + fn + tn, "oa")
    return MetricsReport(int(tp), int(fp), int(fn), int(tn), precision, recall, f1, iou, oa,
                         tau, undefined)


def confusion(pred_mask, truth_mask) -> tuple[int, int, int, int]:
    p = _check_binary(pred_mask, "prediction").astype(bool)
    t = _check_binary(truth_mask, "ground truth").astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, p.size - tp - fp - fn


def evaluate(pred_mask, truth_mask, tau: float | None = None) -> MetricsReport:
    """Pixel confusion counts and the ratios derived from them.

    Ratios with a zero denominator are reported as 0 and listed in
    ``undefined``.
    """
    return metrics_from_counts(*confusion(pred_mask, truth_mask), tau=tau)
