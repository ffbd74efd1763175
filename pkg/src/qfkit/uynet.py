"""U-YNet construction and training losses.

The model is a UNet encoder/decoder producing a two-channel per-pixel
real/fake mask, plus a classification branch off the bottleneck
(GlobalAvgPool -> Dense(1) -> Sigmoid) that scores the whole frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .graph import (
    BatchNorm,
    Concat,
    Conv2D,
    Dense,
    GlobalAvgPool,
    Graph,
    Input,
    MaxPool2D,
    Node,
    ReLU,
    Sigmoid,
    SoftmaxPerPixel,
    Upsample2xNearest,
)

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class UYNetConfig:
    """Architecture knobs. Spatial size must survive ``encoder_depth`` halvings."""

    input_size: tuple[int, int] = (224, 224)
    encoder_depth: int = 4
    base_channels: int = 16
    seg_classes: int = 2

    def __post_init__(self):
        h, w = self.input_size
        if self.encoder_depth < 2:
            raise GraphError(f"encoder_depth must be >= 2, got {self.encoder_depth}")
        if self.base_channels < 1:
            raise GraphError(f"base_channels must be >= 1, got {self.base_channels}")
        if h % (1 << self.encoder_depth) or w % (1 << self.encoder_depth):
            raise GraphError(
                f"input size {self.input_size} not divisible by 2**{self.encoder_depth}"
            )
        if self.seg_classes != 2:
            raise GraphError("segmentation head is fixed at 2 classes")


@dataclass(frozen=True)
class LossReport:
    """Segmentation CE, classification BCE, and their average."""

    l_seg: float
    l_cls: float
    l_final: float


def _he_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    fan_in = in_ch * kh * kw
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal((out_ch, in_ch, kh, kw)) * std).astype(np.float32)


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, kind, inputs=(), weights=None) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(id=node_id, kind=kind, inputs=tuple(inputs), weights=weights))
        return node_id


def build_uynet(cfg: UYNetConfig, seed: int, include_classifier: bool = True) -> Graph:
    """Construct the multitask graph with He-initialized weights.

    The same seed always yields bit-identical weights. With
    ``include_classifier`` False the result is the segmentation-only UNet
    (single mask output), used for benchmark variants.
    """
    rng = np.random.default_rng(seed)
    b = _Builder()
    h, w = cfg.input_size

    def conv_bn_relu(x_id: int, in_ch: int, out_ch: int) -> int:
        conv = b.add(
            Conv2D(out_channels=out_ch, kernel_h=3, kernel_w=3, stride=1, padding=1),
            [x_id],
            weights={
                "kernel": _he_kernel(rng, out_ch, in_ch, 3, 3),
                "bias": np.zeros(out_ch, dtype=np.float32),
            },
        )
        bn = b.add(
            BatchNorm(eps=1e-5),
            [conv],
            weights={
                "gamma": np.ones(out_ch, dtype=np.float32),
                "beta": np.zeros(out_ch, dtype=np.float32),
                "mean": np.zeros(out_ch, dtype=np.float32),
                "var": np.ones(out_ch, dtype=np.float32),
            },
        )
        return b.add(ReLU(), [bn])

    def double_conv(x_id: int, in_ch: int, out_ch: int) -> int:
        mid = conv_bn_relu(x_id, in_ch, out_ch)
        return conv_bn_relu(mid, out_ch, out_ch)

    input_id = b.add(Input(channels=3, height=h, width=w))

    # Encoder: double conv per stage, skip taken before pooling.
    x = input_id
    in_ch = 3
    skips: list[tuple[int, int]] = []
    for stage in range(cfg.encoder_depth):
        out_ch = cfg.base_channels << stage
        x = double_conv(x, in_ch, out_ch)
        skips.append((x, out_ch))
        x = b.add(MaxPool2D(kernel=2, stride=2), [x])
        in_ch = out_ch

    bottleneck_ch = cfg.base_channels << cfg.encoder_depth
    bottleneck = double_conv(x, in_ch, bottleneck_ch)

    # Decoder: upsample, concat the matching skip, double conv back down.
    x = bottleneck
    in_ch = bottleneck_ch
    for stage in reversed(range(cfg.encoder_depth)):
        skip_id, skip_ch = skips[stage]
        up = b.add(Upsample2xNearest(), [x])
        cat = b.add(Concat(), [up, skip_id])
        x = double_conv(cat, in_ch + skip_ch, cfg.base_channels << stage)
        in_ch = cfg.base_channels << stage

    mask_conv = b.add(
        Conv2D(out_channels=cfg.seg_classes, kernel_h=1, kernel_w=1, stride=1, padding=0),
        [x],
        weights={
            "kernel": _he_kernel(rng, cfg.seg_classes, in_ch, 1, 1),
            "bias": np.zeros(cfg.seg_classes, dtype=np.float32),
        },
    )
    mask_out = b.add(SoftmaxPerPixel(), [mask_conv])

    if not include_classifier:
        return Graph(nodes=b.nodes, input_id=input_id, output_ids=(mask_out,))

    gap = b.add(GlobalAvgPool(), [bottleneck])
    logit = b.add(
        Dense(out_features=1),
        [gap],
        weights={
            "kernel": (
                rng.standard_normal((1, bottleneck_ch)) * math.sqrt(2.0 / bottleneck_ch)
            ).astype(np.float32),
            "bias": np.zeros(1, dtype=np.float32),
        },
    )
    class_out = b.add(Sigmoid(), [logit])

    return Graph(nodes=b.nodes, input_id=input_id, output_ids=(mask_out, class_out))


def cross_entropy_seg(mask_probs: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel cross entropy of (N,2,H,W) probabilities vs a 0/1 mask.

    Probabilities are floored at 1e-12 before the log; per-pixel channel sums
    must already be within 1e-5 of one.
    """
    probs = np.asarray(mask_probs, dtype=np.float64)
    target = np.asarray(target)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"mask probabilities must be (N,2,H,W), got {probs.shape}")
    if target.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise ShapeError(
            f"target shape {target.shape} does not match probabilities {probs.shape}"
        )
    sums = probs.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ShapeError("per-pixel probabilities do not sum to 1")
    if not np.isin(target, (0, 1)).all():
        raise ShapeError("target mask must be binary")
    idx = target.astype(np.int64)
    picked = np.take_along_axis(probs, idx[:, None, :, :], axis=1)[:, 0]
    return float(-np.log(np.maximum(picked, _PROB_FLOOR)).mean())


def bce_class(p: float, label: int) -> float:
    """Binary cross entropy of a single sigmoid score against a 0/1 label."""
    if label not in (0, 1):
        raise ShapeError(f"label must be 0 or 1, got {label}")
    p = min(max(float(p), _PROB_FLOOR), 1.0 - _PROB_FLOOR)
    return float(-(label * math.log(p) + (1 - label) * math.log(1.0 - p)))


def final_loss(l_seg: float, l_cls: float) -> LossReport:
    """Average the two task losses."""
    if l_seg < 0 or l_cls < 0:
        raise ShapeError("losses must be nonnegative")
    return LossReport(l_seg=float(l_seg), l_cls=float(l_cls), l_final=(float(l_seg) + float(l_cls)) / 2.0)
