"""Post-training quantization: calibration statistics and INT8 graph emission.

Calibration runs the FP32 graph over a sample set and tracks, per node
output, the running min/max plus a 2048-bin magnitude histogram. Histogram
bin edges are always powers of two and grow by doubling, so merging shard
statistics is exact and associative: collecting over shards then merging
equals one pass over everything, bin for bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, QuantizationError
from .graph import BatchNorm, Conv2D, Dense, Graph, MaxPool2D, ReLU, Upsample2xNearest
from .tensor import INT8_MAX, INT8_MIN, QuantParams, TensorF32, round_half_away

HIST_BINS = 2048
PERCENTILE = 99.9
CALIB_MIN_IMAGES = 100
CALIB_MAX_IMAGES = 1000


@dataclass
class NodeStats:
    """Running activation statistics for one node output."""

    minimum: float = math.inf
    maximum: float = -math.inf
    count: int = 0
    hist: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))
    hist_limit: float = 1.0  # power-of-two upper bound on observed |x|

    def observe(self, values: np.ndarray, images: int) -> None:
        values = np.asarray(values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise CalibrationError("non-finite activation encountered during calibration")
        self.minimum = min(self.minimum, float(values.min()))
        self.maximum = max(self.maximum, float(values.max()))
        self.count += images
        mags = np.abs(values).ravel()
        top = float(mags.max())
        if top >= self.hist_limit:
            self._grow(2.0 ** math.frexp(top)[1])
        idx = np.floor(mags * (HIST_BINS / self.hist_limit)).astype(np.int64)
        np.clip(idx, 0, HIST_BINS - 1, out=idx)
        self.hist += np.bincount(idx, minlength=HIST_BINS)

    def _grow(self, new_limit: float) -> None:
        while self.hist_limit < new_limit:
            folded = self.hist[0::2] + self.hist[1::2]
            self.hist = np.zeros(HIST_BINS, dtype=np.int64)
            self.hist[: HIST_BINS // 2] = folded
            self.hist_limit *= 2.0

    def merge(self, other: "NodeStats") -> "NodeStats":
        out = NodeStats()
        out.minimum = min(self.minimum, other.minimum)
        out.maximum = max(self.maximum, other.maximum)
        out.count = self.count + other.count
        limit = max(self.hist_limit, other.hist_limit)
        a, b = self._rebinned(limit), other._rebinned(limit)
        out.hist = a + b
        out.hist_limit = limit
        return out

    def _rebinned(self, limit: float) -> np.ndarray:
        tmp = NodeStats(hist=self.hist.copy(), hist_limit=self.hist_limit)
        tmp._grow(limit)
        return tmp.hist

    def percentile_magnitude(self, pct: float = PERCENTILE) -> float:
        """Upper edge of the first bin whose cumulative count reaches pct%."""
        total = int(self.hist.sum())
        if total == 0:
            raise CalibrationError("no observations recorded")
        cum = np.cumsum(self.hist)
        # Counts are integers; the epsilon keeps 99.9% of 1000 at 999, not
        # 999.0000000001.
        target = pct / 100.0 * total - 1e-6
        b = int(np.searchsorted(cum, target))
        b = min(b, HIST_BINS - 1)
        return (b + 1) * self.hist_limit / HIST_BINS

    def to_dict(self) -> dict:
        return {
            "min": self.minimum,
            "max": self.maximum,
            "count": self.count,
            "hist_limit": self.hist_limit,
            "hist": self.hist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeStats":
        return cls(
            minimum=d["min"],
            maximum=d["max"],
            count=d["count"],
            hist=np.asarray(d["hist"], dtype=np.int64),
            hist_limit=d["hist_limit"],
        )


def collect_calibration(
    g: Graph,
    images: list[TensorF32],
    force: bool = False,
    batch_size: int = 8,
) -> dict[int, NodeStats]:
    """Run FP32 inference over the calibration images, recording per-node stats.

    The set size must lie in [100, 1000] unless ``force`` is set; larger sets
    buy nothing, smaller ones miss activation range.
    """
    from .runtime import run_graph_f32_nodes  # runtime does not import back

    if any(isinstance(n.kind, BatchNorm) for n in g.nodes):
        raise CalibrationError("graph must be BatchNorm-folded before calibration")
    n = len(images)
    if not force and not CALIB_MIN_IMAGES <= n <= CALIB_MAX_IMAGES:
        raise CalibrationError(
            f"calibration set has {n} images; expected around "
            f"{CALIB_MIN_IMAGES}-{CALIB_MAX_IMAGES} (pass force=True to override)"
        )
    if n == 0:
        raise CalibrationError("calibration set is empty")

    stats: dict[int, NodeStats] = {node.id: NodeStats() for node in g.nodes}
    for start in range(0, n, batch_size):
        chunk = images[start : start + batch_size]
        batch = np.stack([t.data for t in chunk])
        outputs = run_graph_f32_nodes(g, batch)
        for node_id, arr in outputs.items():
            stats[node_id].observe(arr, images=len(chunk))
    return stats


def merge_stats(a: dict[int, NodeStats], b: dict[int, NodeStats]) -> dict[int, NodeStats]:
    """Combine statistics collected over two shards of a calibration set."""
    if a.keys() != b.keys():
        raise CalibrationError("cannot merge stats for different graphs")
    return {k: a[k].merge(b[k]) for k in a}


def compute_qparams(stats: NodeStats, strategy: str = "minmax") -> QuantParams:
    """Derive activation quantization parameters from calibrated statistics.

    minmax maps [min, max] onto the full int8 range. percentile centers a
    symmetric range on the 99.9th-percentile magnitude, which shrugs off
    isolated outliers. A constant activation (min == max) gets a centered
    range of width max(|value|, 1).
    """
    if stats.count == 0:
        raise CalibrationError("cannot compute qparams from empty statistics")
    if strategy == "minmax":
        if stats.minimum == stats.maximum:
            # Constant activation: centered range of width max(|value|, 1).
            scale = max(abs(stats.maximum), 1.0) * 2.0 / 255.0
            return QuantParams(scale=scale, zero_point=0)
        # Extend the range to include zero so the zero point stays inside
        # int8 and real 0.0 (padding, ReLU floor) is exactly representable.
        lo = min(stats.minimum, 0.0)
        hi = max(stats.maximum, 0.0)
        scale = (hi - lo) / 255.0
        zp = float(round_half_away(np.float64(-128.0 - lo / scale)))
        zp = int(min(max(zp, INT8_MIN), INT8_MAX))
        return QuantParams(scale=scale, zero_point=zp)
    if strategy == "percentile":
        p = stats.percentile_magnitude()
        return QuantParams(scale=2.0 * p / 255.0, zero_point=0)
    raise QuantizationError(f"unknown quantization strategy {strategy!r}")


def compute_all_qparams(
    stats: dict[int, NodeStats], strategy: str = "minmax"
) -> dict[int, QuantParams]:
    return {node_id: compute_qparams(s, strategy) for node_id, s in stats.items()}


@dataclass
class QNode:
    """Quantized counterpart of a Node: int8 weights, int32 bias, output qparams."""

    id: int
    kind: object
    inputs: tuple[int, ...]
    qweights: dict[str, np.ndarray] | None
    w_scale: float | None
    out_qp: QuantParams
    mid_qp: QuantParams | None = None  # fused DenseSigmoid keeps the logit qparams here

    def __post_init__(self):
        self.inputs = tuple(int(i) for i in self.inputs)


@dataclass
class QuantizedGraph:
    """Structure mirror of a Graph with INT8 weights and per-node activation qparams."""

    nodes: list[QNode]
    input_id: int
    output_ids: tuple[int, ...]
    precision: str = "int8"

    def __post_init__(self):
        self.output_ids = tuple(int(i) for i in self.output_ids)

    def node(self, node_id: int) -> QNode:
        return {n.id: n for n in self.nodes}[node_id]

    @property
    def input_qp(self) -> QuantParams:
        return self.node(self.input_id).out_qp


# Kinds whose output codes are taken verbatim (or order-preserved) from their
# input, so they inherit the producer's qparams. Keeping ReLU on its
# producer's grid makes max(q, zp) an exact ReLU and lets fusion preserve
# INT8 semantics bit-for-bit.
_INHERIT_KINDS = (ReLU, MaxPool2D, Upsample2xNearest)


def _quantize_weights_symmetric(kernel: np.ndarray) -> tuple[np.ndarray, float]:
    maxabs = float(np.abs(kernel).max()) if kernel.size else 0.0
    w_scale = maxabs / 127.0 if maxabs > 0.0 else 1.0
    q = round_half_away(kernel.astype(np.float64) / w_scale)
    q = np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)
    return q, w_scale


def quantize_graph(g: Graph, qparams: dict[int, QuantParams]) -> QuantizedGraph:
    """Emit the INT8 graph: symmetric per-tensor weights, int32 biases at
    s_in * s_w, and one QuantParams per node output."""
    if any(isinstance(n.kind, BatchNorm) for n in g.nodes):
        raise QuantizationError("graph must be BatchNorm-folded before quantization")
    for node in g.nodes:
        if node.id not in qparams:
            raise QuantizationError(f"missing quantization parameters for node {node.id}")

    assigned: dict[int, QuantParams] = {}
    qnodes: list[QNode] = []
    for node in g.nodes:
        if isinstance(node.kind, _INHERIT_KINDS):
            out_qp = assigned[node.inputs[0]]
        else:
            out_qp = qparams[node.id]
        assigned[node.id] = out_qp

        qweights = None
        w_scale = None
        if isinstance(node.kind, (Conv2D, Dense)):
            kernel_q, w_scale = _quantize_weights_symmetric(node.weights["kernel"])
            qweights = {"kernel": kernel_q}
            bias = node.weights.get("bias")
            if bias is not None:
                s_in = assigned[node.inputs[0]].scale
                bq = round_half_away(bias.astype(np.float64) / (s_in * w_scale))
                qweights["bias"] = np.clip(bq, np.iinfo(np.int32).min, np.iinfo(np.int32).max).astype(np.int32)

        qnodes.append(
            QNode(
                id=node.id,
                kind=node.kind,
                inputs=node.inputs,
                qweights=qweights,
                w_scale=w_scale,
                out_qp=out_qp,
            )
        )
    return QuantizedGraph(nodes=qnodes, input_id=g.input_id, output_ids=g.output_ids)
