"""Computational-graph IR: node kinds, validation, shape inference, model container.

Graphs are flat topologically ordered node lists. Node inputs may only
reference earlier ids, which makes acyclicity a construction property and
keeps serialization order stable.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ModelFormatError,
    ShapeError,
    TruncatedBlobError,
    VersionMismatchError,
)
from .tensor import QuantParams, Shape

MAGIC = b"QFKMODEL"
CONTAINER_VERSION = 1


# --------------------------------------------------------------------------
# Node kinds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Input:
    """Graph input placeholder carrying the model's natural geometry."""
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2D:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Upsample2xNearest:
    pass


@dataclass(frozen=True)
class Concat:
    """Concatenation along the channel axis."""
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class SoftmaxPerPixel:
    """Softmax over the channel axis, independently per spatial position."""
    pass


# Fused kinds, produced only by the compiler; they never appear in .qfk files.

@dataclass(frozen=True)
class ConvBiasReLU:
    """Conv2D + bias + ReLU collapsed into one instruction."""
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class DenseSigmoid:
    """Dense + Sigmoid collapsed into one instruction."""
    out_features: int


NodeKind = (
    Input
    | Conv2D
    | BatchNorm
    | ReLU
    | MaxPool2D
    | Upsample2xNearest
    | Concat
    | GlobalAvgPool
    | Dense
    | Sigmoid
    | SoftmaxPerPixel
)

_KIND_BY_NAME = {
    "Input": Input,
    "Conv2D": Conv2D,
    "BatchNorm": BatchNorm,
    "ReLU": ReLU,
    "MaxPool2D": MaxPool2D,
    "Upsample2xNearest": Upsample2xNearest,
    "Concat": Concat,
    "GlobalAvgPool": GlobalAvgPool,
    "Dense": Dense,
    "Sigmoid": Sigmoid,
    "SoftmaxPerPixel": SoftmaxPerPixel,
}


def kind_name(kind) -> str:
    return type(kind).__name__


def node_weights(node) -> dict | None:
    """Weight dict of a Node (fp32) or QNode (int8), whichever is present."""
    w = getattr(node, "weights", None)
    if w is None:
        w = getattr(node, "qweights", None)
    return w


@dataclass
class Node:
    """One operator instance: unique id, kind, input node ids, optional weights.

    Weight keys: Conv2D/Dense use ``kernel`` and ``bias``; BatchNorm uses
    ``gamma``, ``beta``, ``mean``, ``var``.
    """

    id: int
    kind: NodeKind
    inputs: tuple[int, ...] = ()
    weights: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.inputs = tuple(int(i) for i in self.inputs)


@dataclass
class Graph:
    """Topologically ordered FP32 graph with one input and 1-2 outputs.

    ``output_ids`` is (mask_logits_id, class_logit_id) for the full multitask
    model; single-output variants (segmentation-only) carry one id.
    """

    nodes: list[Node]
    input_id: int
    output_ids: tuple[int, ...]

    def __post_init__(self):
        self.output_ids = tuple(int(i) for i in self.output_ids)

    def node(self, node_id: int) -> Node:
        return self._by_id[node_id]

    @property
    def _by_id(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self, node_id: int) -> list[int]:
        return [n.id for n in self.nodes if node_id in n.inputs]

    @property
    def input_node(self) -> Node:
        return self.node(self.input_id)


@dataclass
class ValidationReport:
    """Structural violations found in a graph; empty means valid."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(g: Graph) -> ValidationReport:
    """Check ordering, reachability, and output wiring. Violations are data."""
    report = ValidationReport()
    seen: set[int] = set()
    for node in g.nodes:
        if node.id in seen:
            report.violations.append(f"duplicate node id {node.id}")
        for ref in node.inputs:
            if ref not in seen:
                report.violations.append(
                    f"node {node.id} forward reference to {ref}"
                )
        seen.add(node.id)

    inputs = [n for n in g.nodes if isinstance(n.kind, Input)]
    if len(inputs) != 1:
        report.violations.append(f"graph must have exactly one Input node, found {len(inputs)}")
    elif inputs[0].id != g.input_id:
        report.violations.append(
            f"input_id {g.input_id} does not name the Input node {inputs[0].id}"
        )

    if not 1 <= len(g.output_ids) <= 2:
        report.violations.append(f"graph must have 1 or 2 outputs, found {len(g.output_ids)}")
    for out in g.output_ids:
        if out not in seen:
            report.violations.append(f"output id {out} is not a node")

    # Reachability from the input along forward edges.
    reachable = {g.input_id}
    for node in g.nodes:
        if node.inputs and any(i in reachable for i in node.inputs):
            reachable.add(node.id)
    for node in g.nodes:
        if node.id not in reachable:
            report.violations.append(f"node {node.id} unreachable from input")

    for node in g.nodes:
        kind = node.kind
        if isinstance(kind, Conv2D):
            if min(kind.out_channels, kind.kernel_h, kind.kernel_w, kind.stride) < 1:
                report.violations.append(f"node {node.id} has a non-positive conv parameter")
            if kind.padding < 0:
                report.violations.append(f"node {node.id} has negative padding")
        elif isinstance(kind, MaxPool2D) and min(kind.kernel, kind.stride) < 1:
            report.violations.append(f"node {node.id} has a non-positive pool parameter")
        elif isinstance(kind, Dense) and kind.out_features < 1:
            report.violations.append(f"node {node.id} has non-positive out_features")
        elif isinstance(kind, Concat) and len(node.inputs) < 2:
            report.violations.append(f"concat node {node.id} needs >= 2 inputs")
    return report


# --------------------------------------------------------------------------
# Shape inference
# --------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return ho, wo


def infer_shapes(g: Graph, input_shape: Shape) -> dict[int, Shape]:
    """Assign one output shape per node, or raise ShapeError naming the node."""
    inp = g.input_node.kind
    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be rank 4 (N,C,H,W), got {input_shape.dims}")
    n, c, h, w = input_shape
    if (c, h, w) != (inp.channels, inp.height, inp.width):
        raise ShapeError(
            f"node {g.input_id}: input shape {input_shape.dims} does not match "
            f"graph input ({inp.channels}, {inp.height}, {inp.width})"
        )

    shapes: dict[int, Shape] = {}
    for node in g.nodes:
        kind = node.kind
        ins = [shapes[i] for i in node.inputs]
        if isinstance(kind, Input):
            out = input_shape
        elif isinstance(kind, (Conv2D, ConvBiasReLU)):
            (s,) = ins
            if len(s) != 4:
                raise ShapeError(f"node {node.id}: Conv2D input must be rank 4, got {s.dims}")
            kernel = node_weights(node)["kernel"]
            if kernel.shape[1] != s[1]:
                raise ShapeError(
                    f"node {node.id}: kernel expects {kernel.shape[1]} channels, input has {s[1]}"
                )
            ho, wo = _conv_out_hw(s[2], s[3], kind.kernel_h, kind.kernel_w, kind.stride, kind.padding)
            if ho < 1 or wo < 1:
                raise ShapeError(f"node {node.id}: conv collapses {s.dims} to ({ho}, {wo})")
            out = Shape((s[0], kind.out_channels, ho, wo))
        elif isinstance(kind, (BatchNorm, ReLU, Sigmoid)):
            (s,) = ins
            out = s
        elif isinstance(kind, SoftmaxPerPixel):
            (s,) = ins
            if len(s) != 4:
                raise ShapeError(f"node {node.id}: SoftmaxPerPixel input must be rank 4, got {s.dims}")
            out = s
        elif isinstance(kind, MaxPool2D):
            (s,) = ins
            ho, wo = _conv_out_hw(s[2], s[3], kind.kernel, kind.kernel, kind.stride, 0)
            if ho < 1 or wo < 1:
                raise ShapeError(f"node {node.id}: pool collapses {s.dims} to ({ho}, {wo})")
            out = Shape((s[0], s[1], ho, wo))
        elif isinstance(kind, Upsample2xNearest):
            (s,) = ins
            out = Shape((s[0], s[1], s[2] * 2, s[3] * 2))
        elif isinstance(kind, Concat):
            first = ins[0]
            for s in ins[1:]:
                if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
                    raise ShapeError(
                        f"node {node.id}: concat inputs disagree: {first.dims} vs {s.dims}"
                    )
            out = Shape((first[0], sum(s[1] for s in ins), first[2], first[3]))
        elif isinstance(kind, GlobalAvgPool):
            (s,) = ins
            out = Shape((s[0], s[1], 1, 1))
        elif isinstance(kind, (Dense, DenseSigmoid)):
            (s,) = ins
            if len(s) == 4 and (s[2], s[3]) == (1, 1):
                feats = s[1]
            elif len(s) == 2:
                feats = s[1]
            else:
                raise ShapeError(
                    f"node {node.id}: Dense input must be (N,F) or (N,C,1,1), got {s.dims}"
                )
            kernel = node_weights(node)["kernel"]
            if kernel.shape[1] != feats:
                raise ShapeError(
                    f"node {node.id}: dense kernel expects {kernel.shape[1]} features, input has {feats}"
                )
            out = Shape((s[0], kind.out_features))
        else:
            raise ShapeError(f"node {node.id}: no shape rule for {kind_name(kind)}")
        shapes[node.id] = out
    return shapes


# --------------------------------------------------------------------------
# .qfk model container
#
# Layout: 8-byte magic "QFKMODEL", u16 LE version, u32 LE header length,
# UTF-8 JSON header, then the weight blobs concatenated in header order.
# Every blob records its CRC32 in the header, so payload corruption is
# detected without re-parsing.
# --------------------------------------------------------------------------

_DTYPES = {"<f4": np.float32, "<i1": np.int8, "<i4": np.int32}


def _kind_to_json(kind) -> dict:
    return {"op": kind_name(kind), "params": {k: v for k, v in vars(kind).items()}}


def _kind_from_json(d: dict):
    try:
        cls = _KIND_BY_NAME[d["op"]]
    except KeyError:
        raise ModelFormatError(f"unknown node kind {d.get('op')!r}")
    return cls(**d.get("params", {}))


def _collect_blobs(nodes) -> list[tuple[int, str, np.ndarray]]:
    blobs = []
    for node in nodes:
        weights = node_weights(node)
        if weights:
            for name in sorted(weights):
                blobs.append((node.id, name, weights[name]))
    return blobs


def save_model(model, path) -> None:
    """Write a Graph or QuantizedGraph to a .qfk container at ``path``."""
    from .quantizer import QuantizedGraph  # deferred: quantizer imports this module

    precision = "int8" if isinstance(model, QuantizedGraph) else "fp32"
    nodes_json = []
    for node in model.nodes:
        if kind_name(node.kind) not in _KIND_BY_NAME:
            raise ModelFormatError(
                f"node {node.id}: {kind_name(node.kind)} is a compiled kind and cannot be serialized"
            )
        entry = {"id": node.id, "kind": _kind_to_json(node.kind), "inputs": list(node.inputs)}
        if precision == "int8":
            entry["out_qparams"] = {
                "scale": node.out_qp.scale,
                "zero_point": node.out_qp.zero_point,
            }
            if node.w_scale is not None:
                entry["w_scale"] = node.w_scale
        nodes_json.append(entry)

    blobs = _collect_blobs(model.nodes)
    blob_table = []
    payload = bytearray()
    for node_id, name, arr in blobs:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        descr = dtype.str
        if descr not in _DTYPES:
            raise ModelFormatError(f"unsupported weight dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes()
        blob_table.append(
            {
                "node": node_id,
                "name": name,
                "dtype": descr,
                "shape": list(arr.shape),
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
            }
        )
        payload += raw

    header = {
        "precision": precision,
        "graph": {
            "input_id": model.input_id,
            "output_ids": list(model.output_ids),
            "nodes": nodes_json,
        },
        "blobs": blob_table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", CONTAINER_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_model(path):
    """Read a .qfk container; returns a Graph (fp32) or QuantizedGraph (int8)."""
    from .quantizer import QNode, QuantizedGraph

    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise TruncatedBlobError(f"{path}: header truncated")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}")
    off += hlen

    weights: dict[int, dict[str, np.ndarray]] = {}
    for blob in header["blobs"]:
        n = blob["nbytes"]
        if off + n > len(raw):
            raise TruncatedBlobError(
                f"{path}: blob {blob['name']!r} of node {blob['node']} truncated"
            )
        chunk = raw[off : off + n]
        crc = zlib.crc32(chunk) & 0xFFFFFFFF
        if crc != blob["crc32"]:
            raise ChecksumError(
                f"{path}: blob {blob['name']!r} of node {blob['node']} checksum mismatch"
            )
        arr = np.frombuffer(chunk, dtype=np.dtype(blob["dtype"])).reshape(blob["shape"]).copy()
        weights.setdefault(blob["node"], {})[blob["name"]] = arr
        off += n

    gj = header["graph"]
    precision = header.get("precision", "fp32")
    if precision == "fp32":
        nodes = [
            Node(
                id=e["id"],
                kind=_kind_from_json(e["kind"]),
                inputs=tuple(e["inputs"]),
                weights=weights.get(e["id"]),
            )
            for e in gj["nodes"]
        ]
        return Graph(nodes=nodes, input_id=gj["input_id"], output_ids=tuple(gj["output_ids"]))
    if precision == "int8":
        qnodes = []
        for e in gj["nodes"]:
            qp = e["out_qparams"]
            qnodes.append(
                QNode(
                    id=e["id"],
                    kind=_kind_from_json(e["kind"]),
                    inputs=tuple(e["inputs"]),
                    qweights=weights.get(e["id"]),
                    w_scale=e.get("w_scale"),
                    out_qp=QuantParams(qp["scale"], qp["zero_point"]),
                )
            )
        return QuantizedGraph(
            nodes=qnodes, input_id=gj["input_id"], output_ids=tuple(gj["output_ids"])
        )
    raise ModelFormatError(f"{path}: unknown precision {precision!r}")
