"""Lowering passes: BatchNorm folding, node fusion, and plan construction.

A Plan is the executable form of a quantized graph: a topologically ordered
instruction list grouped into stages (instructions within a stage are
mutually independent and may run in parallel), plus a buffer table produced
by lifetime analysis with greedy first-fit reuse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CompileError, GraphError
from .graph import (
    BatchNorm,
    Conv2D,
    ConvBiasReLU,
    Dense,
    DenseSigmoid,
    Graph,
    Node,
    ReLU,
    Sigmoid,
    infer_shapes,
    kind_name,
)
from .kernels import pack_kernel_nhwc_i16, requant_specs_for, use_direct_conv
from .quantizer import QNode, QuantizedGraph
from .tensor import QuantParams, RequantSpec, Shape


def fold_batchnorm(g: Graph) -> Graph:
    """Fold every BatchNorm into the Conv2D feeding it.

    w' = w * gamma / sqrt(var + eps); b' = (b - mean) * same + beta. The
    folded graph computes the same function to FP32 rounding (<= 1e-4 per
    element on sane magnitudes).
    """
    by_id = {n.id: n for n in g.nodes}
    folded: dict[int, int] = {}  # bn id -> conv id
    new_nodes: list[Node] = []
    for node in g.nodes:
        if isinstance(node.kind, BatchNorm):
            producer = by_id[node.inputs[0]]
            if not isinstance(producer.kind, Conv2D):
                raise GraphError(
                    f"node {node.id}: BatchNorm must follow Conv2D, "
                    f"found {kind_name(producer.kind)}"
                )
            consumers = [n.id for n in g.nodes if producer.id in n.inputs]
            if consumers != [node.id]:
                raise GraphError(
                    f"node {node.id}: conv {producer.id} has other consumers, cannot fold"
                )
            w = node.weights
            inv = w["gamma"].astype(np.float64) / np.sqrt(w["var"].astype(np.float64) + node.kind.eps)
            kernel = producer.weights["kernel"].astype(np.float64) * inv[:, None, None, None]
            bias = producer.weights.get("bias")
            bias = np.zeros(len(inv)) if bias is None else bias.astype(np.float64)
            bias = (bias - w["mean"].astype(np.float64)) * inv + w["beta"].astype(np.float64)
            replaced = next(n for n in new_nodes if n.id == producer.id)
            replaced.weights = {
                "kernel": kernel.astype(np.float32),
                "bias": bias.astype(np.float32),
            }
            folded[node.id] = producer.id
            continue
        inputs = tuple(folded.get(i, i) for i in node.inputs)
        new_nodes.append(Node(id=node.id, kind=node.kind, inputs=inputs, weights=node.weights))
    output_ids = tuple(folded.get(i, i) for i in g.output_ids)
    return Graph(nodes=new_nodes, input_id=g.input_id, output_ids=output_ids)


def fuse(qg: QuantizedGraph) -> QuantizedGraph:
    """Collapse Conv->ReLU into ConvBiasReLU and Dense->Sigmoid into DenseSigmoid.

    A pair fuses only when the first node's sole consumer is the second.
    Conv/ReLU additionally requires shared output qparams (the quantizer
    arranges this), so the fused integer ReLU max(q, zp) is exact.
    """
    consumers: dict[int, list[int]] = {n.id: [] for n in qg.nodes}
    for node in qg.nodes:
        for i in node.inputs:
            consumers[i].append(node.id)

    by_id = {n.id: n for n in qg.nodes}
    drop: set[int] = set()
    fused: dict[int, QNode] = {}
    for node in qg.nodes:
        if isinstance(node.kind, ReLU):
            producer = by_id[node.inputs[0]]
            if (
                isinstance(producer.kind, Conv2D)
                and consumers[producer.id] == [node.id]
                and producer.out_qp == node.out_qp
                and producer.id not in qg.output_ids  # dropped node must not be an output
            ):
                k = producer.kind
                fused[node.id] = QNode(
                    id=node.id,
                    kind=ConvBiasReLU(k.out_channels, k.kernel_h, k.kernel_w, k.stride, k.padding),
                    inputs=producer.inputs,
                    qweights=producer.qweights,
                    w_scale=producer.w_scale,
                    out_qp=node.out_qp,
                )
                drop.add(producer.id)
        elif isinstance(node.kind, Sigmoid):
            producer = by_id[node.inputs[0]]
            if isinstance(producer.kind, Dense) and consumers[producer.id] == [node.id]:
                fused[node.id] = QNode(
                    id=node.id,
                    kind=DenseSigmoid(producer.kind.out_features),
                    inputs=producer.inputs,
                    qweights=producer.qweights,
                    w_scale=producer.w_scale,
                    out_qp=node.out_qp,
                    mid_qp=producer.out_qp,
                )
                drop.add(producer.id)

    new_nodes = []
    for node in qg.nodes:
        if node.id in drop:
            continue
        new_nodes.append(fused.get(node.id, node))
    return QuantizedGraph(nodes=new_nodes, input_id=qg.input_id, output_ids=qg.output_ids)


@dataclass
class Instruction:
    """One executable step: fused op, buffer wiring, stage, requant constants.

    Convolutions carry a kernel route chosen at compile time: ``direct``
    (int16 multiply-accumulate over prepacked channel-last weights) or the
    GEMM route. Both produce identical codes; the choice is pure speed.
    """

    op: str
    node_id: int
    kind: object
    inputs: tuple[int, ...]  # buffer ids
    output: int  # buffer id
    stage: int
    out_shape: tuple[int, ...]
    in_qps: tuple[QuantParams, ...]
    out_qp: QuantParams
    mid_qp: QuantParams | None = None
    qweights: dict | None = None
    requant: tuple[RequantSpec, ...] = ()
    direct: bool = False
    packed_kernel: np.ndarray | None = None


@dataclass
class Plan:
    """Compiled, scheduled, buffer-allocated form of a quantized graph."""

    instructions: list[Instruction]
    buffers: dict[int, int]  # buffer id -> byte size
    peak_memory: int
    num_stages: int
    batch_size: int
    input_buffer: int
    input_shape: tuple[int, int, int]  # (C, H, W) of one frame
    input_qp: QuantParams
    outputs: tuple[tuple[int, int, QuantParams, tuple[int, ...]], ...]
    # each output: (node_id, buffer_id, qparams, shape)

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "num_stages": self.num_stages,
            "peak_memory": self.peak_memory,
            "input": {
                "buffer": self.input_buffer,
                "shape": list(self.input_shape),
                "qparams": {"scale": self.input_qp.scale, "zero_point": self.input_qp.zero_point},
            },
            "outputs": [
                {
                    "node": node_id,
                    "buffer": buf,
                    "qparams": {"scale": qp.scale, "zero_point": qp.zero_point},
                    "shape": list(shape),
                }
                for node_id, buf, qp, shape in self.outputs
            ],
            "buffers": [
                {"id": bid, "nbytes": size} for bid, size in sorted(self.buffers.items())
            ],
            "instructions": [
                {
                    "op": ins.op,
                    "node": ins.node_id,
                    "stage": ins.stage,
                    "inputs": list(ins.inputs),
                    "output": ins.output,
                    "out_shape": list(ins.out_shape),
                    "kernel": "direct-i16" if ins.direct else "gemm",
                    "requant": [
                        {"ratio": r.ratio, "multiplier": r.multiplier, "shift": r.shift}
                        for r in ins.requant
                    ],
                }
                for ins in self.instructions
            ],
        }


def compile_plan(qg: QuantizedGraph, batch_size: int = 8) -> Plan:
    """Schedule a quantized graph into stages and allocate reusable buffers.

    Stage of an instruction is 1 + max(stage of its producers); instructions
    sharing a stage have no mutual dependencies. Buffers are assigned values
    greedily in definition order, reusing the first buffer whose previous
    occupant died in an earlier stage, so two values never alias while both
    are live (or within one stage).
    """
    if batch_size < 1:
        raise CompileError(f"batch size must be >= 1, got {batch_size}")
    by_id = {n.id: n for n in qg.nodes}
    seen: set[int] = set()
    for node in qg.nodes:
        for ref in node.inputs:
            if ref not in seen:
                raise CompileError(f"node {node.id} depends on {ref} which is not defined yet")
        seen.add(node.id)

    inp = by_id[qg.input_id].kind
    input_shape = Shape((batch_size, inp.channels, inp.height, inp.width))
    shapes = infer_shapes(
        Graph(
            nodes=[Node(id=n.id, kind=n.kind, inputs=n.inputs, weights=n.qweights) for n in qg.nodes],
            input_id=qg.input_id,
            output_ids=qg.output_ids,
        ),
        input_shape,
    )

    # Stage assignment (ASAP waves); the graph input lives at stage 0.
    stage: dict[int, int] = {qg.input_id: 0}
    for node in qg.nodes:
        if node.id == qg.input_id:
            continue
        stage[node.id] = 1 + max(stage[i] for i in node.inputs)
    num_stages = max(stage.values(), default=0)

    # Lifetimes in stage units; graph outputs stay live past the last stage.
    last_use: dict[int, int] = {nid: stage[nid] for nid in stage}
    for node in qg.nodes:
        for i in node.inputs:
            last_use[i] = max(last_use[i], stage[node.id])
    for out in qg.output_ids:
        last_use[out] = num_stages + 1

    # Greedy first-fit buffer reuse over (def_stage, node id) order.
    buffers: dict[int, int] = {}
    free_at: dict[int, int] = {}
    assignment: dict[int, int] = {}
    for node in qg.nodes:
        size = int(np.prod(shapes[node.id].dims, dtype=np.int64))  # int8: one byte/elem
        chosen = None
        for bid in sorted(buffers):
            if free_at[bid] < stage[node.id]:
                chosen = bid
                break
        if chosen is None:
            chosen = len(buffers)
            buffers[chosen] = 0
        buffers[chosen] = max(buffers[chosen], size)
        free_at[chosen] = last_use[node.id]
        assignment[node.id] = chosen

    instructions: list[Instruction] = []
    for node in qg.nodes:
        if node.id == qg.input_id:
            continue
        in_qps = tuple(by_id[i].out_qp for i in node.inputs)
        in_shapes = tuple(shapes[i].dims for i in node.inputs)
        direct = False
        packed = None
        if isinstance(node.kind, (Conv2D, ConvBiasReLU)):
            out_n, _, out_h, out_w = shapes[node.id].dims
            kq = node.qweights["kernel"]
            direct = use_direct_conv(out_n, kq.shape[1], kq.shape[2], kq.shape[3], out_h, out_w)
            if direct:
                packed = pack_kernel_nhwc_i16(kq)
        instructions.append(
            Instruction(
                op=kind_name(node.kind),
                node_id=node.id,
                kind=node.kind,
                inputs=tuple(assignment[i] for i in node.inputs),
                output=assignment[node.id],
                stage=stage[node.id],
                out_shape=shapes[node.id].dims,
                in_qps=in_qps,
                out_qp=node.out_qp,
                mid_qp=node.mid_qp,
                qweights=node.qweights,
                requant=requant_specs_for(
                    node.kind, node.w_scale, node.mid_qp, node.out_qp,
                    in_qps, in_shapes, node.qweights,
                ),
                direct=direct,
                packed_kernel=packed,
            )
        )
    instructions.sort(key=lambda ins: (ins.stage, ins.node_id))

    outputs = tuple(
        (out, assignment[out], by_id[out].out_qp, shapes[out].dims) for out in qg.output_ids
    )
    return Plan(
        instructions=instructions,
        buffers=buffers,
        peak_memory=sum(buffers.values()),
        num_stages=num_stages,
        batch_size=batch_size,
        input_buffer=assignment[qg.input_id],
        input_shape=(inp.channels, inp.height, inp.width),
        input_qp=by_id[qg.input_id].out_qp,
        outputs=outputs,
    )
