"""Execution paths and inference I/O.

Three ways to run a model live here: the FP32 reference interpreter (the
numerical oracle), the INT8 node-by-node interpreter, and the compiled-plan
executor. The two INT8 paths share the same integer kernels, so their
outputs agree bit-for-bit; the plan executor additionally honors the stage
structure and may run same-stage instructions on a thread pool.
"""

from __future__ import annotations

import ast
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .errors import DataError, QuantizationError, ShapeError
from .graph import (
    BatchNorm,
    Concat,
    Conv2D,
    ConvBiasReLU,
    Dense,
    DenseSigmoid,
    GlobalAvgPool,
    Graph,
    Input,
    MaxPool2D,
    ReLU,
    Sigmoid,
    SoftmaxPerPixel,
    Upsample2xNearest,
    kind_name,
)
from .tensor import QuantParams, Shape, TensorF32, TensorI8, quantize, requantize_fixed_point

NPY_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64
MAX_BATCH = 8
DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class PreprocessConfig:
    """Resize target, 0-255 -> 0-1 scaling, and the model's input qparams."""

    input_qp: QuantParams
    target_size: tuple[int, int] = (224, 224)
    value_scale: float = 1.0 / 255.0


@dataclass(frozen=True)
class InferenceResult:
    """Per-frame outputs: mask probabilities, fake score, thresholded label."""

    frame_id: str
    mask: TensorF32  # (2, H, W), channel 1 is the fake probability
    label: int  # 1 iff score >= 0.5
    score: float


@dataclass(frozen=True)
class EvalReport:
    total: int
    correct: int
    wrong: int
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "correct": self.correct,
            "wrong": self.wrong,
            "accuracy": self.accuracy,
        }


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def resize_to_f32(image: np.ndarray, target_size: tuple[int, int],
                  value_scale: float = 1.0 / 255.0) -> TensorF32:
    """Bilinear-resize an (H, W, 3) uint8 image and scale values to [0, 1].

    Returns a (3, H, W) tensor in channel-first order.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError("image has a zero dimension")
    th, tw = target_size
    resized = np.asarray(
        Image.fromarray(image.astype(np.uint8)).resize((tw, th), Image.BILINEAR)
    )
    chw = resized.astype(np.float32).transpose(2, 0, 1) * np.float32(value_scale)
    return TensorF32.from_array(chw)


def preprocess(image: np.ndarray, cfg: PreprocessConfig) -> TensorI8:
    """Resize, scale to [0, 1], and quantize with the model input qparams."""
    f32 = resize_to_f32(image, cfg.target_size, cfg.value_scale)
    return quantize(f32, cfg.input_qp)


def load_image(path) -> np.ndarray:
    """Decode a PNG or PPM file to an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}")


# --------------------------------------------------------------------------
# FP32 reference interpreter
# --------------------------------------------------------------------------

def run_graph_f32_nodes(g: Graph, batch: np.ndarray) -> dict[int, np.ndarray]:
    """Evaluate every node on an (N, C, H, W) float batch; returns all outputs."""
    inp = g.input_node.kind
    batch = np.ascontiguousarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != (inp.channels, inp.height, inp.width):
        raise ShapeError(
            f"batch shape {batch.shape} does not match graph input "
            f"(N, {inp.channels}, {inp.height}, {inp.width})"
        )
    values: dict[int, np.ndarray] = {}
    for node in g.nodes:
        kind = node.kind
        ins = [values[i] for i in node.inputs]
        if isinstance(kind, Input):
            out = batch
        elif isinstance(kind, Conv2D):
            w = node.weights
            out = kernels.conv2d_f32(ins[0], w["kernel"], w.get("bias"), kind.stride, kind.padding)
        elif isinstance(kind, BatchNorm):
            w = node.weights
            out = kernels.batchnorm_f32(ins[0], w["gamma"], w["beta"], w["mean"], w["var"], kind.eps)
        elif isinstance(kind, ReLU):
            out = kernels.relu_f32(ins[0])
        elif isinstance(kind, MaxPool2D):
            out = kernels.maxpool2d_f32(ins[0], kind.kernel, kind.stride)
        elif isinstance(kind, Upsample2xNearest):
            out = kernels.upsample2x_f32(ins[0])
        elif isinstance(kind, Concat):
            out = kernels.concat_channels(ins)
        elif isinstance(kind, GlobalAvgPool):
            out = kernels.global_avg_pool_f32(ins[0])
        elif isinstance(kind, Dense):
            w = node.weights
            out = kernels.dense_f32(ins[0], w["kernel"], w.get("bias"))
        elif isinstance(kind, Sigmoid):
            out = kernels.sigmoid_f32(ins[0])
        elif isinstance(kind, SoftmaxPerPixel):
            out = kernels.softmax_channels_f32(ins[0])
        else:
            raise ShapeError(f"node {node.id}: cannot interpret kind {kind_name(kind)}")
        values[node.id] = out
    return values


def run_graph_f32(g: Graph, batch: TensorF32) -> tuple[np.ndarray, np.ndarray]:
    """Forward the FP32 graph; returns (mask probabilities, class scores)."""
    values = run_graph_f32_nodes(g, batch.data)
    mask = values[g.output_ids[0]]
    if len(g.output_ids) == 1:
        return mask, np.zeros(batch.data.shape[0], dtype=np.float32)
    scores = values[g.output_ids[1]].reshape(batch.data.shape[0])
    return mask, scores


# --------------------------------------------------------------------------
# INT8 execution
# --------------------------------------------------------------------------

def _run_int8_kind(kind, node, ins: list[np.ndarray], in_qps, out_qp, mid_qp,
                   requant=None):
    """Shared INT8 dispatch used by both the interpreter and the executor.

    ``requant`` carries the plan's precomputed fixed-point constants; the
    interpreter leaves it None and the identical constants are re-derived.
    """
    qw = getattr(node, "qweights", None)
    if requant is None:
        requant = kernels.requant_specs_for(
            kind, getattr(node, "w_scale", None), mid_qp, out_qp,
            in_qps, [a.shape for a in ins], qw,
        )
    if isinstance(kind, (Conv2D, ConvBiasReLU)):
        return kernels.conv2d_int8(
            ins[0], in_qps[0].zero_point, qw["kernel"], qw.get("bias"),
            kind.stride, kind.padding, requant[0], out_qp,
            relu=isinstance(kind, ConvBiasReLU),
        )
    if isinstance(kind, ReLU):
        return kernels.relu_int8(ins[0], in_qps[0], out_qp, requant[0] if requant else None)
    if isinstance(kind, MaxPool2D):
        return kernels.maxpool2d_int8(ins[0], kind.kernel, kind.stride)
    if isinstance(kind, Upsample2xNearest):
        return kernels.upsample2x_int8(ins[0])
    if isinstance(kind, Concat):
        return kernels.concat_int8(ins, list(in_qps), requant, out_qp)
    if isinstance(kind, GlobalAvgPool):
        return kernels.global_avg_pool_int8(ins[0], in_qps[0], requant[0], out_qp)
    if isinstance(kind, Dense):
        return kernels.dense_int8(
            ins[0], in_qps[0].zero_point, qw["kernel"], qw.get("bias"), requant[0], out_qp
        )
    if isinstance(kind, DenseSigmoid):
        logits = kernels.dense_int8(
            ins[0], in_qps[0].zero_point, qw["kernel"], qw.get("bias"), requant[0], mid_qp
        )
        return kernels.sigmoid_int8(logits, mid_qp, out_qp)
    if isinstance(kind, Sigmoid):
        return kernels.sigmoid_int8(ins[0], in_qps[0], out_qp)
    if isinstance(kind, SoftmaxPerPixel):
        return kernels.softmax_channels_int8(ins[0], in_qps[0], out_qp)
    raise ShapeError(f"cannot execute kind {kind_name(kind)} in INT8")


def run_quantized_graph(qg, x: np.ndarray) -> dict[int, np.ndarray]:
    """Node-by-node INT8 interpreter over an (N, C, H, W) int8 batch.

    This is the semantics reference the compiled plan is checked against.
    """
    if x.dtype != np.int8:
        raise QuantizationError(f"quantized graph input must be int8, got {x.dtype}")
    by_id = {n.id: n for n in qg.nodes}
    values: dict[int, np.ndarray] = {}
    for node in qg.nodes:
        if isinstance(node.kind, Input):
            values[node.id] = x
            continue
        ins = [values[i] for i in node.inputs]
        in_qps = tuple(by_id[i].out_qp for i in node.inputs)
        values[node.id] = _run_int8_kind(node.kind, node, ins, in_qps, node.out_qp, node.mid_qp)
    return values


def _run_instruction_nhwc(ins, arrays: list[np.ndarray]) -> np.ndarray:
    """Execute one plan instruction on channel-last buffers."""
    kind = ins.kind
    qw = ins.qweights
    if isinstance(kind, (Conv2D, ConvBiasReLU)):
        relu = isinstance(kind, ConvBiasReLU)
        if ins.direct:
            return kernels.conv2d_int8_nhwc_direct(
                arrays[0], ins.in_qps[0].zero_point, ins.packed_kernel, qw.get("bias"),
                kind.stride, kind.padding, ins.requant[0], ins.out_qp, relu,
            )
        return kernels.conv2d_int8_nhwc_gemm(
            arrays[0], ins.in_qps[0].zero_point, qw["kernel"], qw.get("bias"),
            kind.stride, kind.padding, ins.requant[0], ins.out_qp, relu,
        )
    if isinstance(kind, ReLU):
        return kernels.relu_int8(arrays[0], ins.in_qps[0], ins.out_qp,
                                 ins.requant[0] if ins.requant else None)
    if isinstance(kind, MaxPool2D):
        return kernels.maxpool2d_int8_nhwc(arrays[0], kind.kernel, kind.stride)
    if isinstance(kind, Upsample2xNearest):
        return kernels.upsample2x_int8_nhwc(arrays[0])
    if isinstance(kind, Concat):
        return kernels.concat_int8_nhwc(arrays, list(ins.in_qps), ins.requant, ins.out_qp)
    if isinstance(kind, GlobalAvgPool):
        return kernels.global_avg_pool_int8_nhwc(arrays[0], ins.in_qps[0], ins.requant[0], ins.out_qp)
    if isinstance(kind, (Dense, DenseSigmoid)):
        x = arrays[0]
        if x.ndim == 4 and (x.shape[1] != 1 or x.shape[2] != 1):
            # Flatten order must match the channel-first interpreter.
            x = kernels.nhwc_to_nchw(x)
        target = ins.mid_qp if isinstance(kind, DenseSigmoid) else ins.out_qp
        q = kernels.dense_int8(
            x, ins.in_qps[0].zero_point, qw["kernel"], qw.get("bias"), ins.requant[0], target
        )
        if isinstance(kind, DenseSigmoid):
            q = kernels.sigmoid_int8(q, ins.mid_qp, ins.out_qp)
        return q
    if isinstance(kind, (Sigmoid, SoftmaxPerPixel)):
        # Run the exact float kernel the interpreter uses (channel-first),
        # so the float detour is bit-identical across executors.
        x = arrays[0]
        rank4 = x.ndim == 4
        if rank4:
            x = kernels.nhwc_to_nchw(x)
        if isinstance(kind, Sigmoid):
            q = kernels.sigmoid_int8(x, ins.in_qps[0], ins.out_qp)
        else:
            q = kernels.softmax_channels_int8(x, ins.in_qps[0], ins.out_qp)
        return kernels.nchw_to_nhwc(q) if rank4 else q
    raise ShapeError(f"cannot execute kind {kind_name(kind)} in a plan")


def execute_plan(plan, x: np.ndarray, parallel: bool = False) -> dict[int, np.ndarray]:
    """Run a compiled plan on an (batch, C, H, W) int8 array.

    Returns {output node id: int8 array (channel-first)}. Internally the
    plan executes channel-last. Stages run in order; instructions inside a
    stage are independent and run serially or on a thread pool, with
    bit-identical results either way.
    """
    expect = (plan.batch_size, *plan.input_shape)
    if x.shape != expect or x.dtype != np.int8:
        raise ShapeError(f"plan expects int8 batch of shape {expect}, got {x.dtype} {x.shape}")
    buffers: dict[int, np.ndarray] = {plan.input_buffer: kernels.nchw_to_nhwc(x)}

    def run(ins):
        arrays = [buffers[b] for b in ins.inputs]
        buffers[ins.output] = _run_instruction_nhwc(ins, arrays)

    by_stage: dict[int, list] = {}
    for ins in plan.instructions:
        by_stage.setdefault(ins.stage, []).append(ins)

    if parallel:
        with ThreadPoolExecutor() as pool:
            for stage in sorted(by_stage):
                list(pool.map(run, by_stage[stage]))
    else:
        for stage in sorted(by_stage):
            for ins in by_stage[stage]:
                run(ins)

    out: dict[int, np.ndarray] = {}
    for node_id, buf, _, _ in plan.outputs:
        arr = buffers[buf]
        out[node_id] = kernels.nhwc_to_nchw(arr) if arr.ndim == 4 else arr
    return out


def _dequantize_mask(codes: np.ndarray, qp: QuantParams) -> np.ndarray:
    probs = (codes.astype(np.float32) - qp.zero_point) * np.float32(qp.scale)
    np.clip(probs, 0.0, 1.0, out=probs)
    sums = probs.sum(axis=0, keepdims=True)
    uniform = np.float32(1.0 / probs.shape[0])
    return np.where(sums > 0, probs / np.maximum(sums, 1e-12), uniform).astype(np.float32)


def run_plan_int8(plan, batch: list[TensorI8], frame_ids: list[str] | None = None,
                  parallel: bool = False) -> list[InferenceResult]:
    """Classify and segment up to eight frames through a compiled plan.

    Partial batches are padded internally with zero-point frames; padded
    outputs never reach the caller.
    """
    n = len(batch)
    if not 1 <= n <= plan.batch_size:
        raise DataError(f"batch size must be in [1, {plan.batch_size}], got {n}")
    if len(plan.outputs) != 2:
        raise DataError("plan does not expose mask and class outputs")
    if frame_ids is None:
        frame_ids = [str(i) for i in range(n)]
    if len(frame_ids) != n:
        raise DataError("frame_ids length does not match batch")

    frames = []
    for t in batch:
        if t.qparams != plan.input_qp:
            raise QuantizationError(
                f"input qparams {t.qparams} do not match plan input {plan.input_qp}"
            )
        if t.shape.dims != plan.input_shape:
            raise ShapeError(f"frame shape {t.shape.dims} does not match plan {plan.input_shape}")
        frames.append(t.data)
    pad = np.full(plan.input_shape, plan.input_qp.zero_point, dtype=np.int8)
    while len(frames) < plan.batch_size:
        frames.append(pad)

    outputs = execute_plan(plan, np.stack(frames), parallel=parallel)
    (mask_id, _, mask_qp, _), (cls_id, _, cls_qp, _) = plan.outputs
    masks = outputs[mask_id]
    scores = outputs[cls_id]

    results = []
    for i in range(n):
        mask = _dequantize_mask(masks[i], mask_qp)
        score = float((float(scores[i].ravel()[0]) - cls_qp.zero_point) * cls_qp.scale)
        score = min(max(score, 0.0), 1.0)
        results.append(
            InferenceResult(
                frame_id=frame_ids[i],
                mask=TensorF32.from_array(mask),
                label=int(score >= DECISION_THRESHOLD),
                score=score,
            )
        )
    return results


# --------------------------------------------------------------------------
# NPY v1.0 mask files
# --------------------------------------------------------------------------

def save_mask_npy(mask: np.ndarray, path) -> None:
    """Write a (2,H,W) or (H,W) float mask as an NPY v1.0 file, bit-exactly.

    Header: magic, version (1,0), little-endian u16 header length, then the
    dict text space-padded so the data section starts on a 64-byte boundary,
    terminated by a newline.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim not in (2, 3):
        raise DataError(f"mask must be (2,H,W) or (H,W), got shape {mask.shape}")
    shape_repr = str(tuple(int(d) for d in mask.shape))
    base = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % shape_repr
    prefix_len = len(NPY_MAGIC) + 2 + 2  # magic + version + u16 length
    pad = (-(prefix_len + len(base) + 1)) % _HEADER_ALIGN
    header = base + " " * pad + "\n"
    with open(path, "wb") as f:
        f.write(NPY_MAGIC)
        f.write(bytes((1, 0)))
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("latin1"))
        f.write(np.ascontiguousarray(mask, dtype="<f4").tobytes())


def load_mask_npy(path) -> np.ndarray:
    """Read back an NPY v1.0 float32 file written by save_mask_npy."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:6] != NPY_MAGIC:
        raise DataError(f"{path}: malformed header (bad magic {raw[:6]!r})")
    if raw[6:8] != bytes((1, 0)):
        raise DataError(f"{path}: unsupported NPY version {raw[6]}.{raw[7]}")
    (hlen,) = struct.unpack_from("<H", raw, 8)
    header_end = 10 + hlen
    if len(raw) < header_end:
        raise DataError(f"{path}: malformed header (truncated)")
    text = raw[10:header_end].decode("latin1")
    try:
        meta = ast.literal_eval(text.strip())
        descr, fortran, shape = meta["descr"], meta["fortran_order"], tuple(meta["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError):
        raise DataError(f"{path}: malformed header dict")
    if descr != "<f4" or fortran is not False:
        raise DataError(f"{path}: unsupported descr/order {descr!r}/{fortran!r}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = raw[header_end:]
    if len(data) < count * 4:
        raise DataError(f"{path}: data section truncated")
    return np.frombuffer(data[: count * 4], dtype="<f4").reshape(shape).copy()


# --------------------------------------------------------------------------
# Evaluation against a labels file
# --------------------------------------------------------------------------

def load_labels(path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise DataError(f"{path}: labels file must map frame ids to 0/1")
    labels = {}
    for k, v in raw.items():
        if v not in (0, 1):
            raise DataError(f"{path}: label for {k!r} must be 0 or 1, got {v!r}")
        labels[str(k)] = int(v)
    return labels


def evaluate(results: list[InferenceResult], labels_path) -> EvalReport:
    """Compare predicted labels with the ground-truth JSON file."""
    if not results:
        raise DataError("no results to evaluate")
    labels = load_labels(labels_path)
    correct = 0
    for r in results:
        if r.frame_id not in labels:
            raise DataError(f"no label for frame {r.frame_id!r}")
        correct += int(r.label == labels[r.frame_id])
    total = len(results)
    return EvalReport(
        total=total,
        correct=correct,
        wrong=total - correct,
        accuracy=correct / total,
    )
