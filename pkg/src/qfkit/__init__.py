"""qfkit: INT8 quantization, compilation, and batched inference for a
multitask (segmentation + classification) deepfake-detection CNN."""

from .tensor import QuantParams, Shape, TensorF32, TensorI8, dequantize, quantize, requantize
from .graph import Graph, Node, infer_shapes, load_model, save_model, validate
from .uynet import UYNetConfig, bce_class, build_uynet, cross_entropy_seg, final_loss
from .quantizer import (
    NodeStats,
    QuantizedGraph,
    collect_calibration,
    compute_qparams,
    merge_stats,
    quantize_graph,
)
from .compiler import Plan, compile_plan, fold_batchnorm, fuse
from .runtime import (
    EvalReport,
    InferenceResult,
    PreprocessConfig,
    evaluate,
    execute_plan,
    load_mask_npy,
    preprocess,
    run_graph_f32,
    run_plan_int8,
    run_quantized_graph,
    save_mask_npy,
)
from .dataset import DatasetManifest, cluster_faces, make_mask, split_dataset
from .bench import BenchReport, compare_report, measure_fps

__version__ = "0.1.0"
