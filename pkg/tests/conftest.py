import numpy as np
import pytest

from qfkit.compiler import compile_plan, fold_batchnorm, fuse
from qfkit.quantizer import collect_calibration, compute_all_qparams, quantize_graph
from qfkit.tensor import TensorF32
from qfkit.uynet import UYNetConfig, build_uynet

SMALL_CFG = UYNetConfig(input_size=(64, 64), encoder_depth=2, base_channels=16)


def image_batch(n, h=64, w=64, seed=0):
    """Image-like inputs: per-frame brightness plus per-pixel texture in [0, 1]."""
    rng = np.random.default_rng(seed)
    base = rng.random((n, 1, 1, 1), dtype=np.float32)
    tex = rng.random((n, 3, h, w), dtype=np.float32)
    return np.clip(0.6 * base + 0.4 * tex, 0.0, 1.0).astype(np.float32)


@pytest.fixture(scope="session")
def small_model():
    """Folded small model with calibration stats, quantized graph, and plan."""
    g = build_uynet(SMALL_CFG, seed=7)
    gf = fold_batchnorm(g)
    calib = [TensorF32.from_array(x) for x in image_batch(128, seed=1)]
    stats = collect_calibration(gf, calib)
    qg = quantize_graph(gf, compute_all_qparams(stats))
    plan = compile_plan(fuse(qg), batch_size=8)
    return {"graph": g, "folded": gf, "stats": stats, "qgraph": qg, "plan": plan}
