import math

import numpy as np
import pytest

from qfkit.errors import GraphError, ShapeError
from qfkit.graph import Dense, GlobalAvgPool, Sigmoid, SoftmaxPerPixel, infer_shapes, validate
from qfkit.runtime import run_graph_f32
from qfkit.tensor import Shape, TensorF32
from qfkit.uynet import UYNetConfig, bce_class, build_uynet, cross_entropy_seg, final_loss


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(GraphError):
            UYNetConfig(input_size=(100, 100), encoder_depth=3)

    def test_depth_minimum(self):
        with pytest.raises(GraphError):
            UYNetConfig(encoder_depth=1)

    def test_defaults(self):
        cfg = UYNetConfig()
        assert cfg.input_size == (224, 224)
        assert cfg.encoder_depth == 4
        assert cfg.base_channels == 16


class TestBuild:
    def test_default_output_shapes(self):
        g = build_uynet(UYNetConfig(), seed=0)
        assert len(g.output_ids) == 2
        shapes = infer_shapes(g, Shape((2, 3, 224, 224)))
        assert shapes[g.output_ids[0]].dims == (2, 2, 224, 224)
        assert shapes[g.output_ids[1]].dims == (2, 1)

    def test_small_config_output_shapes(self):
        g = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=0)
        shapes = infer_shapes(g, Shape((3, 3, 64, 64)))
        assert shapes[g.output_ids[0]].dims == (3, 2, 64, 64)

    def test_same_seed_bit_identical(self):
        a = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=11)
        b = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=11)
        for na, nb in zip(a.nodes, b.nodes):
            if na.weights:
                for key in na.weights:
                    assert na.weights[key].tobytes() == nb.weights[key].tobytes()

    def test_different_seed_differs(self):
        a = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=1)
        b = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=2)
        kernels_a = next(n.weights["kernel"] for n in a.nodes if n.weights)
        kernels_b = next(n.weights["kernel"] for n in b.nodes if n.weights)
        assert not np.array_equal(kernels_a, kernels_b)

    def test_validates(self):
        g = build_uynet(UYNetConfig(input_size=(96, 96), encoder_depth=3, base_channels=8), seed=4)
        assert validate(g).ok

    def test_classifier_branch_skips_decoder(self):
        g = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=0)
        mask_id, class_id = g.output_ids
        by_id = {n.id: n for n in g.nodes}

        # Ancestors of the class output.
        stack, class_anc = [class_id], set()
        while stack:
            nid = stack.pop()
            if nid in class_anc:
                continue
            class_anc.add(nid)
            stack.extend(by_id[nid].inputs)

        # The classification path is GAP -> Dense -> Sigmoid off the
        # bottleneck; no decoder node (upsample/concat/mask head) feeds it.
        decoder_kinds = {"Upsample2xNearest", "Concat", "SoftmaxPerPixel"}
        assert not any(type(by_id[n].kind).__name__ in decoder_kinds for n in class_anc)
        chain = [by_id[class_id]]
        chain.append(by_id[chain[-1].inputs[0]])
        chain.append(by_id[chain[-1].inputs[0]])
        assert isinstance(chain[0].kind, Sigmoid)
        assert isinstance(chain[1].kind, Dense)
        assert isinstance(chain[2].kind, GlobalAvgPool)

    def test_seg_only_variant(self):
        g = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=0,
                        include_classifier=False)
        assert len(g.output_ids) == 1
        assert validate(g).ok
        assert not any(isinstance(n.kind, (Dense, GlobalAvgPool, Sigmoid)) for n in g.nodes)

    def test_softmax_normalization_over_random_inputs(self):
        g = build_uynet(UYNetConfig(input_size=(64, 64), encoder_depth=2), seed=5)
        rng = np.random.default_rng(0)
        for trial in range(20):
            x = TensorF32.from_array(rng.random((1, 3, 64, 64), dtype=np.float32))
            mask, _ = run_graph_f32(g, x)
            assert np.abs(mask.sum(axis=1) - 1.0).max() <= 1e-6

    def test_mask_spatial_dims_match_input(self):
        for size, depth in [((64, 64), 2), ((96, 96), 3), ((32, 32), 2)]:
            g = build_uynet(UYNetConfig(input_size=size, encoder_depth=depth, base_channels=4), seed=0)
            shapes = infer_shapes(g, Shape((1, 3, *size)))
            assert shapes[g.output_ids[0]].dims == (1, 2, *size)


class TestLosses:
    def test_ce_uniform_is_ln2(self):
        probs = np.full((1, 2, 4, 4), 0.5, dtype=np.float32)
        target = np.zeros((1, 4, 4), dtype=np.int64)
        assert cross_entropy_seg(probs, target) == pytest.approx(math.log(2), abs=1e-6)

    def test_ce_perfect_prediction_is_zero(self):
        probs = np.zeros((1, 2, 2, 2), dtype=np.float32)
        probs[:, 1] = 1.0
        target = np.ones((1, 2, 2), dtype=np.int64)
        assert cross_entropy_seg(probs, target) == pytest.approx(0.0, abs=1e-9)

    def test_ce_quarter_probability(self):
        # -ln 0.25 = ln 4
        probs = np.zeros((1, 2, 2, 2), dtype=np.float32)
        probs[:, 0] = 0.25
        probs[:, 1] = 0.75
        target = np.zeros((1, 2, 2), dtype=np.int64)
        assert cross_entropy_seg(probs, target) == pytest.approx(math.log(4), abs=1e-6)

    def test_ce_rejects_unnormalized(self):
        probs = np.full((1, 2, 2, 2), 0.4, dtype=np.float32)
        target = np.zeros((1, 2, 2), dtype=np.int64)
        with pytest.raises(ShapeError):
            cross_entropy_seg(probs, target)

    def test_ce_rejects_shape_mismatch(self):
        probs = np.full((1, 2, 2, 2), 0.5, dtype=np.float32)
        with pytest.raises(ShapeError):
            cross_entropy_seg(probs, np.zeros((1, 3, 3), dtype=np.int64))

    def test_bce_half_is_ln2(self):
        assert bce_class(0.5, 1) == pytest.approx(math.log(2), abs=1e-6)

    def test_bce_confident_correct_is_zero(self):
        assert bce_class(1.0, 1) == pytest.approx(0.0, abs=1e-9)

    def test_bce_hand_value(self):
        # -ln 0.9 for p=0.1, label=0
        assert bce_class(0.1, 0) == pytest.approx(-math.log(0.9), abs=1e-6)

    def test_final_loss_mean(self):
        assert final_loss(2.0, 4.0).l_final == 3.0
        assert final_loss(0.0, 0.0).l_final == 0.0
        r = final_loss(math.log(2), math.log(2))
        assert r.l_final == pytest.approx(math.log(2), abs=1e-12)
        assert r.l_final == (r.l_seg + r.l_cls) / 2

    def test_final_loss_rejects_negative(self):
        with pytest.raises(ShapeError):
            final_loss(-1.0, 0.0)
