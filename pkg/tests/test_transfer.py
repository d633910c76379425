import numpy as np
import pytest

from maskx import autograd as ag
from maskx.autograd import Tensor
from maskx.transfer import (
    EmbeddingFileError,
    TransferSpec,
    build_class_embedding,
    embedding_width,
    init_transfer,
    load_embedding_file,
    randn_embedding,
    save_embedding_file,
    transfer_forward,
)

C, D = 4, 6


def det_weights(seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(C + 1, D + 1))), Tensor(rng.normal(size=(4 * C, D + 1)))


def params_for(spec, din, dout, seed=0):
    return {k: Tensor(v.astype(np.float64)) for k, v in init_transfer(np.random.default_rng(seed), spec, din, dout).items()}


class TestEmbedding:
    def test_cls_rows_skip_background(self):
        w_cls, w_box = det_weights()
        emb = build_class_embedding(w_cls, w_box, TransferSpec(source="cls"), C)
        assert np.array_equal(emb.data, w_cls.data[1:])

    def test_box_rows_flatten_four_regressors(self):
        w_cls, w_box = det_weights()
        emb = build_class_embedding(w_cls, w_box, TransferSpec(source="box"), C)
        assert emb.shape == (C, 4 * (D + 1))
        assert np.array_equal(emb.data[2], w_box.data[8:12].ravel())

    def test_cls_box_is_concatenation(self):
        w_cls, w_box = det_weights()
        cls = build_class_embedding(w_cls, w_box, TransferSpec(source="cls"), C).data
        box = build_class_embedding(w_cls, w_box, TransferSpec(source="box"), C).data
        both = build_class_embedding(w_cls, w_box, TransferSpec(source="cls+box"), C).data
        assert both.shape[1] == cls.shape[1] + box.shape[1]
        assert np.array_equal(both, np.concatenate([cls, box], axis=1))

    def test_widths_at_large_scale(self):
        assert embedding_width(TransferSpec(source="cls"), 1024) == 1025
        assert embedding_width(TransferSpec(source="cls+box"), 1024) == 5 * 1025

    def test_randn_deterministic(self):
        assert np.array_equal(randn_embedding(5, 8, 3), randn_embedding(5, 8, 3))
        assert not np.array_equal(randn_embedding(5, 8, 3), randn_embedding(5, 8, 4))

    def test_randn_ignores_detection_weights(self):
        spec = TransferSpec(source="randn", randn_seed=2)
        a = build_class_embedding(*det_weights(0), spec, C).data
        b = build_class_embedding(*det_weights(1), spec, C).data
        assert np.array_equal(a, b) and a.shape == (C, 5 * (D + 1))

    def test_class_count_mismatch(self):
        w_cls, w_box = det_weights()
        with pytest.raises(ag.ShapeError):
            build_class_embedding(w_cls, w_box, TransferSpec(), C + 1)


class TestTransferForward:
    def test_zero_parameters_zero_output(self):
        spec = TransferSpec(stop_grad=False)
        params = {k: Tensor(np.zeros_like(v.data)) for k, v in params_for(spec, 5, 3).items()}
        out = transfer_forward(ag.constant(np.random.default_rng(0).normal(size=(4, 5))), params, spec)
        assert not out.data.any()

    def test_identical_rows_identical_outputs(self):
        spec = TransferSpec()
        emb = np.random.default_rng(0).normal(size=(4, 5))
        emb[3] = emb[1]
        out = transfer_forward(ag.constant(emb), params_for(spec, 5, 3), spec).data
        assert np.array_equal(out[3], out[1])

    def test_hand_computed_two_layer_leaky(self):
        spec = TransferSpec(layers=2, activation="leaky_relu", leaky_slope=0.01)
        params = {
            "transfer.l0.w": Tensor(np.array([[1.0, -2.0], [0.5, 1.0]])),
            "transfer.l0.b": Tensor(np.array([0.0, -1.0])),
            "transfer.l1.w": Tensor(np.array([[2.0, 1.0], [-1.0, 3.0]])),
            "transfer.l1.b": Tensor(np.array([0.5, 0.0])),
        }
        emb = np.array([[1.0, 1.0], [2.0, 0.5]])
        # row 0: h = (-1, 0.5) -> (-0.01, 0.5) -> (0.48+0.5, 0.01+1.5)
        # row 1: h = (1, 0.5)  -> (1, 0.5)     -> (2+0.5+0.5, -1+1.5)
        expected = np.array([[0.98, 1.51], [3.0, 0.5]])
        out = transfer_forward(ag.constant(emb), params, spec).data
        assert np.allclose(out, expected, atol=1e-12)

    def test_single_layer_is_affine(self):
        spec = TransferSpec(layers=1, activation="none")
        params = params_for(spec, 5, 3)
        emb = np.random.default_rng(1).normal(size=(4, 5))
        out = transfer_forward(ag.constant(emb), params, spec).data
        w, b = params["transfer.l0.w"].data, params["transfer.l0.b"].data
        assert np.allclose(out, emb @ w.T + b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_row_permutation_equivariance(self, seed):
        spec = TransferSpec(layers=3, activation="relu")
        params = params_for(spec, 5, 3, seed)
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        out = transfer_forward(ag.constant(emb), params, spec).data
        out_p = transfer_forward(ag.constant(emb[perm]), params, spec).data
        assert np.array_equal(out_p, out[perm])

    def test_changing_one_row_changes_only_that_output(self):
        spec = TransferSpec()
        params = params_for(spec, 5, 3)
        emb = np.random.default_rng(2).normal(size=(4, 5))
        out = transfer_forward(ag.constant(emb), params, spec).data
        emb[2] += 1.0
        out2 = transfer_forward(ag.constant(emb), params, spec).data
        changed = np.any(out != out2, axis=1)
        assert changed.tolist() == [False, False, True, False]

    @pytest.mark.parametrize("stop_grad", [True, False])
    def test_stop_grad_controls_embedding_gradient(self, stop_grad):
        spec = TransferSpec(stop_grad=stop_grad)
        params = {k: Tensor(v.data, requires_grad=True) for k, v in params_for(spec, 5 * (D + 1), 3).items()}
        w_cls = Tensor(det_weights()[0].data, requires_grad=True)
        w_box = Tensor(det_weights()[1].data, requires_grad=True)
        with ag.Tape():
            emb = build_class_embedding(w_cls, w_box, spec, C)
            loss = ag.sum_all(ag.mul(transfer_forward(emb, params, spec), transfer_forward(emb, params, spec)))
        grads = ag.backward(loss, wrt=[w_cls, w_box])
        moved = np.abs(grads[w_cls]).sum() + np.abs(grads[w_box]).sum()
        assert (moved == 0) == stop_grad

    def test_width_mismatch(self):
        spec = TransferSpec()
        with pytest.raises(ag.ShapeError):
            transfer_forward(ag.constant(np.ones((4, 6))), params_for(spec, 5, 3), spec)

    def test_final_layer_starts_small(self):
        spec = TransferSpec(layers=2)
        p = init_transfer(np.random.default_rng(0), spec, 400, 33)
        assert np.std(p["transfer.l1.w"]) < 0.2 * np.std(p["transfer.l0.w"]) * np.sqrt(400 / 33)


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [dict(layers=0), dict(layers=4), dict(source="glove"),
                                        dict(activation="tanh"), dict(hidden=-1), dict(source="external")])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TransferSpec(**kwargs)


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path):
        emb = np.random.default_rng(0).normal(size=(3, 4))
        save_embedding_file(tmp_path / "e.txt", emb)
        assert np.array_equal(load_embedding_file(tmp_path / "e.txt", 3), emb)

    def test_class_count_mismatch(self, tmp_path):
        save_embedding_file(tmp_path / "e.txt", np.ones((3, 4)))
        with pytest.raises(EmbeddingFileError):
            load_embedding_file(tmp_path / "e.txt", 4)

    def test_ragged_rows(self, tmp_path):
        (tmp_path / "e.txt").write_text("embedding 2 3\n1 2 3\n4 5\n")
        with pytest.raises(EmbeddingFileError):
            load_embedding_file(tmp_path / "e.txt")

    def test_bad_header(self, tmp_path):
        (tmp_path / "e.txt").write_text("2 3\n1 2 3\n4 5 6\n")
        with pytest.raises(EmbeddingFileError):
            load_embedding_file(tmp_path / "e.txt")

    def test_external_source_uses_file_rows(self):
        ext = np.random.default_rng(0).normal(size=(C, 9))
        emb = build_class_embedding(*det_weights(), TransferSpec(source="external", embedding_file="x"), C, ext)
        assert np.array_equal(emb.data, ext)
