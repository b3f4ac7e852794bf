"""Reverse-mode tape: adjoint rules against finite differences."""

import numpy as np
import pytest

from gdcn.errors import ContractViolation
from gdcn.graph import build_adjacency, normalize
from gdcn.tape import (Tape, Tensor, backward, constant, parameter,
                       record_add, record_frobenius_sq,
                       record_log_softmax_rows, record_masked_nll,
                       record_masked_spmm, record_matmul, record_mul,
                       record_relu, record_scale, record_sigmoid,
                       record_slice_cols, record_slice_rows)

from conftest import finite_diff, rel_err, random_edges


class TestMatmul:
    def test_identity_times_w(self):
        t = Tape()
        w = parameter(np.arange(6.0).reshape(3, 2))
        out = record_matmul(t, constant(np.eye(3)), w)
        np.testing.assert_array_equal(out.data, w.data)
        # gradient of sum(out) wrt w is all-ones
        total = record_matmul(t, record_matmul(t, constant(np.ones((1, 3))), out),
                              constant(np.ones((2, 1))))
        g = backward(t, total)
        np.testing.assert_array_equal(g.get(w), np.ones((3, 2)))

    def test_scalar_case(self):
        t = Tape()
        x = constant([[3.0]])
        w = parameter([[2.0]])
        out = record_matmul(t, x, w)
        g = backward(t, out)
        assert g.get(w)[0, 0] == 3.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 4))
        w0 = rng.normal(size=(4, 2))

        def loss_of(w_flat):
            t = Tape()
            w = parameter(w_flat.reshape(4, 2))
            out = record_matmul(t, constant(x0), w)
            return record_frobenius_sq(t, out).item()

        t = Tape()
        w = parameter(w0)
        out = record_matmul(t, constant(x0), w)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss).get(w)
        fd = finite_diff(loss_of, w0.ravel()).reshape(4, 2)
        assert rel_err(g, fd) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            record_matmul(Tape(), constant(np.ones((2, 3))), constant(np.ones((2, 3))))


class TestMaskedSpmm:
    def _graph(self, n=3, seed=1, p=0.9):
        rng = np.random.default_rng(seed)
        return normalize(build_adjacency(random_edges(rng, n, p), n))

    def test_all_ones_gradient_to_h_matches_dense(self):
        a = self._graph(4)
        rng = np.random.default_rng(2)
        h0 = rng.normal(size=(4, 3))
        t = Tape()
        h = parameter(h0)
        mask = constant(np.ones(a.nnz))
        out = record_masked_spmm(t, a, mask, h)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss).get(h)
        dense = a.to_dense()
        want = dense.T @ (2.0 * (dense @ h0))
        np.testing.assert_allclose(g, want, atol=1e-12)

    def test_zero_h_zero_gradients(self):
        a = self._graph(3)
        t = Tape()
        h = constant(np.zeros((3, 2)))
        mask = parameter(np.ones(a.nnz))
        out = record_masked_spmm(t, a, mask, h, differentiate_mask=True)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss)
        np.testing.assert_array_equal(g.get(mask), np.zeros((a.nnz, 1)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_mask_gradient_matches_finite_differences(self):
        a = self._graph(3, seed=5)
        rng = np.random.default_rng(3)
        h0 = rng.normal(size=(3, 2))
        m0 = rng.random(a.nnz)

        def loss_of(m_flat):
            t = Tape()
            mask = parameter(m_flat)
            out = record_masked_spmm(t, a, mask, constant(h0),
                                     differentiate_mask=True)
            return record_frobenius_sq(t, out).item()

        t = Tape()
        mask = parameter(m0)
        out = record_masked_spmm(t, a, mask, constant(h0), differentiate_mask=True)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss).get(mask).ravel()
        fd = finite_diff(loss_of, m0)
        assert rel_err(g, fd) < 1e-5

    def test_alignment_mismatch(self):
        a = self._graph(3)
        with pytest.raises(ContractViolation):
            record_masked_spmm(Tape(), a, constant(np.ones(a.nnz + 2)),
                               constant(np.ones((3, 1))))


class TestElementwise:
    def test_relu_values(self):
        out = record_relu(Tape(), constant([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 2.0]])

    def test_relu_subgradient_zero_at_zero(self):
        t = Tape()
        x = parameter([[0.0, 1.0]])
        out = record_relu(t, x)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss).get(x)
        assert g[0, 0] == 0.0

    def test_sigmoid_value_and_adjoint(self):
        t = Tape()
        x = parameter([[0.0]])
        out = record_sigmoid(t, x)
        assert out.item() == pytest.approx(0.5)
        # loss = sigmoid(x): d/dx = 0.25 at 0
        g = backward(t, out).get(x)
        assert g[0, 0] == pytest.approx(0.25)

    def test_frobenius_identity(self):
        t = Tape()
        w = parameter(np.eye(2))
        loss = record_frobenius_sq(t, w)
        assert loss.item() == pytest.approx(2.0)
        np.testing.assert_allclose(backward(t, loss).get(w), 2.0 * np.eye(2))

    def test_add_scale_mul_fd(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 3))
        y0 = rng.normal(size=(2, 3))

        def loss_of(flat):
            x = parameter(flat[:6].reshape(2, 3))
            y = parameter(flat[6:].reshape(2, 3))
            t = Tape()
            z = record_add(t, record_scale(t, x, 1.7), record_mul(t, x, y))
            return record_frobenius_sq(t, z).item()

        x = parameter(x0)
        y = parameter(y0)
        t = Tape()
        z = record_add(t, record_scale(t, x, 1.7), record_mul(t, x, y))
        loss = record_frobenius_sq(t, z)
        g = backward(t, loss)
        flat = np.concatenate([x0.ravel(), y0.ravel()])
        fd = finite_diff(loss_of, flat)
        assert rel_err(np.concatenate([g.get(x).ravel(), g.get(y).ravel()]), fd) < 1e-6

    def test_mul_broadcast_column(self):
        t = Tape()
        x = parameter(np.ones((3, 2)))
        col = parameter(np.array([[1.0], [2.0], [3.0]]))
        out = record_mul(t, x, col)
        loss = record_frobenius_sq(t, out)
        g = backward(t, loss)
        assert g.get(col).shape == (3, 1)
        assert g.get(x).shape == (3, 2)

    def test_slices_scatter_gradients(self):
        rng = np.random.default_rng(8)
        x0 = rng.normal(size=(3, 4))

        def loss_of(flat):
            t = Tape()
            x = parameter(flat.reshape(3, 4))
            a = record_slice_cols(t, x, 0, 2)
            b = record_slice_rows(t, x, 1, 3)
            return (record_frobenius_sq(t, a).item()
                    + record_frobenius_sq(t, b).item())

        t = Tape()
        x = parameter(x0)
        sa = record_frobenius_sq(t, record_slice_cols(t, x, 0, 2))
        sb = record_frobenius_sq(t, record_slice_rows(t, x, 1, 3))
        loss = record_add(t, sa, sb)
        g = backward(t, loss).get(x)
        fd = finite_diff(loss_of, x0.ravel()).reshape(3, 4)
        assert rel_err(g, fd) < 1e-6


class TestLogSoftmax:
    def test_uniform_row(self):
        out = record_log_softmax_rows(Tape(), constant([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[-np.log(2), -np.log(2)]])

    def test_extreme_row_is_stable(self):
        out = record_log_softmax_rows(Tape(), constant([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert out.data[0, 1] == pytest.approx(-1000.0, abs=1e-9)

    def test_rows_logsumexp_to_zero(self):
        rng = np.random.default_rng(1)
        out = record_log_softmax_rows(Tape(), constant(rng.normal(size=(6, 5)) * 10))
        lse = np.log(np.exp(out.data).sum(axis=1))
        assert np.max(np.abs(lse)) < 1e-12

    def test_nll_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 0])
        observed = np.array([0, 1, 3])

        def loss_of(flat):
            t = Tape()
            x = parameter(flat.reshape(4, 3))
            lp = record_log_softmax_rows(t, x)
            return record_masked_nll(t, lp, labels, observed).item()

        t = Tape()
        x = parameter(x0)
        lp = record_log_softmax_rows(t, x)
        loss = record_masked_nll(t, lp, labels, observed)
        g = backward(t, loss).get(x)
        fd = finite_diff(loss_of, x0.ravel()).reshape(4, 3)
        assert rel_err(g, fd) < 1e-5


class TestMaskedNll:
    def test_constant_logprob(self):
        lp = constant(np.full((3, 2), -0.1))
        loss = record_masked_nll(Tape(), lp, np.array([0, 1, 0]), np.arange(3))
        assert loss.item() == pytest.approx(0.1)

    def test_uniform_prediction(self):
        c = 7
        lp = constant(np.full((5, c), -np.log(c)))
        loss = record_masked_nll(Tape(), lp, np.zeros(5, dtype=int), np.arange(5))
        assert loss.item() == pytest.approx(np.log(c))

    def test_against_direct_sum_oracle(self):
        rng = np.random.default_rng(9)
        raw = rng.normal(size=(6, 4))
        lp_data = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
        labels = rng.integers(0, 4, size=6)
        observed = np.array([1, 3, 4])
        loss = record_masked_nll(Tape(), constant(lp_data), labels, observed)
        want = -np.mean([lp_data[v, labels[v]] for v in observed])
        assert loss.item() == pytest.approx(want, abs=1e-15)

    def test_empty_observed_rejected(self):
        with pytest.raises(ContractViolation):
            record_masked_nll(Tape(), constant(np.zeros((2, 2))),
                              np.array([0, 1]), np.array([], dtype=int))


class TestBackward:
    def test_frobenius_gradient(self):
        t = Tape()
        w = parameter(np.array([[1.0, -2.0], [0.5, 3.0]]))
        loss = record_frobenius_sq(t, w)
        np.testing.assert_allclose(backward(t, loss).get(w), 2.0 * w.data)

    def test_unused_parameter_gets_zeros(self):
        t = Tape()
        w = parameter(np.ones((2, 2)))
        unused = parameter(np.ones((3, 3)))
        loss = record_frobenius_sq(t, w)
        g = backward(t, loss)
        np.testing.assert_array_equal(g.get(unused), np.zeros((3, 3)))

    def test_non_scalar_terminal_rejected(self):
        t = Tape()
        w = parameter(np.ones((2, 2)))
        out = record_relu(t, w)
        with pytest.raises(ContractViolation):
            backward(t, out)

    def test_deterministic_bitwise(self):
        def run():
            rng = np.random.default_rng(42)
            t = Tape()
            x = constant(rng.normal(size=(5, 4)))
            w = parameter(rng.normal(size=(4, 3)))
            lp = record_log_softmax_rows(t, record_matmul(t, x, w))
            loss = record_masked_nll(t, lp, np.array([0, 1, 2, 0, 1]),
                                     np.arange(5))
            return backward(t, loss).get(w)

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_reused_tensor_accumulates(self):
        t = Tape()
        w = parameter(np.array([[2.0]]))
        out = record_add(t, record_scale(t, w, 3.0), record_scale(t, w, 4.0))
        g = backward(t, out).get(w)
        assert g[0, 0] == 7.0
