"""ARM estimator against enumeration oracles; concrete path against FD."""

import itertools

import mpmath as mp
import numpy as np
import pytest
from scipy.special import expit, logit

from gdcn.errors import EstimatorFailure
from gdcn.estimators import (ArmDraw, arm_gradient, arm_pseudo_masks,
                             chain_to_kuma, concrete_gradient, kuma_partials)
from gdcn.graph import build_adjacency, normalize
from gdcn.masks import sample_concrete_mask
from gdcn.model import GCNConfig  # noqa: F401  (imported for API parity)
from gdcn.tape import (Tape, backward, constant, parameter,
                       record_frobenius_sq, record_masked_spmm)
from gdcn.variational import KumaraswamyParams, kuma_sample, record_kuma_sample

from conftest import finite_diff, random_edges, rel_err

mp.mp.dps = 25


def exact_shared_alpha_gradient(loss_fn, n_vars: int, alpha: float) -> float:
    """Enumeration oracle: d/d alpha E[L(z)], z_i iid Bernoulli(sigmoid(alpha)).

    Uses the exact score-function identity over all 2^n outcomes.
    """
    p = expit(alpha)
    total = 0.0
    for z in itertools.product((0.0, 1.0), repeat=n_vars):
        z = np.array(z)
        prob = np.prod(np.where(z == 1.0, p, 1.0 - p))
        score = np.sum(z - p)
        total += prob * score * loss_fn(z)
    return total


class TestArmGradient:
    def test_constant_loss_identically_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            draw = ArmDraw(u=[rng.random(5)], alpha=np.array([rng.normal()]))
            est = arm_gradient(lambda z: 3.25, draw)
            assert est.grad_alpha[0] == 0.0
            assert est.per_layer_variance[0] == 0.0

    def test_single_edge_linear_loss(self):
        # L(z) = z: analytic gradient sigma(a)(1-sigma(a)) = 0.25 at a=0
        rng = np.random.default_rng(1)
        total = 0.0
        n = 10 ** 5
        for _ in range(n):
            draw = ArmDraw(u=[rng.random(1)], alpha=np.array([0.0]))
            total += arm_gradient(lambda z: float(z[0][0]), draw).grad_alpha[0]
        assert total / n == pytest.approx(0.25, abs=0.005)

    def test_three_edge_quadratic_against_enumeration(self):
        alpha = 0.4
        w = np.array([1.3, -0.7, 0.5])

        def loss(z):
            z = np.asarray(z, dtype=np.float64).ravel()
            return float((w @ z - 0.6) ** 2)

        exact = exact_shared_alpha_gradient(loss, 3, alpha)
        rng = np.random.default_rng(2)
        draws = np.empty(10 ** 5)
        for i in range(len(draws)):
            d = ArmDraw(u=[rng.random(3)], alpha=np.array([alpha]))
            draws[i] = arm_gradient(lambda z: loss(z[0]), d).grad_alpha[0]
        mean = draws.mean()
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(mean - exact) < 4.0 * se
        assert abs(mean - exact) < 0.01 * abs(exact)

    def test_alpha_negation_complements_masks(self):
        """Negating alpha complements the two pseudo-mask settings.

        Z1(-a) = 1 - Z2(a) and Z2(-a) = 1 - Z1(a) for the same u; for a
        linear loss the single-draw estimate is invariant under the flip,
        matching the even analytic gradient sum(w) * sigmoid'(alpha).
        """
        rng = np.random.default_rng(3)
        u = rng.random(4)
        w = np.array([1.0, -2.0, 0.5, 3.0])

        def loss(z):
            return float(np.asarray(z[0]) @ w)

        d_pos = ArmDraw(u=[u.copy()], alpha=np.array([0.8]))
        d_neg = ArmDraw(u=[u.copy()], alpha=np.array([-0.8]))
        z1p, z2p = arm_pseudo_masks(d_pos)
        z1n, z2n = arm_pseudo_masks(d_neg)
        np.testing.assert_array_equal(z1n[0], 1.0 - z2p[0])
        np.testing.assert_array_equal(z2n[0], 1.0 - z1p[0])
        gp = arm_gradient(loss, d_pos).grad_alpha[0]
        gn = arm_gradient(loss, d_neg).grad_alpha[0]
        assert gp == pytest.approx(gn)

    def test_non_finite_loss_raises(self):
        draw = ArmDraw(u=[np.array([0.5])], alpha=np.array([0.0]))
        with pytest.raises(EstimatorFailure):
            arm_gradient(lambda z: float("nan"), draw)

    def test_estimates_and_variance_finite(self):
        rng = np.random.default_rng(4)
        draw = ArmDraw(u=[rng.random(6), rng.random(3)],
                       alpha=np.array([0.2, -0.5]))
        est = arm_gradient(
            lambda z: float(sum(np.sum(v) for v in z)), draw)
        assert np.all(np.isfinite(est.grad_alpha))
        assert np.all(np.isfinite(est.per_layer_variance))
        assert est.per_layer_variance.shape == (2,)


class TestChainToKuma:
    def test_zero_in_zero_out(self):
        assert chain_to_kuma(0.0, 0.5, 1.0, 1.0, 0.3) == (0.0, 0.0)

    def test_matches_fd_of_composition(self):
        # alpha(a, b) = logit(1 - kuma_sample(a, b, u)) at fixed u
        u = 0.25
        a0, b0 = 1.0, 1.0
        pi = kuma_sample(a0, b0, u)
        g_a, g_b = chain_to_kuma(1.0, pi, a0, b0, u)

        def f(v):
            return float(logit(1.0 - kuma_sample(v[0], v[1], u)))

        fd = finite_diff(f, np.array([a0, b0]), h=1e-7)
        assert rel_err(np.array([g_a, g_b]), fd, floor=1e-3) < 1e-6

    def test_kuma_partials_fd(self):
        for a, b, u in ((1.5, 2.5, 0.4), (0.7, 1.1, 0.8), (2.0, 0.5, 0.15)):
            d_a, d_b = kuma_partials(a, b, u)
            fd = finite_diff(lambda v: kuma_sample(v[0], v[1], u),
                             np.array([a, b]), h=1e-7)
            assert rel_err(np.array([d_a, d_b]), fd, floor=1e-3) < 1e-5

    def test_full_pipeline_unbiased_for_kuma_parameters(self):
        """ARM + chain rule vs a quadrature-FD oracle on a 2-variable toy."""
        a0, b0 = 1.2, 2.0
        w = np.array([1.3, -0.7])

        def loss(z):
            z = np.asarray(z, dtype=np.float64).ravel()
            return float((w @ z + 0.4) ** 2)

        def expected_loss_given_pi(pi):
            # drop indicators are Bernoulli(1 - pi)
            p = 1.0 - pi
            total = 0.0
            for z in itertools.product((0.0, 1.0), repeat=2):
                z = np.array(z)
                prob = np.prod(np.where(z == 1.0, p, 1.0 - p))
                total += prob * loss(z)
            return total

        def objective(v):
            a, b = mp.mpf(float(v[0])), mp.mpf(float(v[1]))
            return float(mp.quad(
                lambda x: a * b * x ** (a - 1) * (1 - x ** a) ** (b - 1)
                * expected_loss_given_pi(float(x)), [0, 1]))

        oracle = finite_diff(objective, np.array([a0, b0]), h=1e-5)

        rng = np.random.default_rng(5)
        n = 30000
        est = np.empty((n, 2))
        for i in range(n):
            u_pi = float(rng.random())
            pi = kuma_sample(a0, b0, u_pi)
            draw = ArmDraw(u=[rng.random(2)],
                           alpha=np.array([logit(1.0 - pi)]))
            g_alpha = arm_gradient(lambda z: loss(z[0]), draw).grad_alpha[0]
            est[i] = chain_to_kuma(g_alpha, pi, a0, b0, u_pi)
        mean = est.mean(axis=0)
        se = est.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean - oracle) < 4.0 * se)


class TestConcreteGradient:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        graph = normalize(build_adjacency(random_edges(rng, 4, 0.8), 4))
        from gdcn.graph import EdgeSet
        edges = EdgeSet.from_sparse(graph)
        h = rng.normal(size=(4, 3))
        return graph, edges, h

    def _loss(self, tape, kp, graph, edges, h, u_pi, u_edges, t=0.67):
        pi = record_kuma_sample(tape, kp.log_a, kp.log_b, u_pi)
        mask = sample_concrete_mask(edges, 1, pi, t, _FixedRng(u_edges), tape)
        out = record_masked_spmm(tape, graph, mask.blocks[0], constant(h),
                                 differentiate_mask=True)
        return record_frobenius_sq(tape, out)

    def test_matches_finite_differences(self):
        graph, edges, h = self._setup()
        rng = np.random.default_rng(7)
        u_pi = float(rng.random())
        u_edges = rng.random(edges.n_entries)

        kp = KumaraswamyParams(1.3, 2.4)
        tape = Tape()
        loss = self._loss(tape, kp, graph, edges, h, u_pi, u_edges)
        (g_a, g_b), = concrete_gradient(tape, loss, [kp])

        def f(v):
            kp2 = KumaraswamyParams(v[0], v[1])
            t2 = Tape()
            return self._loss(t2, kp2, graph, edges, h, u_pi, u_edges).item()

        fd = finite_diff(f, np.array([1.3, 2.4]), h=1e-6)
        assert rel_err(np.array([g_a, g_b]), fd, floor=1e-3) < 1e-4

    def test_mask_independent_loss_gives_zero(self):
        kp = KumaraswamyParams(1.0, 3.0)
        tape = Tape()
        record_kuma_sample(tape, kp.log_a, kp.log_b, 0.4)
        w = parameter(np.ones((2, 2)))
        loss = record_frobenius_sq(tape, w)
        (g_a, g_b), = concrete_gradient(tape, loss, [kp])
        assert g_a == 0.0 and g_b == 0.0

    def test_pi_half_draw_passes_gradient(self):
        # (a,b)=(1,1) with u=0.5 gives pi=0.5; relaxed mask equals u per
        # entry, and an asymmetric loss still produces a nonzero gradient.
        graph, edges, h = self._setup(seed=2)
        kp = KumaraswamyParams(1.0, 1.0)
        tape = Tape()
        u_edges = np.random.default_rng(3).random(edges.n_entries)
        loss = self._loss(tape, kp, graph, edges, h, 0.5, u_edges)
        (g_a, g_b), = concrete_gradient(tape, loss, [kp])
        assert g_a != 0.0 and g_b != 0.0


class _FixedRng:
    """Feeds a frozen uniform vector to a sampler expecting a Generator."""

    def __init__(self, values):
        self._values = np.asarray(values, dtype=np.float64)

    def random(self, size=None):
        if size is None:
            return float(self._values[0])
        assert size == len(self._values)
        return self._values.copy()
