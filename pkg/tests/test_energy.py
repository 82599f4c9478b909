import numpy as np
import pytest

import hamgnn.autodiff as ad
from conftest import central_difference, random_energy_params, random_graph, relative_error
from hamgnn.energy import (
    EnergyKind,
    EnergyParams,
    MomentumParams,
    PhaseState,
    energy,
    hamiltonian_field,
    momentum_init,
)
from hamgnn.graph import bfs_distances, build_graph


def make_state(q, p):
    return PhaseState(ad.constant(q), ad.constant(p))


class TestMomentumInit:
    def test_identity_weights(self):
        params = MomentumParams(weight=ad.constant(np.eye(2)), bias=ad.constant(np.zeros((1, 2))))
        p = momentum_init(ad.constant([[1.0, 2.0]]), params)
        assert np.allclose(p.value, [[1.0, 2.0]])

    def test_pure_bias(self):
        params = MomentumParams(
            weight=ad.constant(np.zeros((2, 2))), bias=ad.constant([[3.0, -1.0]])
        )
        p = momentum_init(ad.constant([[5.0, 5.0], [0.5, 0.25]]), params)
        assert np.allclose(p.value, [[3.0, -1.0], [3.0, -1.0]])

    def test_gradient_wrt_q_matches_fd(self, rng):
        r = 3
        w = rng.normal(size=(r, r))
        b = rng.normal(size=(1, r))
        params = MomentumParams(weight=ad.parameter(w), bias=ad.parameter(b))
        q_val = rng.normal(size=(4, r))
        q = ad.parameter(q_val)
        with ad.Tape() as tape:
            p = momentum_init(q, params)
            total = ad.frobenius_smooth(p, 0.0)
            grads = tape.backward(total)

        def forward(v):
            return float(np.sqrt(np.sum((v @ w + b) ** 2)))

        assert relative_error(grads.of(q), central_difference(forward, q_val), floor=1e-8) <= 1e-6

    def test_shape_mismatch(self):
        params = MomentumParams(weight=ad.constant(np.eye(2)), bias=ad.constant(np.zeros((1, 2))))
        with pytest.raises(ValueError):
            momentum_init(ad.constant(np.zeros((1, 3))), params)


class TestEnergy:
    def test_quadratic_kinetic(self):
        g = build_graph(1, [])
        st = make_state([[0.0, 0.0]], [[3.0, 4.0]])
        e = energy(st, g, EnergyKind.QUADRATIC_KINETIC)
        assert e.item() == pytest.approx(12.5, abs=1e-12)

    def test_zero_weights_degenerate(self):
        g = build_graph(2, [(0, 1)])
        params = EnergyParams(
            w1=ad.constant(np.zeros((2, 1))), w2=ad.constant(np.ones((1, 1))), eps=1e-8
        )
        st = make_state([[1.0], [2.0]], [[0.5], [0.5]])
        e = energy(st, g, EnergyKind.LEARNED_GCN, params)
        assert e.item() == pytest.approx(np.sqrt(1e-8), abs=1e-15)

    def test_hand_computed_two_node_example(self):
        g = build_graph(2, [(0, 1)])
        params = EnergyParams(
            w1=ad.constant(np.ones((2, 1))), w2=ad.constant(np.ones((1, 1))), eps=0.0
        )
        st = make_state([[1.0], [1.0]], [[0.0], [0.0]])
        e = energy(st, g, EnergyKind.LEARNED_GCN, params)
        assert e.item() == pytest.approx(np.tanh(1.0) * np.sqrt(2.0), abs=1e-12)
        assert e.item() == pytest.approx(1.0770, abs=1e-4)

    def test_standalone_dense_oracle(self, rng):
        n, r = 6, 2
        g = random_graph(rng, n, 0.5)
        params = random_energy_params(rng, r)
        q = rng.normal(size=(n, r))
        p = rng.normal(size=(n, r))
        a_hat = g.norm_adjacency.toarray()
        inner = a_hat @ np.concatenate([q, p], axis=1) @ params.w1.value
        want = np.sqrt(np.sum((a_hat @ np.tanh(inner) @ params.w2.value) ** 2) + params.eps)
        got = energy(make_state(q, p), g, EnergyKind.LEARNED_GCN, params).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_permutation_invariance(self, rng):
        n, r = 7, 3
        g = random_graph(rng, n, 0.4)
        params = random_energy_params(rng, r)
        q = rng.normal(size=(n, r))
        p = rng.normal(size=(n, r))
        perm = rng.permutation(n)
        g_perm = build_graph(n, [(perm[u], perm[v]) for u, v in g.edges])
        base = energy(make_state(q, p), g, EnergyKind.LEARNED_GCN, params).item()
        permuted = energy(
            make_state(q[np.argsort(perm)], p[np.argsort(perm)]),
            g_perm,
            EnergyKind.LEARNED_GCN,
            params,
        ).item()
        assert permuted == pytest.approx(base, rel=1e-10)


class TestHamiltonianField:
    def test_quadratic_field_is_momentum(self):
        g = build_graph(1, [])
        st = make_state([[9.0, 9.0]], [[1.0, -2.0]])
        dq, dp = hamiltonian_field(st, g, EnergyKind.QUADRATIC_KINETIC)
        assert np.allclose(dq.value, [[1.0, -2.0]])
        assert np.allclose(dp.value, [[0.0, 0.0]])

    def test_zero_weights_zero_field(self):
        g = build_graph(2, [(0, 1)])
        params = EnergyParams(
            w1=ad.constant(np.zeros((2, 1))), w2=ad.constant(np.ones((1, 1))), eps=1e-6
        )
        st = make_state([[1.0], [2.0]], [[0.5], [-0.5]])
        dq, dp = hamiltonian_field(st, g, EnergyKind.LEARNED_GCN, params)
        assert np.allclose(dq.value, 0.0) and np.allclose(dp.value, 0.0)

    def test_field_matches_finite_differences(self, rng):
        n, r = 5, 3
        g = random_graph(rng, n, 0.5)
        params = random_energy_params(rng, r)
        q = rng.normal(size=(n, r))
        p = rng.normal(size=(n, r))
        dq, dp = hamiltonian_field(make_state(q, p), g, EnergyKind.LEARNED_GCN, params)

        def e_of_p(pv):
            return energy(make_state(q, pv), g, EnergyKind.LEARNED_GCN, params).item()

        def e_of_q(qv):
            return energy(make_state(qv, p), g, EnergyKind.LEARNED_GCN, params).item()

        fd_dp = central_difference(e_of_p, p, h=1e-5)
        fd_dq = central_difference(e_of_q, q, h=1e-5)
        assert relative_error(dq.value, fd_dp, floor=1e-8) <= 1e-5
        assert relative_error(dp.value, -fd_dq, floor=1e-8) <= 1e-5

    def test_orthogonality_conservation(self, rng):
        for trial in range(5):
            local = np.random.default_rng(100 + trial)
            n, r = 8, 3
            g = random_graph(local, n, 0.4)
            params = random_energy_params(local, r)
            q = local.normal(size=(n, r))
            p = local.normal(size=(n, r))
            dq, dp = hamiltonian_field(make_state(q, p), g, EnergyKind.LEARNED_GCN, params)
            de_dq = -dp.value
            de_dp = dq.value
            inner = np.sum(de_dq * dq.value) + np.sum(de_dp * dp.value)
            assert abs(inner) <= 1e-10

    def test_locality_beyond_four_hops(self, rng):
        # Path graph: node 0 and node 9 are 9 hops apart, far past the
        # 4-hop reach of two propagations and two transposed propagations.
        # The norm readout divides the whole field by the global scalar E,
        # so locality holds exactly for the rescaled field E * (dq, dp).
        n, r = 10, 2
        g = build_graph(n, [(i, i + 1) for i in range(n - 1)])
        params = random_energy_params(rng, r)
        q = rng.normal(size=(n, r))
        p = rng.normal(size=(n, r))
        e0 = energy(make_state(q, p), g, EnergyKind.LEARNED_GCN, params).item()
        dq0, dp0 = hamiltonian_field(make_state(q, p), g, EnergyKind.LEARNED_GCN, params)
        q2 = q.copy()
        q2[0] += 0.5
        p2 = p.copy()
        p2[0] -= 0.25
        e1 = energy(make_state(q2, p2), g, EnergyKind.LEARNED_GCN, params).item()
        dq1, dp1 = hamiltonian_field(make_state(q2, p2), g, EnergyKind.LEARNED_GCN, params)
        dist = bfs_distances(g, 0)
        far = dist > 4
        assert far.any()
        assert np.max(np.abs(e1 * dq1.value[far] - e0 * dq0.value[far])) <= 1e-12
        assert np.max(np.abs(e1 * dp1.value[far] - e0 * dp0.value[far])) <= 1e-12
        # Within four hops the perturbation must actually show up.
        near = dist <= 4
        assert np.max(np.abs(e1 * dq1.value[near] - e0 * dq0.value[near])) > 1e-6

    def test_field_permutation_equivariance(self, rng):
        n, r = 6, 2
        g = random_graph(rng, n, 0.5)
        params = random_energy_params(rng, r)
        q = rng.normal(size=(n, r))
        p = rng.normal(size=(n, r))
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        g_perm = build_graph(n, [(perm[u], perm[v]) for u, v in g.edges])
        dq, dp = hamiltonian_field(make_state(q, p), g, EnergyKind.LEARNED_GCN, params)
        dq_p, dp_p = hamiltonian_field(
            make_state(q[inv], p[inv]), g_perm, EnergyKind.LEARNED_GCN, params
        )
        assert np.allclose(dq_p.value, dq.value[inv], atol=1e-12)
        assert np.allclose(dp_p.value, dp.value[inv], atol=1e-12)

    def test_quadratic_flow_conserves_energy_exactly(self):
        g = build_graph(3, [(0, 1), (1, 2)])
        q0 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        p0 = np.array([[0.5, -0.5], [0.25, 0.0], [0.0, 2.0]])
        e0 = energy(make_state(q0, p0), g, EnergyKind.QUADRATIC_KINETIC).item()
        for t in (0.5, 1.0, 7.0):
            e_t = energy(make_state(q0 + t * p0, p0), g, EnergyKind.QUADRATIC_KINETIC).item()
            assert e_t == e0

    def test_state_graph_mismatch(self, rng):
        g = build_graph(3, [(0, 1)])
        params = random_energy_params(rng, 2)
        with pytest.raises(ValueError):
            hamiltonian_field(
                make_state(np.zeros((2, 2)), np.zeros((2, 2))), g, EnergyKind.LEARNED_GCN, params
            )
