import numpy as np
import pytest

from ltl.offline import GradBuffer, layer_offline_grads, terminal_error
from ltl.online import (
    OnlineState,
    batch_gradients,
    cosine,
    online_error,
    online_step_grads,
)
from ltl.snn import NeuronParams, boxcar_grad, init_student, run_network

P = NeuronParams.if_neuron(threshold=0.6, boxcar_width=0.4)


class TestOnlineError:
    def test_matched(self):
        assert online_error(np.array([0.5]), np.array([2]), 4)[0] == 0.0

    def test_value(self):
        assert online_error(np.array([0.75]), np.array([2]), 4)[0] == pytest.approx(-0.125)

    @pytest.mark.parametrize("t", [1, 3, 16])
    def test_always_firing_without_target(self, t):
        assert online_error(np.array([0.0]), np.array([t]), t)[0] == pytest.approx(2.0 / t)

    def test_rejects_t0(self):
        with pytest.raises(ValueError):
            online_error(np.array([0.5]), np.array([0]), 0)


class TestStepGrads:
    def test_boxcar_gate(self):
        g = online_step_grads(np.array([-0.5]), np.array([5.0]), np.array([1.0]), P)
        assert not g.dW.any() and not g.db.any()

    def test_spike_gate(self):
        g = online_step_grads(np.array([-0.5]), np.array([0.6]), np.array([0.0, 1.0]), P)
        assert g.dW[0, 0] == 0.0 and g.dW[0, 1] != 0.0
        assert g.db[0] == pytest.approx(-0.5 * 2.5)

    def test_one_by_one(self):
        g = online_step_grads(np.array([-0.125]), np.array([0.6]), np.array([1.0]), P)
        assert g.dW[0, 0] == pytest.approx(-0.3125)

    def test_accumulates_into_buffer(self):
        buf = GradBuffer(np.zeros((1, 1)), np.zeros(1), rule="online")
        for _ in range(3):
            online_step_grads(np.array([-0.125]), np.array([0.6]), np.array([1.0]), P, buf)
        assert buf.dW[0, 0] == pytest.approx(-0.9375)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("density", [0.05, 0.6])
    def test_gated_equals_dense(self, seed, density):
        rng = np.random.default_rng(seed)
        zeta = rng.normal(size=(4, 30))
        u = rng.uniform(0.0, 1.2, size=(4, 30))
        presyn = (rng.random((4, 20)) < density).astype(float)
        a = online_step_grads(zeta, u, presyn, P, gated=True)
        b = online_step_grads(zeta, u, presyn, P, gated=False)
        np.testing.assert_allclose(a.dW, b.dW, atol=1e-15)
        np.testing.assert_allclose(a.db, b.db, atol=1e-15)


class TestStreaming:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.net = init_student([6, 5, 4, 3], seed=1, dtype=np.float64)
        self.x = rng.random((3, 6))
        self.targets = [rng.random((3, 5)), rng.random((3, 4))]

    def test_no_update_during_warmup(self):
        learner = OnlineState.for_network(self.net, self.targets, 7, P)
        run_network(self.net, P, self.x, 7, on_step=learner)
        for g in learner.grads:
            assert not g.dW.any() and not g.db.any()

    def test_matches_replay_from_trace(self):
        # step-t terms only need C[t], U[t] and S[t-1]
        T_w, T_warm = 10, 2
        learner = OnlineState.for_network(self.net, self.targets, T_warm, P)
        res = run_network(self.net, P, self.x, T_w, record=True, on_step=learner)
        for l in range(2):
            tr = res.traces[l]
            counts = np.cumsum(tr.spikes, axis=0)
            dW = np.zeros_like(learner.grads[l].dW)
            db = np.zeros_like(learner.grads[l].db)
            for t in range(T_warm + 1, T_w + 1):
                g = online_error(self.targets[l], counts[t - 1], t) * boxcar_grad(tr.membrane[t - 1], P) / 3
                dW += g.T @ tr.presyn[t - 1]
                db += g.sum(axis=0)
            np.testing.assert_allclose(learner.grads[l].dW, dW, atol=1e-14)
            np.testing.assert_allclose(learner.grads[l].db, db, atol=1e-14)

    def test_last_step_only_equals_offline_terminal_term(self):
        T_w = 8
        learner = OnlineState.for_network(self.net, self.targets, T_w - 1, P)
        res = run_network(self.net, P, self.x, T_w, record=True, on_step=learner)
        tr = res.traces[0]
        term = terminal_error(self.targets[0], res.counts[0], T_w) * boxcar_grad(tr.membrane[-1], P) / 3
        np.testing.assert_allclose(learner.grads[0].dW, term.T @ tr.presyn[-1], atol=1e-14)

    def test_state_size_independent_of_window(self):
        sizes = []
        for T_w in (4, 16, 64):
            learner = OnlineState.for_network(self.net, self.targets, 1, P)
            run_network(self.net, P, self.x, T_w, on_step=learner)
            sizes.append(learner.nbytes)
        assert len(set(sizes)) == 1

    def test_active_layers_only(self):
        learner = OnlineState.for_network(self.net, self.targets, 0, P)
        learner.active = frozenset({1})
        run_network(self.net, P, self.x, 6, on_step=learner)
        assert not learner.grads[0].dW.any()


class TestCosine:
    def test_identical(self):
        v = np.array([0.3, -1.0, 2.0])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0

    def test_zero_norm_is_none(self):
        assert cosine(np.zeros(3), np.ones(3)) is None

    def test_rules_share_forward_pass(self):
        net = init_student([6, 5, 4, 3], seed=1, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.random((3, 6))
        targets = [rng.random((3, 5)), rng.random((3, 4))]
        off, on = batch_gradients(net, P, x, targets, 8, 2)
        res = run_network(net, P, x, 8, record=True)
        ref = layer_offline_grads(res.traces[0], targets[0], res.counts[0], P)[0]
        np.testing.assert_allclose(off[0].dW, ref.dW)
        assert on[0].dW.shape == ref.dW.shape
