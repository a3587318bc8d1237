import math

import numpy as np
import pytest

from subsel import ndgrad as nd
from subsel.errors import ConfigError, ContractError, DivergenceError
from subsel.gradcheck import fixture_graph
from subsel.graph import Graph, normalized_adjacency, split_edges
from subsel.ndgrad import PLAIN, OptimizerState, Tensor, analytic_grads, numeric_grads
from subsel.trainer import (
    GraphInputs,
    LinkBatch,
    SearchModel,
    TrainConfig,
    gradients,
    hypergradient,
    joint_train,
    link_loss,
    lower_step,
    sampled_softmax_loss,
    search,
    unrolled_hypergradient,
)

from conftest import two_block_graph


def toy(seed=0, hidden=2):
    """Search model on the 6-node fixture with 36 parameters and generic biases."""
    g = fixture_graph()
    x = g.features[:, :2]
    inputs = GraphInputs(x, normalized_adjacency(g))
    cfg = TrainConfig(K=2, D=3, hidden_dim=hidden, search_predictor_width=2, seed=seed)
    model = SearchModel.init(2, cfg)
    rng = np.random.default_rng([seed, 99])
    for t in model.weights() + model.theta():
        if ".b" in t.name:
            t.value[...] = 0.2 * rng.standard_normal(t.shape)
    # positive selector biases keep its three hidden units alive, so theta has a signal
    model.selector.biases[0].value[...] = 0.5 + 0.1 * rng.standard_normal(3)
    train = LinkBatch(np.array([[0, 1], [2, 3], [4, 5]]), np.array([[0, 3], [2, 5], [4, 1]]))
    valid = LinkBatch(np.array([[1, 4], [0, 5]]), np.array([[1, 3], [0, 2]]))
    return model, inputs, train, valid


def loss_of(model, inputs, batch, tau=0.5):
    return lambda: link_loss(model.encoder, model.selector, model.predictor, inputs, batch.pos, batch.neg, tau)


class TestLoss:
    def test_equal_logits_is_ln2(self):
        loss = sampled_softmax_loss(Tensor([0.7]), Tensor([0.7]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturation(self):
        assert sampled_softmax_loss(Tensor([800.0]), Tensor([-800.0])).item() == 0.0
        assert sampled_softmax_loss(Tensor([30.0]), Tensor([0.0])).item() > 0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        pos, neg = rng.standard_normal(3), rng.standard_normal(6)
        oracle = 0.0
        for b in range(3):
            negs = neg[2 * b:2 * b + 2]
            oracle -= math.log(math.exp(pos[b]) / (math.exp(pos[b]) + sum(math.exp(y) for y in negs)))
        assert sampled_softmax_loss(Tensor(pos), Tensor(neg)).item() == pytest.approx(oracle / 3, rel=1e-13)

    def test_empty_and_ragged(self):
        with pytest.raises(ContractError):
            sampled_softmax_loss(Tensor(np.zeros(0)), Tensor(np.zeros(0)))
        with pytest.raises(ContractError):
            sampled_softmax_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        model, inputs, _, _ = toy()
        with pytest.raises(ContractError):
            link_loss(model.encoder, model.selector, model.predictor, inputs, np.zeros((0, 2)), np.zeros((0, 2)))

    def test_positive_and_differentiable_in_all_groups(self):
        model, inputs, train, _ = toy()
        loss = loss_of(model, inputs, train)
        assert loss().item() > 0
        for group in (model.encoder.parameters(), model.selector.parameters(), model.predictor.parameters()):
            assert any(np.any(g != 0) for g in analytic_grads(loss, group))


class TestLowerStep:
    def test_zero_lr(self):
        model, inputs, train, _ = toy()
        before = model.snapshot()
        lower_step(model, inputs, train, lr=0.0)
        for k, v in model.named().items():
            np.testing.assert_array_equal(v, before[k])

    def test_plain_step_matches_numeric_gradient(self):
        model, inputs, train, _ = toy()
        w = model.weights()
        g_num = numeric_grads(loss_of(model, inputs, train), w)
        before = [p.value.copy() for p in w]
        theta_before = [t.value.copy() for t in model.theta()]
        lower_step(model, inputs, train, lr=0.01)
        for p, p0, g in zip(w, before, g_num):
            np.testing.assert_allclose(p.value, p0 - 0.01 * g, rtol=0, atol=1e-11)
        for t, t0 in zip(model.theta(), theta_before):
            np.testing.assert_array_equal(t.value, t0)

    def test_plain_step_is_exact(self):
        model, inputs, train, _ = toy(seed=3)
        w = model.weights()
        g = analytic_grads(loss_of(model, inputs, train), w)
        before = [p.value.copy() for p in w]
        lower_step(model, inputs, train, lr=0.05)
        for p, p0, gi in zip(w, before, g):
            np.testing.assert_allclose(p0 - p.value, 0.05 * gi, rtol=0, atol=1e-12)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            model, inputs, train, _ = toy(seed=5)
            lower_step(model, inputs, train, 0.1, state=OptimizerState(0.1))
            results.append(model.snapshot())
        for k in results[0]:
            np.testing.assert_array_equal(results[0][k], results[1][k])


def unrolled_objective(model, inputs, train, valid, lr, h=1e-5):
    """theta -> L_valid(w - lr * grad_w L_train(w, theta), theta), grad_w by central differences."""
    w = model.weights()

    def J():
        w0 = [p.value.copy() for p in w]
        g = numeric_grads(loss_of(model, inputs, train), w, h)
        for p, gi in zip(w, g):
            p.value -= lr * gi
        out = loss_of(model, inputs, valid)().item()
        for p, p0 in zip(w, w0):
            p.value[...] = p0
        return out

    return J


def nested_fd_gradient(model, inputs, train, valid, lr, h=1e-4):
    J = unrolled_objective(model, inputs, train, valid, lr)
    grads = []
    for t in model.theta():
        g = np.zeros_like(t.value)
        for i in range(t.value.size):
            orig = t.value.flat[i]
            t.value.flat[i] = orig + h
            jp = J()
            t.value.flat[i] = orig - h
            jm = J()
            t.value.flat[i] = orig
            g.flat[i] = (jp - jm) / (2 * h)
        grads.append(g)
    return grads


def flat(gs):
    return np.concatenate([g.reshape(-1) for g in gs])


class TestHypergradient:
    def test_toy_has_at_most_50_parameters(self):
        model, *_ = toy()
        assert sum(t.size for t in model.weights() + model.theta()) <= 50

    @pytest.mark.parametrize("lr", [0.5, 1.0])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_nested_finite_differences(self, lr, seed):
        model, inputs, train, valid = toy(seed)
        approx = flat(hypergradient(model, inputs, train, valid, lr, 0.01))
        exact = flat(nested_fd_gradient(model, inputs, train, valid, lr))
        first_order = flat(gradients(loss_of(model, inputs, valid), model.theta())[1])
        err = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
        assert err < 0.05
        # dropping the second-order term must be visibly worse, or the check above proves little
        assert np.linalg.norm(first_order - exact) / np.linalg.norm(exact) > 100 * err

    def test_zero_lr_is_validation_gradient(self):
        model, inputs, train, valid = toy(seed=2)
        got = hypergradient(model, inputs, train, valid, 0.0, 0.01)
        _, want = gradients(loss_of(model, inputs, valid), model.weights() + model.theta())
        for a, b in zip(got, want[len(model.weights()):]):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_restores_weights(self):
        model, inputs, train, valid = toy()
        before = model.snapshot()
        hypergradient(model, inputs, train, valid, 0.3, 0.01)
        for k, v in model.named().items():
            np.testing.assert_array_equal(v, before[k])

    def test_detached_selector_second_term_vanishes(self):
        model, inputs, train, valid = toy()
        w, theta = model.weights(), model.theta()
        # train loss ignores theta entirely
        train_loss = lambda: nd.sum(nd.mul(w[0], w[0]))  # noqa: E731
        valid_loss = loss_of(model, inputs, valid)
        lr = 0.1
        got = unrolled_hypergradient(w, theta, train_loss, valid_loss, lr, 0.01)
        for p in w:
            p.zero_grad()
        w0 = w[0].value.copy()
        w[0].value *= 1 - 2 * lr  # the plain step of sum(w0^2)
        _, first = gradients(valid_loss, w + theta)
        w[0].value[...] = w0
        for a, b in zip(got, first[len(w):]):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)

    def test_zero_validation_gradient_returns_first_term(self):
        model, inputs, train, _ = toy()
        w, theta = model.weights(), model.theta()
        got = unrolled_hypergradient(w, theta, loss_of(model, inputs, train), lambda: nd.sum(nd.scale(theta[-1], 3.0)), 0.1, 0.01)
        assert np.all(got[-1] == 3.0)
        assert all(not np.any(g) for g in got[:-1])

    def test_epsilon_halving_is_second_order(self):
        model, inputs, train, valid = toy(seed=1)
        lr = 1.0
        first = flat(hypergradient(model, inputs, train, valid, 0.0, 0.01))
        terms = [flat(hypergradient(model, inputs, train, valid, lr, e)) - first for e in (1e-2, 5e-3, 2.5e-3)]
        ratio = np.linalg.norm(terms[0] - terms[1]) / np.linalg.norm(terms[1] - terms[2])
        assert 3.0 <= ratio <= 5.0


def small_split(seed=0, n=40):
    g = two_block_graph(n, seed=seed)
    return g, split_edges(g, 0.7, 0.15, 0.15, seed=seed)


def small_cfg(**kw):
    base = dict(K=2, D=8, hidden_dim=8, search_predictor_width=8, batch_size=32, max_epochs=15, patience=15, seed=0)
    base.update(kw)
    base["patience"] = min(base["patience"], base["max_epochs"])
    return TrainConfig(**base)


class TestSearch:
    def test_frozen_run_stops_after_two_epochs(self):
        g, s = small_split()
        r = search(g, s, small_cfg(lower_lr=0.0, upper_lr=0.0, patience=1))
        assert len(r.history) == 2 and r.best_epoch == 0
        init = SearchModel.init(g.feature_dim, small_cfg())
        for k, v in init.named().items():
            np.testing.assert_array_equal(r.model.named()[k], v)

    def test_learns_two_block_graph(self):
        g, s = small_split()
        r = search(g, s, small_cfg())
        best = r.history[r.best_epoch]
        assert best.valid_auc >= 0.7
        assert best.valid_auc == max(h.valid_auc for h in r.history)
        assert r.hypergradient_calls == len(r.history) * math.ceil(len(s.train_pos) / 32)

    def test_deterministic(self):
        g, s = small_split(seed=2)
        a = search(g, s, small_cfg(max_epochs=4))
        b = search(g, s, small_cfg(max_epochs=4))
        assert a.history == b.history
        for k, v in a.model.named().items():
            np.testing.assert_array_equal(v, b.model.named()[k])

    def test_each_epoch_partitions_train_and_never_sees_test(self):
        g, s = small_split()
        seen = []
        search(g, s, small_cfg(max_epochs=3, batch_size=7), audit=lambda kind, e: seen.append((kind, e.copy())))
        test = {tuple(e) for e in s.test_pos}
        assert all(not ({tuple(x) for x in e} & test) for _, e in seen)
        train_batches = [e for kind, e in seen if kind == "train_pos"]
        per_epoch = math.ceil(len(s.train_pos) / 7)
        for epoch in range(3):
            rows = np.concatenate(train_batches[epoch * per_epoch:(epoch + 1) * per_epoch])
            assert sorted(map(tuple, rows)) == sorted(map(tuple, s.train_pos))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch_and_batch(self):
        g, s = small_split()
        with pytest.raises(DivergenceError, match=r"epoch 0.*batch"):
            search(g, s, small_cfg(lower_lr=1e200, upper_lr=1e200, optimizer_mode=PLAIN))

    def test_rejects_foreign_split(self):
        g, s = small_split()
        other = two_block_graph(40, seed=9)
        with pytest.raises(ContractError):
            search(other, s, small_cfg())


class TestJoint:
    def test_no_hypergradient_calls_and_reproducible(self):
        g, s = small_split()
        a = joint_train(g, s, small_cfg(max_epochs=5))
        b = joint_train(g, s, small_cfg(max_epochs=5))
        assert a.hypergradient_calls == 0
        assert a.history == b.history


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(K=0), dict(tau=0.0), dict(lower_lr=-1.0), dict(patience=200),
                                    dict(optimizer_mode="sgd"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()

    def test_tau_schedule(self):
        assert TrainConfig().tau_at(7) == 0.5
        c = TrainConfig(tau_anneal=True, max_epochs=10)
        assert c.tau_at(0) == 1.0 and c.tau_at(9) == pytest.approx(0.1)
        assert c.tau_at(3) > c.tau_at(4)
