import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grads, worst_error
from lstm_sv.errors import EmptyBatch, IndexOutOfRange, ShapeMismatch, StaleCache
from lstm_sv.network import (
    ContrastiveConfig,
    LstmConfig,
    LstmModel,
    backward,
    contrastive_forward,
    contrastive_loss,
    forward,
    forward_batch,
    load_checkpoint,
    log_softmax,
    pair_distance,
    save_checkpoint,
    softmax_forward,
    softmax_loss,
)

TINY = LstmConfig(input_dim=3, hidden_dim=4, num_layers=2)


def tiny_model(seed, batchnorm=True, head=0):
    g = np.random.default_rng(seed)
    m = LstmModel.init(TINY, g, batchnorm=batchnorm)
    if head:
        m.add_head(head)
        m.params["head.W"] = g.normal(size=(head, 4))
        m.params["head.b"] = g.normal(size=head)
    if batchnorm:
        m.params["bn.gamma"] = g.uniform(0.5, 1.5, 3)
        m.params["bn.beta"] = g.normal(0, 0.2, 3)
        m.state["bn.running_mean"] = g.normal(0, 0.3, 3)
        m.state["bn.running_var"] = g.uniform(0.5, 2.0, 3)
    return m


def oracle_embedding(model, x):
    """Straight-line per-unit LSTM recurrence, no vectorized gate slicing."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    H = model.config.hidden_dim
    seq = [list(row) for row in x]
    if model.has_bn:
        g, b = model.params["bn.gamma"], model.params["bn.beta"]
        mu, var = model.state["bn.running_mean"], model.state["bn.running_var"]
        seq = [[g[d] * (v - mu[d]) / math.sqrt(var[d] + 1e-8) + b[d] for d, v in enumerate(row)]
               for row in seq]
    for layer in range(model.config.num_layers):
        W, U, bias = (model.params[f"l{layer}.{n}"] for n in "WUb")
        h = [0.0] * H
        c = [0.0] * H
        outs = []
        for row in seq:
            z = [bias[j] + sum(row[d] * W[d, j] for d in range(len(row)))
                 + sum(h[k] * U[k, j] for k in range(H)) for j in range(4 * H)]
            new_c, new_h = [], []
            for u in range(H):
                i, f, o = sig(z[u]), sig(z[H + u]), sig(z[2 * H + u])
                cand = math.tanh(z[3 * H + u])
                cu = f * c[u] + i * cand
                new_c.append(cu)
                new_h.append(o * math.tanh(cu))
            h, c = new_h, new_c
            outs.append(h)
        seq = outs
    return np.array(seq[-1])


# -- forward -------------------------------------------------------------------------


def test_zero_parameters_give_zero_embedding(rng):
    m = LstmModel.init(TINY, rng, batchnorm=False)
    for v in m.params.values():
        v[...] = 0.0
    emb, _ = forward(m, rng.normal(size=(7, 3)))
    np.testing.assert_array_equal(emb, np.zeros(4))


def test_forget_bias_initialized_to_one(rng):
    m = LstmModel.init(LstmConfig(5, 6, 2), rng)
    for k in range(2):
        np.testing.assert_array_equal(m.params[f"l{k}.b"][6:12], 1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_straight_line_oracle(seed):
    m = tiny_model(seed)
    x = np.random.default_rng(100 + seed).normal(size=(5, 3))
    emb, _ = forward(m, x)
    np.testing.assert_allclose(emb, oracle_embedding(m, x), atol=1e-12, rtol=0)


def test_single_frame(rng):
    m = tiny_model(3, batchnorm=False)
    x = rng.normal(size=(1, 3))
    emb, _ = forward(m, x)
    np.testing.assert_allclose(emb, oracle_embedding(m, x), atol=1e-12)


def test_batch_equals_individual_in_eval_mode(rng):
    m = tiny_model(4)
    X = rng.normal(size=(3, 5, 3))
    batch, _ = forward_batch(m, X)
    for b in range(3):
        np.testing.assert_allclose(batch[b], forward(m, X[b])[0], atol=1e-14)


def test_forward_is_deterministic(rng):
    m = tiny_model(5)
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(forward(m, x)[0], forward(m, x)[0])


def test_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        forward(tiny_model(0), rng.normal(size=(5, 4)))


# -- softmax -----------------------------------------------------------------------


def test_zero_head_gives_ln_n(rng):
    m = tiny_model(0)
    m.add_head(7)
    assert softmax_loss(m, rng.normal(size=(5, 3)), 2, 7) == pytest.approx(math.log(7), abs=1e-12)


def test_softmax_loss_matches_direct_formula(rng):
    m = tiny_model(1, head=4)
    x = rng.normal(size=(5, 3))
    emb, _ = forward(m, x)
    logits = m.params["head.W"] @ emb + m.params["head.b"]
    direct = -logits[2] + math.log(sum(math.exp(v) for v in logits))
    assert softmax_loss(m, x, 2, 4) == pytest.approx(direct, abs=1e-12)


def test_softmax_loss_falls_to_zero_as_true_logit_grows(rng):
    m = tiny_model(2, head=3)
    x = rng.normal(size=(5, 3))
    losses = []
    for b in [0.0, 2.0, 5.0, 10.0, 40.0]:
        m.params["head.b"][1] = b
        losses.append(softmax_loss(m, x, 1, 3))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def test_softmax_index_checks(rng):
    m = tiny_model(0, head=3)
    with pytest.raises(IndexOutOfRange):
        softmax_loss(m, rng.normal(size=(5, 3)), 3, 3)
    with pytest.raises(IndexOutOfRange):
        softmax_loss(tiny_model(0), rng.normal(size=(5, 3)), 0, 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(logits, shift):
    z = np.array(logits)
    lp = log_softmax(z)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12
    np.testing.assert_allclose(log_softmax(z + shift), lp, atol=1e-9)


# -- pair distance / contrastive -------------------------------------------------------


def test_identical_inputs_have_zero_distance(rng):
    x = rng.normal(size=(5, 3))
    assert pair_distance(tiny_model(0), x, x) == 0.0


def test_distance_symmetric_and_recomposed(rng):
    m = tiny_model(1)
    a, b = rng.normal(size=(2, 5, 3))
    d = pair_distance(m, a, b)
    assert d == pair_distance(m, b, a)
    e1, e2 = forward(m, a)[0], forward(m, b)[0]
    assert d == pytest.approx(math.sqrt(sum((e1 - e2) ** 2)), abs=1e-14)


def test_contrastive_examples(rng):
    m = tiny_model(2)
    x, y = rng.normal(size=(2, 5, 3))
    cfg = ContrastiveConfig(margin=1.0, lam=0.0)
    assert contrastive_loss([(x, x, 1)], m, cfg) == 0.0
    assert contrastive_loss([(x, x, 0)], m, cfg) == pytest.approx(0.5)
    d = pair_distance(m, x, y)
    far = ContrastiveConfig(margin=d * 0.99, lam=0.0)
    assert contrastive_loss([(x, y, 0)], m, far) == 0.0
    assert contrastive_loss([(x, y, 1)], m, cfg) == pytest.approx(0.5 * d * d)


def test_contrastive_is_mean_plus_regularizer(rng):
    m = tiny_model(3)
    a, b, c = rng.normal(size=(3, 5, 3))
    cfg0 = ContrastiveConfig(margin=2.0, lam=0.0)
    parts = [contrastive_loss([p], m, cfg0) for p in [(a, b, 1), (a, c, 0), (b, c, 0)]]
    cfg = ContrastiveConfig(margin=2.0, lam=0.3)
    total = contrastive_loss([(a, b, 1), (a, c, 0), (b, c, 0)], m, cfg)
    assert total == pytest.approx(np.mean(parts) + 0.3 * m.weight_norm_sq(), abs=1e-12)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        contrastive_loss([], tiny_model(0), ContrastiveConfig())


# -- backward ---------------------------------------------------------------------------


def _softmax_case(seed):
    g = np.random.default_rng(seed)
    m = tiny_model(seed, head=3)
    X = g.normal(size=(3, 5, 3))
    labels = [0, 2, 1]
    return m, lambda: softmax_forward(m, X, labels, train=True)


def _contrastive_case(seed, lam=0.05, margin=None):
    g = np.random.default_rng(seed)
    m = tiny_model(seed)
    X1, X2 = g.normal(size=(2, 3, 5, 3))
    labels = [1, 0, 0]
    if margin is None:
        # margin between the impostor distances so both hinge branches show up
        _, ctx = contrastive_forward(m, X1, X2, labels, ContrastiveConfig(1.0, 0.0), train=True)
        margin = float(np.mean(ctx.dist[1:])) + 1e-3
    cfg = ContrastiveConfig(margin, lam)
    return m, lambda: contrastive_forward(m, X1, X2, labels, cfg, train=True)


@pytest.mark.parametrize("seed", [11, 12, 13])
@pytest.mark.parametrize("case", [_softmax_case, _contrastive_case])
def test_gradients_match_finite_differences(case, seed):
    m, run = case(seed)
    _, ctx = run()
    analytic = backward(m, ctx)
    numeric = numeric_grads(m, lambda: run()[0])
    assert set(analytic) == set(numeric)
    assert worst_error(analytic, numeric) < 1e-4


def test_far_impostors_have_zero_gradient(rng):
    m = tiny_model(4)
    X1, X2 = rng.normal(size=(2, 3, 5, 3))
    _, ctx = contrastive_forward(m, X1, X2, [0, 0, 0], ContrastiveConfig(1.0, 0.0))
    cfg = ContrastiveConfig(float(ctx.dist.min()) * 0.5, 0.0)
    _, ctx = contrastive_forward(m, X1, X2, [0, 0, 0], cfg, train=True)
    for g in backward(m, ctx).values():
        assert not np.any(g)


def test_gradient_linear_in_lambda(rng):
    m = tiny_model(5)
    X1, X2 = rng.normal(size=(2, 3, 5, 3))
    grads = []
    for lam in (0.0, 0.1, 0.2):
        _, ctx = contrastive_forward(m, X1, X2, [1, 0, 1], ContrastiveConfig(2.0, lam))
        grads.append(backward(m, ctx))
    for n in grads[0]:
        np.testing.assert_allclose(grads[2][n] - grads[1][n], grads[1][n] - grads[0][n], atol=1e-10)
    for n in ("bn.gamma", "bn.beta", "l0.b", "l1.b"):
        np.testing.assert_array_equal(grads[1][n], grads[0][n])


@pytest.mark.parametrize("y", [0, 1])
def test_branch_swap_leaves_loss_and_gradients(rng, y):
    m = tiny_model(6)
    X1, X2 = rng.normal(size=(2, 2, 5, 3))
    cfg = ContrastiveConfig(3.0, 0.01)
    l1, c1 = contrastive_forward(m, X1, X2, [y, y], cfg, train=True)
    l2, c2 = contrastive_forward(m, X2, X1, [y, y], cfg, train=True)
    assert l1 == pytest.approx(l2, abs=1e-12)
    g1, g2 = backward(m, c1), backward(m, c2)
    for n in g1:
        np.testing.assert_allclose(g1[n], g2[n], atol=1e-12)


def test_stale_cache(rng):
    m = tiny_model(7, head=2)
    _, ctx = softmax_forward(m, rng.normal(size=(2, 5, 3)), [0, 1], train=True)
    m.params["l0.W"] += 0.1
    m.touch()
    with pytest.raises(StaleCache):
        backward(m, ctx)


# -- checkpoints --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    m = tiny_model(8, head=3)
    save_checkpoint(tmp_path / "m.ckpt", m, "ab" * 32, {"speakers": ["a", "b", "c"]})
    back, digest, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert digest == "ab" * 32 and meta == {"speakers": ["a", "b", "c"]}
    assert back.config == m.config and back.has_head and back.has_bn
    for n in m.params:
        np.testing.assert_array_equal(back.params[n], m.params[n])
    for n in m.state:
        np.testing.assert_array_equal(back.state[n], m.state[n])
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(forward(back, x)[0], forward(m, x)[0])
    assert (tmp_path / "m.ckpt").read_bytes()[:7] == b"SVLSTM1"
