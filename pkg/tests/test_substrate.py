import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcb.errors import NonDeterministicError, NonFiniteError, ShapeError
from mmcb.substrate import (
    Context,
    Tape,
    Tensor,
    add,
    causal_mask,
    concat_rows,
    constant,
    dropout,
    embedding,
    grad_check,
    label_smoothed_ce,
    layer_norm,
    linear,
    lr_at,
    matmul,
    mean_rows,
    multi_head_attention,
    relu,
    scale,
    softmax_rows,
    sq_l2,
    stop_gradient,
    straight_through,
)
from mmcb.substrate.optim import OptimizerState, adam_step, clip_global_norm


def eye_mha_params(d):
    """Identity projections so mha reduces to plain attention."""
    eye = lambda: Tensor(np.eye(d))
    zero = lambda: Tensor(np.zeros((1, d)))
    return dict(wq=eye(), wk=eye(), wv=eye(), wo=eye(),
                bq=zero(), bk=zero(), bv=zero(), bo=zero())


def brute_attention(q, k, v, scale_dk):
    """Independent single-head attention oracle: literal softmax evaluation."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = np.array([q[i] @ k[j] / scale_dk for j in range(k.shape[0])])
        e = np.exp(s - s.max())
        w = e / e.sum()
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


class TestPrimitives:
    def test_softmax_zero_row(self):
        out = softmax_rows(None, Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(out.data, [[0.25, 0.25, 0.25, 0.25]])

    def test_layer_norm_constant_row_zero_pre_affine(self):
        x = Tensor(np.full((3, 5), 2.7))
        g, b = Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 5)))
        out = layer_norm(None, x, g, b)
        np.testing.assert_array_equal(out.data, np.zeros((3, 5)))

    def test_attention_peaked_query_recovers_value_row(self):
        d, s = 4, 8.0
        k = np.eye(3, d) * s
        q = k[0:1].copy()
        rng = np.random.default_rng(0)
        v = rng.normal(size=(3, d))
        expected = brute_attention(q, k, v, math.sqrt(d))
        out = multi_head_attention(None, Tensor(q), Tensor(k), Tensor(v),
                                   heads=1, **eye_mha_params(d))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        np.testing.assert_allclose(out.data[0], v[0], atol=1e-6)

    def test_mha_matches_brute_force_per_head(self):
        rng = np.random.default_rng(1)
        d, heads, nq, nk = 8, 2, 5, 7
        q_in, k_in, v_in = rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), None
        v_in = k_in
        params = {n: Tensor(rng.normal(size=(d, d)) * 0.3) for n in ("wq", "wk", "wv", "wo")}
        params.update({n: Tensor(rng.normal(size=(1, d)) * 0.1) for n in ("bq", "bk", "bv", "bo")})
        out = multi_head_attention(None, Tensor(q_in), Tensor(k_in), Tensor(v_in),
                                   heads=heads, **params)
        q = q_in @ params["wq"].data + params["bq"].data
        k = k_in @ params["wk"].data + params["bk"].data
        v = v_in @ params["wv"].data + params["bv"].data
        dk = d // heads
        pieces = [brute_attention(q[:, h * dk:(h + 1) * dk], k[:, h * dk:(h + 1) * dk],
                                  v[:, h * dk:(h + 1) * dk], math.sqrt(dk))
                  for h in range(heads)]
        expected = np.concatenate(pieces, axis=1) @ params["wo"].data + params["bo"].data
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            matmul(None, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([[1.0, np.nan]]))

    def test_fully_masked_query_row_rejected(self):
        d = 4
        mask = np.zeros((2, 3))
        mask[1, :] = -1e9
        with pytest.raises(ShapeError):
            multi_head_attention(None, Tensor(np.zeros((2, d))), Tensor(np.zeros((3, d))),
                                 Tensor(np.zeros((3, d))), heads=1, mask=mask,
                                 **eye_mha_params(d))


class TestSoftmaxProperties:
    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(lambda r: len({len(x) for x in r}) == 1))
    def test_rows_sum_to_one_and_positive(self, rows):
        p = softmax_rows(None, Tensor(np.array(rows))).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_causal_mask_bit_identity(self):
        rng = np.random.default_rng(2)
        d, n = 8, 6
        params = {k: Tensor(v.data.copy()) for k, v in eye_mha_params(d).items()}
        x1 = rng.normal(size=(n, d))
        x2 = x1.copy()
        x2[4:] = rng.normal(size=(n - 4, d))
        mask = causal_mask(n)
        o1 = multi_head_attention(None, Tensor(x1), Tensor(x1), Tensor(x1),
                                  heads=2, mask=mask, **params)
        o2 = multi_head_attention(None, Tensor(x2), Tensor(x2), Tensor(x2),
                                  heads=2, mask=mask, **params)
        assert np.array_equal(o1.data[:4], o2.data[:4])


class TestLabelSmoothedCE:
    def test_uniform_logits_gives_log_vocab(self):
        logits = Tensor(np.zeros((3, 4)))
        for eps in (0.0, 0.1, 0.5):
            loss = label_smoothed_ce(None, logits, np.array([0, 1, 2]), eps)
            assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_eps_zero_peaked(self):
        # logits chosen so p(true) = 0.9 exactly: [log 9, 0, 0, ... renormalized]
        v = 10
        l0 = math.log(0.9) - math.log(0.1 / (v - 1))
        logits = np.zeros((1, v))
        logits[0, 0] = l0
        loss = label_smoothed_ce(None, Tensor(logits), np.array([0]), 0.0)
        assert loss.item() == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_matches_independent_scalar_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 7)) * 2
        targets = rng.integers(0, 7, size=5)
        eps = 0.1
        # independent oracle: per-position loops over the vocabulary
        total = 0.0
        for i in range(5):
            z = logits[i] - logits[i].max()
            logp = z - math.log(sum(math.exp(t) for t in z))
            q = [eps / 7] * 7
            q[targets[i]] += 1 - eps
            total += -sum(q[w] * logp[w] for w in range(7))
        loss = label_smoothed_ce(None, Tensor(logits), targets, eps)
        assert loss.item() == pytest.approx(total / 5, abs=1e-12)

    def test_mask_excludes_positions(self):
        logits = np.zeros((2, 4))
        logits[1, 0] = 100.0
        loss = label_smoothed_ce(None, Tensor(logits), np.array([1, 0]), 0.0,
                                 mask=np.array([True, False]))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_empty_unmasked_rejected(self):
        with pytest.raises(ShapeError):
            label_smoothed_ce(None, Tensor(np.zeros((2, 4))), np.array([0, 0]), 0.1,
                              mask=np.array([False, False]))


class TestSchedule:
    def test_branches_meet_at_warmup(self):
        d, w = 512, 4000
        assert lr_at(w, d, w) == pytest.approx(d ** -0.5 * w ** -0.5, rel=1e-15)

    def test_value_at_knee(self):
        assert lr_at(4000, 512, 4000) == pytest.approx(6.9877e-4, abs=1e-8)

    def test_ramp_branch_below_warmup(self):
        assert lr_at(1, 512, 4000) == pytest.approx(512 ** -0.5 * 4000 ** -1.5, rel=1e-15)

    def test_continuity_at_knee(self):
        # one-step change near the knee is ~1/warmup relative on either branch
        for d, w in ((512, 4000), (64, 400)):
            below = lr_at(w - 1, d, w)
            at = lr_at(w, d, w)
            above = lr_at(w + 1, d, w)
            assert abs(below - at) / at <= 1.01 / w
            assert abs(above - at) / at <= 1.01 / w

    def test_zero_warmup_rejected(self):
        with pytest.raises(ShapeError):
            lr_at(1, 512, 0)


class TestAdam:
    def test_zero_grad_zero_moments_no_move(self):
        p = {"w": np.array([[1.0, -2.0]])}
        before = p["w"].copy()
        st_ = OptimizerState(d_model=64, warmup=100)
        adam_step(st_, p, {"w": np.zeros((1, 2))}, lr=0.1)
        assert np.array_equal(p["w"], before)

    def test_one_step_matches_scalar_oracle(self):
        theta, g, lr = 1.0, 0.5, 0.1
        p = {"w": np.array([[theta]])}
        st_ = OptimizerState(d_model=64, warmup=100)
        adam_step(st_, p, {"w": np.array([[g]])}, lr=lr)
        # hand-evaluated bias-corrected update
        m = 0.1 * g
        v = 0.02 * g * g
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.98)
        expected = theta - lr * mhat / (math.sqrt(vhat) + 1e-8)
        assert p["w"][0, 0] == pytest.approx(expected, rel=1e-15)

    def test_frozen_params_untouched(self):
        p = {"a": np.array([[1.0]]), "b": np.array([[2.0]])}
        before_b = p["b"].copy()
        st_ = OptimizerState(d_model=64, warmup=100)
        adam_step(st_, p, {"a": np.array([[1.0]])}, lr=0.1)
        assert np.array_equal(p["b"], before_b)
        assert p["a"][0, 0] != 1.0

    def test_clip_global_norm(self):
        g = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
        norm = clip_global_norm(g, 1.0)
        assert norm == pytest.approx(5.0)
        assert g["a"][0, 0] == pytest.approx(0.6)
        joint = math.sqrt(g["a"][0, 0] ** 2 + g["b"][0, 0] ** 2)
        assert joint == pytest.approx(1.0)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        ctx = Context(training=True, seed=1, step=5)
        assert dropout(ctx, x, 0.0) is x

    def test_eval_is_identity_regardless_of_rate(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert dropout(Context.inference(), x, 0.9) is x

    def test_reproducible_from_seed_step_op(self):
        x = Tensor(np.ones((4, 8)))
        outs = []
        for _ in range(2):
            ctx = Context(training=True, seed=7, step=3, salt=2)
            dropout(ctx, x, 0.5)  # advances op index
            outs.append(dropout(ctx, x, 0.5).data)
        assert np.array_equal(outs[0], outs[1])
        other = Context(training=True, seed=7, step=4, salt=2)
        assert not np.array_equal(outs[0], dropout(other, x, 0.5).data)

    def test_inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones((200, 50)))
        ctx = Context(training=True, seed=0, step=0)
        out = dropout(ctx, x, 0.3)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)


class TestTapeAndGradCheck:
    def test_linear_map_rel_err_tiny(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = constant(rng.normal(size=(4, 3)))
        left = constant(np.ones((1, 4)))
        right = constant(np.ones((2, 1)))

        def loss_fn(ctx):
            # loss linear in w: central differences are exact up to roundoff
            return matmul(ctx, matmul(ctx, left, linear(ctx, x, w)), right)

        rep = grad_check(loss_fn, {"w": w}, samples_per_param=6)
        assert rep.max_rel_err < 1e-9

    def test_unused_parameter_gradient_exactly_zero(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        x = constant(np.ones((1, 2)))

        tape = Tape()
        ctx = Context(tape=tape)
        loss = sq_l2(ctx, matmul(ctx, x, w), constant(np.zeros((1, 2))))
        tape.backward(loss)
        assert unused.grad is None
        rep = grad_check(lambda c: sq_l2(c, matmul(c, x, w), constant(np.zeros((1, 2)))),
                         {"w": w, "unused": unused}, samples_per_param=4)
        assert rep.per_param["unused"] == 0.0

    def test_nondeterministic_loss_detected(self):
        state = {"n": 0}

        def noisy(ctx):
            state["n"] += 1
            return constant([[float(state["n"])]])

        with pytest.raises(NonDeterministicError):
            grad_check(noisy, {})

    def test_composite_primitives_grad(self):
        rng = np.random.default_rng(5)
        d = 6
        params = {
            "w1": Tensor(rng.normal(size=(d, d)) * 0.5, requires_grad=True),
            "b1": Tensor(rng.normal(size=(1, d)) * 0.1, requires_grad=True),
            "g": Tensor(np.abs(rng.normal(size=(1, d))) + 0.5, requires_grad=True),
            "be": Tensor(rng.normal(size=(1, d)) * 0.1, requires_grad=True),
            "emb": Tensor(rng.normal(size=(9, d)), requires_grad=True),
        }
        ids = np.array([1, 4, 7, 4])
        tgt = constant(rng.normal(size=(1, d)))

        def loss_fn(ctx):
            h = embedding(ctx, params["emb"], ids)
            h = linear(ctx, h, params["w1"], params["b1"])
            h = relu(ctx, h)
            h = layer_norm(ctx, h, params["g"], params["be"])
            h = dropout(ctx, h, 0.2)
            h = concat_rows(ctx, h, scale(ctx, h, 0.5))
            pooled = mean_rows(ctx, h)
            return sq_l2(ctx, pooled, tgt)

        rep = grad_check(loss_fn, params, samples_per_param=10, train=True)
        assert rep.max_rel_err < 1e-4, str(rep)

    def test_mha_grad(self):
        rng = np.random.default_rng(6)
        d, nq, nk = 8, 3, 5
        params = {n: Tensor(rng.normal(size=(d, d)) * 0.4, requires_grad=True)
                  for n in ("wq", "wk", "wv", "wo")}
        params.update({n: Tensor(rng.normal(size=(1, d)) * 0.1, requires_grad=True)
                       for n in ("bq", "bk", "bv", "bo")})
        q = Tensor(rng.normal(size=(nq, d)), requires_grad=True)
        kv = Tensor(rng.normal(size=(nk, d)), requires_grad=True)
        tgt = constant(rng.normal(size=(nq, d)))

        def loss_fn(ctx):
            out = multi_head_attention(ctx, q, kv, kv, heads=2, **params)
            return sq_l2(ctx, out, tgt)

        all_params = dict(params, q=q, kv=kv)
        rep = grad_check(loss_fn, all_params, samples_per_param=8)
        assert rep.max_rel_err < 1e-4, str(rep)

    def test_softmax_and_ce_grad(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(5, 9)) * 0.7, requires_grad=True)
        x = constant(rng.normal(size=(4, 5)))
        targets = np.array([0, 3, 8, 2])

        def loss_fn(ctx):
            return label_smoothed_ce(ctx, linear(ctx, x, w), targets, 0.1)

        rep = grad_check(loss_fn, {"w": w}, samples_per_param=15)
        assert rep.max_rel_err < 1e-4, str(rep)

    def test_straight_through_identity_via_frozen_surrogate(self):
        rng = np.random.default_rng(8)
        h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        codes = rng.normal(size=(4, 3))
        tgt = constant(rng.normal(size=(1, 3)))

        def base(ctx):
            q = straight_through(ctx, h, codes, key="q")
            return sq_l2(ctx, mean_rows(ctx, q), tgt)

        cap = Context()
        cap.st_capture = {}
        base(cap)

        def frozen(ctx):
            ctx.st_frozen = cap.st_capture
            return base(ctx)

        rep = grad_check(frozen, {"h": h}, samples_per_param=12)
        assert rep.max_rel_err < 1e-8, str(rep)

    def test_stop_gradient_blocks(self):
        h = Tensor(np.ones((2, 2)), requires_grad=True)
        tape = Tape()
        ctx = Context(tape=tape)
        loss = sq_l2(ctx, stop_gradient(h), constant(np.zeros((2, 2))))
        tape.backward(loss)
        assert h.grad is None

    def test_tape_touched_leaves_tracking(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=False)
        tape = Tape()
        ctx = Context(tape=tape)
        add(ctx, matmul(ctx, a, constant(np.ones((2, 2)))), b)
        assert id(a) in tape.touched_leaves
        assert id(b) not in tape.touched_leaves
