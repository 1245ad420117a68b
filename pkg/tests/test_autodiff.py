"""Reverse-mode tape: gradient correctness and tape discipline."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visflow import autodiff as ad
from visflow.errors import DegenerateRowError, ShapeError, TapeError


def tape_with(rng, **shapes):
    tape = ad.GradTape()
    tensors = {name: tape.leaf(rng.standard_normal(shape), name)
               for name, shape in shapes.items()}
    return tape, tensors


def check_against_fd(build, params, tol=1e-4, seed=0):
    """build(tensors) -> scalar Tensor; compares tape grads to central FD."""
    rng = np.random.default_rng(seed)
    values = {name: rng.standard_normal(shape) for name, shape in params.items()}

    tape = ad.GradTape()
    tensors = {name: tape.leaf(v.copy(), name) for name, v in values.items()}
    loss = build(tensors)
    tape.backward(loss)
    grads = {name: tape.grad_of(name) for name in params}

    def objective(vals):
        t = ad.GradTape()
        ts = {name: t.leaf(v, name) for name, v in vals.items()}
        return float(build(ts).value[0])

    err = ad.finite_difference_check(objective, values, grads)
    assert err < tol, f"finite-difference mismatch: {err}"


class TestOpGradients:
    def test_add_scale_matmul(self):
        check_against_fd(
            lambda t: ad.take_row(
                ad.matmul(ad.add(t["a"], t["b"]), ad.scale(t["w"], 0.5)), 0
            ).__class__ and ad.cross_entropy(
                ad.take_row(ad.matmul(ad.add(t["a"], t["b"]), t["w"]), 1), 2),
            {"a": (3, 4), "b": (3, 4), "w": (4, 5)},
        )

    def test_fanout_accumulates(self):
        # x feeds two branches; gradient is the sum of both contributions
        def build(t):
            y = ad.add(ad.scale(t["x"], 2.0), ad.scale(t["x"], 3.0))
            return ad.cross_entropy(ad.take_row(y, 0), 1)

        check_against_fd(build, {"x": (2, 4)})

    def test_layer_norm_gelu_chain(self):
        def build(t):
            y = ad.layer_norm(t["x"], t["g"], t["b"])
            z = ad.gelu(y)
            return ad.cross_entropy(ad.take_row(z, 1), 0)

        check_against_fd(build, {"x": (3, 6), "g": (6,), "b": (6,)})

    def test_bmm_swap_heads_roundtrip(self):
        def build(t):
            q = ad.split_heads(t["q"], 2)
            k = ad.split_heads(t["k"], 2)
            s = ad.bmm(q, ad.swap_last2(k))
            merged = ad.merge_heads(ad.bmm(s, ad.split_heads(t["v"], 2)))
            return ad.cross_entropy(ad.take_row(merged, 2), 3)

        check_against_fd(build, {"q": (4, 6), "k": (4, 6), "v": (4, 6)})

    def test_masked_softmax_gradient(self):
        mask = np.tril(np.ones((4, 4)))

        def build(t):
            p = ad.masked_row_softmax(t["s"], mask)
            return ad.cross_entropy(ad.take_row(ad.matmul(p, t["v"]), 3), 1)

        check_against_fd(build, {"s": (4, 4), "v": (4, 5)})

    def test_gather_concat_slice(self):
        def build(t):
            rows = ad.gather_rows(t["table"], [2, 0, 2, 1])
            left = ad.slice_cols(rows, 0, 3)
            right = ad.slice_cols(rows, 3, 5)
            return ad.cross_entropy(
                ad.take_row(ad.concat_cols([right, left]), 1), 4
            )

        check_against_fd(build, {"table": (4, 5)})

    def test_replace_slab_blocks_gradient(self):
        rng = np.random.default_rng(3)
        tape = ad.GradTape()
        a = tape.leaf(rng.standard_normal((2, 3, 3)), "a")
        override = np.full((3, 3), 0.25)
        out = ad.replace_slab(a, 1, override)
        v = tape.leaf(rng.standard_normal((2, 3, 3)), "v")
        loss = ad.cross_entropy(ad.take_row(ad.merge_heads(ad.bmm(out, v)), 0), 0)
        tape.backward(loss)
        g = tape.grad_of("a")
        assert np.all(g[1] == 0.0), "overridden slab must not receive gradient"
        assert np.any(g[0] != 0.0)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_attention_graphs(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        d = 2 * int(rng.integers(1, 4))
        mask = np.tril(np.ones((n, n)))
        target = int(rng.integers(0, d))

        def build(t):
            q = ad.matmul(t["x"], t["wq"])
            k = ad.matmul(t["x"], t["wk"])
            p = ad.masked_row_softmax(ad.scale(ad.matmul(q, ad.transpose(k)),
                                               1.0 / np.sqrt(d)), mask)
            out = ad.matmul(p, ad.matmul(t["x"], t["wv"]))
            return ad.cross_entropy(ad.take_row(out, n - 1), target)

        params = {"x": (n, d), "wq": (d, d), "wk": (d, d), "wv": (d, d)}
        values = {k: np.random.default_rng(seed).standard_normal(s)
                  for k, s in params.items()}
        tape = ad.GradTape()
        ts = {k: tape.leaf(v.copy(), k) for k, v in values.items()}
        tape.backward(build(ts))

        def objective(vals):
            t = ad.GradTape()
            return float(build({k: t.leaf(v, k) for k, v in vals.items()}).value[0])

        # Near-zero coordinates sit at the FD noise floor, so accept either a
        # small absolute or a small relative disagreement.
        eps = 1e-5
        for name, base in values.items():
            analytic = tape.grad_of(name)
            for idx in np.ndindex(base.shape):
                work = {k: v.copy() for k, v in values.items()}
                work[name][idx] += eps
                fp = objective(work)
                work[name][idx] -= 2 * eps
                fm = objective(work)
                numeric = (fp - fm) / (2 * eps)
                diff = abs(analytic[idx] - numeric)
                assert diff < max(1e-4 * (abs(analytic[idx]) + abs(numeric)), 1e-7)


class TestCrossEntropy:
    def test_matches_manual_logsumexp(self):
        logits = np.array([1.5, -0.5, 3.0, 0.0])
        tape = ad.GradTape()
        t = tape.leaf(np.tile(logits, (1, 1)), "z")
        loss = ad.cross_entropy(ad.take_row(t, 0), 2)
        m = logits.max()
        expected = m + np.log(np.exp(logits - m).sum()) - logits[2]
        assert abs(float(loss.value[0]) - expected) < 1e-14

    def test_gradient_is_probs_minus_onehot(self):
        logits = np.array([[0.2, 1.1, -0.7]])
        tape = ad.GradTape()
        t = tape.leaf(logits, "z")
        loss = ad.cross_entropy(ad.take_row(t, 0), 1)
        tape.backward(loss)
        e = np.exp(logits[0] - logits[0].max())
        p = e / e.sum()
        p[1] -= 1.0
        np.testing.assert_allclose(tape.grad_of("z")[0], p, atol=1e-15)


class TestTapeDiscipline:
    def test_backward_twice_rejected(self):
        tape = ad.GradTape()
        x = tape.leaf(np.ones((1, 2)), "x")
        loss = ad.cross_entropy(ad.take_row(x, 0), 0)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_mixed_tapes_rejected(self):
        t1, t2 = ad.GradTape(), ad.GradTape()
        a = t1.leaf(np.ones((2, 2)))
        b = t2.leaf(np.ones((2, 2)))
        with pytest.raises(TapeError):
            ad.add(a, b)

    def test_duplicate_leaf_name_rejected(self):
        tape = ad.GradTape()
        tape.leaf(np.ones(2), "w")
        with pytest.raises(TapeError):
            tape.leaf(np.zeros(2), "w")

    def test_grad_of_before_backward(self):
        tape = ad.GradTape()
        tape.leaf(np.ones((1, 1)), "x")
        with pytest.raises(TapeError):
            tape.grad_of("x")

    def test_no_tape_means_forward_only(self):
        a = ad.Tensor(np.ones((2, 2)))
        b = ad.Tensor(np.eye(2))
        out = ad.matmul(a, b)
        assert out.tape is None
        np.testing.assert_array_equal(out.value, np.ones((2, 2)))

    def test_shape_mismatch_rejected(self):
        tape = ad.GradTape()
        a = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            ad.matmul(a, b)

    def test_fully_masked_row_rejected(self):
        tape = ad.GradTape()
        s = tape.leaf(np.zeros((3, 3)))
        mask = np.ones((3, 3))
        mask[1, :] = 0
        with pytest.raises(DegenerateRowError) as exc_info:
            ad.masked_row_softmax(s, mask)
        assert exc_info.value.row == 1
