"""Reverse-mode engine tests: values against hand-rolled arithmetic, gradients
against central finite differences, and the freeze/idempotence contracts."""

import numpy as np
import pytest

from plastinet import autodiff as ad
from plastinet.autodiff import Graph, GraphStateError, Tensor
from plastinet.params import ParamStore


def scalar_graph(build):
    return Graph(build, name="test")


class TestForwardValues:
    """Primitive forward results match plain numpy."""

    def test_identity_chain(self):
        """reshape/slice/scatter round trips reproduce the input exactly."""
        rng = np.random.default_rng(42)
        x = rng.normal(size=(3, 8))
        t = Tensor(x)
        y = ad.reshape(ad.reshape(t, (24,)), (3, 8))
        np.testing.assert_array_equal(y.data, x)
        z = ad.slice_axis(t, 1, 0, 8)
        np.testing.assert_array_equal(z.data, x)

    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(3, 5))
        y = ad.linear(Tensor(x), Tensor(w))
        np.testing.assert_allclose(y.data, x @ w.T, rtol=0, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(6, 9)) * 10
        s = ad.softmax(Tensor(x))
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_two_layer_mlp_hand_rolled(self):
        """A fixed-seed MLP value equals independent matrix arithmetic."""
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 4))
        w1, b1 = rng.normal(size=(7, 4)), rng.normal(size=7)
        w2, b2 = rng.normal(size=(2, 7)), rng.normal(size=2)

        h = ad.relu(ad.add_bias(ad.linear(Tensor(x), Tensor(w1)), Tensor(b1)))
        out = ad.add_bias(ad.linear(h, Tensor(w2)), Tensor(b2))

        expect = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
        np.testing.assert_allclose(out.data, expect, rtol=0, atol=1e-13)


class TestGradients:
    """Analytic gradients against exact formulas and finite differences."""

    def test_linear_weight_gradient_exact(self):
        """d sum(x W^T) / dW = column-sums of x, exact to 1e-9."""
        rng = np.random.default_rng(42)
        x = rng.normal(size=(6, 4))
        store = ParamStore()
        store.add("w", rng.normal(size=(3, 4)))

        graph = scalar_graph(lambda ins, leaves: ad.sum_all(ad.linear(ins[0], leaves["w"])))
        ad.forward(graph, [x], store)
        grads = ad.backward(graph, store)
        expect = np.ones((6, 3)).T @ x     # outer-product accumulation
        np.testing.assert_allclose(grads["w"].data, expect, rtol=0, atol=1e-9)

    def test_elementwise_ops_finite_diff(self):
        """relu/tanh/sigmoid/softmax composites pass a 1e-6 finite-diff check."""
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("a", rng.normal(size=(4, 3)))
        store.add("b", rng.normal(size=3))

        def build(ins, leaves):
            h = ad.tanh(ad.add_bias(leaves["a"], leaves["b"]))
            s = ad.softmax(ad.mul(h, ad.sigmoid(leaves["a"])))
            return ad.mean_all(ad.mul(s, s))

        err = ad.finite_diff_check(scalar_graph(build), store)
        assert err <= 1e-6

    def test_composed_graph_finite_diff(self):
        """A conv + dense + cross-entropy-like composite stays under 1e-6."""
        rng = np.random.default_rng(42)
        x = rng.normal(size=(2, 1, 6, 6))
        onehot = np.eye(2)[[0, 1]]
        store = ParamStore()
        store.add("k", rng.normal(size=(3, 1, 3, 3)) * 0.5)
        store.add("w", rng.normal(size=(2, 3 * 6 * 6)) * 0.1)

        def build(ins, leaves):
            h = ad.relu(ad.conv2d(ins[0], leaves["k"], stride=1, padding=1))
            flat = ad.reshape(h, (2, 3 * 6 * 6))
            logits = ad.linear(flat, leaves["w"])
            picked = ad.mul(ad.log_softmax(logits), ins[1])
            return ad.scale(ad.sum_all(picked), -0.5)

        err = ad.finite_diff_check(scalar_graph(build), store, inputs=[x, onehot])
        assert err <= 1e-6

    def test_gru_style_recurrence_finite_diff(self):
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("w", rng.normal(size=(3, 2)))
        store.add("u", rng.normal(size=(3, 3)))
        x = rng.normal(size=(4, 5, 2))

        def build(ins, leaves):
            h = Tensor(np.zeros((4, 3)))
            for t in range(5):
                xt = ad.reshape(ad.slice_axis(ins[0], 1, t, t + 1), (4, 2))
                z = ad.sigmoid(ad.add(ad.linear(xt, leaves["w"]), ad.linear(h, leaves["u"])))
                h = ad.add(ad.mul(ad.affine(z, -1.0, 1.0), h), z)
            return ad.mean_all(h)

        err = ad.finite_diff_check(scalar_graph(build), store, inputs=[x])
        assert err <= 1e-6


class TestFreezeContract:
    """requires_grad=False leaves are true constants for the tape."""

    def test_frozen_leaf_absent_from_gradient_map(self):
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("w1", rng.normal(size=(3, 4)))
        store.add("w2", rng.normal(size=(2, 3)))
        store.set_trainable({"w2"})

        graph = scalar_graph(
            lambda ins, leaves: ad.sum_all(ad.linear(ad.relu(ad.linear(ins[0], leaves["w1"])),
                                                     leaves["w2"])))
        ad.forward(graph, [rng.normal(size=(5, 4))], store)
        grads = ad.backward(graph, store)
        assert set(grads) == {"w2"}

    def test_frozen_leaf_grad_never_allocated(self):
        """The frozen leaf's .grad stays None: no gradient work happened."""
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("w1", rng.normal(size=(3, 4)))
        store.add("w2", rng.normal(size=(2, 3)))
        store.set_trainable({"w2"})

        graph = scalar_graph(
            lambda ins, leaves: ad.sum_all(ad.linear(ad.relu(ad.linear(ins[0], leaves["w1"])),
                                                     leaves["w2"])))
        ad.forward(graph, [rng.normal(size=(5, 4))], store)
        ad.backward(graph, store)
        assert graph._last_leaves["w1"].grad is None
        assert graph._last_leaves["w2"].grad is not None

    def test_frozen_gradients_match_unfrozen_subset(self):
        """Freezing never changes the gradients that are still computed."""
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 4))
        vals = {"w1": rng.normal(size=(3, 4)), "w2": rng.normal(size=(2, 3))}

        def run(trainable):
            store = ParamStore()
            for k, v in vals.items():
                store.add(k, v.copy())
            store.set_trainable(trainable)
            graph = scalar_graph(
                lambda ins, leaves: ad.mean_all(ad.linear(ad.tanh(ad.linear(ins[0], leaves["w1"])),
                                                          leaves["w2"])))
            ad.forward(graph, [x], store)
            return ad.backward(graph, store)

        full = run({"w1", "w2"})
        part = run({"w2"})
        np.testing.assert_array_equal(part["w2"].data, full["w2"].data)


class TestDeterminismAndState:
    """Re-evaluation is bit-identical; misuse raises clearly."""

    def test_forward_backward_bit_identical(self):
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("w", rng.normal(size=(4, 6)))
        x = rng.normal(size=(3, 6))
        graph = scalar_graph(lambda ins, leaves: ad.mean_all(ad.relu(ad.linear(ins[0], leaves["w"]))))

        out1 = ad.forward(graph, [x], store).data.copy()
        g1 = ad.backward(graph, store)["w"].data.copy()
        out2 = ad.forward(graph, [x], store).data.copy()
        g2 = ad.backward(graph, store)["w"].data.copy()
        assert np.array_equal(out1, out2)
        assert np.array_equal(g1, g2)

    def test_backprop_idempotent(self):
        """Calling backward twice on one tape does not double-accumulate."""
        rng = np.random.default_rng(42)
        store = ParamStore()
        store.add("w", rng.normal(size=(4, 6)))
        graph = scalar_graph(lambda ins, leaves: ad.sum_all(leaves["w"]))
        ad.forward(graph, [], store)
        g1 = ad.backward(graph, store)["w"].data.copy()
        g2 = ad.backward(graph, store)["w"].data.copy()
        np.testing.assert_array_equal(g1, g2)

    def test_backward_before_forward_raises(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        graph = scalar_graph(lambda ins, leaves: ad.sum_all(leaves["w"]))
        with pytest.raises(GraphStateError):
            ad.backward(graph, store)

    def test_nonfinite_forward_raises(self):
        store = ParamStore()
        store.add("w", np.array([[1.0, np.inf]]))
        graph = scalar_graph(lambda ins, leaves: ad.sum_all(leaves["w"]))
        with pytest.raises(ArithmeticError):
            ad.forward(graph, [], store)

    def test_shape_mismatch_names_operands(self):
        with pytest.raises(ValueError, match="linear shape mismatch"):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
