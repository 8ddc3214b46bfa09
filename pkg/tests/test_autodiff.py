import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevdrive import autodiff as ad
from bevdrive.errors import ContractViolation, TrainingError


class TestForwardExamples:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor(np.zeros(2)), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_scatter_add_example(self):
        out = ad.scatter_add(ad.Tensor(np.array([1.0, 2.0, 3.0])), np.array([0, 0, 1]), 2)
        np.testing.assert_array_equal(out.data, [3.0, 3.0])

    def test_scatter_add_ignores_out_of_range(self):
        out = ad.scatter_add(ad.Tensor(np.array([1.0, 5.0, 7.0])), np.array([0, -1, 9]), 2)
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_gru_zero_params_fixed_point(self):
        h_dim, in_dim = 4, 3
        shapes = [(in_dim, h_dim), (h_dim, h_dim), (h_dim,)] * 3
        params = ad.GruParams(*[ad.Tensor(np.zeros(s)) for s in shapes])
        x = ad.Tensor(np.random.default_rng(0).standard_normal((2, in_dim)))
        h = ad.gru_cell(x, ad.Tensor(np.zeros((2, h_dim))), params)
        np.testing.assert_array_equal(h.data, np.zeros((2, h_dim)))

    def test_dense_shape_mismatch_message(self):
        with pytest.raises(ContractViolation, match=r"\(2, 3\)"):
            ad.dense(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))),
                     ad.Tensor(np.zeros(5)))

    def test_conv_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.conv2d(ad.Tensor(np.zeros((1, 3, 8, 8))), ad.Tensor(np.zeros((4, 2, 3, 3))))

    def test_scalar_constants_preserve_float32(self):
        x = ad.Tensor(np.ones((2, 2), np.float32))
        y = ad.mul(ad.add(x, 1.0), -0.5)
        assert y.data.dtype == np.float32


class TestBackward:
    def test_sum_gradient(self):
        with ad.Tape() as tape:
            x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
            tape.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_relu_gradient(self):
        with ad.Tape() as tape:
            x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
            tape.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_reused_tensor_accumulates(self):
        with ad.Tape() as tape:
            x = ad.Tensor(np.array([3.0]), requires_grad=True)
            tape.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        with ad.Tape() as tape:
            x = ad.Tensor(np.ones(3), requires_grad=True)
            y = ad.mul(x, 2.0)
            with pytest.raises(ContractViolation):
                tape.backward(y)

    def test_backward_without_tape_rejected(self):
        x = ad.Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(ContractViolation):
            ad.backward(x)

    def test_composite_matches_finite_differences(self):
        def fn(a, b):
            return ad.tanh(ad.dense(a, b, ad.Tensor(np.zeros(3))))
        report = ad.gradcheck(fn, [(2, 4), (4, 3)], seed=3)
        assert report.max_rel_err < 1e-5


class TestGradcheckReports:
    def test_dense(self):
        r = ad.gradcheck(lambda x, w, b: ad.dense(x, w, b), [(1, 4), (4, 3), (3,)], seed=1)
        assert r.max_rel_err < 1e-5

    def test_conv2d(self):
        r = ad.gradcheck(lambda x, k: ad.conv2d(x, k, stride=1, pad=1),
                         [(1, 4, 6, 6), (8, 4, 3, 3)], seed=2)
        assert r.max_rel_err < 1e-5

    def test_scatter_gradient_is_gather(self):
        idx = np.array([0, 2, 2, -1])
        up = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        with ad.Tape() as tape:
            v = ad.Tensor(np.ones((4, 2)), requires_grad=True)
            out = ad.scatter_add(v, idx, 3)
            tape.backward(ad.tsum(ad.mul(out, ad.Tensor(up))))
        expect = np.zeros((4, 2))
        expect[0] = up[0]
        expect[1] = up[2]
        expect[2] = up[2]
        np.testing.assert_array_equal(v.grad, expect)


class TestScatterDeterminism:
    @given(st.lists(st.tuples(st.floats(-10, 10, width=32), st.integers(0, 4)),
                    min_size=1, max_size=24),
           st.integers(0, 100))
    @settings(max_examples=60, deadline=None)
    def test_sorted_accumulation_permutation_bit_identical(self, pairs, perm_seed):
        vals = np.array([p[0] for p in pairs], np.float32).reshape(-1, 1)
        idx = np.array([p[1] for p in pairs])
        perm = np.random.default_rng(perm_seed).permutation(len(pairs))
        a = ad.scatter_add(ad.Tensor(vals), idx, 5, sorted_accumulation=True)
        b = ad.scatter_add(ad.Tensor(vals[perm]), idx[perm], 5, sorted_accumulation=True)
        np.testing.assert_array_equal(a.data, b.data)

    @given(st.lists(st.tuples(st.floats(-10, 10), st.integers(0, 4)),
                    min_size=1, max_size=24),
           st.integers(0, 100))
    @settings(max_examples=60, deadline=None)
    def test_default_mode_permutation_within_1e9(self, pairs, perm_seed):
        vals = np.array([p[0] for p in pairs], np.float64).reshape(-1, 1)
        idx = np.array([p[1] for p in pairs])
        perm = np.random.default_rng(perm_seed).permutation(len(pairs))
        a = ad.scatter_add(ad.Tensor(vals), idx, 5)
        b = ad.scatter_add(ad.Tensor(vals[perm]), idx[perm], 5)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_matches_per_point_loop_bitwise(self):
        rng = np.random.default_rng(5)
        vals = rng.standard_normal((40, 3)).astype(np.float32)
        idx = rng.integers(-1, 8, 40)
        out = ad.scatter_add(ad.Tensor(vals), idx, 8).data
        ref = np.zeros((8, 3), np.float32)
        for i in range(40):
            if 0 <= idx[i] < 8:
                ref[idx[i]] += vals[i]
        np.testing.assert_array_equal(out, ref)


class TestSoftmaxInvariants:
    @given(st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_simplex(self, seed):
        x = np.random.default_rng(seed).standard_normal((3, 7)) * 10
        y = ad.softmax(ad.Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y > 0)


class TestAdam:
    def test_first_step_closed_form(self):
        store = ad.ParamStore()
        p = store.add("p", np.array(0.0))
        p.grad = np.array(1.0)
        ad.adam_step(store, lr=0.1)
        assert abs(float(p.data) + 0.1) < 1e-6
        assert p.grad is None

    def test_zero_grad_leaves_parameter(self):
        store = ad.ParamStore()
        p = store.add("p", np.array(2.5))
        p.grad = np.array(0.0)
        ad.adam_step(store, lr=0.1)
        assert float(p.data) == 2.5

    def test_missing_grad_skipped(self):
        store = ad.ParamStore()
        p = store.add("p", np.array(1.0))
        ad.adam_step(store, lr=0.1)
        assert float(p.data) == 1.0

    def test_deterministic_across_stores(self):
        def run():
            store = ad.ParamStore()
            p = store.add("w", np.linspace(0, 1, 5, dtype=np.float32))
            for step in range(3):
                p.grad = np.full(5, 0.3, np.float32) * (step + 1)
                ad.adam_step(store, lr=0.01)
            return p.data.copy()
        np.testing.assert_array_equal(run(), run())

    def test_nan_grad_names_parameter(self):
        store = ad.ParamStore()
        p = store.add("bad_param", np.zeros(2))
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(TrainingError, match="bad_param"):
            ad.adam_step(store, lr=0.1)

    def test_duplicate_name_rejected(self):
        store = ad.ParamStore()
        store.add("x", np.zeros(1))
        with pytest.raises(ContractViolation):
            store.add("x", np.zeros(1))


class TestParamStore:
    def test_snapshot_is_copy(self):
        store = ad.ParamStore()
        p = store.add("w", np.zeros(3))
        snap = store.snapshot()
        p.data[:] = 5.0
        np.testing.assert_array_equal(snap["w"], np.zeros(3))

    def test_state_arrays_roundtrip(self):
        store = ad.ParamStore()
        p = store.add("w", np.arange(3, dtype=np.float32))
        p.grad = np.ones(3, np.float32)
        ad.adam_step(store, lr=0.1)
        blocks = store.state_arrays()
        store2 = ad.ParamStore()
        store2.add("w", np.zeros(3, np.float32))
        store2.load_state_arrays(blocks)
        np.testing.assert_array_equal(store2["w"].data, store["w"].data)
        p2 = store2["w"]
        p.grad = np.ones(3, np.float32)
        p2.grad = np.ones(3, np.float32)
        ad.adam_step(store, lr=0.1)
        ad.adam_step(store2, lr=0.1)
        np.testing.assert_array_equal(store2["w"].data, store["w"].data)
