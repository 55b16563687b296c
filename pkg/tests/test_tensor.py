import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestmoe import tensor as T
from nestmoe.errors import ConfigError, NumericError, ShapeError


def dft2_direct(x: np.ndarray) -> np.ndarray:
    """O(N^2) direct DFT oracle, independent of the fft path."""
    h, w = x.shape[-2:]
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return np.einsum("uj,...jk,kv->...uv", fy, x.astype(complex), fx)


class TestTensorType:
    def test_flat_data_matches_shape(self):
        t = T.Tensor(np.arange(12.0).reshape(3, 4))
        assert t.shape == (3, 4)
        assert len(t.data) == 12
        assert t.data.dtype == np.float64

    def test_zero_sized_dims_rejected(self):
        with pytest.raises(ShapeError):
            T.Tensor(np.empty((0, 3)))

    def test_complex_pair_shapes_must_match(self):
        with pytest.raises(ShapeError):
            T.ComplexTensor(np.zeros((2, 2)), np.zeros((2, 3)))
        z = T.ComplexTensor(np.ones((2, 2)), np.zeros((2, 2)))
        assert z.re.size == z.im.size == 4


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.array, a.array)

    def test_zero(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.array, [[0.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        want = np.zeros((5, 3))
        for m in range(5):
            for n in range(3):
                for k in range(7):
                    want[m, n] += a[m, k] * b[k, n]
        got = T.matmul(T.Tensor(a), T.Tensor(b)).array
        assert np.abs(got - want).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        a, b, c = (T.Tensor(rng.normal(size=(4, 4))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).array
        right = T.matmul(a, T.matmul(b, c)).array
        assert np.abs(left - right).max() < 1e-10


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0])).array
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_large_values_stable(self):
        out = T.softmax(T.Tensor([1000.0, 0.0])).array
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_log_ratios(self):
        out = T.softmax(T.Tensor([np.log(2.0), 0.0, 0.0])).array
        np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(T.Tensor([np.nan, 0.0]))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = T.softmax(T.Tensor(rng.normal(size=(6, 9))), axis=-1).array
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=2, max_size=8),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, vals, shift):
        v = np.array(vals)
        a = T.softmax(T.Tensor(v)).array
        b = T.softmax(T.Tensor(v + shift)).array
        assert np.abs(a - b).max() < 1e-12


class TestActivationsAndNorm:
    def test_gelu_zero(self):
        assert T.gelu(T.Tensor([0.0])).array[0] == 0.0

    def test_gelu_one(self):
        want = 0.5 * (1 + np.tanh(np.sqrt(2 / np.pi) * (1 + 0.044715)))
        got = T.gelu(T.Tensor([1.0])).array[0]
        assert abs(got - want) < 1e-15
        assert abs(got - 0.841192) < 1e-6

    def test_relu(self):
        np.testing.assert_array_equal(
            T.relu(T.Tensor([-1.0, 0.0, 2.0])).array, [0.0, 0.0, 2.0]
        )

    def test_layer_norm_constant_row(self):
        x = T.Tensor(np.full((2, 5), 7.0))
        out = T.layer_norm(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)), eps=1e-5)
        np.testing.assert_array_equal(out.array, np.zeros((2, 5)))

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(4, 16)))
        out = T.layer_norm(x, T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)), eps=1e-12).array
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-10

    def test_layer_norm_bad_eps(self):
        with pytest.raises(ConfigError):
            T.layer_norm(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=0.0)


class TestPool:
    def test_constant(self):
        out = T.global_avg_pool(T.Tensor(np.full((2, 3, 4, 4), 3.0)))
        np.testing.assert_array_equal(out.array, np.full((2, 3), 3.0))

    def test_small_case(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[1, 3], [5, 7]]
        assert T.global_avg_pool(T.Tensor(x)).array[0, 0] == 4.0

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 2, 4, 4))
        a = T.global_avg_pool(T.Tensor(3.5 * x)).array
        b = 3.5 * T.global_avg_pool(T.Tensor(x)).array
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_needs_4d(self):
        with pytest.raises(ShapeError):
            T.global_avg_pool(T.Tensor(np.ones((2, 3))))


class TestFft:
    def test_constant_field_dc_only(self):
        c = 2.5
        spec = T.fft2(T.Tensor(np.full((8, 8), c)))
        z = spec.complex
        assert abs(z[0, 0] - c * 64) < 1e-12
        z = z.copy()
        z[0, 0] = 0
        assert np.abs(z).max() < 1e-9

    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 8))
        back = T.ifft2(T.fft2(T.Tensor(x)), check_real=True).array
        assert np.abs(back - x).max() < 1e-10

    def test_cosine_mode_bins(self):
        w = 16
        x = np.cos(2 * np.pi * np.arange(w) / w)[None, :].repeat(8, axis=0) * 0 + \
            np.cos(2 * np.pi * np.arange(w) / w)[None, :]
        x = np.broadcast_to(x, (8, w)).copy()
        spec = T.fft2(T.Tensor(x)).complex
        mag = np.abs(spec)
        hot = {(0, 1), (0, w - 1)}
        for u in range(8):
            for v in range(w):
                if (u, v) in hot:
                    assert mag[u, v] > 1.0
                else:
                    assert mag[u, v] < 1e-9
        # same spectrum from the direct oracle
        assert np.abs(spec - dft2_direct(x)).max() < 1e-9

    @pytest.mark.parametrize("h,w", [(2, 2), (4, 8), (8, 4), (16, 16), (1, 16)])
    def test_against_direct_dft_oracle(self, h, w):
        rng = np.random.default_rng(h * 100 + w)
        x = rng.normal(size=(h, w))
        got = T.fft2(T.Tensor(x)).complex
        want = dft2_direct(x)
        assert np.abs(got - want).max() < 1e-9

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ConfigError):
            T.fft2(T.Tensor(np.ones((6, 8))))

    def test_parseval(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            x = rng.normal(size=(16, 16))
            spec = T.fft2(T.Tensor(x)).complex
            lhs = np.sum(x**2)
            rhs = np.sum(np.abs(spec) ** 2) / (16 * 16)
            assert abs(lhs - rhs) < 1e-8

    def test_ifft_residue_check(self):
        # a deliberately asymmetric spectrum trips the real-output assertion
        z = T.ComplexTensor(np.zeros((4, 4)), np.ones((4, 4)))
        with pytest.raises(NumericError):
            T.ifft2(z, check_real=True)
        out = T.ifft2(z, check_real=False)
        assert out.shape == (4, 4)
