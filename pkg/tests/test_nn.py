import math

import numpy as np
import pytest
import torch

from trajdiff.errors import BadDim, MissingGradient, ShapeMismatch
from trajdiff.nn import (
    Adam,
    AdamState,
    Dense,
    FiLMFromCond,
    LayerNorm,
    MultiHeadAttention,
    RadialDistanceBias,
    adam_step,
    attention,
    central_difference_gradient,
    check_gradients,
    dense_backward,
    dense_forward,
    film,
    gradient_rel_error,
    layer_norm_backward,
    layer_norm_forward,
    sinusoidal_step_embedding,
    softmax_backward,
    softmax_forward,
)

torch.set_num_threads(1)


def rand64(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape))


class TestDense:
    def test_identity_map(self):
        x = torch.randn(5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        out = dense_forward(x, torch.eye(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        np.testing.assert_allclose(out, x)

    def test_shape_check(self):
        with pytest.raises(ShapeMismatch):
            dense_forward(torch.zeros(2, 3), torch.zeros(4, 5), torch.zeros(5))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            n, d_in, d_out = r.integers(1, 5), r.integers(1, 5), r.integers(1, 5)
            x, w = rand64(r, n, d_in), rand64(r, d_in, d_out)
            b, g = rand64(r, d_out), rand64(r, n, d_out)
            gx, gw, gb = dense_backward(x, w, g)
            # Scalar objective sum(dense * g) has gradient exactly (gx, gw, gb).
            for tensor, analytic in ((x, gx), (w, gw), (b, gb)):
                numeric = central_difference_gradient(
                    lambda: (dense_forward(x, w, b) * g).sum(), tensor
                )
                worst = max(worst, gradient_rel_error(analytic, numeric))
        assert worst < 1e-4


class TestLayerNorm:
    def test_constant_row_is_zero_before_affine(self):
        x = torch.full((3, 6), 2.5, dtype=torch.float64)
        out = layer_norm_forward(x, torch.ones(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))
        assert float(out.abs().max()) < 1e-6

    def test_backward_matches_finite_differences(self):
        # Rows get a fixed spread so 1/std stays well-conditioned and the
        # central-difference truncation error stays below the tolerance.
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed + 200)
            n, d = r.integers(1, 5), r.integers(3, 8)
            x, g = 2.0 * rand64(r, n, d), rand64(r, n, d)
            x += torch.linspace(-2.0, 2.0, int(d), dtype=torch.float64)
            gamma, beta = rand64(r, d), rand64(r, d)
            gx, ggamma, gbeta = layer_norm_backward(x, gamma, g)
            for tensor, analytic in ((x, gx), (gamma, ggamma), (beta, gbeta)):
                numeric = central_difference_gradient(
                    lambda: (layer_norm_forward(x, gamma, beta) * g).sum(), tensor
                )
                worst = max(worst, gradient_rel_error(analytic, numeric))
        assert worst < 1e-4


class TestSoftmax:
    def test_rows_sum_to_one(self):
        r = np.random.default_rng(1)
        y = softmax_forward(rand64(r, 8, 11) * 10)
        np.testing.assert_allclose(y.sum(dim=-1), np.ones(8), atol=1e-6)

    def test_backward_matches_finite_differences(self):
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed + 400)
            n, d = r.integers(1, 5), r.integers(2, 7)
            x, g = rand64(r, n, d), rand64(r, n, d)
            gx = softmax_backward(softmax_forward(x), g)
            numeric = central_difference_gradient(lambda: (softmax_forward(x) * g).sum(), x)
            worst = max(worst, gradient_rel_error(gx, numeric))
        assert worst < 1e-4


class TestAttention:
    def test_single_key_returns_value(self):
        r = np.random.default_rng(2)
        q = rand64(r, 5, 8)
        k = rand64(r, 1, 8)
        v = rand64(r, 1, 8)
        out = attention(q, k, v, n_heads=2)
        np.testing.assert_allclose(out, v.expand(5, 8), atol=1e-12)

    def test_mask_selects_single_key(self):
        r = np.random.default_rng(3)
        q, k, v = rand64(r, 2, 4), rand64(r, 6, 4), rand64(r, 6, 4)
        bias = torch.full((1, 2, 6), -1e30, dtype=torch.float64)
        bias[..., 3] = 0.0
        out = attention(q, k, v, relative_bias=bias, n_heads=1)
        np.testing.assert_allclose(out, v[3].expand(2, 4), atol=1e-12)

    def test_gradient_check(self):
        r = np.random.default_rng(4)
        q = rand64(r, 3, 8).requires_grad_(True)
        k = rand64(r, 4, 8).requires_grad_(True)
        v = rand64(r, 4, 8).requires_grad_(True)
        w = rand64(r, 8, 8).requires_grad_(True)
        b = rand64(r, 8).requires_grad_(True)
        bias = rand64(r, 2, 3, 4).requires_grad_(True)
        coeff = rand64(r, 3, 8)

        def loss():
            return (attention(q, k, v, bias, n_heads=2, out_weight=w, out_bias=b) * coeff).sum()

        assert check_gradients(loss, [q, k, v, w, b, bias]) < 1e-4

    def test_bad_heads(self):
        with pytest.raises(ShapeMismatch):
            attention(torch.zeros(2, 6), torch.zeros(2, 6), torch.zeros(2, 6), n_heads=4)


class TestFilm:
    def test_identity(self):
        x = torch.randn(4, 5, generator=torch.Generator().manual_seed(1))
        np.testing.assert_allclose(film(x, torch.ones(5), torch.zeros(5)), x)

    def test_zero_gamma_gives_beta(self):
        x = torch.randn(4, 5, generator=torch.Generator().manual_seed(2))
        beta = torch.randn(5, generator=torch.Generator().manual_seed(3))
        out = film(x, torch.zeros(5), beta)
        np.testing.assert_allclose(out, beta.expand(4, 5))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeMismatch):
            film(torch.zeros(4, 5), torch.zeros(3), torch.zeros(5))

    def test_gradient_check(self):
        r = np.random.default_rng(5)
        x = rand64(r, 3, 4).requires_grad_(True)
        gamma = rand64(r, 4).requires_grad_(True)
        beta = rand64(r, 4).requires_grad_(True)
        coeff = rand64(r, 3, 4)
        assert check_gradients(lambda: (film(x, gamma, beta) * coeff).sum(), [x, gamma, beta]) < 1e-4


class TestStepEmbedding:
    def test_step_zero(self):
        e = sinusoidal_step_embedding(0, 8)
        np.testing.assert_allclose(e[0::2], np.zeros(4))
        np.testing.assert_allclose(e[1::2], np.ones(4))

    def test_distinct_steps(self):
        embs = torch.stack([sinusoidal_step_embedding(i, 16) for i in range(1, 26)])
        d = torch.cdist(embs, embs) + 1e9 * torch.eye(25)
        assert float(d.min()) > 0.0

    def test_matches_reference_formula(self):
        dim = 12
        for i in (0, 1, 7, 24):
            e = sinusoidal_step_embedding(i, dim, dtype=torch.float64)
            for k in range(dim // 2):
                freq = 10_000.0 ** (-k / (dim // 2))
                assert float(e[2 * k]) == pytest.approx(math.sin(i * freq), abs=1e-6)
                assert float(e[2 * k + 1]) == pytest.approx(math.cos(i * freq), abs=1e-6)

    def test_odd_dim_rejected(self):
        with pytest.raises(BadDim):
            sinusoidal_step_embedding(1, 7)


class TestRadialBias:
    def test_shape_and_no_position_bucket(self):
        gen = torch.Generator().manual_seed(0)
        mod = RadialDistanceBias(n_heads=3, generator=gen).double()
        r = np.random.default_rng(6)
        pos = rand64(r, 5, 3)
        has = torch.tensor([True, True, True, False, False])
        bias = mod(pos, pos, has, has)
        assert bias.shape == (3, 5, 5)
        # Every pair touching a position-less token shares the bucket value.
        np.testing.assert_allclose(
            bias[:, 3, :].detach(), mod.no_position.detach().unsqueeze(1).expand(3, 5)
        )

    def test_depends_only_on_distance(self):
        gen = torch.Generator().manual_seed(1)
        mod = RadialDistanceBias(n_heads=2, generator=gen).double()
        a = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        b = torch.tensor([[5.0, 2.0, 1.0], [5.0, 2.0, 2.0]], dtype=torch.float64)  # same pairwise dist
        has = torch.tensor([True, True])
        np.testing.assert_allclose(mod(a, a, has, has).detach(), mod(b, b, has, has).detach(), atol=1e-12)


class TestAdam:
    def test_zero_gradients_leave_params(self):
        p = {"w": torch.ones(3)}
        g = {"w": torch.zeros(3)}
        adam_step(p, g, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], np.ones(3))

    def test_missing_gradient(self):
        with pytest.raises(MissingGradient):
            adam_step({"w": torch.ones(2)}, {}, AdamState(), lr=0.1)

    def test_quadratic_convergence(self):
        x = torch.tensor([5.0])
        state = AdamState()
        for _ in range(2000):
            g = 2 * (x - 1.5)
            adam_step({"x": x}, {"x": g}, state, lr=0.05)
            if float((x - 1.5).abs()) < 1e-4:
                break
        assert float((x - 1.5).abs()) < 1e-4

    def test_determinism(self):
        results = []
        for _ in range(2):
            p = {"w": torch.tensor([1.0, -2.0, 0.5])}
            state = AdamState()
            for t in range(50):
                g = {"w": p["w"] * 0.3 + t * 0.01}
                adam_step(p, g, state, lr=0.01)
            results.append(p["w"].clone())
        np.testing.assert_array_equal(results[0].numpy(), results[1].numpy())

    def test_adam_wrapper_over_module(self):
        gen = torch.Generator().manual_seed(2)
        mod = Dense(3, 2, gen)
        opt = Adam(mod, lr=0.05)
        x = torch.randn(8, 3, generator=torch.Generator().manual_seed(3))
        before = float((mod(x) ** 2).sum())
        for _ in range(60):
            opt.zero_grad()
            loss = (mod(x) ** 2).sum()
            loss.backward()
            opt.step()
        assert float((mod(x) ** 2).sum()) < 0.1 * before


class TestModules:
    def test_dense_layernorm_stack_gradients(self):
        gen = torch.Generator().manual_seed(4)
        mod = torch.nn.Sequential()
        dense = Dense(4, 4, gen)
        ln = LayerNorm(4)
        mod.add_module("d", dense)
        mod.add_module("ln", ln)
        mod = mod.double()
        r = np.random.default_rng(7)
        x = rand64(r, 3, 4)
        coeff = rand64(r, 3, 4)
        params = list(mod.parameters())
        assert check_gradients(lambda: (ln(dense(x)) * coeff).sum(), params) < 1e-4

    def test_mha_module_gradients(self):
        gen = torch.Generator().manual_seed(5)
        mha = MultiHeadAttention(8, 2, gen).double()
        r = np.random.default_rng(8)
        x = rand64(r, 4, 8)
        y = rand64(r, 3, 8)
        coeff = rand64(r, 4, 8)
        assert check_gradients(lambda: (mha(x, y, y) * coeff).sum(), list(mha.parameters())) < 1e-4

    def test_film_from_cond_identity_at_init_is_near(self):
        gen = torch.Generator().manual_seed(6)
        f = FiLMFromCond(4, 6, gen)
        x = torch.randn(2, 5, 6, generator=torch.Generator().manual_seed(7))
        cond = torch.randn(2, 4, generator=torch.Generator().manual_seed(8))
        out = f(x, cond)
        assert out.shape == x.shape
        assert float((out - x).abs().mean()) < 1.0

    def test_forward_determinism(self):
        gen = torch.Generator().manual_seed(9)
        mha = MultiHeadAttention(8, 2, gen)
        x = torch.randn(6, 8, generator=torch.Generator().manual_seed(10))
        a = mha(x, x, x)
        b = mha(x, x, x)
        assert torch.equal(a, b)
