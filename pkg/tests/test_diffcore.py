import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fragdesign.diffcore import (
    PRIMITIVE_OPS,
    DiffcoreError,
    evaluate_with_gradients,
    finite_difference_check,
)
from fragdesign.model import CausalTransformer


class TestEvaluateWithGradients:
    def test_sum_gives_ones(self):
        params = {"x": np.arange(6.0).reshape(2, 3)}
        value, grads = evaluate_with_gradients(lambda p: p["x"].sum(), params)
        assert value == pytest.approx(15.0)
        assert np.array_equal(grads["x"], np.ones((2, 3)))

    def test_quadratic_gradient(self):
        params = {"x": np.array([1.0, 2.0])}
        value, grads = evaluate_with_gradients(lambda p: (p["x"] * p["x"]).sum(), params)
        assert value == pytest.approx(5.0)
        assert np.allclose(grads["x"], [2.0, 4.0])

    def test_gradient_shapes_match_parameters(self):
        params = {"a": np.ones((3, 4)), "b": np.ones(5)}
        _, grads = evaluate_with_gradients(
            lambda p: p["a"].sum() * p["b"].mean(), params
        )
        assert grads["a"].shape == (3, 4)
        assert grads["b"].shape == (5,)

    def test_non_scalar_output_errors(self):
        with pytest.raises(DiffcoreError, match="scalar"):
            evaluate_with_gradients(lambda p: p["x"] * 2, {"x": np.ones(3)})

    def test_non_finite_output_errors(self):
        with pytest.raises(DiffcoreError, match="non-finite"):
            evaluate_with_gradients(lambda p: torch.log(p["x"]).sum(), {"x": np.array([-1.0])})

    def test_non_finite_input_names_array(self):
        with pytest.raises(DiffcoreError, match="'bad'"):
            evaluate_with_gradients(lambda p: p["bad"].sum(), {"bad": np.array([np.nan])})

    def test_unused_parameter_gets_zero_gradient(self):
        params = {"used": np.ones(2), "unused": np.ones(2)}
        _, grads = evaluate_with_gradients(lambda p: p["used"].sum(), params)
        assert np.array_equal(grads["unused"], np.zeros(2))


class TestFiniteDifferenceCheck:
    def test_linear_function_near_exact(self):
        params = {"x": np.array([0.3, -1.2, 2.0])}
        coeff = torch.tensor([1.5, -0.5, 2.5], dtype=torch.float64)
        report = finite_difference_check(lambda p: (coeff * p["x"]).sum(), params)
        assert report.worst < 1e-9

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(0)
        params = {"logits": rng.normal(size=5)}

        def computation(p):
            return -torch.log_softmax(p["logits"], dim=0)[2]

        report = finite_difference_check(computation, params, eps=1e-5)
        assert report.worst < 1e-6

    def test_eps_zero_errors(self):
        with pytest.raises(DiffcoreError, match="eps"):
            finite_difference_check(lambda p: p["x"].sum(), {"x": np.ones(2)}, eps=0.0)

    def test_report_covers_every_array(self):
        params = {"a": np.ones(3), "b": np.ones((2, 2))}
        report = finite_difference_check(lambda p: p["a"].sum() + (p["b"] ** 2).sum(), params)
        assert set(report.max_rel_error) == {"a", "b"}
        assert report.eps == pytest.approx(1e-4)

    def test_subsampling_large_arrays(self):
        rng = np.random.default_rng(1)
        params = {"big": rng.normal(size=500)}
        # gradient 3x^2 + 2 stays away from zero, so truncation error is tiny
        report = finite_difference_check(
            lambda p: (p["big"] ** 3 + 2 * p["big"]).sum(), params, max_entries_per_array=64
        )
        assert report.worst < 1e-6


class TestPrimitiveProperties:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_softmax_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = torch.tensor(rng.normal(scale=5.0, size=(4, 7)))
        rows = torch.softmax(x, dim=1)
        assert torch.all(rows > 0)
        assert torch.allclose(rows.sum(dim=1), torch.ones(4, dtype=torch.float64), atol=1e-9)

    def test_causal_attention_ignores_future(self):
        torch.manual_seed(0)
        encoder = CausalTransformer(
            d_model=16, n_layers=2, n_heads=2, max_positions=32, dropout=0.0
        ).double()
        encoder.eval()
        x = torch.randn(1, 10, 16, dtype=torch.float64)
        perturbed = x.clone()
        perturbed[0, 7:] += torch.randn(3, 16, dtype=torch.float64)
        with torch.no_grad():
            h_base = encoder(embeds=x)
            h_pert = encoder(embeds=perturbed)
        assert torch.equal(h_base[0, :7], h_pert[0, :7])
        assert not torch.allclose(h_base[0, 7:], h_pert[0, 7:])

    def test_primitive_set_is_closed_and_named(self):
        assert "causal_attention" in PRIMITIVE_OPS
        assert "softmax" in PRIMITIVE_OPS
        assert "dropout" in PRIMITIVE_OPS
