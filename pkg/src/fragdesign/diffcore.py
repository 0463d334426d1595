"""Differentiable computation contract: analytic gradients plus an
independent central finite-difference checker.

Analytic gradients come from reverse-mode autodiff (torch); the checker
below never touches autograd, so the two sides stay independent. All
checking runs in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

# The closed set of primitives model code may compose. Everything here has a
# defined adjoint, so any composition is differentiable end to end.
PRIMITIVE_OPS = frozenset(
    {
        "matmul",
        "add",
        "multiply",
        "concat",
        "gather_rows",
        "layer_norm",
        "gelu",
        "tanh",
        "causal_attention",
        "softmax",
        "log",
        "mean",
        "cosine_similarity",
        "dropout",
    }
)

Computation = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


class DiffcoreError(RuntimeError):
    """Raised for invalid computations: non-scalar or non-finite results."""


@dataclass(frozen=True)
class GradientReport:
    """Per-array maximum relative error between analytic and FD gradients."""

    max_rel_error: dict[str, float]
    eps: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def _to_tensor(name: str, value) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(value), dtype=torch.float64)
    if not torch.isfinite(t).all():
        raise DiffcoreError(f"parameter array {name!r} contains non-finite values")
    return t


def _check_scalar(out: torch.Tensor) -> None:
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise DiffcoreError("computation must produce a scalar")
    if not torch.isfinite(out).all():
        raise DiffcoreError("computation produced a non-finite value")


def evaluate_with_gradients(
    computation: Computation, params: Mapping[str, object]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar computation and its gradient per named array."""
    leaves = {k: _to_tensor(k, v).clone().requires_grad_(True) for k, v in params.items()}
    out = computation(leaves)
    _check_scalar(out)
    out.reshape(()).backward()
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad
        if g is None:
            g = torch.zeros_like(leaf)
        if not torch.isfinite(g).all():
            raise DiffcoreError(f"non-finite gradient for parameter array {name!r}")
        grads[name] = g.detach().numpy().copy()
    return float(out.detach()), grads


def finite_difference_check(
    computation: Computation,
    params: Mapping[str, object],
    eps: float = 1e-4,
    max_entries_per_array: int = 64,
    seed: int = 0,
) -> GradientReport:
    """Compare analytic gradients against central finite differences.

    For each array, every entry is checked when the array has at most
    ``max_entries_per_array`` entries; otherwise a seeded random subsample of
    that size is used. Relative error per entry is
    |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    if eps <= 0:
        raise DiffcoreError("eps must be positive")
    _, analytic = evaluate_with_gradients(computation, params)

    tensors = {k: _to_tensor(k, v) for k, v in params.items()}

    def scalar_eval() -> float:
        with torch.no_grad():
            out = computation(tensors)
        _check_scalar(out)
        return float(out)

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, tensor in tensors.items():
        flat = tensor.view(-1)
        size = flat.numel()
        if size == 0:
            report[name] = 0.0
            continue
        if size <= max_entries_per_array:
            entries = np.arange(size)
        else:
            entries = rng.choice(size, size=max_entries_per_array, replace=False)
        grad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for idx in entries:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
            f_plus = scalar_eval()
            with torch.no_grad():
                flat[idx] = orig - eps
            f_minus = scalar_eval()
            with torch.no_grad():
                flat[idx] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_a = float(grad_flat[idx])
            rel = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
    return GradientReport(max_rel_error=report, eps=eps)
