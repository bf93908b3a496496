"""Differentiable building blocks on top of torch.

Functional forward/backward primitives (dense, layer norm, softmax), FiLM,
multi-head attention with a distance-based relative bias, sinusoidal step
embeddings, a plain Adam step over named parameters, and the central
finite-difference checkers used to verify every gradient path.

Production paths run in float32; gradient checks clone modules to float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import torch
from torch import nn

from .errors import BadDim, MissingGradient, ShapeMismatch


# ---------------------------------------------------------------------------
# functional primitives


def dense_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """x @ weight + bias with weight shaped (d_in, d_out)."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeMismatch(
            f"dense shapes x{tuple(x.shape)} w{tuple(weight.shape)} b{tuple(bias.shape)}"
        )
    return x @ weight + bias


def dense_backward(x, weight, grad_out):
    """Gradients of dense_forward w.r.t. (x, weight, bias)."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grad_x = (g2 @ weight.T).reshape(x.shape)
    grad_w = x2.T @ g2
    grad_b = g2.sum(dim=0)
    return grad_x, grad_w, grad_b


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeMismatch("layer norm affine parameters must match the last axis")
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    xhat = (x - mu) / torch.sqrt(var + eps)
    return gamma * xhat + beta


def layer_norm_backward(x, gamma, grad_out, eps: float = 1e-5):
    """Gradients of layer_norm_forward w.r.t. (x, gamma, beta)."""
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    std = torch.sqrt(var + eps)
    xhat = (x - mu) / std
    dims = tuple(range(x.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(dim=dims)
    grad_beta = grad_out.sum(dim=dims)
    g = grad_out * gamma
    grad_x = (
        g - g.mean(dim=-1, keepdim=True) - xhat * (g * xhat).mean(dim=-1, keepdim=True)
    ) / std
    return grad_x, grad_gamma, grad_beta


def softmax_forward(x: torch.Tensor) -> torch.Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def softmax_backward(y: torch.Tensor, grad_out: torch.Tensor) -> torch.Tensor:
    """Gradient through softmax given its output y."""
    return y * (grad_out - (grad_out * y).sum(dim=-1, keepdim=True))


def film(x, gamma, beta) -> torch.Tensor:
    """Feature-wise linear modulation: gamma * x + beta (broadcasting)."""
    try:
        torch.broadcast_shapes(x.shape, gamma.shape, beta.shape)
    except RuntimeError as e:
        raise ShapeMismatch(str(e)) from e
    return gamma * x + beta


def sinusoidal_step_embedding(i: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sin/cos embedding of an integer step at geometric frequencies."""
    if dim % 2 != 0 or dim <= 0:
        raise BadDim(f"embedding dim must be positive and even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = float(i) * freqs
    out = torch.empty(dim, dtype=torch.float64)
    out[0::2] = torch.sin(angles)
    out[1::2] = torch.cos(angles)
    return out.to(dtype)


def attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    relative_bias: Optional[torch.Tensor] = None,
    n_heads: int = 1,
    out_weight: Optional[torch.Tensor] = None,
    out_bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """softmax(QK^T / sqrt(d_head) + bias) V per head, heads concatenated.

    Inputs are (..., S, d) with d divisible by n_heads; relative_bias
    broadcasts against (..., n_heads, S_q, S_k). When out_weight is given
    the concatenated heads are linearly projected.
    """
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ShapeMismatch("queries, keys, values must share the model width")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeMismatch("keys and values must agree in length")
    if d % n_heads != 0:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    d_head = d // n_heads

    def split(t):
        return t.reshape(*t.shape[:-1], n_heads, d_head).transpose(-3, -2)

    q, k, v = split(queries), split(keys), split(values)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_head)
    if relative_bias is not None:
        if relative_bias.shape[-2:] != scores.shape[-2:]:
            raise ShapeMismatch(
                f"bias {tuple(relative_bias.shape)} vs scores {tuple(scores.shape)}"
            )
        scores = scores + relative_bias
    mixed = softmax_forward(scores) @ v
    mixed = mixed.transpose(-3, -2).reshape(*queries.shape[:-1], d)
    if out_weight is not None:
        mixed = dense_forward(mixed, out_weight, out_bias)
    return mixed


# ---------------------------------------------------------------------------
# parameter initialization and modules


def fan_in_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(fan_in_uniform_(torch.empty(d_in, d_out), d_in, generator))
        self.bias = nn.Parameter(fan_in_uniform_(torch.empty(d_out), d_in, generator))

    def forward(self, x):
        return dense_forward(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm_forward(x, self.gamma, self.beta)


class RadialDistanceBias(nn.Module):
    """Per-head attention bias from pairwise 3D distances.

    Distances are encoded with Gaussian radial basis functions and mapped to
    one scalar per head. Pairs involving a token without a position (language
    or latent tokens) fall into a dedicated learned bucket, so the bias stays
    a function of geometry only and never of token order.
    """

    def __init__(self, n_heads: int, n_rbf: int = 16, max_dist: float = 1.8,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        centers = torch.linspace(0.0, max_dist, n_rbf)
        self.register_buffer("centers", centers)
        self.width = max_dist / (n_rbf - 1)
        self.weight = nn.Parameter(fan_in_uniform_(torch.empty(n_rbf, n_heads), n_rbf, generator))
        self.no_position = nn.Parameter(torch.zeros(n_heads))

    def forward(self, pos_q, pos_k, has_pos_q, has_pos_k) -> torch.Tensor:
        """pos_* are (..., S, 3); has_pos_* are (..., S) bools.
        Returns (..., n_heads, S_q, S_k)."""
        diff = pos_q.unsqueeze(-2) - pos_k.unsqueeze(-3)
        dist = diff.square().sum(dim=-1).clamp_min(1e-12).sqrt()
        rbf = torch.exp(-((dist.unsqueeze(-1) - self.centers) ** 2) / (2 * self.width**2))
        bias = rbf @ self.weight  # (..., S_q, S_k, h)
        pair_has_pos = has_pos_q.unsqueeze(-1) & has_pos_k.unsqueeze(-2)
        bias = torch.where(pair_has_pos.unsqueeze(-1), bias, self.no_position)
        return bias.movedim(-1, -3)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, generator: torch.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.q = Dense(d_model, d_model, generator)
        self.k = Dense(d_model, d_model, generator)
        self.v = Dense(d_model, d_model, generator)
        self.out = Dense(d_model, d_model, generator)

    def forward(self, q_in, k_in, v_in, bias=None):
        return attention(
            self.q(q_in), self.k(k_in), self.v(v_in), bias,
            n_heads=self.n_heads, out_weight=self.out.weight, out_bias=self.out.bias,
        )


class FiLMFromCond(nn.Module):
    """Produces (gamma, beta) from a conditioning vector; identity at init."""

    def __init__(self, d_cond: int, d_model: int, generator: torch.Generator):
        super().__init__()
        self.proj = Dense(d_cond, 2 * d_model, generator)
        with torch.no_grad():
            self.proj.weight.mul_(0.1)
            self.proj.bias.zero_()

    def forward(self, x, cond):
        gb = self.proj(cond)
        gamma, beta = gb.chunk(2, dim=-1)
        if x.ndim > gamma.ndim:
            gamma = gamma.unsqueeze(-2)
            beta = beta.unsqueeze(-2)
        return film(x, 1.0 + gamma, beta)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, Optional[torch.Tensor]],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """Bias-corrected Adam update, in place, deterministic."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name!r}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        with torch.no_grad():
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Adam over a torch module's named parameters."""

    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        params = dict(self.module.named_parameters())
        grads = {n: p.grad for n, p in params.items()}
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        for p in self.module.parameters():
            p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


def central_difference_gradient(f: Callable[[], torch.Tensor], x: torch.Tensor,
                                step: float = 1e-3) -> torch.Tensor:
    """Elementwise central differences of scalar f() w.r.t. tensor x in place."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + step
            hi = float(f())
            flat[j] = orig - step
            lo = float(f())
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * step)
    return grad


def gradient_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(numeric.norm()), float(analytic.norm()), 1e-6)
    return float((analytic - numeric).norm()) / denom


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Iterable[torch.Tensor],
    step: float = 1e-3,
) -> float:
    """Compare autograd gradients of loss_fn against central differences.

    Tensors must be float64 leaves with requires_grad; returns the worst
    relative error across them.
    """
    tensors = list(tensors)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for t, g in zip(tensors, grads):
        numeric = central_difference_gradient(loss_fn, t.data, step)
        worst = max(worst, gradient_rel_error(g, numeric))
    return worst


def check_gradients_directional(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Iterable[torch.Tensor],
    rng,
    n_dirs: int = 4,
    step: float = 1e-3,
) -> float:
    """Directional derivative check: <grad, v> vs central difference along v.

    Cheap enough for full networks where per-coordinate differences would
    be prohibitive.
    """
    tensors = list(tensors)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for t, g in zip(tensors, grads):
        for _ in range(n_dirs):
            v = torch.as_tensor(rng.standard_normal(tuple(t.shape)), dtype=t.dtype)
            v = v / v.norm()
            with torch.no_grad():
                t.data.add_(step * v)
                hi = float(loss_fn())
                t.data.add_(-2 * step * v)
                lo = float(loss_fn())
                t.data.add_(step * v)
            numeric = (hi - lo) / (2 * step)
            analytic = float((g * v).sum())
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
