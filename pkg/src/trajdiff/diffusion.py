"""Variance schedules, forward noising, reverse denoising, and losses.

Agnostic to what vector is being diffused: action lanes and latent codes go
through the same operations. Tensors may be torch or numpy; outputs are
torch tensors in the promoted dtype. Step indices run 1..N.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import BadRange, BadStep, ShapeMismatch

SCHEDULE_KINDS = ("linear", "scaled_linear")
POSTERIORS = ("standard", "paper_as_written")


@dataclass(frozen=True)
class VarianceSchedule:
    """Noise magnitude tables for an N-step diffusion chain.

    betas[i-1] is beta^i; alpha_bars is the running product of 1 - beta.
    Immutable after construction and safe to share across threads.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise BadRange("schedule needs at least one beta")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise BadRange("every beta must lie in (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def N(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, i: int) -> float:
        self._check_step(i)
        return float(self.betas[i - 1])

    def alpha(self, i: int) -> float:
        self._check_step(i)
        return 1.0 - float(self.betas[i - 1])

    def alpha_bar(self, i: int) -> float:
        """Cumulative product; extended with alpha_bar(0) = 1 and
        alpha_bar(N+1) = alpha_bar(N) for the posterior variants."""
        if i == 0:
            return 1.0
        if i == self.N + 1:
            i = self.N
        self._check_step(i)
        return float(self.alpha_bars[i - 1])

    def _check_step(self, i: int):
        if not (1 <= i <= self.N):
            raise BadStep(f"step {i} outside 1..{self.N}")


def make_schedule(kind: str, N: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Build a variance schedule with interpolated betas."""
    if kind not in SCHEDULE_KINDS:
        raise BadRange(f"unknown schedule kind {kind!r}")
    if N < 1:
        raise BadRange(f"N must be >= 1, got {N}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, N)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), N) ** 2
    return VarianceSchedule(betas)


def _pair(x, other) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(x)
    b = torch.as_tensor(other)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {tuple(a.shape)} and {tuple(b.shape)} disagree")
    return a, b


def forward_noise(x0, i: int, eps, sched: VarianceSchedule) -> torch.Tensor:
    """x^i = sqrt(abar^i) x^0 + sqrt(1 - abar^i) eps."""
    x0, eps = _pair(x0, eps)
    ab = sched.alpha_bar(i)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_sigma(i: int, sched: VarianceSchedule, posterior: str = "standard") -> float:
    """Reverse-step noise scale sigma^i (the z multiplier).

    sigma^2 is (1 - abar^{i-1}) / (1 - abar^i) * beta^i for `standard`, and
    (1 - abar^{i+1}) / (1 - abar^i) * beta^i (with abar^{N+1} := abar^N) for
    `paper_as_written`. At i = 1 the noise term is suppressed entirely.
    """
    if posterior not in POSTERIORS:
        raise BadRange(f"unknown posterior {posterior!r}")
    if i == 1:
        return 0.0
    neighbor = i - 1 if posterior == "standard" else i + 1
    var = (1.0 - sched.alpha_bar(neighbor)) / (1.0 - sched.alpha_bar(i)) * sched.beta(i)
    return float(np.sqrt(var))


def reverse_step(
    x_i,
    i: int,
    eps_hat,
    z,
    sched: VarianceSchedule,
    posterior: str = "standard",
) -> torch.Tensor:
    """One denoising step:
    x^{i-1} = (x^i - beta^i / sqrt(1 - abar^i) * eps_hat) / sqrt(alpha^i) + sigma^i z.
    """
    x_i, eps_hat = _pair(x_i, eps_hat)
    _, z = _pair(x_i, z)
    sched._check_step(i)
    ab = sched.alpha_bar(i)
    mean = (x_i - sched.beta(i) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(sched.alpha(i))
    return mean + posterior_sigma(i, sched, posterior) * z


def sample(
    eps_model: Callable[[torch.Tensor, int], torch.Tensor],
    shape: tuple[int, ...],
    sched: VarianceSchedule,
    rng: np.random.Generator,
    posterior: str = "standard",
    zero_noise: bool = False,
) -> torch.Tensor:
    """Full reverse chain: draw x^N ~ N(0, 1), denoise down to x^0.

    Deterministic given the rng state. `zero_noise` forces z = 0 at every
    step (used by the planted-signal oracle tests).
    """
    x = torch.as_tensor(rng.standard_normal(shape))
    zeros = torch.zeros_like(x)
    for i in range(sched.N, 0, -1):
        eps_hat = torch.as_tensor(eps_model(x, i))
        if eps_hat.shape != x.shape:
            raise ShapeMismatch(f"model returned shape {tuple(eps_hat.shape)}")
        if i > 1 and not zero_noise:
            z = torch.as_tensor(rng.standard_normal(shape))
        else:
            z = zeros
        x = reverse_step(x, i, eps_hat, z, sched, posterior)
    return x


@dataclass(frozen=True)
class NoisePrediction:
    """Output of the denoising network, in exactly one of the two modes.

    Action mode populates (eps_loc, eps_rot, open_logits); latent mode
    populates eps_latent only.
    """

    eps_loc: Optional[torch.Tensor] = None
    eps_rot: Optional[torch.Tensor] = None
    open_logits: Optional[torch.Tensor] = None
    eps_latent: Optional[torch.Tensor] = None

    def __post_init__(self):
        action = (self.eps_loc, self.eps_rot, self.open_logits)
        if self.eps_latent is None:
            if any(t is None for t in action):
                raise ShapeMismatch("action-mode prediction needs eps_loc, eps_rot, open_logits")
        else:
            if any(t is not None for t in action):
                raise ShapeMismatch("latent-mode prediction must carry eps_latent only")

    @property
    def mode(self) -> str:
        return "latent" if self.eps_latent is not None else "action"


def bce_with_logits(logits, targets) -> torch.Tensor:
    """Mean binary cross-entropy, computed from logits for stability."""
    logits, targets = _pair(logits, targets)
    logits = logits.double() if not logits.is_floating_point() else logits
    targets = targets.to(logits.dtype)
    return (logits.clamp(min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))).mean()


def _norm(diff: torch.Tensor, batch_dims: int) -> torch.Tensor:
    if batch_dims == 0:
        return diff.norm()
    flat = diff.reshape(*diff.shape[:batch_dims], -1)
    return flat.norm(dim=-1).mean()


def action_diffusion_loss(
    pred: NoisePrediction,
    eps_loc,
    eps_rot,
    open_targets,
    w1: float = 1.0,
    w2: float = 1.0,
    batch_dims: int = 0,
) -> torch.Tensor:
    """w1 ||eps_hat_loc - eps_loc|| + w2 ||eps_hat_rot - eps_rot|| + BCE(open).

    Norms are L2 over all lanes (per sample, averaged over leading
    batch_dims axes); BCE is the mean over steps.
    """
    if pred.mode != "action":
        raise ShapeMismatch("action loss needs an action-mode prediction")
    ploc, eps_loc = _pair(pred.eps_loc, eps_loc)
    prot, eps_rot = _pair(pred.eps_rot, eps_rot)
    loc_term = _norm(ploc - eps_loc, batch_dims)
    rot_term = _norm(prot - eps_rot, batch_dims)
    return w1 * loc_term + w2 * rot_term + bce_with_logits(pred.open_logits, open_targets)


def latent_diffusion_loss(eps_latent_hat, eps_latent, batch_dims: int = 0) -> torch.Tensor:
    """||eps_hat_latent - eps_latent|| (L2 over lanes)."""
    a, b = _pair(eps_latent_hat, eps_latent)
    return _norm(a - b, batch_dims)
