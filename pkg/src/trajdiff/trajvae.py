"""Variational autoencoder over (trajectory, open-state) windows.

Maps a horizon-T window of end-effector actions to a latent code and back,
so the diffusion chain can run in latent space. MLP encoder/decoder over
the flattened (T x 10) lanes; the latent frame is whitened after training
(per-lane affine, folded into encode/decode) so codes stay compatible with
drawing the initial sample from a unit Gaussian.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, HorizonMismatch, ShapeMismatch
from .geometry import (
    ACTION_LANES,
    LOC_LANES,
    ROT_LANES,
    Action,
    Trajectory,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from .nn import Adam, Dense

LOC_CENTER = 0.5
LOC_SCALE = 2.0  # maps a unit workspace to [-1, 1]
LOG_VAR_CLAMP = 20.0


def normalize_lanes(lanes: torch.Tensor) -> torch.Tensor:
    """Scale loc lanes to [-1, 1]; rot and open lanes pass through."""
    out = lanes.clone()
    out[..., LOC_LANES] = (lanes[..., LOC_LANES] - LOC_CENTER) * LOC_SCALE
    return out


def denormalize_loc(loc: torch.Tensor) -> torch.Tensor:
    return loc / LOC_SCALE + LOC_CENTER


class TrajectoryVae(nn.Module):
    """Encoder/decoder pair with a fixed horizon and latent width."""

    def __init__(self, horizon: int, d_h: int = 32, hidden: int = 128,
                 generator: torch.Generator | None = None):
        super().__init__()
        gen = generator or torch.Generator().manual_seed(0)
        self.horizon = horizon
        self.d_h = d_h
        d_in = horizon * ACTION_LANES
        self.enc1 = Dense(d_in, hidden, gen)
        self.enc2 = Dense(hidden, hidden, gen)
        self.enc3 = Dense(hidden, 2 * d_h, gen)
        self.dec1 = Dense(d_h, hidden, gen)
        self.dec2 = Dense(hidden, hidden, gen)
        self.dec3 = Dense(hidden, d_in, gen)
        self.register_buffer("latent_shift", torch.zeros(d_h))
        self.register_buffer("latent_scale", torch.ones(d_h))

    # -- lane plumbing ------------------------------------------------------

    def window_lanes(self, traj: Trajectory, open_flags) -> torch.Tensor:
        """Flatten (trajectory, open flags) into one normalized lane vector."""
        if traj.horizon != self.horizon:
            raise HorizonMismatch(f"trajectory horizon {traj.horizon} != {self.horizon}")
        open_flags = np.asarray(open_flags, dtype=np.float64)
        if open_flags.shape != (self.horizon,):
            raise ShapeMismatch("open flags must have one entry per step")
        lanes = torch.as_tensor(traj.lanes(), dtype=torch.float32)
        lanes[:, 9] = torch.as_tensor(open_flags, dtype=torch.float32)
        return normalize_lanes(lanes).reshape(-1)

    # -- core mappings ------------------------------------------------------

    def encode_lanes(self, flat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior parameters for flattened normalized lanes (..., T*10)."""
        h = torch.nn.functional.gelu(self.enc1(flat))
        h = torch.nn.functional.gelu(self.enc2(h))
        mu, log_var = self.enc3(h).chunk(2, dim=-1)
        log_var = log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        mu = (mu - self.latent_shift) / self.latent_scale
        log_var = log_var - 2.0 * torch.log(self.latent_scale)
        return mu, log_var

    def decode_lanes(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Regression lanes (..., T, 9) and open logits (..., T)."""
        if h.shape[-1] != self.d_h:
            raise DimensionMismatch(f"latent dim {h.shape[-1]} != {self.d_h}")
        raw = h * self.latent_scale + self.latent_shift
        x = torch.nn.functional.gelu(self.dec1(raw))
        x = torch.nn.functional.gelu(self.dec2(x))
        flat = self.dec3(x)
        lanes = flat.reshape(*flat.shape[:-1], self.horizon, ACTION_LANES)
        return lanes[..., :9], lanes[..., 9]

    def encode(self, traj: Trajectory, open_flags) -> tuple[torch.Tensor, torch.Tensor]:
        """Gaussian posterior (mu, log_var) of one window. Deterministic."""
        return self.encode_lanes(self.window_lanes(traj, open_flags))

    def decode(self, h: torch.Tensor) -> tuple[Trajectory, np.ndarray]:
        """Latent code -> (trajectory, per-step open probabilities).

        Rotation lanes are re-orthonormalized through the 6D representation;
        open probabilities are returned for the caller to threshold.
        """
        h = torch.as_tensor(h, dtype=torch.float32)
        if h.shape != (self.d_h,):
            raise DimensionMismatch(f"expected latent of shape ({self.d_h},), got {tuple(h.shape)}")
        reg, open_logits = self.decode_lanes(h)
        reg = reg.detach().numpy().astype(np.float64)
        steps = []
        open_probs = torch.sigmoid(open_logits).detach().numpy().astype(np.float64)
        for t in range(self.horizon):
            loc = denormalize_loc(torch.as_tensor(reg[t, :3])).numpy()
            rot = matrix_to_rot6d(rot6d_to_matrix(reg[t, 3:9]))
            steps.append(Action(loc=loc, rot=rot, open_=int(open_probs[t] > 0.5)))
        return Trajectory(tuple(steps)), open_probs

    def posterior_mean(self, flat: torch.Tensor) -> torch.Tensor:
        """Whitened posterior mean; the latent diffusion target."""
        mu, _ = self.encode_lanes(flat)
        return mu

    def calibrate_latents(self, corpus_flat: torch.Tensor):
        """Fit the per-lane whitening affine on the raw posterior means."""
        with torch.no_grad():
            self.latent_shift.zero_()
            self.latent_scale.fill_(1.0)
            mu, _ = self.encode_lanes(corpus_flat)
            self.latent_shift.copy_(mu.mean(dim=0))
            self.latent_scale.copy_(mu.std(dim=0, unbiased=False).clamp_min(1e-3))


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor,
                   rng: np.random.Generator) -> torch.Tensor:
    """mu + exp(log_var / 2) * xi with xi ~ N(0, 1) from the given rng."""
    if mu.shape != log_var.shape:
        raise ShapeMismatch(f"mu {tuple(mu.shape)} vs log_var {tuple(log_var.shape)}")
    xi = torch.as_tensor(rng.standard_normal(tuple(mu.shape)), dtype=mu.dtype)
    return mu + torch.exp(0.5 * log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)) * xi


def kl_to_standard_normal(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """0.5 sum(mu^2 + sigma^2 - 1 - log sigma^2), per sample then batch-mean."""
    per_lane = 0.5 * (mu.square() + log_var.exp() - 1.0 - log_var)
    return per_lane.sum(dim=-1).mean()


def vae_loss(
    model: TrajectoryVae,
    flat: torch.Tensor,
    rng: np.random.Generator,
    kl_weight: float = 1e-3,
) -> tuple[torch.Tensor, dict]:
    """Reconstruction (L2 on loc/rot lanes + BCE on open) plus weighted KL.

    `flat` is one or a batch of flattened normalized lane vectors.
    """
    if flat.ndim == 1:
        flat = flat.unsqueeze(0)
    mu, log_var = model.encode_lanes(flat)
    h = reparameterize(mu, log_var, rng)
    reg, open_logits = model.decode_lanes(h)
    target = flat.reshape(-1, model.horizon, ACTION_LANES)
    reg_err = (reg - target[..., :9]).reshape(flat.shape[0], -1).norm(dim=-1).mean()
    opens = target[..., 9]
    bce = (
        open_logits.clamp(min=0) - open_logits * opens + torch.log1p(torch.exp(-open_logits.abs()))
    ).mean()
    kl = kl_to_standard_normal(mu, log_var)
    total = reg_err + bce + kl_weight * kl
    parts = {"recon": float(reg_err.detach()), "bce": float(bce.detach()), "kl": float(kl.detach())}
    return total, parts


def train_vae(
    model: TrajectoryVae,
    windows: torch.Tensor,
    steps: int = 3000,
    batch: int = 64,
    lr: float = 1e-3,
    kl_weight: float = 1e-3,
    kl_warmup: int = 500,
    seed: int = 0,
) -> list[float]:
    """Adam training over flattened windows; whitening fitted afterwards.

    Deterministic given the seed. Returns the per-step total losses.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model, lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, windows.shape[0], size=min(batch, windows.shape[0]))
        w = kl_weight * min(1.0, (step + 1) / max(1, kl_warmup))
        opt.zero_grad()
        total, _ = vae_loss(model, windows[idx], rng, kl_weight=w)
        total.backward()
        opt.step()
        losses.append(float(total))
    model.calibrate_latents(windows)
    return losses
