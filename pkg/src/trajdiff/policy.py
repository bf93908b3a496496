"""Language-conditioned denoising policy over scene tokens.

Builds featured 3D tokens from posed RGB-D views (encode, unproject, one
cross-attention block against the language embedding, farthest point
sampling), then denoises either action lanes (baseline) or a VAE latent
(latent-diffusion mode) with a transformer conditioned via FiLM on the
diffusion step and proprioception.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn as torch_nn

from . import diffusion as diff
from .encoders import Instruction, TextEncoder, build_image_encoder, concat_text
from .errors import EmptyCloud, ModeMismatch, ShapeMismatch
from .geometry import (
    Action,
    CameraModel,
    Trajectory,
    farthest_point_sample,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from .nn import (
    Dense,
    FiLMFromCond,
    LayerNorm,
    MultiHeadAttention,
    RadialDistanceBias,
    sinusoidal_step_embedding,
)
from .simbench.render import render
from .simbench.world import World
from .trajvae import TrajectoryVae, denormalize_loc, normalize_lanes

DIFFUSION_SPACES = ("action", "latent")
TEXT_MODES = ("A", "A+B")
VISION_MODES = ("patch", "dense")


@dataclass(frozen=True)
class View:
    rgb: np.ndarray  # (H, W, 3) float32
    depth: np.ndarray  # (H, W) float32
    camera: CameraModel


@dataclass(frozen=True)
class Observation:
    views: tuple[View, ...]
    proprio: Action

    def __post_init__(self):
        if not self.views:
            raise ShapeMismatch("observation needs at least one view")
        for v in self.views:
            if v.rgb.shape[:2] != v.depth.shape:
                raise ShapeMismatch("rgb and depth dims disagree within a view")


def observe_world(world: World) -> Observation:
    """Render the fixed and gripper-mounted views plus proprioception."""
    views = []
    for kind in ("fixed", "gripper"):
        rgb, depth, cam = render(world, kind)
        views.append(View(rgb, depth, cam))
    g = world.gripper
    return Observation(tuple(views), Action(loc=[g.x, g.y, g.z], open_=g.open_))


@dataclass(frozen=True)
class PolicyMode:
    diffusion_space: str = "action"
    text_mode: str = "A"
    vision_mode: str = "patch"

    def __post_init__(self):
        if self.diffusion_space not in DIFFUSION_SPACES:
            raise ModeMismatch(f"unknown diffusion space {self.diffusion_space!r}")
        if self.text_mode not in TEXT_MODES:
            raise ModeMismatch(f"unknown text mode {self.text_mode!r}")
        if self.vision_mode not in VISION_MODES:
            raise ModeMismatch(f"unknown vision mode {self.vision_mode!r}")

    def label(self) -> str:
        return f"{self.diffusion_space}/{self.text_mode}/{self.vision_mode}"


@dataclass(frozen=True)
class PolicyConfig:
    horizon: int = 8
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    token_budget: int = 64
    d_feat: int = 32  # image feature channels (shared by both backbones)
    d_text_a: int = 32
    d_text_b: int = 16
    patch: int = 4
    d_h: int = 32  # latent width in LDM mode
    latent_tokens: int = 4
    ffn_mult: int = 4
    step_emb_dim: int = 64
    replan_every: int = 4
    step_budget: int = 60


@dataclass(frozen=True)
class SceneTokenSet:
    positions: np.ndarray  # (m, 3) world coordinates
    features: torch.Tensor  # (m, d_model)

    def __len__(self):
        return self.positions.shape[0]


class DenoiseBlock(torch_nn.Module):
    def __init__(self, cfg: PolicyConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.bias = RadialDistanceBias(cfg.n_heads, generator=gen)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.ln3 = LayerNorm(d)
        self.ffn1 = Dense(d, cfg.ffn_mult * d, gen)
        self.ffn2 = Dense(cfg.ffn_mult * d, d, gen)
        self.film = FiLMFromCond(d, d, gen)

    def forward(self, x, lang, pos, has_pos, cond):
        bias = self.bias(pos, pos, has_pos, has_pos)
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h, bias=bias)
        h = self.ln2(x)
        x = x + self.cross_attn(h, lang, lang)
        h = self.ln3(x)
        x = x + self.ffn2(torch.nn.functional.gelu(self.ffn1(h)))
        return self.film(x, cond)


class DenoisePolicy(torch_nn.Module):
    """The full noise-prediction network with its jointly-trained encoders."""

    def __init__(self, mode: PolicyMode, cfg: PolicyConfig = PolicyConfig(), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.mode = mode
        self.cfg = cfg
        self.text_a = TextEncoder(cfg.d_text_a, "A", gen)
        if mode.text_mode == "A+B":
            self.text_b = TextEncoder(cfg.d_text_b, "B", gen, privileged_verb=True)
            d_text = cfg.d_text_a + cfg.d_text_b
        else:
            self.text_b = None
            d_text = cfg.d_text_a
        self.image_enc = build_image_encoder(mode.vision_mode, cfg.d_feat, cfg.patch, gen)

        # Scene token construction: language cross-attention at feature width,
        # then a lift to the model width after subsampling.
        self.lang_to_feat = Dense(d_text, cfg.d_feat, gen)
        self.scene_ln = LayerNorm(cfg.d_feat)
        self.scene_cross = MultiHeadAttention(cfg.d_feat, cfg.n_heads, gen)
        self.scene_lift = Dense(cfg.d_feat, cfg.d_model, gen)

        self.lang_to_model = Dense(d_text, cfg.d_model, gen)
        self.proprio_embed = Dense(10, cfg.step_emb_dim, gen)
        self.cond_mlp = Dense(2 * cfg.step_emb_dim, cfg.d_model, gen)

        if mode.diffusion_space == "action":
            self.target_embed = Dense(9, cfg.d_model, gen)
            self.step_slots = torch_nn.Parameter(torch.zeros(cfg.horizon, cfg.d_model))
            self.head_action = Dense(cfg.d_model, 10, gen)
        else:
            # Latent codes enter through a single linear lift of the whole
            # vector; there is no per-step embedder and no open head.
            self.latent_lift = Dense(cfg.d_h, cfg.latent_tokens * cfg.d_model, gen)
            self.latent_slots = torch_nn.Parameter(
                torch.zeros(cfg.latent_tokens, cfg.d_model)
            )
            self.head_latent = Dense(cfg.latent_tokens * cfg.d_model, cfg.d_h, gen)

        self.blocks = torch_nn.ModuleList(
            DenoiseBlock(cfg, gen) for _ in range(cfg.n_blocks)
        )
        self.out_ln = LayerNorm(cfg.d_model)

    # -- language -----------------------------------------------------------

    def encode_text(self, instr: Instruction) -> torch.Tensor:
        emb_a = self.text_a.encode(instr)
        if self.text_b is None:
            return emb_a.values
        return concat_text(emb_a, self.text_b.encode(instr)).values

    def encode_text_batch(self, instrs) -> torch.Tensor:
        return torch.stack([self.encode_text(i) for i in instrs])

    # -- scene tokens ---------------------------------------------------------

    def _scene_tokens_batch(
        self,
        rgbs: torch.Tensor,  # (B, V, H, W, 3)
        depths: np.ndarray,  # (B, V, H, W)
        cams: np.ndarray,  # (B, V, 16)
        text: torch.Tensor,  # (B, d_text)
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, torch.Tensor]:
        b, v, hh, ww, _ = rgbs.shape
        feats = self.image_enc(rgbs.reshape(b * v, hh, ww, 3))
        feats = feats.reshape(b, v * hh * ww, self.cfg.d_feat)

        positions = np.empty((b, v * hh * ww, 3), dtype=np.float64)
        valid = np.empty((b, v * hh * ww), dtype=bool)
        for i in range(b):
            for j in range(v):
                cam = CameraModel.from_array(cams[i, j])
                depth = depths[i, j].astype(np.float64)
                vv, uu = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
                d = depth
                x = (uu - cam.cx) * d / cam.fx
                y = (vv - cam.cy) * d / cam.fy
                pts = np.stack([x, y, d], axis=-1).reshape(-1, 3)
                world = pts @ cam.rotation.T + cam.translation
                sl = slice(j * hh * ww, (j + 1) * hh * ww)
                positions[i, sl] = world
                valid[i, sl] = depth.reshape(-1) > 0

        lang = self.lang_to_feat(text).unsqueeze(1)  # (B, 1, d_feat)
        h = self.scene_ln(feats)
        feats = feats + self.scene_cross(h, lang, lang)

        m = self.cfg.token_budget
        sel_pos = np.empty((b, m, 3))
        sel_idx = np.empty((b, m), dtype=np.int64)
        for i in range(b):
            idx = np.nonzero(valid[i])[0]
            if idx.size == 0:
                raise EmptyCloud("no valid depth pixels in any view")
            pos = positions[i, idx]
            start = int(rng.integers(idx.size))
            chosen = farthest_point_sample(pos, min(m, idx.size), start)
            if chosen.size < m:  # tiny clouds: repeat to fill the budget
                chosen = np.resize(chosen, m)
            sel_idx[i] = idx[chosen]
            sel_pos[i] = positions[i, sel_idx[i]]
        gathered = feats[torch.arange(b).unsqueeze(1), torch.as_tensor(sel_idx)]
        tokens = self.scene_lift(gathered)
        return sel_pos, tokens

    def build_scene_tokens(self, obs: Observation, text: torch.Tensor,
                           rng: np.random.Generator) -> SceneTokenSet:
        rgbs = torch.stack([torch.as_tensor(v.rgb) for v in obs.views]).unsqueeze(0)
        depths = np.stack([v.depth for v in obs.views])[None]
        cams = np.stack([v.camera.to_array() for v in obs.views])[None]
        pos, feats = self._scene_tokens_batch(rgbs, depths, cams, text.unsqueeze(0), rng)
        return SceneTokenSet(pos[0], feats[0])

    # -- denoising transformer ----------------------------------------------

    def _cond(self, steps, proprio: torch.Tensor) -> torch.Tensor:
        p = self.proprio_embed(proprio)
        emb = torch.stack(
            [sinusoidal_step_embedding(int(i), self.cfg.step_emb_dim, dtype=p.dtype) for i in steps]
        )
        return torch.tanh(self.cond_mlp(torch.cat([emb, p], dim=-1)))

    def predict_noise_batch(
        self,
        scene_pos: np.ndarray,  # (B, m, 3)
        scene_feat: torch.Tensor,  # (B, m, d_model)
        text: torch.Tensor,  # (B, d_text)
        proprio: torch.Tensor,  # (B, 10) normalized lanes
        noisy: torch.Tensor,  # (B, T, 9) action mode | (B, d_h) latent mode
        steps,  # (B,) diffusion step indices
    ) -> diff.NoisePrediction:
        b, m, _ = scene_feat.shape
        cfg = self.cfg
        action_mode = self.mode.diffusion_space == "action"
        if action_mode:
            if noisy.ndim != 3 or noisy.shape[1:] != (cfg.horizon, 9):
                raise ModeMismatch(f"action-mode target must be (B, {cfg.horizon}, 9)")
            tgt = self.target_embed(noisy) + self.step_slots
            tgt_pos = denormalize_loc(noisy[..., :3]).detach().numpy().astype(np.float64)
            tgt_has = np.ones((b, cfg.horizon), dtype=bool)
        else:
            if noisy.ndim != 2 or noisy.shape[1] != cfg.d_h:
                raise ModeMismatch(f"latent-mode target must be (B, {cfg.d_h})")
            tgt = self.latent_lift(noisy).reshape(b, cfg.latent_tokens, cfg.d_model)
            tgt = tgt + self.latent_slots
            tgt_pos = np.zeros((b, cfg.latent_tokens, 3))
            tgt_has = np.zeros((b, cfg.latent_tokens), dtype=bool)

        x = torch.cat([scene_feat, tgt], dim=1)
        pos = torch.as_tensor(
            np.concatenate([scene_pos, tgt_pos], axis=1), dtype=x.dtype
        )
        has_pos = torch.as_tensor(
            np.concatenate([np.ones((b, m), dtype=bool), tgt_has], axis=1)
        )
        lang = self.lang_to_model(text).unsqueeze(1)
        cond = self._cond(steps, proprio).to(x.dtype)

        for block in self.blocks:
            x = block(x, lang, pos, has_pos, cond)
        x = self.out_ln(x)
        out = x[:, m:]

        if action_mode:
            lanes = self.head_action(out)  # (B, T, 10)
            return diff.NoisePrediction(
                eps_loc=lanes[..., :3],
                eps_rot=lanes[..., 3:9],
                open_logits=lanes[..., 9],
            )
        flat = out.reshape(b, cfg.latent_tokens * cfg.d_model)
        return diff.NoisePrediction(eps_latent=self.head_latent(flat))

    def predict_noise(self, tokens: SceneTokenSet, text, c_t: Action,
                      noisy_target: torch.Tensor, i: int) -> diff.NoisePrediction:
        """Single-sample surface over the batched path."""
        dtype = self.lang_to_model.weight.dtype
        proprio = normalize_lanes(torch.as_tensor(c_t.lanes())).to(dtype)
        pred = self.predict_noise_batch(
            tokens.positions[None],
            tokens.features.unsqueeze(0),
            text.unsqueeze(0),
            proprio.unsqueeze(0),
            noisy_target.unsqueeze(0).to(dtype),
            [i],
        )
        if pred.mode == "action":
            return diff.NoisePrediction(
                eps_loc=pred.eps_loc[0], eps_rot=pred.eps_rot[0], open_logits=pred.open_logits[0]
            )
        return diff.NoisePrediction(eps_latent=pred.eps_latent[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    obs: Observation
    instruction: Instruction
    target_lanes: np.ndarray  # (T, 10): loc, rot, open


def _batch_arrays(policy: DenoisePolicy, batch: list[TrainSample]):
    rgbs = torch.stack(
        [torch.stack([torch.as_tensor(v.rgb) for v in s.obs.views]) for s in batch]
    )
    depths = np.stack([np.stack([v.depth for v in s.obs.views]) for s in batch])
    cams = np.stack([np.stack([v.camera.to_array() for v in s.obs.views]) for s in batch])
    proprio = torch.stack(
        [
            normalize_lanes(torch.as_tensor(s.obs.proprio.lanes(), dtype=torch.float32))
            for s in batch
        ]
    )
    lanes = torch.as_tensor(
        np.stack([s.target_lanes for s in batch]), dtype=torch.float32
    )
    lanes = normalize_lanes(lanes)
    text = policy.encode_text_batch([s.instruction for s in batch])
    return rgbs, depths, cams, proprio, lanes, text


def train_step(
    policy: DenoisePolicy,
    optimizer,
    batch: list[TrainSample],
    sched: diff.VarianceSchedule,
    rng: np.random.Generator,
    vae: Optional[TrajectoryVae] = None,
    w1: float = 1.0,
    w2: float = 1.0,
) -> float:
    """One optimization step; returns the scalar loss. Deterministic per rng."""
    latent = policy.mode.diffusion_space == "latent"
    if latent and vae is None:
        raise ModeMismatch("latent-diffusion training requires a trained VAE")
    rgbs, depths, cams, proprio, lanes, text = _batch_arrays(policy, batch)
    b = len(batch)
    scene_pos, scene_feat = policy._scene_tokens_batch(rgbs, depths, cams, text, rng)

    steps = rng.integers(1, sched.N + 1, size=b)
    if latent:
        with torch.no_grad():
            x0 = policy_latent_targets(vae, lanes)
        eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=torch.float32)
        noisy = torch.stack(
            [diff.forward_noise(x0[i], int(steps[i]), eps[i], sched) for i in range(b)]
        ).to(torch.float32)
        pred = policy.predict_noise_batch(scene_pos, scene_feat, text, proprio, noisy, steps)
        loss = diff.latent_diffusion_loss(pred.eps_latent, eps, batch_dims=1)
    else:
        x0 = lanes[..., :9]
        eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=torch.float32)
        noisy = torch.stack(
            [diff.forward_noise(x0[i], int(steps[i]), eps[i], sched) for i in range(b)]
        ).to(torch.float32)
        pred = policy.predict_noise_batch(scene_pos, scene_feat, text, proprio, noisy, steps)
        loss = diff.action_diffusion_loss(
            pred, eps[..., :3], eps[..., 3:9], lanes[..., 9], w1=w1, w2=w2, batch_dims=1
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def policy_latent_targets(vae: TrajectoryVae, lanes: torch.Tensor) -> torch.Tensor:
    """Whitened posterior means of normalized lane windows (B, T, 10)."""
    flat = lanes.reshape(lanes.shape[0], -1)
    return vae.posterior_mean(flat)


# ---------------------------------------------------------------------------
# inference


def infer_trajectory(
    policy: DenoisePolicy,
    obs: Observation,
    instr: Instruction,
    sched: diff.VarianceSchedule,
    rng: np.random.Generator,
    vae: Optional[TrajectoryVae] = None,
) -> tuple[Trajectory, np.ndarray]:
    """Sample one trajectory; returns (trajectory, open decisions in {0,1})."""
    cfg = policy.cfg
    latent = policy.mode.diffusion_space == "latent"
    if latent and vae is None:
        raise ModeMismatch("latent-diffusion inference requires a trained VAE")
    with torch.no_grad():
        text = policy.encode_text(instr)
        tokens = policy.build_scene_tokens(obs, text, rng)
        last_logits: list[torch.Tensor] = []

        def eps_model(x, i):
            pred = policy.predict_noise(tokens, text, obs.proprio, x.to(torch.float32), int(i))
            if latent:
                return pred.eps_latent
            last_logits.clear()
            last_logits.append(pred.open_logits)
            lanes = torch.empty(cfg.horizon, 9)
            lanes[:, :3] = pred.eps_loc
            lanes[:, 3:9] = pred.eps_rot
            return lanes

        shape = (cfg.d_h,) if latent else (cfg.horizon, 9)
        x0 = diff.sample(eps_model, shape, sched, rng)

        if latent:
            return vae.decode(x0.to(torch.float32))
        opens = (torch.sigmoid(last_logits[0]) > 0.5).numpy().astype(int)
        steps = []
        reg = x0.numpy()
        for t in range(cfg.horizon):
            loc = denormalize_loc(torch.as_tensor(reg[t, :3])).numpy()
            rot = matrix_to_rot6d(rot6d_to_matrix(reg[t, 3:9]))
            steps.append(Action(loc=np.clip(loc, [0, 0, 0], [1, 1, 0.3]), rot=rot, open_=int(opens[t])))
        return Trajectory(tuple(steps)), opens


def make_task_runner(
    policy: DenoisePolicy,
    sched: diff.VarianceSchedule,
    vae: Optional[TrajectoryVae] = None,
    step_budget: int = 60,
    replan_every: int = 4,
):
    """Receding-horizon execution adapter for the chain evaluator contract."""
    from .simbench.world import step as world_step, task_success

    def run(world, task, instruction, rng):
        before = world
        ticks = 0
        while ticks < step_budget:
            obs = observe_world(world)
            traj, opens = infer_trajectory(policy, obs, instruction, sched, rng, vae)
            for k in range(min(replan_every, len(traj.steps))):
                a = traj.steps[k]
                world = world_step(
                    world, Action(loc=a.loc, rot=a.rot, open_=int(opens[k]))
                )
                ticks += 1
                if task_success(task, before, world):
                    return world
                if ticks >= step_budget:
                    return world
        return world

    return run
